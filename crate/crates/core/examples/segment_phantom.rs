//! Segment a synthetic subject with five age-matched atlases and score the
//! result against the known truth.

use fuselage::atlas::label_table;
use fuselage::metrics::report;
use fuselage::phantom::{generate, PhantomConfig};
use fuselage::vem::{run_vem, VemConfig};

pub fn run_example() -> fuselage::Result<()> {
    let p = generate(&PhantomConfig {
        seed: 1,
        dims: [32; 3],
        ..PhantomConfig::default()
    })?;
    let table = label_table();
    let atlases = p.atlases.select_by_age(p.test_age_days, 5)?;
    let r = run_vem(&atlases, &p.image, &p.mask, &table, &VemConfig::default())?;
    let f = &r.free_energy_trace;
    println!(
        "{} iterations, free energy {:.1} -> {:.1}",
        r.iterations,
        f[0],
        f[f.len() - 1]
    );
    let rep = report(&r.map_labels, &p.truth, &table, None)?;
    for l in &rep.labels {
        println!("{:>3} {:<24} {}", l.label_id, l.label_name, l.dice.map_or("absent".into(), |d| format!("{d:.4}")));
    }
    println!("generalized dice {:.4}", rep.generalized_dice);
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
