//! Leave-one-out study of how many age-matched atlases to fuse.

use fuselage::atlas::{label_table, AtlasSet};
use fuselage::phantom::{generate_family, jackknife, PhantomConfig, Subject};
use fuselage::vem::VemConfig;

pub fn run_example() -> fuselage::Result<()> {
    let cfg = PhantomConfig {
        seed: 5,
        dims: [16; 3],
        noise_sigma: 0.3,
        deform: 3.0,
        ..PhantomConfig::default()
    };
    let family = AtlasSet::new(generate_family(&cfg, 4)?.iter().map(Subject::to_atlas).collect())?;
    let table = jackknife(&family, &[1, 2, 3], &VemConfig::default(), &label_table())?;
    for r in &table.runs {
        println!(
            "{} ({:>3.0} days) k={} gen dice {:.4}",
            r.subject_id, r.age_days, r.k, r.report.generalized_dice
        );
    }
    println!("winning k histogram: {:?}", table.winning_k());
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
