//! Recover a smooth multiplicative bias field together with the intensity
//! model from a biased phantom.

use fuselage::atlas::label_table;
use fuselage::intensity::BiasModel;
use fuselage::phantom::{generate, PhantomConfig};
use fuselage::vem::{run_vem, VemConfig};

pub fn run_example() -> fuselage::Result<()> {
    let truth = vec![0.0, 0.2, -0.1, 0.15, 0.05, -0.08, 0.1, 0.06, -0.12, 0.07];
    let p = generate(&PhantomConfig {
        seed: 11,
        noise_sigma: 0.0,
        bias: BiasModel::from_coeffs(2, truth.clone())?,
        ..PhantomConfig::default()
    })?;
    let cfg = VemConfig {
        bias_degree: Some(2),
        ..VemConfig::default()
    };
    let r = run_vem(&p.atlases, &p.image, &p.mask, &label_table(), &cfg)?;
    println!("{} iterations, converged: {}", r.iterations, r.converged);
    println!("coefficient    true    fitted");
    // The constant term trades off against the class means, so only the
    // spatially varying terms are comparable.
    for (i, (t, f)) in truth.iter().zip(&r.bias.coeffs).enumerate().skip(1) {
        println!("c{i:<12} {t:>6.3}  {f:>8.4}");
    }
    let mix = &r.params;
    for (li, l) in mix.labels().iter().enumerate() {
        println!("label {l:>2}: mean {:.1}", mix.label_mean(li));
    }
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
