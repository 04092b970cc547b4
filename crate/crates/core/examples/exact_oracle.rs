//! Compare mean-field atlas memberships with the exact posterior on a tiny
//! grid, with and without spatial coupling.

use fuselage::atlas::label_table;
use fuselage::phantom::{exact_membership_posterior, TinyProblem};
use fuselage::vem::{VemConfig, VemState};

pub fn run_example() -> fuselage::Result<()> {
    for beta in [0.0, 0.25, 1.0] {
        let p = TinyProblem::random(7, [2, 2, 2], 2, beta)?;
        let exact = exact_membership_posterior(&p)?;
        let cfg = VemConfig {
            meanfield_sweeps_per_estep: 200,
            ..p.vem_config()
        };
        let mut s = VemState::initialize(&p.atlases, &p.image, &p.mask, &label_table(), &cfg)?;
        s.set_mixture(p.mixture.clone())?;
        s.e_step()?;
        let mut tv: f64 = 0.0;
        for pos in 0..exact.voxels.len() {
            let d: f64 = s
                .membership()
                .row(pos)
                .iter()
                .zip(exact.membership_row(pos))
                .map(|(a, b)| (a - b).abs())
                .sum();
            tv = tv.max(0.5 * d);
        }
        println!("beta {beta}: worst total variation to the exact posterior {tv:.2e}");
    }
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
