//! Signed distance maps of atlas labels and the logOdds spatial prior they
//! induce.

use fuselage::prior::{signed_edt, DistanceField, LogOddsConfig};
use fuselage::atlas::AtlasSet;
use fuselage::phantom::{generate, PhantomConfig};

pub fn run_example() -> fuselage::Result<()> {
    let p = generate(&PhantomConfig::default())?;
    let atlas = p.atlases.get(0);
    let edt = signed_edt(&atlas.labels, 2, 20.0)?;
    let (lo, hi) = edt.field.min_max();
    println!("signed distance to left WM: min {lo:.2} mm, max {hi:.2} mm");

    let one = AtlasSet::new(vec![atlas.clone()])?;
    let labels = [2, 3, 41, 42];
    let field = DistanceField::compute(&one, &labels, 20.0, None)?;
    let [nx, ny, nz] = atlas.labels.dims();
    let centre_left = atlas.labels.meta().index(nx / 4, ny / 2, nz / 2);
    for rho in [0.5, 1.0, 3.0] {
        let prior = field.logodds_prior(0, centre_left, &LogOddsConfig::new(rho)?, &labels)?;
        let text: Vec<String> = prior.iter().map(|p| format!("{p:.3}")).collect();
        println!("rho {rho}: prior over {labels:?} = [{}]", text.join(", "));
    }
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
