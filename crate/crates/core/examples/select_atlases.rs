//! Pick the k most relevant atlases for a test subject, by age or by mutual
//! information with the test image.

use fuselage::phantom::{generate, PhantomConfig};

pub fn run_example() -> fuselage::Result<()> {
    let p = generate(&PhantomConfig {
        seed: 3,
        n_atlases: 8,
        ..PhantomConfig::default()
    })?;
    println!("test subject is {:.0} days old", p.test_age_days);
    for a in p.atlases.iter() {
        println!("  {}  {:>4.0} days", a.id, a.age_days);
    }
    let by_age = p.atlases.select_by_age(p.test_age_days, 3)?;
    println!("nearest in age: {:?}", by_age.ids());
    let by_mi = p.atlases.select_by_mi(&p.image, 3, 32)?;
    println!("highest MI:     {:?}", by_mi.ids());
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
