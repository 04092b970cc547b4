//! Dice, Generalized Dice and the per-label overlap report on hand-made maps.

use fuselage::atlas::label_table;
use fuselage::metrics::{dice, generalized_dice, report};
use fuselage::volume::{GridMeta, Volume};

pub fn run_example() -> fuselage::Result<()> {
    let meta = GridMeta::with_dims([8, 1, 1])?;
    let a = Volume::from_vec(meta, vec![2, 2, 2, 2, 3, 3, 4, 0])?;
    let b = Volume::from_vec(meta, vec![0, 0, 2, 2, 2, 3, 3, 0])?;
    println!("dice(2) = {:?}", dice(&a, &b, 2)?);
    println!("dice(4) = {:?}  (absent in one map)", dice(&a, &b, 4)?);
    println!("generalized over {{2, 3}} = {}", generalized_dice(&a, &b, &[2, 3])?);

    let rep = report(&a, &b, &label_table(), None)?;
    let mut csv = Vec::new();
    rep.write_csv(&mut csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
