//! Tenengrad sharpness of a phantom image before and after blurring.

use fuselage::metrics::tenengrad;
use fuselage::phantom::{gaussian_blur, generate, PhantomConfig};

pub fn run_example() -> fuselage::Result<()> {
    let p = generate(&PhantomConfig {
        noise_sigma: 0.0,
        ..PhantomConfig::default()
    })?;
    for sigma in [0.0, 0.5, 1.0, 2.0] {
        let img = if sigma > 0.0 { gaussian_blur(&p.image, sigma) } else { p.image.clone() };
        println!("blur sigma {sigma:.1}: tenengrad {:.4}", tenengrad(&img)?);
    }
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
