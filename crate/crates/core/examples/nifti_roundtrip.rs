//! Write a float image and a label map as gzipped NIfTI-1 and read them back.

use fuselage::io::{read_labels, read_scalar, write_labels, write_scalar};
use fuselage::volume::{GridMeta, LabelVolume, ScalarVolume, Volume};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();

    // Header spacing is single precision; 1.25 survives the trip exactly.
    let meta = GridMeta::new([8, 6, 4], [1.0, 1.25, 2.0], [-4.0, -3.0, -4.0])?;
    let image: ScalarVolume = Volume::from_fn(meta, |i, j, k| (i + 10 * j + 100 * k) as f64 * 0.5)?;
    let labels: LabelVolume = Volume::from_fn(meta, |i, _, _| if i < 4 { 2 } else { 41 })?;

    write_scalar(&image, dir.join("t1.nii.gz"))?;
    write_labels(&labels, dir.join("labels.nii.gz"))?;
    let image2 = read_scalar(dir.join("t1.nii.gz"))?;
    let labels2 = read_labels(dir.join("labels.nii.gz"))?;

    assert_eq!(image2.data(), image.data());
    assert_eq!(labels2.data(), labels.data());
    assert_eq!(image2.meta(), image.meta());
    println!("round-tripped {:?} voxels at spacing {:?}", image2.dims(), image2.meta().spacing);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
