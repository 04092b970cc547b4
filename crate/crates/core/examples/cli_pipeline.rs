//! The command-line workflow driven from code: write a phantom to disk,
//! segment it from the manifest and score the output.

use fuselage::cli::{cmd_metrics, cmd_phantom, cmd_segment, MetricsArgs, ModelArgs, PhantomArgs, SegmentArgs, SelectBy};

pub fn run_example() -> fuselage::Result<()> {
    let dir = std::env::temp_dir().join(format!("fuselage-cli-{}", std::process::id()));
    let inst = cmd_phantom(&PhantomArgs {
        seed: 2,
        size: 24,
        n_atlases: 5,
        noise: 0.1,
        bias: None,
        deform: 1.5,
        no_wm_fraction: 0.0,
        blur: 0.0,
        out_dir: dir.clone(),
    })?;
    let out = cmd_segment(&SegmentArgs {
        image: dir.join("image.nii.gz"),
        mask: dir.join("mask.nii.gz"),
        manifest: dir.join("manifest.json"),
        k: 5,
        select_by: SelectBy::Age,
        age_days: Some(inst.test_age_days),
        model: ModelArgs::default(),
        posteriors: false,
        out_dir: dir.join("seg"),
    })?;
    for p in &out.written {
        println!("wrote {}", p.display());
    }
    let rep = cmd_metrics(&MetricsArgs {
        a: dir.join("seg").join("labels.nii.gz"),
        b: dir.join("truth.nii.gz"),
        labels: None,
        out: None,
    })?;
    println!("generalized dice against truth {:.4}", rep.generalized_dice);
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}

fn main() -> fuselage::Result<()> {
    run_example()
}
