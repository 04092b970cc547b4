//! Command implementations behind the `fuselage` binary.
//!
//! Every command validates its flags before touching the filesystem, runs
//! inside a rayon pool of the requested size, prints a short human summary
//! on stdout and writes machine-readable files. Failures surface as
//! [`Error`]; the binary turns them into a JSON object on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::atlas::{label_table, load_manifest, AtlasSet};
use crate::error::{Error, Result};
use crate::intensity::{basis_len, BiasModel};
use crate::io;
use crate::metrics::{report, tenengrad};
use crate::phantom::{generate, jackknife, PhantomConfig};
use crate::vem::{run_vem, SweepSchedule, VemConfig};
use crate::volume::{Interpolation, LabelVolume, ScalarVolume};

/// Environment variable naming the distance-field cache directory.
pub const CACHE_ENV: &str = "FUSELAGE_CACHE";
/// Spacing every input is resampled to before segmentation.
pub const TARGET_SPACING_MM: f64 = 1.0;
pub const MI_BINS: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "fuselage", version, about = "Multi-atlas label fusion with variational EM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment a test image with atlases from a manifest.
    Segment(SegmentArgs),
    /// Dice and Generalized Dice between two label maps.
    Metrics(MetricsArgs),
    /// Write a synthetic test subject, atlases and manifest.
    Phantom(PhantomArgs),
    /// Leave-one-out evaluation over every atlas of a manifest.
    Jackknife(JackknifeArgs),
    /// Print the atlases a segmentation would use.
    Select(SelectArgs),
    /// Tenengrad sharpness of an image's middle slice.
    Sharpness(SharpnessArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectBy {
    Age,
    Mi,
}

/// Inference options shared by `segment` and `jackknife`.
#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Total degree of the polynomial bias field.
    #[arg(long, default_value_t = 4)]
    pub bias_degree: usize,
    /// Skip bias estimation.
    #[arg(long)]
    pub no_bias: bool,
    /// Gaussian components per label.
    #[arg(long, default_value_t = 1)]
    pub components: usize,
    #[arg(long, default_value_t = 30)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 5)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Default for ModelArgs {
    fn default() -> Self {
        ModelArgs {
            beta: 0.5,
            rho: 1.0,
            bias_degree: 4,
            no_bias: false,
            components: 1,
            max_iters: 30,
            sweeps: 5,
            tol: 1e-5,
            seed: 0,
            workers: None,
        }
    }
}

impl ModelArgs {
    pub fn vem_config(&self) -> Result<VemConfig> {
        let cfg = VemConfig {
            beta: self.beta,
            rho: self.rho,
            max_outer_iters: self.max_iters,
            meanfield_sweeps_per_estep: self.sweeps,
            tol: self.tol,
            seed: self.seed,
            schedule: SweepSchedule::Checkerboard,
            bias_degree: (!self.no_bias).then_some(self.bias_degree),
            components: self.components,
            distance_cache: std::env::var_os(CACHE_ENV).map(PathBuf::from),
            ..VemConfig::default()
        };
        cfg.validate()?;
        check_workers(self.workers)?;
        Ok(cfg)
    }
}

fn check_workers(workers: Option<usize>) -> Result<()> {
    if workers == Some(0) {
        return Err(Error::InvalidArgument("--workers must be at least 1".into()));
    }
    Ok(())
}

/// Runs `f` on a dedicated pool of `workers` threads (or the global pool).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    check_workers(workers)?;
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Brain mask; nonzero voxels form the segmentation domain.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of atlases to fuse.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = SelectBy::Age)]
    pub select_by: SelectBy,
    /// Test subject age, required for age selection.
    #[arg(long)]
    pub age_days: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also write one posterior probability map per label.
    #[arg(long)]
    pub posteriors: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl SegmentArgs {
    pub fn validate(&self) -> Result<VemConfig> {
        validate_selection(self.k, self.select_by, self.age_days)?;
        self.model.vem_config()
    }
}

fn validate_selection(k: usize, by: SelectBy, age_days: Option<f64>) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("--k must be at least 1".into()));
    }
    match (by, age_days) {
        (SelectBy::Age, None) => Err(Error::InvalidArgument("--select-by age needs --age-days".into())),
        (_, Some(a)) if !(a >= 0.0 && a.is_finite()) => {
            Err(Error::InvalidArgument(format!("--age-days must be >= 0, got {a}")))
        }
        _ => Ok(()),
    }
}

fn select(
    atlases: &AtlasSet,
    image: Option<&ScalarVolume>,
    k: usize,
    by: SelectBy,
    age_days: Option<f64>,
) -> Result<AtlasSet> {
    if k > atlases.len() {
        return Err(Error::InvalidArgument(format!(
            "--k {k} exceeds the {} atlases in the manifest",
            atlases.len()
        )));
    }
    match by {
        SelectBy::Age => atlases.select_by_age(age_days.expect("validated"), k),
        SelectBy::Mi => atlases.select_by_mi(image.expect("image for MI selection"), k, MI_BINS),
    }
}

fn resample_atlases(atlases: &AtlasSet) -> Result<AtlasSet> {
    let mut out = Vec::with_capacity(atlases.len());
    for a in atlases.iter() {
        let mut a = a.clone();
        a.intensity = a.intensity.resample_isotropic(TARGET_SPACING_MM, Interpolation::Trilinear)?;
        a.labels = a.labels.resample_isotropic(TARGET_SPACING_MM, Interpolation::Nearest)?;
        out.push(a);
    }
    AtlasSet::new(out)
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentReport {
    pub selected_atlases: Vec<String>,
    pub select_by: SelectBy,
    pub iterations: usize,
    pub converged: bool,
    pub free_energy_trace: Vec<f64>,
    /// Voxels where every atlas was excluded and the masking rule was lifted.
    pub fallback_voxels: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// `(label, voxel count)` in the output map.
    pub label_volumes: Vec<(u32, usize)>,
    pub config: VemConfig,
}

#[derive(Clone, Debug)]
pub struct SegmentOutcome {
    pub labels: LabelVolume,
    pub report: SegmentReport,
    pub written: Vec<PathBuf>,
}

pub fn cmd_segment(args: &SegmentArgs) -> Result<SegmentOutcome> {
    let cfg = args.validate()?;
    for p in [&args.image, &args.mask, &args.manifest] {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    with_workers(args.model.workers, || segment_inner(args, &cfg))?
}

fn segment_inner(args: &SegmentArgs, cfg: &VemConfig) -> Result<SegmentOutcome> {
    let atlases = load_manifest(&args.manifest)?;
    if args.k > atlases.len() {
        return Err(Error::InvalidArgument(format!(
            "--k {} exceeds the {} atlases in the manifest",
            args.k,
            atlases.len()
        )));
    }
    let image = io::read_scalar(&args.image)?.resample_isotropic(TARGET_SPACING_MM, Interpolation::Trilinear)?;
    let mask = io::read_labels(&args.mask)?.resample_isotropic(TARGET_SPACING_MM, Interpolation::Nearest)?;
    let atlases = resample_atlases(&atlases)?;
    let chosen = select(&atlases, Some(&image), args.k, args.select_by, args.age_days)?;
    let table = label_table();
    let res = run_vem(&chosen, &image, &mask, &table, cfg)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut written = Vec::new();
    let labels_path = args.out_dir.join("labels.nii.gz");
    io::write_labels(&res.map_labels, &labels_path)?;
    written.push(labels_path);
    if args.posteriors {
        let dir = args.out_dir.join("posteriors");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for &l in res.label_posterior.labels() {
            let p = dir.join(format!("label_{l}.nii.gz"));
            io::write_scalar(&res.label_posterior.volume(l)?, &p)?;
            written.push(p);
        }
    }
    let params_path = args.out_dir.join("params.json");
    write_json(&params_path, &res.model_params())?;
    written.push(params_path);

    let mut label_volumes: Vec<(u32, usize)> = Vec::new();
    for l in res.map_labels.distinct_labels() {
        let n = res.map_labels.data().iter().filter(|&&x| x == l).count();
        label_volumes.push((l, n));
    }
    let report = SegmentReport {
        selected_atlases: res.atlas_ids.clone(),
        select_by: args.select_by,
        iterations: res.iterations,
        converged: res.converged,
        free_energy_trace: res.free_energy_trace.clone(),
        fallback_voxels: res.fallback_voxels,
        dims: res.map_labels.dims(),
        spacing: res.map_labels.meta().spacing,
        label_volumes,
        config: cfg.clone(),
    };
    let report_path = args.out_dir.join("report.json");
    write_json(&report_path, &report)?;
    written.push(report_path);
    Ok(SegmentOutcome {
        labels: res.map_labels,
        report,
        written,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Parses `"2,41,3"` into label ids.
pub fn parse_id_list(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Error::InvalidArgument(format!("not a label id: {t:?}")))
        })
        .collect()
}

/// Parses `"1-5"`, `"1,3,5"` or mixtures like `"1-3,8"`.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidArgument(format!("cannot parse sizes {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Parses comma-separated bias coefficients; the degree follows from the count.
pub fn parse_bias(s: &str) -> Result<BiasModel> {
    let coeffs: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::InvalidArgument(format!("not a number: {t:?}"))))
        .collect::<Result<_>>()?;
    let degree = (0..=6)
        .find(|&d| basis_len(d) == coeffs.len())
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} bias coefficients do not fill a basis (1, 4, 10, 20, 35, ...)",
                coeffs.len()
            ))
        })?;
    BiasModel::from_coeffs(degree, coeffs)
}

#[derive(Clone, Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Comma-separated label ids (default: every table label present).
    #[arg(long)]
    pub labels: Option<String>,
    /// `.csv` or `.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<crate::metrics::OverlapReport> {
    let ids = args.labels.as_deref().map(parse_id_list).transpose()?;
    let a = io::read_labels(&args.a)?;
    let b = io::read_labels(&args.b)?;
    let r = report(&a, &b, &label_table(), ids.as_deref())?;
    if let Some(out) = &args.out {
        r.save(out)?;
    }
    Ok(r)
}

#[derive(Clone, Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid edge length in voxels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 5)]
    pub n_atlases: usize,
    /// Noise standard deviation as a fraction of the WM/GM contrast.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Comma-separated bias coefficients of the test image.
    #[arg(long)]
    pub bias: Option<String>,
    /// Maximum warp displacement in voxels.
    #[arg(long, default_value_t = 1.5)]
    pub deform: f64,
    #[arg(long, default_value_t = 0.0)]
    pub no_wm_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub blur: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl PhantomArgs {
    pub fn config(&self) -> Result<PhantomConfig> {
        let cfg = PhantomConfig {
            seed: self.seed,
            dims: [self.size; 3],
            n_atlases: self.n_atlases,
            noise_sigma: self.noise,
            blur_sigma: self.blur,
            bias: self.bias.as_deref().map(parse_bias).transpose()?.unwrap_or_else(|| BiasModel::zero(0)),
            deform: self.deform,
            no_wm_fraction: self.no_wm_fraction,
            ..PhantomConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn cmd_phantom(args: &PhantomArgs) -> Result<crate::phantom::PhantomInstance> {
    let cfg = args.config()?;
    let mut inst = generate(&cfg)?;
    inst.write(&args.out_dir)?;
    Ok(inst)
}

#[derive(Clone, Debug, Args)]
pub struct JackknifeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Neighbourhood sizes, e.g. `1-5` or `1,3,5`.
    #[arg(long, default_value = "1-5")]
    pub sizes: String,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Run table; companion tables are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_jackknife(args: &JackknifeArgs) -> Result<crate::phantom::JackknifeTable> {
    let sizes = parse_sizes(&args.sizes)?;
    let cfg = args.model.vem_config()?;
    with_workers(args.model.workers, || {
        let family = resample_atlases(&load_manifest(&args.manifest)?)?;
        let table = jackknife(&family, &sizes, &cfg, &label_table())?;
        table.save(&args.out)?;
        Ok(table)
    })?
}

#[derive(Clone, Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = SelectBy::Age)]
    pub select_by: SelectBy,
    #[arg(long)]
    pub age_days: Option<f64>,
    /// Test image, required for MI selection.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

pub fn cmd_select(args: &SelectArgs) -> Result<Vec<String>> {
    validate_selection(args.k, args.select_by, args.age_days)?;
    if args.select_by == SelectBy::Mi && args.image.is_none() {
        return Err(Error::InvalidArgument("--select-by mi needs --image".into()));
    }
    let atlases = load_manifest(&args.manifest)?;
    let chosen = match args.select_by {
        SelectBy::Age => select(&atlases, None, args.k, SelectBy::Age, args.age_days)?,
        SelectBy::Mi => {
            let image = io::read_scalar(args.image.as_ref().expect("checked"))?
                .resample_isotropic(TARGET_SPACING_MM, Interpolation::Trilinear)?;
            let atlases = resample_atlases(&atlases)?;
            select(&atlases, Some(&image), args.k, SelectBy::Mi, None)?
        }
    };
    Ok(chosen.ids().into_iter().map(String::from).collect())
}

#[derive(Clone, Debug, Args)]
pub struct SharpnessArgs {
    #[arg(long)]
    pub image: PathBuf,
}

pub fn cmd_sharpness(args: &SharpnessArgs) -> Result<f64> {
    tenengrad(&io::read_scalar(&args.image)?)
}

/// Runs a parsed command line, printing the human summary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment(a) => {
            let out = cmd_segment(&a)?;
            println!(
                "segmented with {} atlases ({}) in {} iterations{}",
                out.report.selected_atlases.len(),
                out.report.selected_atlases.join(", "),
                out.report.iterations,
                if out.report.converged { "" } else { " (not converged)" }
            );
            for p in out.written {
                println!("wrote {}", p.display());
            }
        }
        Command::Metrics(a) => {
            let r = cmd_metrics(&a)?;
            for l in &r.labels {
                match l.dice {
                    Some(d) => println!("{:>4} {:<28} {d:.4}", l.label_id, l.label_name),
                    None => println!("{:>4} {:<28} absent", l.label_id, l.label_name),
                }
            }
            println!("GENERALIZED {:.4}", r.generalized_dice);
        }
        Command::Phantom(a) => {
            let inst = cmd_phantom(&a)?;
            println!(
                "phantom with {} atlases, test age {} days",
                inst.atlases.len(),
                inst.test_age_days
            );
            if let Some(p) = inst.manifest_path {
                println!("wrote {}", p.display());
            }
        }
        Command::Jackknife(a) => {
            let t = cmd_jackknife(&a)?;
            println!("{} runs", t.runs.len());
            for (k, c) in t.winning_k() {
                println!("k = {k}: best for {c} subjects");
            }
        }
        Command::Select(a) => {
            for id in cmd_select(&a)? {
                println!("{id}");
            }
        }
        Command::Sharpness(a) => println!("{}", cmd_sharpness(&a)?),
    }
    Ok(())
}

/// `{"error": ..., "kind": ...}` for a failed command.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.to_string(), "kind": e.kind() }).to_string()
}
