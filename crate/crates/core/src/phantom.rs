//! Synthetic subjects with known ground truth, and brute-force oracles.
//!
//! Anatomy is a set of nested analytic ellipsoids: a cortical shell split at
//! the midline, white matter inside it, lateral ventricles, thalami and
//! putamina. Each subject sees that geometry through its own smooth warp,
//! made of an age-driven radial growth term plus a random sinusoidal field,
//! so two subjects differ more the further apart their ages are. Labels are
//! evaluated analytically at warped positions (no resampling), intensities
//! are drawn from per-label Gaussians, and the test image is corrupted by a
//! known polynomial bias field.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{Atlas, AtlasSet, LabelTable, Manifest, ManifestEntry, BACKGROUND};
use crate::error::{Error, Result};
use crate::intensity::{apply_bias, basis_len, BiasModel, Component, LabelMixture};
use crate::io;
use crate::metrics::{report, OverlapReport};
use crate::vem::{run_vem, VemConfig};
use crate::volume::{GridMeta, LabelVolume, ScalarVolume, Volume};

/// Smallest grid edge the geometry is resolvable on.
pub const MIN_PHANTOM_EDGE: usize = 16;
/// Intensity gap between white matter and cortex; noise is a fraction of it.
pub const CONTRAST: f64 = 40.0;
/// Oldest phantom age, in days.
pub const MAX_AGE_DAYS: f64 = 730.0;

/// Every label the geometry produces.
pub const PHANTOM_LABELS: [u32; 11] = [0, 2, 3, 4, 9, 12, 41, 42, 43, 48, 51];

/// True mean intensity of each phantom label.
pub fn true_mean(label: u32) -> f64 {
    match label {
        2 | 41 => 120.0,
        3 | 42 => 80.0,
        9 | 48 => 100.0,
        12 | 51 => 95.0,
        4 | 43 => 30.0,
        _ => 20.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub n_atlases: usize,
    /// Labels kept; any other structure is absorbed by the white matter of
    /// its hemisphere. Must contain 0, 2 and 41.
    pub labels: Vec<u32>,
    /// Intensity noise standard deviation as a fraction of [`CONTRAST`].
    pub noise_sigma: f64,
    /// Gaussian blur (voxels) applied to the noiseless image before noise.
    pub blur_sigma: f64,
    /// Ground-truth bias of the test image.
    pub bias: BiasModel,
    /// Maximum displacement of a subject's warp, in voxels.
    pub deform: f64,
    /// Fraction of atlases whose labels merge cortex into white matter.
    pub no_wm_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            dims: [24; 3],
            n_atlases: 5,
            labels: PHANTOM_LABELS.to_vec(),
            noise_sigma: 0.1,
            blur_sigma: 0.0,
            bias: BiasModel::zero(0),
            deform: 1.5,
            no_wm_fraction: 0.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_PHANTOM_EDGE) {
            return Err(Error::InvalidArgument(format!(
                "phantom grid {:?} is smaller than {MIN_PHANTOM_EDGE}^3",
                self.dims
            )));
        }
        if self.n_atlases == 0 {
            return Err(Error::InvalidArgument("at least one atlas is required".into()));
        }
        for &l in &self.labels {
            if !PHANTOM_LABELS.contains(&l) {
                return Err(Error::UnknownLabel(l));
            }
        }
        for need in [BACKGROUND, 2, 41] {
            if !self.labels.contains(&need) {
                return Err(Error::InvalidArgument(format!("phantom label set must contain {need}")));
            }
        }
        let finite_nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !finite_nonneg(self.noise_sigma) || !finite_nonneg(self.blur_sigma) || !finite_nonneg(self.deform) {
            return Err(Error::InvalidArgument("noise, blur and deformation must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.no_wm_fraction) {
            return Err(Error::InvalidArgument("no_wm_fraction must lie in [0, 1]".into()));
        }
        if self.bias.coeffs.len() != basis_len(self.bias.degree) {
            return Err(Error::InvalidArgument("bias coefficient count does not match its degree".into()));
        }
        Ok(())
    }

    fn meta(&self) -> GridMeta {
        GridMeta::with_dims(self.dims).expect("validated dims")
    }

    /// Ground-truth mixture over the configured labels. Noise-free phantoms
    /// get a unit variance so the density stays finite.
    pub fn true_mixture(&self) -> LabelMixture {
        let mut labels = self.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        let var = (self.noise_sigma * CONTRAST).powi(2).max(1.0);
        let means: Vec<f64> = labels.iter().map(|&l| true_mean(l)).collect();
        LabelMixture::single(labels.clone(), &means, &vec![var; labels.len()], 1.0).expect("valid mixture")
    }
}

/// One synthetic subject: its (possibly WM-less) labels, bias-free
/// intensities, the full labels it was drawn from, and its age.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub age_days: f64,
    pub has_wm: bool,
    pub labels: LabelVolume,
    pub true_labels: LabelVolume,
    pub intensity: ScalarVolume,
    /// `log f_{L(x)}(I*(x))` under the true mixture, recorded while sampling.
    pub log_likelihood: Vec<f64>,
}

impl Subject {
    pub fn to_atlas(&self) -> Atlas {
        Atlas::new(
            self.id.clone(),
            self.intensity.clone(),
            self.labels.clone(),
            self.age_days,
            self.has_wm,
        )
        .expect("phantom grids agree")
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn r2(&self, v: [f64; 3]) -> f64 {
        (0..3).map(|a| ((v[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }

    fn mirrored(&self) -> Ellipsoid {
        let mut e = *self;
        e.center[0] = -e.center[0];
        e
    }
}

const BRAIN: Ellipsoid = Ellipsoid {
    center: [0.0, 0.0, 0.0],
    radii: [0.80, 0.85, 0.75],
};
/// Normalised radius where white matter gives way to cortex.
const CORTEX_INNER: f64 = 0.78;
// Left-hemisphere blobs (x < 0); the right ones are mirror images.
const VENTRICLE: Ellipsoid = Ellipsoid {
    center: [-0.17, 0.05, 0.05],
    radii: [0.08, 0.28, 0.12],
};
const THALAMUS: Ellipsoid = Ellipsoid {
    center: [-0.17, -0.30, -0.05],
    radii: [0.13, 0.13, 0.12],
};
const PUTAMEN: Ellipsoid = Ellipsoid {
    center: [-0.42, 0.05, 0.0],
    radii: [0.09, 0.20, 0.15],
};

/// Label of the unwarped anatomy at normalised position `v` (brain fills
/// most of `[-1, 1]^3`).
fn anatomy(v: [f64; 3]) -> u32 {
    let r2 = BRAIN.r2(v);
    if r2 > 1.0 {
        return BACKGROUND;
    }
    let left = v[0] < 0.0;
    let pick = |l: u32, r: u32| if left { l } else { r };
    if r2 > CORTEX_INNER * CORTEX_INNER {
        return pick(3, 42);
    }
    let side = |e: Ellipsoid| if left { e } else { e.mirrored() };
    if side(VENTRICLE).r2(v) <= 1.0 {
        return pick(4, 43);
    }
    if side(THALAMUS).r2(v) <= 1.0 {
        return pick(9, 48);
    }
    if side(PUTAMEN).r2(v) <= 1.0 {
        return pick(12, 51);
    }
    pick(2, 41)
}

fn restrict(label: u32, keep: &[u32]) -> u32 {
    if keep.contains(&label) {
        label
    } else if matches!(label, 3 | 4 | 9 | 12) {
        2
    } else if label == BACKGROUND {
        BACKGROUND
    } else {
        41
    }
}

/// A subject's smooth displacement field, in voxels, bounded by `deform`.
#[derive(Clone, Debug)]
struct Warp {
    deform: f64,
    /// Growth relative to the middle of the age range, in [-1, 1].
    growth: f64,
    /// `amp[a][b]`, `freq[a][b]`, `phase[a][b]`: displacement along axis `a`
    /// varies sinusoidally along axis `b`.
    amp: [[f64; 3]; 3],
    freq: [[f64; 3]; 3],
    phase: [[f64; 3]; 3],
}

impl Warp {
    fn random(rng: &mut ChaCha8Rng, deform: f64, age_days: f64) -> Warp {
        let mut amp = [[0.0; 3]; 3];
        let mut freq = [[0.0; 3]; 3];
        let mut phase = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                amp[a][b] = rng.random_range(-1.0..1.0);
                freq[a][b] = rng.random_range(0.5..1.5);
                phase[a][b] = rng.random_range(0.0..std::f64::consts::TAU);
            }
            // Each axis bounded by one, the vector by one after the 1/sqrt(3).
            let s: f64 = amp[a].iter().map(|x: &f64| x.abs()).sum();
            if s > 0.0 {
                amp[a].iter_mut().for_each(|x| *x /= s * 3f64.sqrt());
            }
        }
        Warp {
            deform,
            growth: 2.0 * age_days / MAX_AGE_DAYS - 1.0,
            amp,
            freq,
            phase,
        }
    }

    /// Normalised anatomy coordinates sampled by voxel `c`.
    fn source(&self, c: [usize; 3], dims: [usize; 3]) -> [f64; 3] {
        let mut v = [0.0; 3];
        for a in 0..3 {
            let half = dims[a] as f64 / 2.0;
            let centre = (dims[a] as f64 - 1.0) / 2.0;
            let p = c[a] as f64 - centre;
            let mut sin = 0.0;
            for b in 0..3 {
                let t = std::f64::consts::PI * self.freq[a][b] * c[b] as f64 / dims[b] as f64;
                sin += self.amp[a][b] * (t + self.phase[a][b]).sin();
            }
            // Radial growth reaches its full size at the brain surface.
            let radial = self.growth * p / (half * BRAIN.radii[a]) / 3f64.sqrt();
            let u = self.deform * (0.5 * radial.clamp(-1.0, 1.0) + 0.5 * sin);
            v[a] = (p - u) / half;
        }
        v
    }
}

fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

fn make_subject(
    cfg: &PhantomConfig,
    id: String,
    age_days: f64,
    has_wm: bool,
    seed: u64,
) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = cfg.meta();
    let warp = Warp::random(&mut rng, cfg.deform, age_days);
    let true_labels = Volume::from_fn(meta, |i, j, k| {
        restrict(anatomy(warp.source([i, j, k], cfg.dims)), &cfg.labels)
    })
    .expect("valid grid");
    let labels = if has_wm {
        true_labels.clone()
    } else {
        true_labels.map(|l| match l {
            3 => 2,
            42 => 41,
            l => l,
        })
    };
    let mix = cfg.true_mixture();
    let sigma = cfg.noise_sigma * CONTRAST;
    let clean = true_labels.map(true_mean);
    let clean = if cfg.blur_sigma > 0.0 {
        gaussian_blur(&clean, cfg.blur_sigma)
    } else {
        clean
    };
    let mut data = clean.into_data();
    for x in data.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x += sigma * z;
    }
    let log_likelihood = data
        .iter()
        .zip(true_labels.data())
        .map(|(&x, &l)| {
            let c = mix.components(mix.index_of(l).expect("label in mixture"))[0];
            normal_log_density(x, c.mean, c.var)
        })
        .collect();
    Subject {
        id,
        age_days,
        has_wm,
        labels,
        true_labels,
        intensity: Volume::from_vec(meta, data).expect("valid grid"),
        log_likelihood,
    }
}

/// `n` subjects `s00, s01, ...` with ages stratified over 0 to 2 years (in
/// random order). Cortex is merged into white matter for a random
/// `no_wm_fraction` of them, never for subject 0.
pub fn generate_family(cfg: &PhantomConfig, n: usize) -> Result<Vec<Subject>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ages: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + rng.random::<f64>()) / n as f64 * MAX_AGE_DAYS).round())
        .collect();
    for i in (1..n).rev() {
        ages.swap(i, rng.random_range(0..=i));
    }
    let n_no_wm = (cfg.no_wm_fraction * (n.saturating_sub(1)) as f64).round() as usize;
    let mut candidates: Vec<usize> = (1..n).collect();
    for i in (1..candidates.len()).rev() {
        candidates.swap(i, rng.random_range(0..=i));
    }
    let no_wm: Vec<usize> = candidates.into_iter().take(n_no_wm).collect();
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    Ok((0..n)
        .map(|i| make_subject(cfg, format!("s{i:02}"), ages[i], !no_wm.contains(&i), seeds[i]))
        .collect())
}

/// A test subject with its atlases and ground truth.
#[derive(Clone, Debug)]
pub struct PhantomInstance {
    pub config: PhantomConfig,
    pub truth: LabelVolume,
    /// Bias-free true image `I*`.
    pub i_star: ScalarVolume,
    /// Observed image: `I*` corrupted by the configured bias.
    pub image: ScalarVolume,
    /// Truth support dilated by one voxel.
    pub mask: LabelVolume,
    pub atlases: AtlasSet,
    pub test_age_days: f64,
    pub mixture: LabelMixture,
    /// Generator's record of `log f_{L(x)}(I*(x))` for every voxel.
    pub log_likelihood: Vec<f64>,
    /// Where [`PhantomInstance::write`] put the manifest.
    pub manifest_path: Option<PathBuf>,
}

/// Test subject `s00` plus `n_atlases` atlases `s01..`.
pub fn generate(cfg: &PhantomConfig) -> Result<PhantomInstance> {
    let mut family = generate_family(cfg, cfg.n_atlases + 1)?;
    let test = family.remove(0);
    let atlases = AtlasSet::new(family.iter().map(Subject::to_atlas).collect())?;
    let image = apply_bias(&test.intensity, &cfg.bias);
    Ok(PhantomInstance {
        config: cfg.clone(),
        mask: test.true_labels.nonzero_mask().dilate(1),
        truth: test.true_labels,
        i_star: test.intensity,
        image,
        atlases,
        test_age_days: test.age_days,
        mixture: cfg.true_mixture(),
        log_likelihood: test.log_likelihood,
        manifest_path: None,
    })
}

/// Sidecar describing the test subject of a written phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomInfo {
    pub config: PhantomConfig,
    pub test_age_days: f64,
    pub image: PathBuf,
    pub truth: PathBuf,
    pub mask: PathBuf,
    pub manifest: PathBuf,
    pub mixture: LabelMixture,
}

impl PhantomInstance {
    /// Writes volumes, `manifest.json` and `phantom.json` into `dir`.
    /// Paths inside both JSON files are relative to `dir`.
    pub fn write(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("atlases")).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        for a in self.atlases.iter() {
            let ip = PathBuf::from(format!("atlases/{}_t1.nii.gz", a.id));
            let lp = PathBuf::from(format!("atlases/{}_labels.nii.gz", a.id));
            io::write_scalar(&a.intensity, dir.join(&ip))?;
            io::write_labels(&a.labels, dir.join(&lp))?;
            manifest.atlases.push(ManifestEntry {
                id: a.id.clone(),
                intensity_path: ip,
                labels_path: lp,
                age_days: a.age_days,
                has_wm: a.has_wm,
            });
        }
        let manifest_path = dir.join("manifest.json");
        manifest.write(&manifest_path)?;
        io::write_scalar(&self.image, dir.join("image.nii.gz"))?;
        io::write_labels(&self.truth, dir.join("truth.nii.gz"))?;
        io::write_labels(&self.mask, dir.join("mask.nii.gz"))?;
        let info = PhantomInfo {
            config: self.config.clone(),
            test_age_days: self.test_age_days,
            image: "image.nii.gz".into(),
            truth: "truth.nii.gz".into(),
            mask: "mask.nii.gz".into(),
            manifest: "manifest.json".into(),
            mixture: self.mixture.clone(),
        };
        let info_path = dir.join("phantom.json");
        std::fs::write(&info_path, serde_json::to_vec_pretty(&info)?).map_err(|e| Error::io(&info_path, e))?;
        self.manifest_path = Some(manifest_path.clone());
        Ok(manifest_path)
    }
}

/// Separable Gaussian blur with `sigma` in voxels; edges replicate.
pub fn gaussian_blur(vol: &ScalarVolume, sigma: f64) -> ScalarVolume {
    if !(sigma > 0.0) {
        return vol.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let meta = *vol.meta();
    let dims = meta.dims;
    let mut cur = vol.data().to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let next: Vec<f64> = (0..meta.len())
            .map(|idx| {
                let c = meta.coords(idx);
                kernel
                    .iter()
                    .enumerate()
                    .map(|(ti, w)| {
                        let mut cc = c;
                        cc[axis] = (c[axis] as isize + ti as isize - radius).clamp(0, n - 1) as usize;
                        w * cur[meta.index(cc[0], cc[1], cc[2])]
                    })
                    .sum()
            })
            .collect();
        cur = next;
    }
    Volume::from_vec(meta, cur).expect("same grid")
}

/// Largest volume [`brute_force_edt`] accepts.
pub const BRUTE_EDT_MAX_VOXELS: usize = 16 * 16 * 16;

/// Signed distance to the boundary of `label_id` by exhaustive search, with
/// the sign and clipping conventions of the fast transform. Squared
/// distances are summed as `(dx² + dy²) + dz²`.
pub fn brute_force_edt(labels: &LabelVolume, label_id: u32, d_max: f64) -> Result<ScalarVolume> {
    let meta = *labels.meta();
    if meta.len() > BRUTE_EDT_MAX_VOXELS {
        return Err(Error::TooLarge(format!(
            "brute-force distance transform limited to {BRUTE_EDT_MAX_VOXELS} voxels, got {}",
            meta.len()
        )));
    }
    let data = labels.data();
    let sp = meta.spacing;
    let coords: Vec<[usize; 3]> = (0..meta.len()).map(|i| meta.coords(i)).collect();
    let field = (0..meta.len())
        .map(|i| {
            let inside = data[i] == label_id;
            let mut best = f64::INFINITY;
            for j in 0..meta.len() {
                if (data[j] == label_id) == inside {
                    continue;
                }
                let d = |a: usize| (coords[i][a] as f64 - coords[j][a] as f64) * sp[a];
                let (dx, dy, dz) = (d(0), d(1), d(2));
                best = best.min((dx * dx + dy * dy) + dz * dz);
            }
            let dist = best.sqrt().min(d_max);
            if inside {
                -dist
            } else {
                dist
            }
        })
        .collect();
    Volume::from_vec(meta, field)
}

/// A problem small enough to enumerate every membership configuration.
#[derive(Clone, Debug)]
pub struct TinyProblem {
    pub atlases: AtlasSet,
    pub image: ScalarVolume,
    pub mask: LabelVolume,
    pub mixture: LabelMixture,
    pub bias: BiasModel,
    pub beta: f64,
    pub rho: f64,
    pub d_max: f64,
}

impl TinyProblem {
    /// Random labels from `{2, 3, 4}` per atlas, an image drawn near the
    /// label means, and a fixed mixture.
    pub fn random(seed: u64, dims: [usize; 3], n_atlases: usize, beta: f64) -> Result<TinyProblem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = GridMeta::with_dims(dims)?;
        let pool = [2u32, 3, 4];
        let means = [120.0, 80.0, 30.0];
        let mut atlases = Vec::with_capacity(n_atlases);
        for n in 0..n_atlases {
            let labels = Volume::from_fn(meta, |_, _, _| pool[rng.random_range(0..pool.len())])?;
            let intensity = labels.map(true_mean);
            atlases.push(Atlas::new(format!("t{n}"), intensity, labels, 100.0 * n as f64, true)?);
        }
        let image = Volume::from_fn(meta, |_, _, _| {
            let l = rng.random_range(0..pool.len());
            means[l] + rng.random_range(-15.0..15.0)
        })?;
        let present: Vec<usize> = (0..pool.len())
            .filter(|&i| atlases.iter().any(|a: &Atlas| a.labels.contains_label(pool[i])))
            .collect();
        let mixture = LabelMixture::single(
            present.iter().map(|&i| pool[i]).collect(),
            &present.iter().map(|&i| means[i]).collect::<Vec<_>>(),
            &vec![150.0; present.len()],
            1e-6,
        )?;
        Ok(TinyProblem {
            atlases: AtlasSet::new(atlases)?,
            image,
            mask: LabelVolume::filled(meta, 1)?,
            mixture,
            bias: BiasModel::zero(0),
            beta,
            rho: 1.0,
            d_max: crate::prior::DEFAULT_D_MAX,
        })
    }

    /// Inference settings matching this problem.
    pub fn vem_config(&self) -> VemConfig {
        VemConfig {
            beta: self.beta,
            rho: self.rho,
            d_max: self.d_max,
            bias_degree: if self.bias.coeffs.iter().all(|&c| c == 0.0) {
                None
            } else {
                Some(self.bias.degree)
            },
            ..VemConfig::default()
        }
    }
}

/// Exact posterior marginals of a [`TinyProblem`].
#[derive(Clone, Debug)]
pub struct ExactPosterior {
    /// Mask voxels in ascending grid order.
    pub voxels: Vec<usize>,
    pub n_atlases: usize,
    /// Labels occurring in any atlas on the mask, ascending.
    pub labels: Vec<u32>,
    /// `p(M(x) = n | I)`, laid out `[voxel][n]`.
    pub membership: Vec<f64>,
    /// `p(L(x) = l | I)`, laid out `[voxel][l]`.
    pub label_marginals: Vec<f64>,
    /// `log sum_M exp(beta * agreements(M)) prod_x e_{M(x)}(x)`.
    pub log_normalizer: f64,
    /// `log Z(beta) = log sum_M exp(beta * agreements(M))`.
    pub log_partition: f64,
}

impl ExactPosterior {
    pub fn membership_row(&self, pos: usize) -> &[f64] {
        &self.membership[pos * self.n_atlases..(pos + 1) * self.n_atlases]
    }

    pub fn label_row(&self, pos: usize) -> &[f64] {
        let l = self.labels.len();
        &self.label_marginals[pos * l..(pos + 1) * l]
    }

    /// `log p(I)` with the membership field summed out.
    pub fn log_evidence(&self) -> f64 {
        self.log_normalizer - self.log_partition
    }
}

/// Largest configuration count [`exact_membership_posterior`] enumerates.
pub const MAX_CONFIGURATIONS: usize = 1 << 20;

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Enumerates every membership configuration of a tiny problem.
///
/// Each configuration `M` has weight
/// `exp(beta * #{x~y : M(x) = M(y)}) * prod_x e_{M(x)}(x)`, where
/// `e_n(x) = exp(s(x)) sum_l π_{n,l}(x) f_l(I(x) exp(s(x)))`,
/// `π_{n,l} ∝ exp(-rho D_n^l)` with `D` from [`brute_force_edt`], and `f_l`
/// is written out from the Gaussian formula. Neighbour pairs are found by
/// comparing grid coordinates.
pub fn exact_membership_posterior(p: &TinyProblem) -> Result<ExactPosterior> {
    let meta = *p.atlases.meta();
    meta.ensure_same(p.image.meta(), "tiny image")?;
    meta.ensure_same(p.mask.meta(), "tiny mask")?;
    let voxels: Vec<usize> = (0..meta.len()).filter(|&i| p.mask.data()[i] != 0).collect();
    let nv = voxels.len();
    let na = p.atlases.len();
    let too_large = || Error::TooLarge(format!("{na}^{nv} membership configurations"));
    let mut n_conf: usize = 1;
    for _ in 0..nv {
        n_conf = n_conf.checked_mul(na).filter(|&c| c <= MAX_CONFIGURATIONS).ok_or_else(too_large)?;
    }
    if nv == 0 {
        return Err(Error::InvalidArgument("empty mask".into()));
    }

    let mut labels: Vec<u32> = p
        .atlases
        .iter()
        .flat_map(|a| voxels.iter().map(|&v| a.labels.data()[v]).collect::<Vec<_>>())
        .collect();
    labels.sort_unstable();
    labels.dedup();
    let nl = labels.len();

    let mut edges = Vec::new();
    for a in 0..nv {
        for b in a + 1..nv {
            let (ca, cb) = (meta.coords(voxels[a]), meta.coords(voxels[b]));
            let manhattan: usize = (0..3).map(|t| ca[t].abs_diff(cb[t])).sum();
            if manhattan == 1 {
                edges.push((a, b));
            }
        }
    }

    let log_field = p.bias.log_field(&meta);
    // log f_l(I*(x)) per voxel and label.
    let mut log_f = vec![0.0; nv * nl];
    for (pos, &v) in voxels.iter().enumerate() {
        let x = p.image.data()[v] * log_field[v].exp();
        for (li, &l) in labels.iter().enumerate() {
            let comps: &[Component] = p.mixture.components(p.mixture.index_of(l)?);
            let terms: Vec<f64> = comps
                .iter()
                .map(|c| c.weight.ln() + normal_log_density(x, c.mean, c.var))
                .collect();
            log_f[pos * nl + li] = lse(&terms);
        }
    }
    // log e_n(x) and the per-atlas label posterior.
    let mut log_e = vec![0.0; nv * na];
    let mut label_given_atlas = vec![0.0; nv * na * nl];
    for (n, atlas) in p.atlases.iter().enumerate() {
        let dist: Vec<ScalarVolume> = labels
            .iter()
            .map(|&l| brute_force_edt(&atlas.labels, l, p.d_max))
            .collect::<Result<_>>()?;
        for (pos, &v) in voxels.iter().enumerate() {
            let logits: Vec<f64> = dist.iter().map(|d| -p.rho * d.data()[v]).collect();
            let z = lse(&logits);
            let joint: Vec<f64> = (0..nl).map(|li| logits[li] - z + log_f[pos * nl + li]).collect();
            let lj = lse(&joint);
            log_e[pos * na + n] = log_field[v] + lj;
            for li in 0..nl {
                label_given_atlas[(pos * na + n) * nl + li] = (joint[li] - lj).exp();
            }
        }
    }

    let mut assign = vec![0usize; nv];
    let mut log_w = Vec::with_capacity(n_conf);
    let mut log_prior_w = Vec::with_capacity(n_conf);
    for c in 0..n_conf {
        let mut rest = c;
        for slot in assign.iter_mut() {
            *slot = rest % na;
            rest /= na;
        }
        let agree = edges.iter().filter(|&&(a, b)| assign[a] == assign[b]).count() as f64;
        let data: f64 = assign.iter().enumerate().map(|(pos, &n)| log_e[pos * na + n]).sum();
        log_prior_w.push(p.beta * agree);
        log_w.push(p.beta * agree + data);
    }
    let log_normalizer = lse(&log_w);
    let log_partition = lse(&log_prior_w);

    let mut membership = vec![0.0; nv * na];
    for (c, lw) in log_w.iter().enumerate() {
        let w = (lw - log_normalizer).exp();
        let mut rest = c;
        for pos in 0..nv {
            membership[pos * na + rest % na] += w;
            rest /= na;
        }
    }
    let mut label_marginals = vec![0.0; nv * nl];
    for pos in 0..nv {
        for n in 0..na {
            let q = membership[pos * na + n];
            for li in 0..nl {
                label_marginals[pos * nl + li] += q * label_given_atlas[(pos * na + n) * nl + li];
            }
        }
    }
    Ok(ExactPosterior {
        voxels,
        n_atlases: na,
        labels,
        membership,
        label_marginals,
        log_normalizer,
        log_partition,
    })
}

/// Age bands used to summarise jackknife results, in months (upper bound
/// exclusive, at month midpoints).
pub const AGE_GROUPS: [(&str, f64, f64); 6] = [
    ("newborn", 0.0, 1.5),
    ("2-4mo", 1.5, 4.5),
    ("5-8mo", 4.5, 8.5),
    ("9-14mo", 8.5, 14.5),
    ("15-18mo", 14.5, 18.5),
    ("19-24mo", 18.5, f64::INFINITY),
];

const DAYS_PER_MONTH: f64 = 365.25 / 12.0;

pub fn age_group(age_days: f64) -> &'static str {
    let months = age_days / DAYS_PER_MONTH;
    AGE_GROUPS
        .iter()
        .find(|(_, lo, hi)| months >= *lo && months < *hi)
        .map_or("19-24mo", |g| g.0)
}

/// One leave-one-out segmentation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JackknifeRun {
    pub subject_id: String,
    pub age_days: f64,
    pub k: usize,
    /// Atlases selected by age, nearest first.
    pub selected: Vec<String>,
    pub report: OverlapReport,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JackknifeTable {
    pub sizes: Vec<usize>,
    /// Ordered by subject (family order), then by `k` as given.
    pub runs: Vec<JackknifeRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeGroupSummary {
    pub age_group: String,
    pub k: usize,
    pub n: usize,
    pub mean_gen_dice: f64,
    pub max_gen_dice: f64,
}

/// Leave-one-out evaluation: every family member in turn is segmented with
/// the `k` atlases nearest in age among the rest, for every `k` in `sizes`.
/// Each held-out member's own labels are the truth; its mask is the labelled
/// region dilated by one voxel.
pub fn jackknife(
    family: &AtlasSet,
    sizes: &[usize],
    cfg: &VemConfig,
    table: &LabelTable,
) -> Result<JackknifeTable> {
    let max_k = sizes.iter().copied().max().ok_or_else(|| Error::InvalidArgument("no sizes".into()))?;
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("neighbourhood sizes must be positive".into()));
    }
    if family.len() < max_k + 1 {
        return Err(Error::InvalidArgument(format!(
            "a family of {} cannot hold out one subject and still supply {max_k} atlases",
            family.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..family.len())
        .flat_map(|s| sizes.iter().map(move |&k| (s, k)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, k)| {
            let subject = family.get(s);
            let pool = family.without(s)?;
            let chosen = pool.select_by_age(subject.age_days, k)?;
            let mask = subject.labels.nonzero_mask().dilate(1);
            let res = run_vem(&chosen, &subject.intensity, &mask, table, cfg)?;
            Ok(JackknifeRun {
                subject_id: subject.id.clone(),
                age_days: subject.age_days,
                k,
                selected: chosen.ids().into_iter().map(String::from).collect(),
                report: report(&res.map_labels, &subject.labels, table, None)?,
                iterations: res.iterations,
                converged: res.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JackknifeTable {
        sizes: sizes.to_vec(),
        runs,
    })
}

impl JackknifeTable {
    /// Per subject, the `k` with the highest generalized Dice (ties to the
    /// smaller `k`); returns `(k, count)` for every size.
    pub fn winning_k(&self) -> Vec<(usize, usize)> {
        let mut sizes = self.sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        let mut counts = vec![0usize; sizes.len()];
        let mut subjects: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !subjects.contains(&r.subject_id.as_str()) {
                subjects.push(&r.subject_id);
            }
        }
        for s in subjects {
            let mut best: Option<&JackknifeRun> = None;
            for r in self.runs.iter().filter(|r| r.subject_id == s) {
                let better = match best {
                    None => true,
                    Some(b) => {
                        r.report.generalized_dice > b.report.generalized_dice
                            || (r.report.generalized_dice == b.report.generalized_dice && r.k < b.k)
                    }
                };
                if better {
                    best = Some(r);
                }
            }
            if let Some(b) = best {
                counts[sizes.binary_search(&b.k).expect("k among sizes")] += 1;
            }
        }
        sizes.into_iter().zip(counts).collect()
    }

    /// Mean and maximum generalized Dice per age group and `k`.
    pub fn age_groups(&self) -> Vec<AgeGroupSummary> {
        let mut out = Vec::new();
        for (name, _, _) in AGE_GROUPS {
            for &k in &self.sizes {
                let vals: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.k == k && age_group(r.age_days) == name)
                    .map(|r| r.report.generalized_dice)
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                out.push(AgeGroupSummary {
                    age_group: name.to_string(),
                    k,
                    n: vals.len(),
                    mean_gen_dice: vals.iter().sum::<f64>() / vals.len() as f64,
                    max_gen_dice: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
        out
    }

    /// One row per run: `subject_id,k,label_id,dice,gen_dice`, with
    /// `label_id = ALL` and `dice` the mean of the present per-label values.
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "k", "label_id", "dice", "gen_dice"])?;
        for r in &self.runs {
            w.write_record([
                r.subject_id.clone(),
                r.k.to_string(),
                "ALL".to_string(),
                r.report.mean_dice().map_or_else(|| "absent".into(), |d| d.to_string()),
                r.report.generalized_dice.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }

    /// Same schema, one row per run and label.
    pub fn write_label_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "k", "label_id", "dice", "gen_dice"])?;
        for r in &self.runs {
            for l in &r.report.labels {
                w.write_record([
                    r.subject_id.clone(),
                    r.k.to_string(),
                    l.label_id.to_string(),
                    l.dice.map_or_else(|| "absent".into(), |d| d.to_string()),
                    r.report.generalized_dice.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }

    /// Writes `path` (the run table) and, next to it, `*_labels.csv`,
    /// `winning_k.csv` and `age_groups.csv`. Returns every path written.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("jackknife");
        let create = |p: &Path| std::fs::File::create(p).map_err(|e| Error::io(p, e));

        self.write_csv(create(path)?)?;
        let labels_path = dir.join(format!("{stem}_labels.csv"));
        self.write_label_csv(create(&labels_path)?)?;

        let win_path = dir.join("winning_k.csv");
        let mut w = csv::Writer::from_writer(create(&win_path)?);
        w.write_record(["k", "count"])?;
        for (k, c) in self.winning_k() {
            w.write_record([k.to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&win_path, e))?;

        let age_path = dir.join("age_groups.csv");
        let mut w = csv::Writer::from_writer(create(&age_path)?);
        for row in self.age_groups() {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&age_path, e))?;
        Ok(vec![path.to_path_buf(), labels_path, win_path, age_path])
    }
}
