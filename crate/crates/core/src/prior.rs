//! Spatial priors: signed distance transforms of atlas label maps, the
//! logOdds label model built on them, and the Potts coupling of the
//! membership field.
//!
//! Sign convention: distances are negative inside a label's support and
//! positive outside. The logOdds logit of label `l` under atlas `n` is
//! `-rho * D_n^l(x)`, so an atlas's own label dominates near its support.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::AtlasSet;
use crate::error::{Error, Result};
use crate::io;
use crate::math::{log_softmax_into, softmax_into};
use crate::vem::MembershipPosterior;
use crate::volume::{GridMeta, LabelVolume, ScalarVolume, Volume};

pub const DEFAULT_D_MAX: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogOddsConfig {
    /// Slope of the logOdds model in 1/mm.
    pub rho: f64,
}

impl LogOddsConfig {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
        }
        Ok(LogOddsConfig { rho })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrfConfig {
    pub beta: f64,
}

impl MrfConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        Ok(MrfConfig { beta })
    }
}

/// Output of [`signed_edt`].
#[derive(Clone, Debug)]
pub struct SignedEdt {
    pub field: ScalarVolume,
    /// The label does not occur in the volume; the field is `+d_max` everywhere.
    pub label_absent: bool,
}

/// Squared 1D distance transform of a sampled function, in place.
///
/// `f` holds squared distances (or `INFINITY`) at unit-index positions with
/// physical spacing `s`. Lower envelope of parabolas (Felzenszwalb &
/// Huttenlocher), evaluated as `((p - q) s)^2 + f(q)`.
fn edt_1d(f: &mut [f64], s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let pq = q as f64 * s;
        let hq = f[q] + pq * pq;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let pr = r as f64 * s;
                    let x = (hq - (f[r] + pr * pr)) / (2.0 * (pq - pr));
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for p in 0..n {
        let pp = p as f64 * s;
        while k + 1 < v.len() && z[k + 1] < pp {
            k += 1;
        }
        let d = (p as f64 - v[k] as f64) * s;
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// voxel where `feature` is true. `INFINITY` when there is none.
pub fn squared_edt(meta: &GridMeta, feature: impl Fn(usize) -> bool) -> Vec<f64> {
    let [nx, ny, nz] = meta.dims;
    let mut d: Vec<f64> = (0..meta.len())
        .map(|i| if feature(i) { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    // x, then y, then z: the sum accumulates as ((dx^2 + dy^2) + dz^2).
    for axis in 0..3 {
        let (len, stride) = match axis {
            0 => (nx, 1),
            1 => (ny, nx),
            _ => (nz, nx * ny),
        };
        let s = meta.spacing[axis];
        for start in 0..meta.len() {
            let c = meta.coords(start);
            if c[axis] != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|t| d[start + t * stride]));
            edt_1d(&mut line, s, &mut v, &mut z, &mut out);
            for (t, &val) in line.iter().enumerate() {
                d[start + t * stride] = val;
            }
        }
    }
    d
}

/// Signed Euclidean distance (mm) to the boundary of `label_id`, clipped to
/// `[-d_max, d_max]`.
///
/// Outside voxels get the distance to the nearest voxel carrying the label;
/// inside voxels get minus the distance to the nearest voxel that does not.
pub fn signed_edt(labels: &LabelVolume, label_id: u32, d_max: f64) -> Result<SignedEdt> {
    if !(d_max > 0.0) {
        return Err(Error::InvalidArgument(format!("d_max must be positive, got {d_max}")));
    }
    let meta = *labels.meta();
    let data = labels.data();
    if !data.contains(&label_id) {
        return Ok(SignedEdt {
            field: ScalarVolume::filled(meta, d_max)?,
            label_absent: true,
        });
    }
    let to_object = squared_edt(&meta, |i| data[i] == label_id);
    let to_background = squared_edt(&meta, |i| data[i] != label_id);
    let field = (0..meta.len())
        .map(|i| {
            if data[i] == label_id {
                -to_background[i].sqrt().min(d_max)
            } else {
                to_object[i].sqrt().min(d_max)
            }
        })
        .collect();
    Ok(SignedEdt {
        field: Volume::from_vec(meta, field)?,
        label_absent: false,
    })
}

/// Signed distance fields for every (atlas, label) pair.
#[derive(Clone, Debug)]
pub struct DistanceField {
    labels: Vec<u32>,
    n_atlases: usize,
    d_max: f64,
    fields: Vec<ScalarVolume>,
    absent: Vec<bool>,
}

impl DistanceField {
    /// Computes (or loads from `cache_dir`) the fields for `labels` over
    /// every atlas in `atlases`. Cache files are `{atlas_id}_{label_id}.nii`.
    pub fn compute(
        atlases: &AtlasSet,
        labels: &[u32],
        d_max: f64,
        cache_dir: Option<&Path>,
    ) -> Result<DistanceField> {
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        let jobs: Vec<(usize, u32)> = (0..atlases.len())
            .flat_map(|n| labels.iter().map(move |&l| (n, l)))
            .collect();
        let results: Vec<Result<(ScalarVolume, bool)>> = jobs
            .par_iter()
            .map(|&(n, l)| {
                let atlas = atlases.get(n);
                let cached = cache_dir.map(|d| d.join(format!("{}_{}.nii", atlas.id, l)));
                if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
                    if let Ok(vol) = io::read_scalar(path) {
                        if vol.meta() == atlas.labels.meta() {
                            let absent = !atlas.labels.contains_label(l);
                            return Ok((vol.map(|d| d.clamp(-d_max, d_max)), absent));
                        }
                    }
                }
                let out = signed_edt(&atlas.labels, l, d_max)?;
                if let Some(path) = cached {
                    io::write_scalar(&out.field, path)?;
                }
                Ok((out.field, out.label_absent))
            })
            .collect();
        let mut fields = Vec::with_capacity(jobs.len());
        let mut absent = Vec::with_capacity(jobs.len());
        for r in results {
            let (f, a) = r?;
            fields.push(f);
            absent.push(a);
        }
        Ok(DistanceField {
            labels: labels.to_vec(),
            n_atlases: atlases.len(),
            d_max,
            fields,
            absent,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_atlases(&self) -> usize {
        self.n_atlases
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn field(&self, atlas: usize, label_index: usize) -> &ScalarVolume {
        &self.fields[atlas * self.labels.len() + label_index]
    }

    pub fn is_absent(&self, atlas: usize, label_index: usize) -> bool {
        self.absent[atlas * self.labels.len() + label_index]
    }

    #[inline]
    pub fn distance(&self, atlas: usize, label_index: usize, voxel: usize) -> f64 {
        self.fields[atlas * self.labels.len() + label_index].data()[voxel]
    }

    /// Log of the logOdds prior over all field labels at grid voxel `voxel`.
    pub fn log_prior_into(&self, atlas: usize, voxel: usize, rho: f64, out: &mut [f64]) {
        for (li, o) in out.iter_mut().enumerate() {
            *o = -rho * self.distance(atlas, li, voxel);
        }
        log_softmax_into(out);
    }

    /// logOdds prior of atlas `atlas` at grid voxel `voxel`, over `label_set`
    /// (a subset of the field labels), as probabilities summing to one.
    pub fn logodds_prior(
        &self,
        atlas: usize,
        voxel: usize,
        cfg: &LogOddsConfig,
        label_set: &[u32],
    ) -> Result<Vec<f64>> {
        if label_set.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        let mut logits = Vec::with_capacity(label_set.len());
        for &l in label_set {
            let li = self
                .labels
                .iter()
                .position(|&x| x == l)
                .ok_or(Error::UnknownLabel(l))?;
            logits.push(-cfg.rho * self.distance(atlas, li, voxel));
        }
        softmax_into(&mut logits);
        Ok(logits)
    }
}

/// Mean-field expectation of the Potts coupling for atlas `n` at domain
/// position `pos`: `beta * sum_{y in N(x)} q_y(n)`, with the neighbourhood
/// truncated at the domain boundary.
pub fn mrf_meanfield_logterm(q: &MembershipPosterior, pos: usize, n: usize, cfg: &MrfConfig) -> f64 {
    if cfg.beta == 0.0 {
        return 0.0;
    }
    let s: f64 = q.domain().neighbors(pos).map(|y| q.prob(y, n)).sum();
    cfg.beta * s
}
