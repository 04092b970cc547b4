//! Variational EM for multi-atlas label fusion.
//!
//! The generative model over the brain-mask domain `Ω`:
//!
//! * membership `M(x) ∈ {1..N}` follows a Potts MRF with coupling `beta`
//!   on each undirected 6-neighbour pair;
//! * given `M(x) = n`, the label `L(x)` follows the logOdds prior
//!   `π_{n,l}(x) = softmax_l(-rho D_n^l(x))` of atlas `n`;
//! * given `L(x) = l`, the bias-corrected intensity `I*(x)` follows the
//!   label's Gaussian mixture `f_l`, and `I = I* exp(-s)` with
//!   `s(x) = sum_p c_p psi_p(x)`.
//!
//! Marginalising the label, each voxel contributes the evidence
//! `e_n(x) = exp(s(x)) sum_l π_{n,l}(x) f_l(I*(x))` (the `exp(s)` factor is
//! the Jacobian of `I -> I*`). With a factorised posterior `q_x(n)` the free
//! energy (evidence lower bound, up to the constant `-log Z(beta)`) is
//!
//! ```text
//! F(q, θ) = Σ_x Σ_n q_x(n) [log e_n(x) - log q_x(n)]
//!         + beta Σ_{x~y} Σ_n q_x(n) q_y(n)
//! ```
//!
//! The E-step maximises `F` voxel by voxel,
//! `log q_x(n) = beta Σ_{y∈N(x)} q_y(n) + log e_n(x) + const`, sweeping
//! the two checkerboard colours in turn so every update is an exact
//! coordinate ascent step. Atlases without a gray/white distinction are
//! excluded (`q_x(n) = 0`) over their white matter and cortex.
//!
//! The M-step updates the mixtures by weighted EM and the bias by a
//! log-domain least-squares proposal; each update is kept only if `F` does
//! not decrease, with a backtracking line search on the bias proposal.

use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasSet, LabelTable};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::intensity::{
    fit_bias, m_step_mixture_samples, mixture_from_samples, BiasBasis, BiasModel, LabelMixture,
    Responsibilities,
};
use crate::math::{det_sum, log_sum_exp, softmax_into};
use crate::prior::{mrf_meanfield_logterm, DistanceField, MrfConfig};
use crate::volume::{LabelVolume, ScalarVolume, Volume};

/// Per-voxel categorical distribution over atlases.
#[derive(Clone, Debug)]
pub struct MembershipPosterior {
    domain: Arc<Domain>,
    n_atlases: usize,
    probs: Vec<f64>,
}

impl MembershipPosterior {
    pub fn from_probs(domain: Arc<Domain>, n_atlases: usize, probs: Vec<f64>) -> Result<Self> {
        if n_atlases == 0 || probs.len() != domain.len() * n_atlases {
            return Err(Error::InvalidArgument("membership matrix has the wrong size".into()));
        }
        for row in probs.chunks_exact(n_atlases) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("membership rows must be distributions".into()));
            }
        }
        Ok(MembershipPosterior {
            domain,
            n_atlases,
            probs,
        })
    }

    pub fn uniform(domain: Arc<Domain>, n_atlases: usize) -> Self {
        let probs = vec![1.0 / n_atlases as f64; domain.len() * n_atlases];
        MembershipPosterior {
            domain,
            n_atlases,
            probs,
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn n_atlases(&self) -> usize {
        self.n_atlases
    }

    #[inline]
    pub fn prob(&self, pos: usize, n: usize) -> f64 {
        self.probs[pos * self.n_atlases + n]
    }

    #[inline]
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.probs[pos * self.n_atlases..(pos + 1) * self.n_atlases]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `q(n)` over the full grid, zero outside the domain.
    pub fn atlas_volume(&self, n: usize) -> ScalarVolume {
        let vals: Vec<f64> = (0..self.domain.len()).map(|p| self.prob(p, n)).collect();
        Volume::from_vec(*self.domain.meta(), self.domain.scatter(&vals, 0.0)).expect("domain grid")
    }
}

/// Which `(position, atlas)` pairs the masking rule leaves open.
#[derive(Clone, Debug)]
pub struct MaskRule {
    allowed: Vec<bool>,
    /// Positions where every atlas was masked; the rule is lifted there.
    pub fallback: Vec<usize>,
    /// Number of `(position, atlas)` pairs that are excluded.
    pub masked_pairs: usize,
}

impl MaskRule {
    pub fn compute(domain: &Domain, atlases: &AtlasSet, table: &LabelTable) -> MaskRule {
        let n = atlases.len();
        let mut allowed = vec![true; domain.len() * n];
        let mut fallback = Vec::new();
        let mut masked_pairs = 0;
        for (pos, &v) in domain.voxels().iter().enumerate() {
            let row = &mut allowed[pos * n..(pos + 1) * n];
            for (a, atlas) in atlases.iter().enumerate() {
                if !atlas.has_wm && table.is_wm_or_cortex(atlas.labels.data()[v]) {
                    row[a] = false;
                }
            }
            if row.iter().all(|&ok| !ok) {
                row.fill(true);
                fallback.push(pos);
            } else {
                masked_pairs += row.iter().filter(|&&ok| !ok).count();
            }
        }
        MaskRule {
            allowed,
            fallback,
            masked_pairs,
        }
    }

    #[inline]
    pub fn allowed(&self, pos: usize, n: usize, n_atlases: usize) -> bool {
        self.allowed[pos * n_atlases + n]
    }
}

/// Zeroes `q_x(n)` for atlases flagged `has_wm = false` wherever their own
/// label is cerebral white matter or cortex, then renormalises. Voxels where
/// every atlas is excluded fall back to uniform over all atlases.
pub fn apply_mask_rule(
    q: &MembershipPosterior,
    atlases: &AtlasSet,
    table: &LabelTable,
) -> MembershipPosterior {
    let n = q.n_atlases;
    let rule = MaskRule::compute(&q.domain, atlases, table);
    let mut probs = q.probs.clone();
    for (pos, row) in probs.chunks_exact_mut(n).enumerate() {
        let mut touched = false;
        for (a, p) in row.iter_mut().enumerate() {
            if !rule.allowed(pos, a, n) {
                *p = 0.0;
                touched = true;
            }
        }
        // Untouched rows are returned bit for bit.
        if !touched {
            continue;
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|p| *p /= s);
        } else {
            row.fill(1.0 / n as f64);
        }
    }
    MembershipPosterior {
        domain: q.domain.clone(),
        n_atlases: n,
        probs,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepSchedule {
    /// Two-colour updates; each half-sweep is an exact coordinate ascent step.
    Checkerboard,
    /// Every voxel updated from the previous sweep. Faster to converge in
    /// practice but without a monotonicity guarantee.
    Synchronous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VemConfig {
    pub beta: f64,
    /// logOdds slope in 1/mm.
    pub rho: f64,
    pub max_outer_iters: usize,
    pub meanfield_sweeps_per_estep: usize,
    /// Relative free-energy change that ends the outer loop.
    pub tol: f64,
    pub seed: u64,
    pub schedule: SweepSchedule,
    /// Distance clip in mm.
    pub d_max: f64,
    /// Total degree of the bias basis; `None` disables bias estimation.
    pub bias_degree: Option<usize>,
    pub components: usize,
    /// Variance floor as a fraction of the squared intensity range.
    pub variance_floor_frac: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_cache: Option<PathBuf>,
}

impl Default for VemConfig {
    fn default() -> Self {
        VemConfig {
            beta: 0.5,
            rho: 1.0,
            max_outer_iters: 30,
            meanfield_sweeps_per_estep: 5,
            tol: 1e-5,
            seed: 0,
            schedule: SweepSchedule::Checkerboard,
            d_max: crate::prior::DEFAULT_D_MAX,
            bias_degree: Some(4),
            components: 1,
            variance_floor_frac: 1e-4,
            distance_cache: None,
        }
    }
}

impl VemConfig {
    pub fn validate(&self) -> Result<()> {
        MrfConfig::new(self.beta)?;
        crate::prior::LogOddsConfig::new(self.rho)?;
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if !(self.d_max > 0.0) {
            return Err(Error::InvalidArgument("d_max must be positive".into()));
        }
        if !(self.variance_floor_frac > 0.0) {
            return Err(Error::InvalidArgument("variance floor fraction must be positive".into()));
        }
        if self.meanfield_sweeps_per_estep == 0 {
            return Err(Error::InvalidArgument("at least one mean-field sweep per E-step".into()));
        }
        if !(1..=crate::intensity::MAX_COMPONENTS).contains(&self.components) {
            return Err(Error::InvalidArgument(format!(
                "components per label must be in 1..={}",
                crate::intensity::MAX_COMPONENTS
            )));
        }
        if self.bias_degree.is_some_and(|d| d > 6) {
            return Err(Error::InvalidArgument("bias degree above 6 is not supported".into()));
        }
        Ok(())
    }
}

/// Per-voxel categorical over labels.
#[derive(Clone, Debug)]
pub struct LabelPosterior {
    domain: Arc<Domain>,
    labels: Vec<u32>,
    probs: Vec<f64>,
}

impl LabelPosterior {
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    #[inline]
    pub fn row(&self, pos: usize) -> &[f64] {
        let l = self.labels.len();
        &self.probs[pos * l..(pos + 1) * l]
    }

    /// Posterior probability of `label` over the full grid (zero outside Ω).
    pub fn volume(&self, label: u32) -> Result<ScalarVolume> {
        let li = self
            .labels
            .iter()
            .position(|&l| l == label)
            .ok_or(Error::UnknownLabel(label))?;
        let vals: Vec<f64> = (0..self.domain.len()).map(|p| self.row(p)[li]).collect();
        Volume::from_vec(*self.domain.meta(), self.domain.scatter(&vals, 0.0))
    }

    /// Argmax label per voxel, ties to the lower label ID; 0 outside Ω.
    pub fn map_labels(&self) -> LabelVolume {
        let vals: Vec<u32> = (0..self.domain.len())
            .map(|p| {
                let row = self.row(p);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                self.labels[best]
            })
            .collect();
        Volume::from_vec(*self.domain.meta(), self.domain.scatter(&vals, 0)).expect("domain grid")
    }

    pub fn into_responsibilities(self) -> Result<Responsibilities> {
        Responsibilities::new(self.domain.voxels().to_vec(), self.labels, self.probs)
    }
}

/// Outcome of one guarded M-step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MStepReport {
    pub mixture_accepted: bool,
    /// Step length finally used for the bias proposal (0 = rejected).
    pub bias_step: f64,
    pub stale_labels: Vec<u32>,
}

/// Complete inference state for one segmentation problem.
#[derive(Clone, Debug)]
pub struct VemState {
    cfg: VemConfig,
    domain: Arc<Domain>,
    atlas_ids: Vec<String>,
    labels: Vec<u32>,
    /// `log π_{n,l}(x)`, laid out `[pos][n][l]`.
    log_prior: Vec<f64>,
    rule: MaskRule,
    image: ScalarVolume,
    /// Observed intensities on the domain.
    observed: Vec<f64>,
    basis: Option<BiasBasis>,
    bias: BiasModel,
    /// `s(x) = Σ c_p psi_p(x)` on the domain.
    log_field: Vec<f64>,
    mix: LabelMixture,
    q: MembershipPosterior,
    vote: Vec<u32>,
}

impl VemState {
    /// Builds distance priors and the masking rule, sets `q` uniform over the
    /// permitted atlases, and seeds the mixtures from a majority vote.
    pub fn initialize(
        atlases: &AtlasSet,
        image: &ScalarVolume,
        mask: &LabelVolume,
        table: &LabelTable,
        cfg: &VemConfig,
    ) -> Result<VemState> {
        cfg.validate()?;
        atlases.meta().ensure_same(image.meta(), "image vs atlases")?;
        atlases.meta().ensure_same(mask.meta(), "mask vs atlases")?;
        image.validate_finite()?;
        let domain = Arc::new(Domain::from_mask(mask)?);
        let n_at = atlases.len();

        let mut labels: Vec<u32> = atlases
            .iter()
            .flat_map(|a| domain.voxels().iter().map(move |&v| a.labels.data()[v]))
            .collect();
        labels.sort_unstable();
        labels.dedup();
        let n_lab = labels.len();

        let fields = DistanceField::compute(atlases, &labels, cfg.d_max, cfg.distance_cache.as_deref())?;
        let mut log_prior = vec![0.0; domain.len() * n_at * n_lab];
        log_prior
            .par_chunks_mut(n_at * n_lab)
            .enumerate()
            .for_each(|(pos, block)| {
                let v = domain.voxels()[pos];
                for (n, row) in block.chunks_exact_mut(n_lab).enumerate() {
                    fields.log_prior_into(n, v, cfg.rho, row);
                }
            });

        let rule = MaskRule::compute(&domain, atlases, table);
        let mut probs = vec![0.0; domain.len() * n_at];
        for (pos, row) in probs.chunks_exact_mut(n_at).enumerate() {
            let open = (0..n_at).filter(|&n| rule.allowed(pos, n, n_at)).count() as f64;
            for (n, p) in row.iter_mut().enumerate() {
                if rule.allowed(pos, n, n_at) {
                    *p = 1.0 / open;
                }
            }
        }
        let q = MembershipPosterior {
            domain: domain.clone(),
            n_atlases: n_at,
            probs,
        };

        let observed: Vec<f64> = domain.voxels().iter().map(|&v| image.data()[v]).collect();
        let vote: Vec<u32> = (0..domain.len())
            .map(|pos| {
                let v = domain.voxels()[pos];
                let mut counts = vec![0usize; n_lab];
                for (n, atlas) in atlases.iter().enumerate() {
                    if rule.allowed(pos, n, n_at) {
                        let l = atlas.labels.data()[v];
                        counts[labels.binary_search(&l).expect("label set")] += 1;
                    }
                }
                let mut best = 0;
                for (i, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = i;
                    }
                }
                labels[best]
            })
            .collect();

        let (lo, hi) = observed
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let range = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
        let floor = cfg.variance_floor_frac * range * range;
        let mut samples = vec![Vec::new(); n_lab];
        for (pos, &l) in vote.iter().enumerate() {
            samples[labels.binary_search(&l).unwrap()].push(observed[pos]);
        }
        let gm = observed.iter().sum::<f64>() / observed.len() as f64;
        let gv = observed.iter().map(|x| (x - gm) * (x - gm)).sum::<f64>() / observed.len() as f64;
        let mix = mixture_from_samples(&labels, &samples, cfg.components, floor, (gm, gv), cfg.seed)?;

        let (basis, bias) = match cfg.bias_degree {
            Some(d) => (Some(BiasBasis::new(&domain, d)), BiasModel::zero(d)),
            None => (None, BiasModel::zero(0)),
        };
        let log_field = vec![0.0; domain.len()];

        Ok(VemState {
            cfg: cfg.clone(),
            domain,
            atlas_ids: atlases.ids().into_iter().map(String::from).collect(),
            labels,
            log_prior,
            rule,
            image: image.clone(),
            observed,
            basis,
            bias,
            log_field,
            mix,
            q,
            vote,
        })
    }

    pub fn config(&self) -> &VemConfig {
        &self.cfg
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_atlases(&self) -> usize {
        self.atlas_ids.len()
    }

    pub fn atlas_ids(&self) -> &[String] {
        &self.atlas_ids
    }

    pub fn membership(&self) -> &MembershipPosterior {
        &self.q
    }

    pub fn mixture(&self) -> &LabelMixture {
        &self.mix
    }

    pub fn bias(&self) -> &BiasModel {
        &self.bias
    }

    pub fn mask_rule(&self) -> &MaskRule {
        &self.rule
    }

    /// Majority-vote labels used for initialisation, on the full grid.
    pub fn vote_labels(&self) -> LabelVolume {
        Volume::from_vec(*self.domain.meta(), self.domain.scatter(&self.vote, 0)).expect("domain grid")
    }

    /// `log π_{n,l}` at a domain position.
    pub fn log_prior_row(&self, pos: usize, n: usize) -> &[f64] {
        let nl = self.labels.len();
        let base = (pos * self.n_atlases() + n) * nl;
        &self.log_prior[base..base + nl]
    }

    pub fn set_mixture(&mut self, mix: LabelMixture) -> Result<()> {
        if mix.labels() != self.labels.as_slice() {
            return Err(Error::InvalidArgument("mixture labels differ from the model's label set".into()));
        }
        self.mix = mix;
        Ok(())
    }

    pub fn set_bias(&mut self, bias: BiasModel) -> Result<()> {
        let basis = self
            .basis
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("bias estimation is disabled".into()))?;
        if bias.degree != basis.degree() {
            return Err(Error::InvalidArgument("bias degree differs from the model's basis".into()));
        }
        self.log_field = basis.log_field(&bias);
        self.bias = bias;
        Ok(())
    }

    pub fn set_membership(&mut self, q: MembershipPosterior) -> Result<()> {
        if q.n_atlases != self.n_atlases() || q.domain.len() != self.domain.len() {
            return Err(Error::InvalidArgument("membership shape mismatch".into()));
        }
        self.q = q;
        Ok(())
    }

    /// Bias-corrected intensity at a domain position.
    #[inline]
    pub fn corrected(&self, pos: usize) -> f64 {
        self.observed[pos] * self.log_field[pos].exp()
    }

    /// Bias-corrected image on the full grid (unchanged outside Ω).
    pub fn corrected_image(&self) -> ScalarVolume {
        let mut data = self.image.data().to_vec();
        for (pos, &v) in self.domain.voxels().iter().enumerate() {
            data[v] = self.corrected(pos);
        }
        Volume::from_vec(*self.image.meta(), data).expect("image grid")
    }

    fn log_lik_row(&self, pos: usize, out: &mut [f64]) {
        let x = self.corrected(pos);
        for (li, o) in out.iter_mut().enumerate() {
            *o = self.mix.log_density(li, x);
        }
    }

    /// `log e_n(x)` for every position and atlas, laid out `[pos][n]`.
    pub fn log_evidence(&self) -> Vec<f64> {
        let n_at = self.n_atlases();
        let n_lab = self.labels.len();
        let mut out = vec![0.0; self.domain.len() * n_at];
        out.par_chunks_mut(n_at).enumerate().for_each(|(pos, row)| {
            let mut ll = vec![0.0; n_lab];
            let mut tmp = vec![0.0; n_lab];
            self.log_lik_row(pos, &mut ll);
            for (n, o) in row.iter_mut().enumerate() {
                let lp = self.log_prior_row(pos, n);
                for ((t, a), b) in tmp.iter_mut().zip(lp).zip(&ll) {
                    *t = a + b;
                }
                *o = log_sum_exp(&tmp) + self.log_field[pos];
            }
        });
        out
    }

    fn free_energy_with(&self, loge: &[f64]) -> f64 {
        let n_at = self.n_atlases();
        let beta = self.cfg.beta;
        let q = &self.q;
        det_sum(self.domain.len(), |pos| {
            let mut acc = 0.0;
            for n in 0..n_at {
                let p = q.prob(pos, n);
                if p > 0.0 {
                    acc += p * (loge[pos * n_at + n] - p.ln());
                }
            }
            if beta != 0.0 {
                // Each undirected edge counted once, from its lower endpoint.
                for y in self.domain.neighbors(pos).filter(|&y| y > pos) {
                    let dot: f64 = q.row(pos).iter().zip(q.row(y)).map(|(a, b)| a * b).sum();
                    acc += beta * dot;
                }
            }
            acc
        })
    }

    /// Evidence lower bound (see module docs), without `-log Z(beta)`.
    pub fn free_energy(&self) -> f64 {
        self.free_energy_with(&self.log_evidence())
    }

    fn update_rows(&self, positions: &[usize], loge: &[f64]) -> Vec<f64> {
        let n_at = self.n_atlases();
        let mrf = MrfConfig { beta: self.cfg.beta };
        let mut out = vec![0.0; positions.len() * n_at];
        out.par_chunks_mut(n_at)
            .zip(positions.par_iter())
            .for_each(|(row, &pos)| {
                for (n, r) in row.iter_mut().enumerate() {
                    *r = if self.rule.allowed(pos, n, n_at) {
                        mrf_meanfield_logterm(&self.q, pos, n, &mrf) + loge[pos * n_at + n]
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_into(row);
            });
        out
    }

    fn write_rows(&mut self, positions: &[usize], rows: &[f64]) {
        let n_at = self.n_atlases();
        for (&pos, row) in positions.iter().zip(rows.chunks_exact(n_at)) {
            self.q.probs[pos * n_at..(pos + 1) * n_at].copy_from_slice(row);
        }
    }

    /// Runs `meanfield_sweeps_per_estep` mean-field sweeps at fixed θ.
    pub fn e_step(&mut self) -> Result<()> {
        let loge = self.log_evidence();
        if let Some(i) = loge.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "log evidence at domain position {} is {}",
                i / self.n_atlases(),
                loge[i]
            )));
        }
        let colors: [Vec<usize>; 2] = {
            let mut c = [Vec::new(), Vec::new()];
            for pos in 0..self.domain.len() {
                c[self.domain.color(pos)].push(pos);
            }
            c
        };
        let all: Vec<usize> = (0..self.domain.len()).collect();
        for _ in 0..self.cfg.meanfield_sweeps_per_estep {
            match self.cfg.schedule {
                SweepSchedule::Checkerboard => {
                    for color in &colors {
                        let rows = self.update_rows(color, &loge);
                        self.write_rows(color, &rows);
                    }
                }
                SweepSchedule::Synchronous => {
                    let rows = self.update_rows(&all, &loge);
                    self.write_rows(&all, &rows);
                }
            }
        }
        Ok(())
    }

    /// `p_x(l) ∝ Σ_n q_x(n) π_{n,l}(x) f_l(I*(x)) / e_n(x)`: the label
    /// marginal of the model given the current membership posterior.
    pub fn label_posterior(&self) -> LabelPosterior {
        let n_at = self.n_atlases();
        let n_lab = self.labels.len();
        let mut probs = vec![0.0; self.domain.len() * n_lab];
        probs.par_chunks_mut(n_lab).enumerate().for_each(|(pos, out)| {
            let mut ll = vec![0.0; n_lab];
            let mut joint = vec![0.0; n_lab];
            self.log_lik_row(pos, &mut ll);
            for n in 0..n_at {
                let qn = self.q.prob(pos, n);
                if qn == 0.0 {
                    continue;
                }
                let lp = self.log_prior_row(pos, n);
                for ((j, a), b) in joint.iter_mut().zip(lp).zip(&ll) {
                    *j = a + b;
                }
                softmax_into(&mut joint);
                for (o, j) in out.iter_mut().zip(&joint) {
                    *o += qn * j;
                }
            }
            let s: f64 = out.iter().sum();
            out.iter_mut().for_each(|o| *o /= s);
        });
        LabelPosterior {
            domain: self.domain.clone(),
            labels: self.labels.clone(),
            probs,
        }
    }

    /// Label responsibilities for the M-step (the label posterior).
    pub fn responsibilities(&self) -> Result<Responsibilities> {
        self.label_posterior().into_responsibilities()
    }

    /// Mixture update then bias update, each kept only if the free energy
    /// does not drop.
    pub fn m_step(&mut self) -> Result<MStepReport> {
        let mut report = MStepReport::default();
        let f0 = self.free_energy();

        let resp = self.responsibilities()?;
        let samples: Vec<f64> = (0..self.domain.len()).map(|p| self.corrected(p)).collect();
        let fit = m_step_mixture_samples(&resp, &samples, &self.mix)?;
        report.stale_labels = fit.stale_labels;
        let old_mix = std::mem::replace(&mut self.mix, fit.mixture);
        let f1 = self.free_energy();
        let f_cur = if f1 >= f0 {
            report.mixture_accepted = true;
            f1
        } else {
            self.mix = old_mix;
            f0
        };

        if let Some(basis) = self.basis.clone() {
            let resp = self.responsibilities()?;
            let proposal = fit_bias(&resp, &self.image, &self.mix, &basis)?;
            let old = self.bias.clone();
            let mut step = 1.0;
            for _ in 0..12 {
                let coeffs = old
                    .coeffs
                    .iter()
                    .zip(&proposal.coeffs)
                    .map(|(a, b)| a + step * (b - a))
                    .collect();
                self.set_bias(BiasModel::from_coeffs(old.degree, coeffs)?)?;
                if self.free_energy() >= f_cur {
                    report.bias_step = step;
                    break;
                }
                step *= 0.5;
            }
            if report.bias_step == 0.0 {
                self.set_bias(old)?;
            }
        }
        Ok(report)
    }

    /// Final outputs at the current state.
    pub fn result(&self, trace: Vec<f64>, iterations: usize, converged: bool) -> SegmentationResult {
        let post = self.label_posterior();
        SegmentationResult {
            map_labels: post.map_labels(),
            label_posterior: post,
            membership: self.q.clone(),
            bias: self.bias.clone(),
            params: self.mix.clone(),
            free_energy_trace: trace,
            iterations,
            converged,
            fallback_voxels: self.rule.fallback.len(),
            atlas_ids: self.atlas_ids.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub map_labels: LabelVolume,
    pub label_posterior: LabelPosterior,
    pub membership: MembershipPosterior,
    pub bias: BiasModel,
    pub params: LabelMixture,
    /// Free energy after initialisation, then after every outer iteration.
    pub free_energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Voxels where every atlas was masked and the rule was lifted.
    pub fallback_voxels: usize,
    pub atlas_ids: Vec<String>,
}

/// Serializable model parameters θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mixture: LabelMixture,
    pub bias: BiasModel,
}

impl SegmentationResult {
    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            mixture: self.params.clone(),
            bias: self.bias.clone(),
        }
    }
}

/// Alternates E- and M-steps until the relative change of the free energy
/// drops below `tol` or `max_outer_iters` is reached.
pub fn run_vem(
    atlases: &AtlasSet,
    image: &ScalarVolume,
    mask: &LabelVolume,
    table: &LabelTable,
    cfg: &VemConfig,
) -> Result<SegmentationResult> {
    let mut state = VemState::initialize(atlases, image, mask, table, cfg)?;
    let mut trace = vec![state.free_energy()];
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_outer_iters {
        state.e_step()?;
        state.m_step()?;
        iters += 1;
        let f = state.free_energy();
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "free energy became {f} at outer iteration {iters}; trace so far {trace:?}; bias {:?}",
                state.bias.coeffs
            )));
        }
        let prev = *trace.last().unwrap();
        trace.push(f);
        log::debug!("vem iteration {iters}: free energy {f}");
        if (f - prev).abs() <= cfg.tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(state.result(trace, iters, converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{label_table, Atlas};
    use crate::volume::GridMeta;

    fn atlas(id: &str, labels: Vec<u32>, dims: [usize; 3], has_wm: bool) -> Atlas {
        let m = GridMeta::with_dims(dims).unwrap();
        let l = Volume::from_vec(m, labels).unwrap();
        Atlas::new(id, l.map(|x| x as f64), l, 100.0, has_wm).unwrap()
    }

    fn cfg() -> VemConfig {
        VemConfig {
            bias_degree: None,
            ..VemConfig::default()
        }
    }

    #[test]
    fn single_atlas_membership_is_one() {
        let a = atlas("a", vec![2, 2, 3, 3], [4, 1, 1], true);
        let set = AtlasSet::new(vec![a.clone()]).unwrap();
        let mask = LabelVolume::filled(*a.labels.meta(), 1).unwrap();
        let s = VemState::initialize(&set, &a.intensity, &mask, &label_table(), &cfg()).unwrap();
        assert!(s.membership().probs().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn identical_atlases_stay_uniform() {
        let a = atlas("a", vec![2, 2, 3, 3, 3, 2], [3, 2, 1], true);
        let mut b = a.clone();
        b.id = "b".into();
        let set = AtlasSet::new(vec![a.clone(), b]).unwrap();
        let mask = LabelVolume::filled(*a.labels.meta(), 1).unwrap();
        let mut s = VemState::initialize(&set, &a.intensity, &mask, &label_table(), &cfg()).unwrap();
        assert!(s.membership().probs().iter().all(|&p| p == 0.5));
        s.e_step().unwrap();
        assert!(s.membership().probs().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn mask_rule_examples() {
        let dims = [2, 1, 1];
        let wm = atlas("wm", vec![3, 3], dims, true);
        let nowm = atlas("nowm", vec![3, 9], dims, false);
        let table = label_table();
        let set = AtlasSet::new(vec![nowm, wm]).unwrap();
        let d = Arc::new(Domain::full(*set.meta()).unwrap());
        let q = MembershipPosterior::uniform(d.clone(), 2);
        let m = apply_mask_rule(&q, &set, &table);
        assert_eq!(m.row(0), &[0.0, 1.0]);
        assert_eq!(m.row(1), &[0.5, 0.5]);

        let all_wm = AtlasSet::new(vec![
            atlas("x", vec![3, 9], dims, true),
            atlas("y", vec![2, 2], dims, true),
        ])
        .unwrap();
        assert_eq!(apply_mask_rule(&q, &all_wm, &table).probs(), q.probs());

        // Every atlas masked at voxel 0: fall back to uniform.
        let both = AtlasSet::new(vec![
            atlas("x", vec![3, 9], dims, false),
            atlas("y", vec![41, 9], dims, false),
        ])
        .unwrap();
        let fb = apply_mask_rule(&q, &both, &table);
        assert_eq!(fb.row(0), &[0.5, 0.5]);
        assert_eq!(MaskRule::compute(&d, &both, &table).fallback, vec![0]);
    }

    #[test]
    fn beta_zero_single_sweep_is_exact_posterior() {
        let dims = [3, 2, 1];
        let a = atlas("a", vec![2, 2, 3, 3, 2, 3], dims, true);
        let b = atlas("b", vec![3, 2, 2, 3, 3, 3], dims, true);
        let image = Volume::from_vec(*a.labels.meta(), vec![10.0, 30.0, 12.0, 28.0, 31.0, 9.0]).unwrap();
        let set = AtlasSet::new(vec![a, b]).unwrap();
        let mask = LabelVolume::filled(*set.meta(), 1).unwrap();
        let c = VemConfig {
            beta: 0.0,
            meanfield_sweeps_per_estep: 1,
            ..cfg()
        };
        let mut s = VemState::initialize(&set, &image, &mask, &label_table(), &c).unwrap();
        s.e_step().unwrap();
        let loge = s.log_evidence();
        for pos in 0..6 {
            let z = (loge[2 * pos].exp()) + (loge[2 * pos + 1].exp());
            assert!((s.membership().prob(pos, 0) - loge[2 * pos].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn free_energy_degenerate_case() {
        let a = atlas("a", vec![2, 3, 3, 2], [4, 1, 1], true);
        let image = Volume::from_vec(*a.labels.meta(), vec![5.0, 20.0, 22.0, 7.0]).unwrap();
        let set = AtlasSet::new(vec![a]).unwrap();
        let mask = LabelVolume::filled(*set.meta(), 1).unwrap();
        let c = VemConfig { beta: 0.0, ..cfg() };
        let s = VemState::initialize(&set, &image, &mask, &label_table(), &c).unwrap();
        let mut expect = 0.0;
        for pos in 0..4 {
            let lp = s.log_prior_row(pos, 0);
            let x = image.data()[pos];
            let mut tot = 0.0;
            for (li, &l) in s.labels().iter().enumerate() {
                tot += lp[li].exp() * crate::intensity::likelihood(s.mixture(), l, x).unwrap();
            }
            expect += tot.ln();
        }
        assert!((s.free_energy() - expect).abs() < 1e-10);
    }

    #[test]
    fn bayes_arithmetic_for_label_posterior() {
        // One atlas whose both labels are absent from Ω's prior support
        // contrast: uniform prior, likelihood ratio 3:1.
        let a = atlas("a", vec![2, 3], [2, 1, 1], true);
        let set = AtlasSet::new(vec![a]).unwrap();
        let mask = LabelVolume::from_vec(*set.meta(), vec![1, 1]).unwrap();
        let image = ScalarVolume::filled(*set.meta(), 0.0).unwrap();
        let mut s = VemState::initialize(&set, &image, &mask, &label_table(), &VemConfig { rho: 1e-12, ..cfg() }).unwrap();
        // Same variance, means placed so that f_2(0) / f_3(0) = 3.
        let d = (2.0 * 3f64.ln()).sqrt();
        s.set_mixture(LabelMixture::single(vec![2, 3], &[0.0, d], &[1.0, 1.0], 1e-6).unwrap()).unwrap();
        let p = s.label_posterior();
        assert!((p.row(0)[0] - 0.75).abs() < 1e-9);
        assert!((p.row(0)[1] - 0.25).abs() < 1e-9);
    }
}
