//! Intensity model: a Gaussian mixture per label on the bias-corrected
//! image `I*`, and a multiplicative bias field
//! `I(x) = I*(x) * exp(-sum_p c_p psi_p(x))`.
//!
//! The bias basis is the set of tensor-product Legendre polynomials
//! `P_a(u) P_b(v) P_c(w)` with `a + b + c <= degree`, on grid coordinates
//! normalised to `[-1, 1]`. Basis functions are ordered by total degree,
//! then by descending x power, then descending y power, so `psi_0 = 1` and
//! `psi_1, psi_2, psi_3` are linear in x, y and z.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::math::{det_accumulate, log_sum_exp, normal_log_pdf};
use crate::volume::{GridMeta, ScalarVolume, Volume};

pub const MAX_COMPONENTS: usize = 3;
/// Labels whose total responsibility falls below this keep their parameters.
pub const MIN_LABEL_MASS: f64 = 1e-6;
pub const BIAS_DAMPING: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

/// Per-label Gaussian mixtures, in ascending label order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMixture {
    labels: Vec<u32>,
    components: Vec<Vec<Component>>,
    variance_floor: f64,
}

impl LabelMixture {
    pub fn new(labels: Vec<u32>, components: Vec<Vec<Component>>, variance_floor: f64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        if labels.len() != components.len() {
            return Err(Error::InvalidArgument("one component list per label is required".into()));
        }
        if !labels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("mixture labels must be strictly ascending".into()));
        }
        if !(variance_floor > 0.0) {
            return Err(Error::InvalidArgument("variance floor must be positive".into()));
        }
        for (l, comps) in labels.iter().zip(&components) {
            if comps.is_empty() || comps.len() > MAX_COMPONENTS {
                return Err(Error::InvalidArgument(format!(
                    "label {l}: 1..={MAX_COMPONENTS} components allowed"
                )));
            }
            let wsum: f64 = comps.iter().map(|c| c.weight).sum();
            if (wsum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("label {l}: weights sum to {wsum}")));
            }
            if comps
                .iter()
                .any(|c| !(c.weight > 0.0 && c.weight <= 1.0 && c.var > 0.0 && c.mean.is_finite()))
            {
                return Err(Error::InvalidArgument(format!("label {l}: invalid component")));
            }
        }
        Ok(LabelMixture {
            labels,
            components,
            variance_floor,
        })
    }

    /// One Gaussian per label.
    pub fn single(labels: Vec<u32>, means: &[f64], vars: &[f64], variance_floor: f64) -> Result<Self> {
        let comps = means
            .iter()
            .zip(vars)
            .map(|(&mean, &var)| {
                vec![Component {
                    weight: 1.0,
                    mean,
                    var,
                }]
            })
            .collect();
        LabelMixture::new(labels, comps, variance_floor)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    pub fn index_of(&self, label: u32) -> Result<usize> {
        self.labels
            .binary_search(&label)
            .map_err(|_| Error::UnknownLabel(label))
    }

    pub fn components(&self, label_index: usize) -> &[Component] {
        &self.components[label_index]
    }

    /// Mixture mean of a label.
    pub fn label_mean(&self, label_index: usize) -> f64 {
        self.components[label_index]
            .iter()
            .map(|c| c.weight * c.mean)
            .sum()
    }

    /// Log density of the label's mixture at `x`, by log-sum-exp.
    #[inline]
    pub fn log_density(&self, label_index: usize, x: f64) -> f64 {
        let comps = &self.components[label_index];
        if let [c] = comps.as_slice() {
            return normal_log_pdf(x, c.mean, c.var);
        }
        let mut terms = [0.0; MAX_COMPONENTS];
        for (t, c) in terms.iter_mut().zip(comps) {
            *t = c.weight.ln() + normal_log_pdf(x, c.mean, c.var);
        }
        log_sum_exp(&terms[..comps.len()])
    }

    fn component_posteriors(&self, label_index: usize, x: f64, out: &mut [f64; MAX_COMPONENTS]) {
        let comps = &self.components[label_index];
        if comps.len() == 1 {
            out[0] = 1.0;
            return;
        }
        for (o, c) in out.iter_mut().zip(comps) {
            *o = c.weight.ln() + normal_log_pdf(x, c.mean, c.var);
        }
        let lse = log_sum_exp(&out[..comps.len()]);
        for o in out.iter_mut().take(comps.len()) {
            *o = (*o - lse).exp();
        }
    }
}

/// Mixture density of `label` at bias-corrected intensity `intensity`.
pub fn likelihood(mix: &LabelMixture, label: u32, intensity: f64) -> Result<f64> {
    let li = mix.index_of(label)?;
    Ok(mix.log_density(li, intensity).exp())
}

pub fn log_likelihood(mix: &LabelMixture, label: u32, intensity: f64) -> Result<f64> {
    let li = mix.index_of(label)?;
    Ok(mix.log_density(li, intensity))
}

/// Number of basis functions for a total degree.
pub fn basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 2) * (degree + 3) / 6
}

fn legendre(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..n {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// Exponent triples of the basis, in basis order.
pub fn basis_powers(degree: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(basis_len(degree));
    for t in 0..=degree {
        for a in (0..=t).rev() {
            for b in (0..=(t - a)).rev() {
                out.push([a, b, t - a - b]);
            }
        }
    }
    out
}

fn normalized_coords(meta: &GridMeta, idx: usize) -> [f64; 3] {
    let c = meta.coords(idx);
    let mut u = [0.0; 3];
    for a in 0..3 {
        let n = meta.dims[a];
        u[a] = if n > 1 {
            2.0 * c[a] as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        };
    }
    u
}

fn eval_basis_at(meta: &GridMeta, powers: &[[usize; 3]], idx: usize, out: &mut [f64]) {
    let u = normalized_coords(meta, idx);
    for (o, p) in out.iter_mut().zip(powers) {
        *o = legendre(p[0], u[0]) * legendre(p[1], u[1]) * legendre(p[2], u[2]);
    }
}

/// Smooth multiplicative bias: `exp(-sum_p c_p psi_p)` scales the true image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasModel {
    pub degree: usize,
    pub coeffs: Vec<f64>,
}

impl BiasModel {
    pub fn zero(degree: usize) -> Self {
        BiasModel {
            degree,
            coeffs: vec![0.0; basis_len(degree)],
        }
    }

    pub fn from_coeffs(degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis_len(degree) {
            return Err(Error::InvalidArgument(format!(
                "degree {degree} needs {} coefficients, got {}",
                basis_len(degree),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("bias coefficient".into()));
        }
        Ok(BiasModel { degree, coeffs })
    }

    /// `sum_p c_p psi_p` at grid voxel `idx`.
    pub fn log_field_at(&self, meta: &GridMeta, idx: usize) -> f64 {
        let powers = basis_powers(self.degree);
        let mut psi = vec![0.0; powers.len()];
        eval_basis_at(meta, &powers, idx, &mut psi);
        psi.iter().zip(&self.coeffs).map(|(p, c)| p * c).sum()
    }

    /// `sum_p c_p psi_p` over the whole grid.
    pub fn log_field(&self, meta: &GridMeta) -> Vec<f64> {
        let powers = basis_powers(self.degree);
        let mut psi = vec![0.0; powers.len()];
        (0..meta.len())
            .map(|idx| {
                eval_basis_at(meta, &powers, idx, &mut psi);
                psi.iter().zip(&self.coeffs).map(|(p, c)| p * c).sum()
            })
            .collect()
    }
}

/// Corrupts a true image: `I = I* exp(-sum c psi)`.
pub fn apply_bias(i_star: &ScalarVolume, bias: &BiasModel) -> ScalarVolume {
    let field = bias.log_field(i_star.meta());
    let data = i_star
        .data()
        .iter()
        .zip(&field)
        .map(|(&v, &s)| v * (-s).exp())
        .collect();
    Volume::from_vec(*i_star.meta(), data).expect("same grid")
}

/// Inverse of [`apply_bias`]: `I* = I exp(+sum c psi)`.
pub fn correct_bias(image: &ScalarVolume, bias: &BiasModel) -> ScalarVolume {
    let field = bias.log_field(image.meta());
    let data = image
        .data()
        .iter()
        .zip(&field)
        .map(|(&v, &s)| v * s.exp())
        .collect();
    Volume::from_vec(*image.meta(), data).expect("same grid")
}

/// Basis values tabulated on the voxels of a domain.
#[derive(Clone, Debug)]
pub struct BiasBasis {
    degree: usize,
    width: usize,
    values: Vec<f64>,
}

impl BiasBasis {
    pub fn new(domain: &Domain, degree: usize) -> Self {
        let powers = basis_powers(degree);
        let width = powers.len();
        let mut values = vec![0.0; domain.len() * width];
        for (pos, row) in values.chunks_exact_mut(width).enumerate() {
            eval_basis_at(domain.meta(), &powers, domain.voxels()[pos], row);
        }
        BiasBasis {
            degree,
            width,
            values,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0
    }

    #[inline]
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.values[pos * self.width..(pos + 1) * self.width]
    }

    /// `sum_p c_p psi_p` at every domain position.
    pub fn log_field(&self, bias: &BiasModel) -> Vec<f64> {
        self.values
            .chunks_exact(self.width)
            .map(|row| row.iter().zip(&bias.coeffs).map(|(p, c)| p * c).sum())
            .collect()
    }
}

/// Per-voxel soft label assignments over a domain.
#[derive(Clone, Debug)]
pub struct Responsibilities {
    voxels: Vec<usize>,
    labels: Vec<u32>,
    weights: Vec<f64>,
}

impl Responsibilities {
    pub fn new(voxels: Vec<usize>, labels: Vec<u32>, weights: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        if weights.len() != voxels.len() * labels.len() {
            return Err(Error::InvalidArgument("responsibility matrix has the wrong size".into()));
        }
        for row in weights.chunks_exact(labels.len()) {
            if row.iter().any(|&w| !(w >= 0.0)) || row.iter().sum::<f64>() > 1.0 + 1e-9 {
                return Err(Error::InvalidArgument(
                    "responsibilities must be non-negative with row sums <= 1".into(),
                ));
            }
        }
        Ok(Responsibilities {
            voxels,
            labels,
            weights,
        })
    }

    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn row(&self, pos: usize) -> &[f64] {
        let l = self.labels.len();
        &self.weights[pos * l..(pos + 1) * l]
    }
}

/// Result of a mixture M-step.
#[derive(Clone, Debug)]
pub struct MixtureFit {
    pub mixture: LabelMixture,
    /// Labels with (near) zero responsibility that kept their old parameters.
    pub stale_labels: Vec<u32>,
}

/// Weighted EM update of every label's mixture.
///
/// Within-label component posteriors come from the current mixture, then
/// weights, means and variances are re-estimated as responsibility-weighted
/// moments, with variances floored.
pub fn m_step_mixture(
    resp: &Responsibilities,
    i_star: &ScalarVolume,
    mix: &LabelMixture,
) -> Result<MixtureFit> {
    let data = i_star.data();
    let samples: Vec<f64> = resp.voxels.iter().map(|&v| data[v]).collect();
    m_step_mixture_samples(resp, &samples, mix)
}

/// As [`m_step_mixture`], with intensities already gathered per domain position.
pub fn m_step_mixture_samples(
    resp: &Responsibilities,
    samples: &[f64],
    mix: &LabelMixture,
) -> Result<MixtureFit> {
    let n_lab = resp.labels.len();
    let label_idx: Vec<usize> = resp
        .labels
        .iter()
        .map(|&l| mix.index_of(l))
        .collect::<Result<_>>()?;
    let k_max = MAX_COMPONENTS;
    let width = n_lab * k_max;
    let n_vox = resp.voxels.len();

    // Pass 1: component masses and first moments.
    let first = det_accumulate(n_vox, 2 * width, |pos, acc| {
        let row = resp.row(pos);
        let x = samples[pos];
        let mut gamma = [0.0; MAX_COMPONENTS];
        for (l, &r) in row.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let li = label_idx[l];
            mix.component_posteriors(li, x, &mut gamma);
            for (k, &g) in gamma.iter().enumerate().take(mix.components[li].len()) {
                let w = r * g;
                acc[l * k_max + k] += w;
                acc[width + l * k_max + k] += w * x;
            }
        }
    });
    let total_mass: f64 = first[..width].iter().sum();
    if !(total_mass > 0.0) {
        return Err(Error::InvalidArgument(
            "responsibilities are zero for every label".into(),
        ));
    }
    let means: Vec<f64> = (0..width)
        .map(|i| if first[i] > 0.0 { first[width + i] / first[i] } else { 0.0 })
        .collect();

    // Pass 2: centred second moments around the new means.
    let second = det_accumulate(n_vox, width, |pos, acc| {
        let row = resp.row(pos);
        let x = samples[pos];
        let mut gamma = [0.0; MAX_COMPONENTS];
        for (l, &r) in row.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let li = label_idx[l];
            mix.component_posteriors(li, x, &mut gamma);
            for (k, &g) in gamma.iter().enumerate().take(mix.components[li].len()) {
                let d = x - means[l * k_max + k];
                acc[l * k_max + k] += r * g * d * d;
            }
        }
    });

    let mut out = mix.clone();
    let mut stale = Vec::new();
    for (l, &li) in label_idx.iter().enumerate() {
        let comps = &mix.components[li];
        let label_mass: f64 = (0..comps.len()).map(|k| first[l * k_max + k]).sum();
        if label_mass < MIN_LABEL_MASS {
            stale.push(resp.labels[l]);
            continue;
        }
        let mut updated = comps.clone();
        for (k, c) in updated.iter_mut().enumerate() {
            let mass = first[l * k_max + k];
            if mass < MIN_LABEL_MASS * 1e-3 {
                continue;
            }
            c.weight = mass / label_mass;
            c.mean = means[l * k_max + k];
            c.var = (second[l * k_max + k] / mass).max(mix.variance_floor);
        }
        // Components that were skipped keep their weight share; renormalise.
        let wsum: f64 = updated.iter().map(|c| c.weight).sum();
        for c in updated.iter_mut() {
            c.weight /= wsum;
        }
        out.components[li] = updated;
    }
    Ok(MixtureFit {
        mixture: out,
        stale_labels: stale,
    })
}

/// Initial mixture from hard per-label samples. For more than one component,
/// component means are seeded by weighted random draws from the label's
/// samples (k-means++ style), each starting from the label variance.
pub fn mixture_from_samples(
    labels: &[u32],
    samples: &[Vec<f64>],
    components: usize,
    variance_floor: f64,
    fallback: (f64, f64),
    seed: u64,
) -> Result<LabelMixture> {
    if !(1..=MAX_COMPONENTS).contains(&components) {
        return Err(Error::InvalidArgument(format!(
            "components per label must be in 1..={MAX_COMPONENTS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(labels.len());
    for xs in samples {
        let (mean, var) = if xs.is_empty() {
            fallback
        } else {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
        };
        let var = var.max(variance_floor);
        let mut comps = Vec::with_capacity(components);
        let mut centres: Vec<f64> = vec![mean];
        while centres.len() < components {
            let next = if xs.is_empty() {
                mean + var.sqrt() * centres.len() as f64
            } else {
                let d2: Vec<f64> = xs
                    .iter()
                    .map(|x| centres.iter().map(|c| (x - c) * (x - c)).fold(f64::INFINITY, f64::min))
                    .collect();
                let tot: f64 = d2.iter().sum();
                if tot > 0.0 {
                    let mut u = rng.random::<f64>() * tot;
                    let mut pick = xs[xs.len() - 1];
                    for (x, d) in xs.iter().zip(&d2) {
                        if u < *d {
                            pick = *x;
                            break;
                        }
                        u -= d;
                    }
                    pick
                } else {
                    mean + var.sqrt() * centres.len() as f64
                }
            };
            centres.push(next);
        }
        for c in centres {
            comps.push(Component {
                weight: 1.0 / components as f64,
                mean: c,
                var,
            });
        }
        all.push(comps);
    }
    LabelMixture::new(labels.to_vec(), all, variance_floor)
}

/// Weighted least-squares bias fit in the log domain.
///
/// Regresses `r(x) = log I(x) - log pred(x)` on `-psi_p(x)`, where `pred` is
/// the responsibility-weighted mixture mean at `x`, with weights equal to
/// the responsibility mass at `x`. Intensities are floored at `1e-6 * max`.
pub fn fit_bias(
    resp: &Responsibilities,
    image: &ScalarVolume,
    mix: &LabelMixture,
    basis: &BiasBasis,
) -> Result<BiasModel> {
    let n_vox = resp.voxels.len();
    let p = basis.len();
    let label_means: Vec<f64> = resp
        .labels
        .iter()
        .map(|&l| mix.index_of(l).map(|li| mix.label_mean(li)))
        .collect::<Result<_>>()?;
    let data = image.data();
    let max = resp
        .voxels
        .iter()
        .map(|&v| data[v])
        .fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidArgument("image has no positive intensities".into()));
    }
    let floor = 1e-6 * max;
    let pred_floor = 1e-6 * label_means.iter().copied().fold(0.0f64, f64::max).max(floor);

    // Accumulate the upper triangle of A = Psi^T W Psi and b = -Psi^T W r.
    let tri = p * (p + 1) / 2;
    let acc = det_accumulate(n_vox, tri + p, |pos, acc| {
        let row = resp.row(pos);
        let w: f64 = row.iter().sum();
        if w == 0.0 {
            return;
        }
        let pred: f64 = row.iter().zip(&label_means).map(|(r, m)| r * m).sum::<f64>() / w;
        let r = data[resp.voxels[pos]].max(floor).ln() - pred.max(pred_floor).ln();
        let psi = basis.row(pos);
        let mut t = 0;
        for a in 0..p {
            let wa = w * psi[a];
            for &pb in &psi[a..] {
                acc[t] += wa * pb;
                t += 1;
            }
            acc[tri + a] -= wa * r;
        }
    });
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut t = 0;
    for i in 0..p {
        for j in i..p {
            a[(i, j)] = acc[t];
            a[(j, i)] = acc[t];
            t += 1;
        }
        a[(i, i)] += BIAS_DAMPING;
    }
    let b = DVector::from_column_slice(&acc[tri..]);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::NonFinite("bias normal equations are not positive definite".into()))?;
    let c = chol.solve(&b);
    BiasModel::from_coeffs(basis.degree(), c.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::LabelVolume;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn one(mean: f64, var: f64) -> LabelMixture {
        LabelMixture::single(vec![1], &[mean], &[var], 1e-6).unwrap()
    }

    #[test]
    fn gaussian_peak() {
        let v = likelihood(&one(100.0, 25.0), 1, 100.0).unwrap();
        assert!((v - 0.079_788_456_080_286_54).abs() < 1e-15);
        assert!(matches!(likelihood(&one(1.0, 1.0), 7, 0.0), Err(Error::UnknownLabel(7))));
    }

    #[test]
    fn duplicate_components_collapse() {
        let c = Component { weight: 0.5, mean: 30.0, var: 4.0 };
        let two = LabelMixture::new(vec![1], vec![vec![c, c]], 1e-6).unwrap();
        for x in [20.0, 29.0, 30.0, 41.0] {
            let a = likelihood(&two, 1, x).unwrap();
            let b = likelihood(&one(30.0, 4.0), 1, x).unwrap();
            assert!((a - b).abs() <= 1e-15 * b.max(1e-300));
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let mix = LabelMixture::new(
            vec![4],
            vec![vec![
                Component { weight: 0.3, mean: 40.0, var: 9.0 },
                Component { weight: 0.7, mean: 55.0, var: 30.0 },
            ]],
            1e-6,
        )
        .unwrap();
        // Trapezoid rule on [0, 100] with h = 0.01.
        let h = 0.01;
        let n = 10_000;
        let mut s = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * likelihood(&mix, 4, i as f64 * h).unwrap();
        }
        assert!((s * h - 1.0).abs() < 1e-4);
    }

    #[test]
    fn basis_layout() {
        assert_eq!(basis_len(4), 35);
        assert_eq!(basis_len(2), 10);
        let p = basis_powers(2);
        assert_eq!(p[0], [0, 0, 0]);
        assert_eq!(p[1], [1, 0, 0]);
        assert_eq!(p[2], [0, 1, 0]);
        assert_eq!(p[3], [0, 0, 1]);
        assert_eq!(p.len(), 10);
        assert!((legendre(2, 0.5) - (-0.125)).abs() < 1e-15);
        assert!((legendre(4, 1.0) - 1.0).abs() < 1e-15);
    }

    fn ramp(dims: [usize; 3]) -> ScalarVolume {
        Volume::from_fn(GridMeta::with_dims(dims).unwrap(), |i, j, k| 10.0 + i as f64 + 2.0 * j as f64 + 0.5 * k as f64).unwrap()
    }

    #[test]
    fn zero_bias_is_identity_and_ln2_halves() {
        let v = ramp([4, 3, 2]);
        assert_eq!(apply_bias(&v, &BiasModel::zero(3)), v);
        let mut b = BiasModel::zero(1);
        b.coeffs[0] = 2f64.ln();
        let halved = apply_bias(&v, &b);
        for (h, x) in halved.data().iter().zip(v.data()) {
            assert!((h - x / 2.0).abs() <= 1e-14 * x);
        }
    }

    proptest! {
        #[test]
        fn bias_roundtrip(coeffs in proptest::collection::vec(-0.5f64..0.5, 20)) {
            let v = ramp([5, 4, 3]);
            let b = BiasModel::from_coeffs(3, coeffs).unwrap();
            let back = correct_bias(&apply_bias(&v, &b), &b);
            for (x, y) in back.data().iter().zip(v.data()) {
                prop_assert!((x - y).abs() <= 1e-10 * y.abs());
            }
        }

        #[test]
        fn likelihood_permutation_invariant(m1 in 0.0f64..100.0, m2 in 0.0f64..100.0, w in 0.05f64..0.95, x in 0.0f64..100.0) {
            let a = Component { weight: w, mean: m1, var: 10.0 };
            let b = Component { weight: 1.0 - w, mean: m2, var: 3.0 };
            let ab = LabelMixture::new(vec![1], vec![vec![a, b]], 1e-6).unwrap();
            let ba = LabelMixture::new(vec![1], vec![vec![b, a]], 1e-6).unwrap();
            let p = likelihood(&ab, 1, x).unwrap();
            let q = likelihood(&ba, 1, x).unwrap();
            prop_assert!((p - q).abs() <= 1e-14 * p.max(q) + 1e-300);
            prop_assert!(p > 0.0);
        }
    }

    fn full_resp(n: usize, labels: Vec<u32>, weights: Vec<f64>) -> Responsibilities {
        Responsibilities::new((0..n).collect(), labels, weights).unwrap()
    }

    #[test]
    fn single_label_mle() {
        let xs = [3.0, 5.0, 10.0, 2.0];
        let v = Volume::from_vec(GridMeta::with_dims([4, 1, 1]).unwrap(), xs.to_vec()).unwrap();
        let fit = m_step_mixture(&full_resp(4, vec![1], vec![1.0; 4]), &v, &one(0.0, 1.0)).unwrap();
        let c = fit.mixture.components(0)[0];
        assert!((c.mean - 5.0).abs() < 1e-14);
        assert!((c.var - 9.5).abs() < 1e-12);
        assert!(fit.stale_labels.is_empty());
    }

    #[test]
    fn crisp_two_labels_hit_floor() {
        let xs = [7.0, 7.0, 7.0, 20.0, 20.0];
        let v = Volume::from_vec(GridMeta::with_dims([5, 1, 1]).unwrap(), xs.to_vec()).unwrap();
        let mix = LabelMixture::single(vec![1, 2], &[0.0, 1.0], &[1.0, 1.0], 0.25).unwrap();
        let w = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let fit = m_step_mixture(&full_resp(5, vec![1, 2], w), &v, &mix).unwrap();
        assert_eq!(fit.mixture.components(0)[0].mean, 7.0);
        assert_eq!(fit.mixture.components(1)[0].mean, 20.0);
        assert_eq!(fit.mixture.components(0)[0].var, 0.25);
        assert_eq!(fit.mixture.components(1)[0].var, 0.25);
    }

    #[test]
    fn empty_label_is_stale_and_all_zero_fails() {
        let v = ramp([3, 1, 1]);
        let mix = LabelMixture::single(vec![1, 2], &[10.0, 50.0], &[1.0, 2.0], 1e-3).unwrap();
        let fit = m_step_mixture(&full_resp(3, vec![1, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]), &v, &mix).unwrap();
        assert_eq!(fit.stale_labels, vec![2]);
        assert_eq!(fit.mixture.components(1), mix.components(1));
        assert!(m_step_mixture(&full_resp(3, vec![1, 2], vec![0.0; 6]), &v, &mix).is_err());
    }

    /// Expected complete-data log-likelihood, computed directly.
    fn q_function(resp: &Responsibilities, xs: &[f64], old: &LabelMixture, new: &LabelMixture) -> f64 {
        let mut total = 0.0;
        for (pos, &x) in xs.iter().enumerate() {
            for (l, &r) in resp.row(pos).iter().enumerate() {
                let comps_old = old.components(l);
                let dens: Vec<f64> = comps_old
                    .iter()
                    .map(|c| c.weight * (-(x - c.mean).powi(2) / (2.0 * c.var)).exp() / (2.0 * std::f64::consts::PI * c.var).sqrt())
                    .collect();
                let z: f64 = dens.iter().sum();
                for (k, c) in new.components(l).iter().enumerate() {
                    let g = dens[k] / z;
                    total += r * g * (c.weight.ln() - 0.5 * (2.0 * std::f64::consts::PI * c.var).ln() - (x - c.mean).powi(2) / (2.0 * c.var));
                }
            }
        }
        total
    }

    #[test]
    fn soft_em_step_does_not_decrease_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400;
        let xs: Vec<f64> = (0..n)
            .map(|i| {
                let m = if i % 3 == 0 { 20.0 } else { 60.0 };
                m + Normal::new(0.0, 6.0).unwrap().sample(&mut rng)
            })
            .collect();
        let mut w = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random();
            w.push(a);
            w.push(1.0 - a);
        }
        let resp = full_resp(n, vec![1, 2], w);
        let vol = Volume::from_vec(GridMeta::with_dims([n, 1, 1]).unwrap(), xs.clone()).unwrap();
        let mix = LabelMixture::new(
            vec![1, 2],
            vec![
                vec![Component { weight: 0.5, mean: 10.0, var: 50.0 }, Component { weight: 0.5, mean: 40.0, var: 50.0 }],
                vec![Component { weight: 1.0, mean: 30.0, var: 100.0 }],
            ],
            1e-3,
        )
        .unwrap();
        let fit = m_step_mixture(&resp, &vol, &mix).unwrap();
        let before = q_function(&resp, &xs, &mix, &mix);
        let after = q_function(&resp, &xs, &mix, &fit.mixture);
        assert!(after >= before - 1e-9, "{after} < {before}");
    }

    fn bias_setup(dims: [usize; 3]) -> (Domain, LabelVolume, ScalarVolume) {
        let meta = GridMeta::with_dims(dims).unwrap();
        let labels = Volume::from_fn(meta, |i, j, _| if (i + j) % 3 == 0 { 1 } else { 2 }).unwrap();
        let i_star = labels.map(|l| if l == 1 { 40.0 } else { 100.0 });
        (Domain::full(meta).unwrap(), labels, i_star)
    }

    fn crisp_resp(domain: &Domain, labels: &LabelVolume) -> Responsibilities {
        let mut w = Vec::new();
        for &v in domain.voxels() {
            let l = labels.data()[v];
            w.push(f64::from(l == 1));
            w.push(f64::from(l == 2));
        }
        Responsibilities::new(domain.voxels().to_vec(), vec![1, 2], w).unwrap()
    }

    #[test]
    fn null_bias_is_recovered_as_zero() {
        let (domain, labels, i_star) = bias_setup([6, 5, 4]);
        let mix = LabelMixture::single(vec![1, 2], &[40.0, 100.0], &[1.0, 1.0], 1e-3).unwrap();
        let basis = BiasBasis::new(&domain, 2);
        let fit = fit_bias(&crisp_resp(&domain, &labels), &i_star, &mix, &basis).unwrap();
        assert!(fit.coeffs.iter().all(|c| c.abs() < 1e-6));
    }

    #[test]
    fn injected_linear_bias_is_recovered() {
        let (domain, labels, i_star) = bias_setup([8, 7, 6]);
        let mut truth = BiasModel::zero(2);
        truth.coeffs[1] = 0.2;
        let image = apply_bias(&i_star, &truth);
        let mix = LabelMixture::single(vec![1, 2], &[40.0, 100.0], &[1.0, 1.0], 1e-3).unwrap();
        let basis = BiasBasis::new(&domain, 2);
        let fit = fit_bias(&crisp_resp(&domain, &labels), &image, &mix, &basis).unwrap();
        assert!((fit.coeffs[1] - 0.2).abs() < 0.01);
    }

    #[test]
    fn doubling_intensities_moves_only_the_constant() {
        let (domain, labels, i_star) = bias_setup([6, 6, 5]);
        let mut truth = BiasModel::zero(2);
        truth.coeffs[2] = -0.1;
        truth.coeffs[5] = 0.05;
        let image = apply_bias(&i_star, &truth);
        let doubled = image.map(|v| 2.0 * v);
        let mix = LabelMixture::single(vec![1, 2], &[38.0, 97.0], &[1.0, 1.0], 1e-3).unwrap();
        let basis = BiasBasis::new(&domain, 2);
        let resp = crisp_resp(&domain, &labels);
        let a = fit_bias(&resp, &image, &mix, &basis).unwrap();
        let b = fit_bias(&resp, &doubled, &mix, &basis).unwrap();
        assert!((a.coeffs[0] - b.coeffs[0] - 2f64.ln()).abs() < 1e-8);
        for p in 1..a.coeffs.len() {
            assert!((a.coeffs[p] - b.coeffs[p]).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_only_fit_is_weighted_log_mean() {
        let (domain, labels, i_star) = bias_setup([5, 4, 3]);
        let image = Volume::from_fn(*i_star.meta(), |i, j, k| i_star.get(i, j, k) * (1.0 + 0.01 * (i * j + k) as f64)).unwrap();
        let mix = LabelMixture::single(vec![1, 2], &[40.0, 100.0], &[1.0, 1.0], 1e-3).unwrap();
        let basis = BiasBasis::new(&domain, 0);
        let resp = crisp_resp(&domain, &labels);
        let fit = fit_bias(&resp, &image, &mix, &basis).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (pos, &v) in domain.voxels().iter().enumerate() {
            let m = if labels.data()[v] == 1 { 40.0 } else { 100.0 };
            num += (image.data()[v].ln() - f64::ln(m)) * resp.row(pos).iter().sum::<f64>();
            den += 1.0;
        }
        assert!((fit.coeffs[0] + num / den).abs() < 1e-10);
    }

    #[test]
    fn init_from_samples_with_components() {
        let mix = mixture_from_samples(&[1, 2], &[vec![1.0, 2.0, 9.0, 10.0], vec![]], 2, 0.5, (5.0, 4.0), 3).unwrap();
        assert_eq!(mix.components(0).len(), 2);
        assert!((mix.components(1)[0].mean - 5.0).abs() < 1e-12);
        assert!(mixture_from_samples(&[1], &[vec![1.0]], 4, 0.5, (0.0, 1.0), 0).is_err());
    }
}
