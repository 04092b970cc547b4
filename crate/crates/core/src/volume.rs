//! Volume containers, grid metadata and isotropic resampling.
//!
//! Voxels are stored row-major with x varying fastest, so the linear index
//! of `(i, j, k)` is `i + nx * (j + ny * k)`. Orientation is reduced to a
//! per-axis spacing plus the physical position of voxel `(0, 0, 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    /// Voxel size in mm.
    pub spacing: [f64; 3],
    /// Physical position (mm) of the centre of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let meta = GridMeta {
            dims,
            spacing,
            origin,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!(
                "every dimension must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be finite and positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Indices of the 6-connected neighbours of `idx` inside the grid.
    pub fn neighbors6(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let [i, j, k] = self.coords(idx);
        let [nx, ny, nz] = self.dims;
        let cands = [
            (i > 0).then(|| idx - 1),
            (i + 1 < nx).then(|| idx + 1),
            (j > 0).then(|| idx - nx),
            (j + 1 < ny).then(|| idx + nx),
            (k > 0).then(|| idx - nx * ny),
            (k + 1 < nz).then(|| idx + nx * ny),
        ];
        cands.into_iter().flatten()
    }

    pub fn same_grid(&self, other: &GridMeta) -> bool {
        self == other
    }

    pub fn ensure_same(&self, other: &GridMeta, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// A dense 3D grid of voxel values.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    meta: GridMeta,
    data: Vec<T>,
}

/// Real-valued intensities.
pub type ScalarVolume = Volume<f64>;
/// Discrete label IDs.
pub type LabelVolume = Volume<u32>;

impl<T: Copy> Volume<T> {
    pub fn from_vec(meta: GridMeta, data: Vec<T>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.len() {
            return Err(Error::DimensionMismatch {
                expected: meta.len(),
                found: data.len(),
            });
        }
        Ok(Volume { meta, data })
    }

    pub fn filled(meta: GridMeta, value: T) -> Result<Self> {
        meta.validate()?;
        Ok(Volume {
            data: vec![value; meta.len()],
            meta,
        })
    }

    pub fn from_fn(meta: GridMeta, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        meta.validate()?;
        let [nx, ny, nz] = meta.dims;
        let mut data = Vec::with_capacity(meta.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Ok(Volume { meta, data })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.meta.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: T) {
        let idx = self.meta.index(i, j, k);
        self.data[idx] = value;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Volume<U> {
        Volume {
            meta: self.meta,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Same data, new metadata with identical dims.
    pub fn with_meta(mut self, meta: GridMeta) -> Result<Self> {
        meta.validate()?;
        if meta.dims != self.meta.dims {
            return Err(Error::GridMismatch(format!(
                "cannot relabel {:?} grid as {:?}",
                self.meta.dims, meta.dims
            )));
        }
        self.meta = meta;
        Ok(self)
    }
}

impl ScalarVolume {
    /// All intensities finite.
    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(idx) => Err(Error::NonFinite(format!(
                "intensity at voxel {idx} is not finite"
            ))),
            None => Ok(()),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Trilinear sample at continuous voxel coordinates, clamped to the grid.
    pub fn sample_trilinear(&self, u: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.meta.dims[a];
            let c = u[a].clamp(0.0, (n - 1) as f64);
            let f = c.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(n - 1);
            frac[a] = c - f;
        }
        let v = |i: usize, j: usize, k: usize| self.get(i, j, k);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(v(lo[0], lo[1], lo[2]), v(hi[0], lo[1], lo[2]), frac[0]);
        let c10 = lerp(v(lo[0], hi[1], lo[2]), v(hi[0], hi[1], lo[2]), frac[0]);
        let c01 = lerp(v(lo[0], lo[1], hi[2]), v(hi[0], lo[1], hi[2]), frac[0]);
        let c11 = lerp(v(lo[0], hi[1], hi[2]), v(hi[0], hi[1], hi[2]), frac[0]);
        let c0 = lerp(c00, c10, frac[1]);
        let c1 = lerp(c01, c11, frac[1]);
        lerp(c0, c1, frac[2])
    }
}

impl LabelVolume {
    pub fn contains_label(&self, label: u32) -> bool {
        self.data.contains(&label)
    }

    /// Sorted distinct label IDs.
    pub fn distinct_labels(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Nonzero voxels as a binary mask volume.
    pub fn nonzero_mask(&self) -> LabelVolume {
        self.map(|l| u32::from(l != 0))
    }

    /// Dilates the nonzero region by `radius` voxels in 6-connectivity.
    pub fn dilate(&self, radius: usize) -> LabelVolume {
        let mut cur = self.nonzero_mask();
        for _ in 0..radius {
            let mut next = cur.clone();
            for idx in 0..cur.len() {
                if cur.data[idx] != 0 {
                    continue;
                }
                if cur.meta.neighbors6(idx).any(|n| cur.data[n] != 0) {
                    next.data[idx] = 1;
                }
            }
            cur = next;
        }
        cur
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

/// Either kind of volume, as produced by [`crate::io::read_volume`].
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn meta(&self) -> &GridMeta {
        match self {
            AnyVolume::Scalar(v) => v.meta(),
            AnyVolume::Label(v) => v.meta(),
        }
    }
}

fn isotropic_target(meta: &GridMeta, target_mm: f64) -> Result<GridMeta> {
    if !(target_mm > 0.0 && target_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_mm}"
        )));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let extent = meta.dims[a] as f64 * meta.spacing[a] / target_mm;
        // Guard against 4 * 0.5 / 1 style products landing a hair above an integer.
        let rounded = extent.round();
        let n = if (extent - rounded).abs() < 1e-9 {
            rounded
        } else {
            extent.ceil()
        };
        dims[a] = (n as usize).max(1);
    }
    GridMeta::new(dims, [target_mm; 3], meta.origin)
}

/// Continuous source-voxel coordinate of output voxel `(i, j, k)`.
#[inline]
fn source_coord(src: &GridMeta, dst: &GridMeta, ijk: [usize; 3]) -> [f64; 3] {
    let mut u = [0.0; 3];
    for a in 0..3 {
        let phys = dst.origin[a] + ijk[a] as f64 * dst.spacing[a];
        u[a] = (phys - src.origin[a]) / src.spacing[a];
    }
    u
}

fn nearest_index(u: [f64; 3], dims: [usize; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = (u[a].round().max(0.0) as usize).min(dims[a] - 1);
    }
    out
}

impl ScalarVolume {
    /// Resamples onto an isotropic grid of spacing `target_mm` sharing this
    /// volume's origin. Output dims are `ceil(dim * spacing / target_mm)`.
    pub fn resample_isotropic(&self, target_mm: f64, mode: Interpolation) -> Result<ScalarVolume> {
        let dst = isotropic_target(&self.meta, target_mm)?;
        if dst == self.meta {
            return Ok(self.clone());
        }
        Volume::from_fn(dst, |i, j, k| {
            let u = source_coord(&self.meta, &dst, [i, j, k]);
            match mode {
                Interpolation::Trilinear => self.sample_trilinear(u),
                Interpolation::Nearest => {
                    let [a, b, c] = nearest_index(u, self.meta.dims);
                    self.get(a, b, c)
                }
            }
        })
    }
}

impl LabelVolume {
    /// Nearest-neighbour isotropic resampling. Trilinear is refused because
    /// it would invent label IDs.
    pub fn resample_isotropic(&self, target_mm: f64, mode: Interpolation) -> Result<LabelVolume> {
        if mode != Interpolation::Nearest {
            return Err(Error::InvalidArgument(
                "label volumes can only be resampled with nearest-neighbour interpolation".into(),
            ));
        }
        let dst = isotropic_target(&self.meta, target_mm)?;
        if dst == self.meta {
            return Ok(self.clone());
        }
        Volume::from_fn(dst, |i, j, k| {
            let [a, b, c] = nearest_index(source_coord(&self.meta, &dst, [i, j, k]), self.meta.dims);
            self.get(a, b, c)
        })
    }
}

impl AnyVolume {
    pub fn resample_isotropic(&self, target_mm: f64, mode: Interpolation) -> Result<AnyVolume> {
        Ok(match self {
            AnyVolume::Scalar(v) => AnyVolume::Scalar(v.resample_isotropic(target_mm, mode)?),
            AnyVolume::Label(v) => AnyVolume::Label(v.resample_isotropic(target_mm, mode)?),
        })
    }
}
