//! Atlas records, the label taxonomy and training-neighbourhood selection.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::volume::{GridMeta, LabelVolume, ScalarVolume};

/// One registered training subject.
#[derive(Clone, Debug)]
pub struct Atlas {
    pub id: String,
    pub intensity: ScalarVolume,
    pub labels: LabelVolume,
    pub age_days: f64,
    /// Whether the manual labels separate gray and white matter.
    pub has_wm: bool,
}

impl Atlas {
    pub fn new(
        id: impl Into<String>,
        intensity: ScalarVolume,
        labels: LabelVolume,
        age_days: f64,
        has_wm: bool,
    ) -> Result<Self> {
        let id = id.into();
        intensity
            .meta()
            .ensure_same(labels.meta(), &format!("atlas {id} intensity vs labels"))?;
        if !(age_days >= 0.0 && age_days.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "atlas {id}: age_days must be a non-negative number, got {age_days}"
            )));
        }
        Ok(Atlas {
            id,
            intensity,
            labels,
            age_days,
            has_wm,
        })
    }
}

/// A non-empty collection of atlases on one shared grid with unique ids.
#[derive(Clone, Debug)]
pub struct AtlasSet {
    atlases: Vec<Atlas>,
}

impl AtlasSet {
    pub fn new(atlases: Vec<Atlas>) -> Result<Self> {
        let first = atlases
            .first()
            .ok_or_else(|| Error::InvalidArgument("an atlas set needs at least one atlas".into()))?;
        let meta = *first.labels.meta();
        let mut seen = HashSet::new();
        for a in &atlases {
            if !seen.insert(a.id.clone()) {
                return Err(Error::DuplicateId(a.id.clone()));
            }
            meta.ensure_same(a.labels.meta(), &format!("atlas {}", a.id))?;
        }
        Ok(AtlasSet { atlases })
    }

    pub fn len(&self) -> usize {
        self.atlases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atlases.is_empty()
    }

    pub fn meta(&self) -> &GridMeta {
        self.atlases[0].labels.meta()
    }

    pub fn atlases(&self) -> &[Atlas] {
        &self.atlases
    }

    pub fn get(&self, idx: usize) -> &Atlas {
        &self.atlases[idx]
    }

    pub fn ids(&self) -> Vec<&str> {
        self.atlases.iter().map(|a| a.id.as_str()).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Atlas> {
        self.atlases.iter()
    }

    /// Subset by position, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Result<AtlasSet> {
        AtlasSet::new(indices.iter().map(|&i| self.atlases[i].clone()).collect())
    }

    /// Everything except the atlas at `idx`.
    pub fn without(&self, idx: usize) -> Result<AtlasSet> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| i != idx).collect();
        self.subset(&keep)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            Err(Error::InvalidArgument(format!(
                "neighbourhood size k = {k} must lie in 1..={}",
                self.len()
            )))
        } else {
            Ok(())
        }
    }

    /// The `k` atlases closest in age to the test subject, nearest first.
    /// Ties are broken by ascending atlas id.
    pub fn select_by_age(&self, test_age_days: f64, k: usize) -> Result<AtlasSet> {
        self.check_k(k)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (self.atlases[a].age_days - test_age_days).abs();
            let db = (self.atlases[b].age_days - test_age_days).abs();
            da.total_cmp(&db)
                .then_with(|| self.atlases[a].id.cmp(&self.atlases[b].id))
        });
        self.subset(&order[..k])
    }

    /// The `k` atlases whose intensity image shares the most mutual
    /// information with `test_image`, highest first. MI is evaluated over
    /// the test image's nonzero voxels. Ties are broken by atlas id.
    pub fn select_by_mi(&self, test_image: &ScalarVolume, k: usize, bins: usize) -> Result<AtlasSet> {
        self.check_k(k)?;
        let scores = self.mi_scores(test_image, bins)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.atlases[a].id.cmp(&self.atlases[b].id))
        });
        self.subset(&order[..k])
    }

    /// MI between the test image and every atlas intensity, in set order.
    pub fn mi_scores(&self, test_image: &ScalarVolume, bins: usize) -> Result<Vec<f64>> {
        self.meta().ensure_same(test_image.meta(), "test image vs atlases")?;
        let fg: Vec<usize> = test_image
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        self.atlases
            .iter()
            .map(|a| mutual_information_on(test_image, &a.intensity, &fg, bins))
            .collect()
    }
}

/// Equal-width bin indices over `[min, max]` of the sampled values, or
/// `None` when the samples are constant.
fn bin_indices(vol: &ScalarVolume, voxels: &[usize], bins: usize) -> Option<Vec<usize>> {
    let data = vol.data();
    let (lo, hi) = voxels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(data[i]), hi.max(data[i]))
        });
    if !(hi > lo) {
        return None;
    }
    let scale = bins as f64 / (hi - lo);
    Some(
        voxels
            .iter()
            .map(|&i| (((data[i] - lo) * scale) as usize).min(bins - 1))
            .collect(),
    )
}

fn plug_in_entropy(counts: &[usize], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in MI estimate (nats) from a `bins x bins` joint histogram.
/// A constant image carries no information, so MI is 0 for that pair.
pub fn mutual_information_on(
    a: &ScalarVolume,
    b: &ScalarVolume,
    voxels: &[usize],
    bins: usize,
) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    a.meta().ensure_same(b.meta(), "mutual information")?;
    if voxels.is_empty() {
        return Ok(0.0);
    }
    let (Some(ia), Some(ib)) = (bin_indices(a, voxels, bins), bin_indices(b, voxels, bins)) else {
        return Ok(0.0);
    };
    let mut joint = vec![0usize; bins * bins];
    let mut ma = vec![0usize; bins];
    let mut mb = vec![0usize; bins];
    for (&x, &y) in ia.iter().zip(&ib) {
        joint[x * bins + y] += 1;
        ma[x] += 1;
        mb[y] += 1;
    }
    let n = voxels.len() as f64;
    let mi = plug_in_entropy(&ma, n) + plug_in_entropy(&mb, n) - plug_in_entropy(&joint, n);
    // H(A) + H(B) - H(A,B) can dip below zero by rounding only.
    Ok(mi.max(0.0))
}

/// MI over every voxel of the grid.
pub fn mutual_information(a: &ScalarVolume, b: &ScalarVolume, bins: usize) -> Result<f64> {
    let all: Vec<usize> = (0..a.len()).collect();
    mutual_information_on(a, b, &all, bins)
}

/// Plug-in entropy (nats) of the binned image.
pub fn entropy(a: &ScalarVolume, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let all: Vec<usize> = (0..a.len()).collect();
    let Some(idx) = bin_indices(a, &all, bins) else {
        return Ok(0.0);
    };
    let mut counts = vec![0usize; bins];
    for i in idx {
        counts[i] += 1;
    }
    Ok(plug_in_entropy(&counts, a.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelIds {
    Single(u32),
    Paired { left: u32, right: u32 },
}

/// One row of the taxonomy: a structure and its FreeSurfer id(s).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Structure {
    pub name: &'static str,
    pub ids: LabelIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTable {
    structures: Vec<Structure>,
    entries: Vec<(String, u32)>,
    wm_cortex_ids: Vec<u32>,
}

const STRUCTURES: &[(&str, u32, Option<u32>)] = &[
    ("CerebralWhiteMatter", 2, Some(41)),
    ("CerebralCortex", 3, Some(42)),
    ("LateralVentricle", 4, Some(43)),
    ("CerebellarWhiteMatter", 7, Some(46)),
    ("CerebellarCortex", 8, Some(47)),
    ("Thalamus", 9, Some(48)),
    ("Caudate", 11, Some(50)),
    ("Putamen", 12, Some(51)),
    ("Pallidum", 13, Some(52)),
    ("3rd-Ventricle", 14, None),
    ("4th-Ventricle", 15, None),
    ("Hippocampus", 17, Some(53)),
    ("Amygdala", 18, Some(54)),
    ("Accumbens", 26, Some(58)),
    ("VentralDC", 28, Some(60)),
    ("Vermis", 172, None),
    ("Midbrain", 173, None),
    ("Pons", 174, None),
    ("Medulla", 175, None),
];

pub const BACKGROUND: u32 = 0;

/// The segmentation taxonomy: background plus the 32 FreeSurfer ids of the
/// 19 recovered structures.
pub fn label_table() -> LabelTable {
    let mut structures = Vec::with_capacity(STRUCTURES.len());
    let mut entries = vec![("Background".to_string(), BACKGROUND)];
    for &(name, left, right) in STRUCTURES {
        match right {
            Some(right) => {
                structures.push(Structure {
                    name,
                    ids: LabelIds::Paired { left, right },
                });
                entries.push((format!("L-{name}"), left));
                entries.push((format!("R-{name}"), right));
            }
            None => {
                structures.push(Structure {
                    name,
                    ids: LabelIds::Single(left),
                });
                entries.push((name.to_string(), left));
            }
        }
    }
    LabelTable {
        structures,
        entries,
        wm_cortex_ids: vec![2, 41, 3, 42],
    }
}

impl LabelTable {
    /// `(name, id)` pairs, background first.
    pub fn entries(&self) -> &[(String, u32)] {
        &self.entries
    }

    pub fn structures(&self) -> &[Structure] {
        &self.structures
    }

    /// Cerebral white matter and cortex, where the masking rule applies.
    pub fn wm_cortex_ids(&self) -> &[u32] {
        &self.wm_cortex_ids
    }

    pub fn is_wm_or_cortex(&self, id: u32) -> bool {
        self.wm_cortex_ids.contains(&id)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|(_, id)| *id).collect()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.iter().any(|(_, i)| *i == id)
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, i)| *i == id)
            .map(|(n, _)| n.as_str())
    }

    /// Id of a hemisphere-qualified entry such as `"R-Putamen"` or `"Pons"`.
    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, i)| *i)
    }

    /// Looks up a structure row; accepts `"Thalamus"` or `"L/R Thalamus"`.
    pub fn structure(&self, name: &str) -> Option<&LabelIds> {
        let bare = name.strip_prefix("L/R ").unwrap_or(name).trim();
        self.structures
            .iter()
            .find(|s| s.name == bare)
            .map(|s| &s.ids)
    }
}

/// On-disk manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub intensity_path: PathBuf,
    pub labels_path: PathBuf,
    pub age_days: f64,
    pub has_wm: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub atlases: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Loads every atlas named in a manifest. Relative paths resolve against
/// the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<AtlasSet> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut seen = HashSet::new();
    let mut atlases = Vec::with_capacity(manifest.atlases.len());
    for e in &manifest.atlases {
        if !seen.insert(e.id.clone()) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
        let intensity = io::read_scalar(resolve(&e.intensity_path))?;
        let labels = io::read_labels(resolve(&e.labels_path))?;
        atlases.push(Atlas::new(e.id.clone(), intensity, labels, e.age_days, e.has_wm)?);
    }
    AtlasSet::new(atlases)
}
