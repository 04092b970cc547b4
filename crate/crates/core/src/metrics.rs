//! Overlap and sharpness metrics.
//!
//! Dice and Generalized Dice are computed on crisp label maps. A label that
//! is empty in either map has no Dice value (it is reported as absent rather
//! than as 0) and is left out of the Generalized Dice label set.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::{LabelTable, BACKGROUND};
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume};

/// `2|A∩B| / (|A|+|B|)` for one label; `None` when the label is empty in
/// either volume.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u32) -> Result<Option<f64>> {
    a.meta().ensure_same(b.meta(), "dice operands")?;
    let c = counts(a.data(), b.data(), label);
    Ok(c.dice())
}

/// `2 |{x : A(x) = B(x) ∈ S}| / (|[A ∈ S]| + |[B ∈ S]|)`. Defined as 1.0 when
/// neither volume contains any label of `s`.
pub fn generalized_dice(a: &LabelVolume, b: &LabelVolume, s: &[u32]) -> Result<f64> {
    a.meta().ensure_same(b.meta(), "generalized dice operands")?;
    if s.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let mut sorted = s.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let inside = |l: &u32| sorted.binary_search(l).is_ok();
    let (mut agree, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (inside(x), inside(y));
        na += ia as usize;
        nb += ib as usize;
        agree += (ia && x == y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * agree as f64 / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub a: usize,
    pub b: usize,
    pub both: usize,
}

impl OverlapCounts {
    pub fn dice(&self) -> Option<f64> {
        if self.a == 0 || self.b == 0 {
            None
        } else {
            Some(2.0 * self.both as f64 / (self.a + self.b) as f64)
        }
    }
}

fn counts(a: &[u32], b: &[u32], label: u32) -> OverlapCounts {
    let mut c = OverlapCounts::default();
    for (&x, &y) in a.iter().zip(b) {
        c.a += (x == label) as usize;
        c.b += (y == label) as usize;
        c.both += (x == label && y == label) as usize;
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOverlap {
    pub label_id: u32,
    pub label_name: String,
    /// `None` when the label is empty in either volume.
    pub dice: Option<f64>,
    pub counts: OverlapCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub labels: Vec<LabelOverlap>,
    /// Labels present in both volumes; the set the generalized score uses.
    pub label_set: Vec<u32>,
    pub generalized_dice: f64,
    pub generalized_counts: OverlapCounts,
}

impl OverlapReport {
    /// Mean of the per-label Dice values that are present.
    pub fn mean_dice(&self) -> Option<f64> {
        let v: Vec<f64> = self.labels.iter().filter_map(|l| l.dice).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn get(&self, label: u32) -> Option<&LabelOverlap> {
        self.labels.iter().find(|l| l.label_id == label)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label_id", "label_name", "dice", "|A|", "|B|", "|A∩B|"])?;
        for l in &self.labels {
            w.write_record([
                l.label_id.to_string(),
                l.label_name.clone(),
                l.dice.map_or_else(|| "absent".to_string(), |d| d.to_string()),
                l.counts.a.to_string(),
                l.counts.b.to_string(),
                l.counts.both.to_string(),
            ])?;
        }
        let g = &self.generalized_counts;
        w.write_record([
            "GENERALIZED".to_string(),
            "Generalized Dice".to_string(),
            self.generalized_dice.to_string(),
            g.a.to_string(),
            g.b.to_string(),
            g.both.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }

    /// Writes CSV or JSON depending on the extension (`.json` → JSON).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let w = std::io::BufWriter::new(file);
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_writer_pretty(w, self)?;
            Ok(())
        } else {
            self.write_csv(w)
        }
    }
}

/// Per-label Dice for every table label (background excluded) that occurs in
/// either volume, optionally restricted to `only`, plus the generalized
/// score over the labels present in both.
pub fn report(
    a: &LabelVolume,
    b: &LabelVolume,
    table: &LabelTable,
    only: Option<&[u32]>,
) -> Result<OverlapReport> {
    a.meta().ensure_same(b.meta(), "report operands")?;
    let candidates: Vec<u32> = match only {
        Some(ids) => {
            for &id in ids {
                if !table.contains(id) {
                    return Err(Error::UnknownLabel(id));
                }
            }
            ids.to_vec()
        }
        None => table.ids().into_iter().filter(|&id| id != BACKGROUND).collect(),
    };
    let mut labels = Vec::new();
    let mut label_set = Vec::new();
    for id in candidates {
        let c = counts(a.data(), b.data(), id);
        if c.a == 0 && c.b == 0 {
            continue;
        }
        let d = c.dice();
        if d.is_some() {
            label_set.push(id);
        }
        labels.push(LabelOverlap {
            label_id: id,
            label_name: table.name_of(id).unwrap_or("").to_string(),
            dice: d,
            counts: c,
        });
    }
    let mut g = OverlapCounts::default();
    for l in labels.iter().filter(|l| l.dice.is_some()) {
        g.a += l.counts.a;
        g.b += l.counts.b;
        g.both += l.counts.both;
    }
    let generalized_dice = if g.a + g.b == 0 {
        1.0
    } else {
        2.0 * g.both as f64 / (g.a + g.b) as f64
    };
    Ok(OverlapReport {
        labels,
        label_set,
        generalized_dice,
        generalized_counts: g,
    })
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Tenengrad sharpness of the middle axial slice: mean of `Gx² + Gy²` over
/// interior pixels, with 3×3 Sobel kernels, after dividing the slice by its
/// maximum. Zero for a constant or non-positive slice.
pub fn tenengrad(vol: &ScalarVolume) -> Result<f64> {
    let [nx, ny, nz] = vol.dims();
    if nz < 3 || nx < 3 || ny < 3 {
        return Err(Error::InvalidArgument(format!(
            "sharpness needs at least 3 voxels per axis, got {nx}x{ny}x{nz}"
        )));
    }
    vol.validate_finite()?;
    let k = nz / 2;
    let slice: Vec<f64> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| vol.get(i, j, k))
        .collect();
    let (lo, hi) = slice
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi <= 0.0 || lo == hi {
        return Ok(0.0);
    }
    let at = |i: usize, j: usize| slice[j * nx + i] / hi;
    let mut total = 0.0;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let (mut gx, mut gy) = (0.0, 0.0);
            for (dj, row) in SOBEL_X.iter().enumerate() {
                for (di, &w) in row.iter().enumerate() {
                    gx += w * at(i + di - 1, j + dj - 1);
                    // The y kernel is the transpose of the x kernel.
                    gy += w * at(i + dj - 1, j + di - 1);
                }
            }
            total += gx * gx + gy * gy;
        }
    }
    Ok(total / ((nx - 2) * (ny - 2)) as f64)
}
