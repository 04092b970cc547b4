//! The voxel domain the model is defined on: the nonzero voxels of a brain
//! mask, with their 6-connected neighbours restricted to the domain.

use crate::error::{Error, Result};
use crate::volume::{GridMeta, LabelVolume};

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct Domain {
    meta: GridMeta,
    voxels: Vec<usize>,
    lookup: Vec<u32>,
    neighbors: Vec<[u32; 6]>,
}

impl Domain {
    pub fn from_mask(mask: &LabelVolume) -> Result<Domain> {
        let meta = *mask.meta();
        let voxels: Vec<usize> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| i)
            .collect();
        if voxels.is_empty() {
            return Err(Error::InvalidArgument("brain mask is empty".into()));
        }
        if voxels.len() >= NONE as usize {
            return Err(Error::TooLarge(format!("{} voxels in mask", voxels.len())));
        }
        let mut lookup = vec![NONE; meta.len()];
        for (pos, &v) in voxels.iter().enumerate() {
            lookup[v] = pos as u32;
        }
        let neighbors = voxels
            .iter()
            .map(|&v| {
                let mut row = [NONE; 6];
                for (slot, n) in meta.neighbors6(v).filter(|&n| lookup[n] != NONE).enumerate() {
                    row[slot] = lookup[n];
                }
                row
            })
            .collect();
        Ok(Domain {
            meta,
            voxels,
            lookup,
            neighbors,
        })
    }

    /// Every voxel of the grid.
    pub fn full(meta: GridMeta) -> Result<Domain> {
        Domain::from_mask(&LabelVolume::filled(meta, 1)?)
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Linear grid indices of domain voxels, ascending.
    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    /// Domain position of grid voxel `idx`, if it belongs to the domain.
    pub fn position(&self, idx: usize) -> Option<usize> {
        match self.lookup[idx] {
            NONE => None,
            p => Some(p as usize),
        }
    }

    /// Domain positions of the in-domain neighbours of position `pos`.
    pub fn neighbors(&self, pos: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[pos]
            .iter()
            .take_while(|&&n| n != NONE)
            .map(|&n| n as usize)
    }

    /// Checkerboard colour (parity of i + j + k). Same-colour voxels are
    /// never 6-neighbours.
    pub fn color(&self, pos: usize) -> usize {
        let [i, j, k] = self.meta.coords(self.voxels[pos]);
        (i + j + k) % 2
    }

    /// Undirected neighbour pairs `(a, b)` with `a < b`, in domain positions.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.len() {
            for b in self.neighbors(a) {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Scatters per-position values into a full grid, filling the rest.
    pub fn scatter<T: Copy>(&self, values: &[T], fill: T) -> Vec<T> {
        let mut out = vec![fill; self.meta.len()];
        for (&v, &x) in self.voxels.iter().zip(values) {
            out[v] = x;
        }
        out
    }
}
