//! `ACDL` latent containers.
//!
//! Layout (little-endian): magic `ACDL`, `u32` version, `u8` dtype tag
//! (0 = f32), `u32` rank, `u64` extents with the item count first, one
//! `u32` label per item, f32 payload.

use std::path::Path;

use super::binfmt::{atomic_write, read_extents, Reader, Writer, DTYPE_F32};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Array;

pub const LATENT_MAGIC: &[u8; 4] = b"ACDL";
pub const LATENT_VERSION: u32 = 1;

/// Items of equal shape with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub items: Vec<Array<f32>>,
    pub labels: Vec<usize>,
}

impl LatentSet {
    pub fn new(items: Vec<Array<f32>>, labels: Vec<usize>) -> Result<Self> {
        if items.is_empty() || items.len() != labels.len() {
            return Err(shape_err("latents", format!("{} items, {} labels", items.len(), labels.len())));
        }
        if let Some(bad) = items.iter().find(|a| a.shape() != items[0].shape()) {
            return Err(shape_err("latents", format!("{:?} vs {:?}", bad.shape(), items[0].shape())));
        }
        if labels.iter().any(|&l| l > u32::MAX as usize) {
            return Err(Error::Invalid("label exceeds u32".into()));
        }
        Ok(LatentSet { items, labels })
    }

    pub fn item_shape(&self) -> &[usize] {
        self.items[0].shape()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(LATENT_MAGIC);
        w.u32(LATENT_VERSION);
        w.u8(DTYPE_F32);
        w.u32(self.item_shape().len() as u32 + 1);
        w.u64(self.len() as u64);
        for &e in self.item_shape() {
            w.u64(e as u64);
        }
        for &l in &self.labels {
            w.u32(l as u32);
        }
        for a in &self.items {
            w.f32s(a.data());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(LATENT_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != LATENT_VERSION {
            return Err(Error::Format { offset: at, detail: format!("unknown latent version {version}") });
        }
        let extents = read_extents(&mut r, "latents")?;
        if extents.len() < 2 {
            return Err(r.err("latents need an item extent and at least one data extent"));
        }
        let count = extents[0];
        let shape = extents[1..].to_vec();
        let labels = (0..count).map(|_| Ok(r.u32("labels")? as usize)).collect::<Result<Vec<_>>>()?;
        let per: usize = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| r.err("item size overflows"))?;
        let total = per.checked_mul(count).ok_or_else(|| r.err("payload size overflows"))?;
        let data = r.f32s(total, "payload")?;
        r.finish()?;
        let items = data
            .chunks_exact(per)
            .map(|c| Array::new(shape.clone(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        LatentSet::new(items, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
