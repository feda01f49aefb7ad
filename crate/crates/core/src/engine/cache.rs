use crate::error::{Error, Result};
use crate::numerics::{Array, Real};

/// Per-layer keys and values of committed clean blocks.
///
/// Keys are stored after QK-norm and rotary encoding, laid out
/// `batch × committed·B × width`. Noise-block activations are never stored.
#[derive(Clone, Debug)]
pub struct KvCache<T: Real = f32> {
    batch: usize,
    block_size: usize,
    width: usize,
    committed: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Real> KvCache<T> {
    pub fn new(layers: usize, batch: usize, block_size: usize, width: usize) -> Self {
        KvCache {
            batch,
            block_size,
            width,
            committed: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of committed clean blocks.
    pub fn committed(&self) -> usize {
        self.committed
    }

    /// Cached tokens per batch element.
    pub fn len(&self) -> usize {
        self.committed * self.block_size
    }

    pub fn is_empty(&self) -> bool {
        self.committed == 0
    }

    /// Keys of `layer` as a `(batch·len) × width` matrix, or `None` when empty.
    pub fn keys(&self, layer: usize) -> Option<Array<T>> {
        self.as_array(&self.keys[layer])
    }

    pub fn values(&self, layer: usize) -> Option<Array<T>> {
        self.as_array(&self.values[layer])
    }

    fn as_array(&self, data: &[T]) -> Option<Array<T>> {
        if data.is_empty() {
            return None;
        }
        Some(Array::new(vec![self.batch * self.len(), self.width], data.to_vec()).expect("cache layout"))
    }

    /// Checks the length invariant: every layer holds `committed·B` tokens.
    pub fn check(&self) -> Result<()> {
        let want = self.batch * self.len() * self.width;
        for (l, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            if k.len() != want || v.len() != want {
                return Err(Error::Cache(format!(
                    "layer {l} holds {}/{} values, expected {want}",
                    k.len(),
                    v.len()
                )));
            }
        }
        Ok(())
    }

    /// Appends one clean block's per-layer `(keys, values)`, each `(batch·B) × width`.
    pub fn push_block(&mut self, block: usize, kv: Vec<(Array<T>, Array<T>)>) -> Result<()> {
        if block != self.committed {
            return Err(Error::Cache(format!(
                "commit of block {block} but {} blocks are cached",
                self.committed
            )));
        }
        if kv.len() != self.layers() {
            return Err(Error::Cache(format!("{} layers given, cache has {}", kv.len(), self.layers())));
        }
        let rows = self.batch * self.block_size;
        for (k, v) in &kv {
            if k.shape() != [rows, self.width] || v.shape() != [rows, self.width] {
                return Err(Error::Cache(format!(
                    "block activations {:?}/{:?}, expected [{rows}, {}]",
                    k.shape(),
                    v.shape(),
                    self.width
                )));
            }
        }
        self.check()?;
        let old = self.len() * self.width;
        let add = self.block_size * self.width;
        for (l, (k, v)) in kv.into_iter().enumerate() {
            for (store, new) in [(&mut self.keys[l], k), (&mut self.values[l], v)] {
                let mut merged = Vec::with_capacity(store.len() + new.len());
                for e in 0..self.batch {
                    merged.extend_from_slice(&store[e * old..(e + 1) * old]);
                    merged.extend_from_slice(&new.data()[e * add..(e + 1) * add]);
                }
                *store = merged;
            }
        }
        self.committed += 1;
        Ok(())
    }
}
