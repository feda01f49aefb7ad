//! `ACDT` checkpoint files.
//!
//! Layout (little-endian): magic `ACDT`, `u32` version, `u64`-prefixed TOML
//! run config, `u64` step, then four array sections (parameters, EMA, first
//! and second optimizer moments). A section is a `u32` count followed by
//! named arrays: `u64`-prefixed name, `u8` dtype tag (0 = f32), `u32` rank,
//! `u64` extents, f32 payload.

use std::path::Path;

use super::binfmt::{atomic_write, read_array, Reader, Writer};
use super::config::RunConfig;
use crate::engine::TrainState;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACDT";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTIONS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_toml()?);
        w.u64(self.state.step);
        let s = &self.state;
        for store in [&s.params, &s.ema, &s.adam_m, &s.adam_v] {
            w.u32(store.len() as u32);
            for (_, name, a) in store.iter() {
                w.str(name);
                super::binfmt::write_array(&mut w, a);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: at, detail: format!("unknown checkpoint version {version}") });
        }
        let config = RunConfig::from_toml(&r.str("config")?)?;
        let step = r.u64("step")?;
        let mut stores = Vec::with_capacity(4);
        for section in SECTIONS {
            let count = r.u32("section count")?;
            let mut store = ParamStore::new();
            for _ in 0..count {
                let name = r.str("array name")?;
                let at = r.offset();
                let a = read_array(&mut r, &name)?;
                store.add(name, a).map_err(|e| Error::Format { offset: at, detail: e.to_string() })?;
            }
            if let Some(first) = stores.first() {
                if !store.same_layout(first) {
                    return Err(r.err(format!("{section} section does not mirror the parameters")));
                }
            }
            stores.push(store);
        }
        r.finish()?;
        let mut it = stores.into_iter();
        let mut next = || it.next().expect("four sections");
        let state = TrainState { step, params: next(), ema: next(), adam_m: next(), adam_v: next() };
        Ok(Checkpoint { config, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
