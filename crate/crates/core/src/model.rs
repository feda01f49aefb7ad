//! The blockwise conditional diffusion transformer.
//!
//! One stack of transformer blocks processes clean and noise tokens together.
//! Timestep and label conditioning reach noise tokens only, through adaLN-Zero
//! modulation; clean tokens see identity modulation. The same weights serve
//! three call shapes:
//!
//! * [`Acdit::forward_train`] over the full `2L` clean+noise sequence with the
//!   skip-causal mask,
//! * [`Acdit::forward_block_infer`] over one noise block attending cached keys,
//! * [`Acdit::commit_clean_block`], which pushes a finished block's keys and
//!   values into the [`KvCache`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::KvCache;
use crate::error::{shape_err, Error, Result};
use crate::layout::{inference_mask, BlockLayout, ScamMask};
use crate::numerics::{Array, AttentionMask, Graph, ParamId, ParamStore, Real, RotaryTable, Var};
use crate::rope::RopeNdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp: usize,
    /// Channels per grid cell of the data.
    pub channels: usize,
    /// Data grid extents (pixels or latent cells).
    pub grid: Vec<usize>,
    /// Patch extents folded into one token; 1 everywhere for images.
    pub patch: Vec<usize>,
    /// Block extents in tokens.
    pub block: Vec<usize>,
    pub timesteps: usize,
    pub num_labels: usize,
    pub label_drop: f64,
    pub norm_eps: f64,
    /// Explicit rotary bases per dimension; derived from the token grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_bases: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            mlp: 256,
            channels: 1,
            grid: vec![16, 16],
            patch: vec![1, 1],
            block: vec![8, 8],
            timesteps: 1000,
            num_labels: 4,
            label_drop: 0.1,
            norm_eps: 1e-6,
            rope_bases: None,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    /// Channels of one token after patchify.
    pub fn token_channels(&self) -> usize {
        self.channels * self.patch.iter().product::<usize>()
    }

    pub fn token_grid(&self) -> Result<Vec<usize>> {
        if self.patch.len() != self.grid.len() {
            return Err(Error::Config(format!(
                "patch {:?} and grid {:?} ranks differ",
                self.patch, self.grid
            )));
        }
        self.grid
            .iter()
            .zip(&self.patch)
            .map(|(&g, &p)| {
                if p == 0 || g % p != 0 {
                    Err(Error::Layout(format!("patch {p} does not divide grid extent {g}")))
                } else {
                    Ok(g / p)
                }
            })
            .collect()
    }

    pub fn layout(&self) -> Result<BlockLayout> {
        BlockLayout::new(&self.token_grid()?, &self.block)
    }

    pub fn rope(&self) -> Result<RopeNdConfig> {
        let mut cfg = RopeNdConfig::auto(self.head_dim(), &self.token_grid()?)?;
        if let Some(b) = &self.rope_bases {
            cfg.bases = b.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.mlp == 0 || self.channels == 0 {
            return bad("layers, hidden, mlp and channels must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.hidden.is_multiple_of(2) {
            return bad("hidden size must be even for the sinusoidal timestep embedding".into());
        }
        if self.timesteps == 0 || self.num_labels == 0 {
            return bad("timesteps and num_labels must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.label_drop) {
            return bad(format!("label_drop {} outside [0, 1]", self.label_drop));
        }
        if !(self.norm_eps >= 0.0) {
            return bad("norm_eps must be >= 0".into());
        }
        self.layout()?;
        self.rope()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    norm1: ParamId,
    ada_w: ParamId,
    ada_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    q_norm: ParamId,
    k_norm: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    norm2: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    patch_w: ParamId,
    patch_b: ParamId,
    t1_w: ParamId,
    t1_b: ParamId,
    t2_w: ParamId,
    t2_b: ParamId,
    labels: ParamId,
    layers: Vec<LayerIds>,
    final_norm: ParamId,
    final_ada_w: ParamId,
    final_ada_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Ones,
    Zeros,
    TruncNormal,
    /// Unit normal, for embedding tables.
    Normal,
    /// Zero under adaLN-Zero; randomized only by [`Acdit::randomize`].
    ZeroGate,
}

const INIT_STD: f64 = 0.02;

/// Inputs to one training forward pass.
///
/// `clean` and `noise` are `(batch·N·B) × token_channels` in block order.
#[derive(Clone, Debug)]
pub struct TrainInputs<T: Real = f32> {
    pub clean: Array<T>,
    pub noise: Array<T>,
    /// One timestep per (batch element, block).
    pub timesteps: Vec<usize>,
    /// One label per batch element; `num_labels` is the null label.
    pub labels: Vec<usize>,
}

/// Graph outputs of [`Acdit::forward_train`].
#[derive(Clone, Copy, Debug)]
pub struct TrainOutputs {
    /// ε prediction for every noise token, `(batch·L) × token_channels`.
    pub pred_eps: Var,
    /// Final hidden states of the clean tokens, `(batch·L) × hidden`.
    pub clean_hidden: Var,
}

struct Stream<'a, T: Real> {
    batch: usize,
    table: Arc<RotaryTable<T>>,
    mask: Arc<AttentionMask>,
    /// Per-token modulation row (`None` for a stream of clean tokens only).
    modulation: Option<Modulation>,
    cache: Option<&'a KvCache<T>>,
}

struct Modulation {
    /// silu(condition) rows.
    cond: Var,
    /// For each token, its condition row or `None` for identity modulation.
    token_rows: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct Acdit {
    cfg: ModelConfig,
    layout: BlockLayout,
    rope: RopeNdConfig,
    ids: ParamIds,
    inits: Vec<Init>,
}

/// Sinusoidal embedding of integer timesteps, `[cos(t·f) | sin(t·f)]`.
pub fn timestep_embedding<T: Real>(timesteps: &[usize], dim: usize) -> Array<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| T::of(a.cos())));
        data.extend(args.iter().map(|a| T::of(a.sin())));
    }
    Array::new(vec![timesteps.len().max(1), dim], data).expect("timestep embedding shape")
}

impl Acdit {
    /// Registers every parameter, initialized per adaLN-Zero conventions.
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        let rope = cfg.rope()?;
        let (h, tc, hd) = (cfg.hidden, cfg.token_channels(), cfg.head_dim());
        let mut store = ParamStore::new();
        let mut inits = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| -> Result<ParamId> {
            let value = match init {
                Init::Ones => Array::full(shape, T::one()),
                Init::Zeros | Init::ZeroGate => Array::zeros(shape),
                Init::TruncNormal => trunc_normal(shape, INIT_STD, rng),
                Init::Normal => Array::randn(shape, 1.0, rng),
            };
            inits.push(init);
            store.add(name, value)
        };
        let patch_w = add("patch.w".into(), vec![tc, h], Init::TruncNormal)?;
        let patch_b = add("patch.b".into(), vec![h], Init::Zeros)?;
        let t1_w = add("time.fc1.w".into(), vec![h, h], Init::TruncNormal)?;
        let t1_b = add("time.fc1.b".into(), vec![h], Init::Zeros)?;
        let t2_w = add("time.fc2.w".into(), vec![h, h], Init::TruncNormal)?;
        let t2_b = add("time.fc2.b".into(), vec![h], Init::Zeros)?;
        let labels = add("label.table".into(), vec![cfg.num_labels + 1, h], Init::Normal)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                norm1: add(n("norm1"), vec![h], Init::Ones)?,
                ada_w: add(n("ada.w"), vec![h, 6 * h], Init::ZeroGate)?,
                ada_b: add(n("ada.b"), vec![6 * h], Init::ZeroGate)?,
                qkv_w: add(n("qkv.w"), vec![h, 3 * h], Init::TruncNormal)?,
                qkv_b: add(n("qkv.b"), vec![3 * h], Init::Zeros)?,
                q_norm: add(n("q_norm"), vec![hd], Init::Ones)?,
                k_norm: add(n("k_norm"), vec![hd], Init::Ones)?,
                proj_w: add(n("proj.w"), vec![h, h], Init::TruncNormal)?,
                proj_b: add(n("proj.b"), vec![h], Init::Zeros)?,
                norm2: add(n("norm2"), vec![h], Init::Ones)?,
                fc1_w: add(n("fc1.w"), vec![h, cfg.mlp], Init::TruncNormal)?,
                fc1_b: add(n("fc1.b"), vec![cfg.mlp], Init::Zeros)?,
                fc2_w: add(n("fc2.w"), vec![cfg.mlp, h], Init::TruncNormal)?,
                fc2_b: add(n("fc2.b"), vec![h], Init::Zeros)?,
            });
        }
        let final_norm = add("final.norm".into(), vec![h], Init::Ones)?;
        let final_ada_w = add("final.ada.w".into(), vec![h, 2 * h], Init::ZeroGate)?;
        let final_ada_b = add("final.ada.b".into(), vec![2 * h], Init::ZeroGate)?;
        let head_w = add("head.w".into(), vec![h, tc], Init::ZeroGate)?;
        let head_b = add("head.b".into(), vec![tc], Init::ZeroGate)?;
        let ids = ParamIds {
            patch_w,
            patch_b,
            t1_w,
            t1_b,
            t2_w,
            t2_b,
            labels,
            layers,
            final_norm,
            final_ada_w,
            final_ada_b,
            head_w,
            head_b,
        };
        Ok((Acdit { cfg, layout, rope, ids, inits }, store))
    }

    /// Overwrites every parameter with fresh random values, including the
    /// zero-initialized modulation and head weights, so probes exercise all
    /// paths. Norm weights become `1 + noise`.
    pub fn randomize<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, std: f64, rng: &mut R) {
        for (id, init) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.inits) {
            let shape = store.get(id).shape().to_vec();
            let mut v = Array::<T>::randn(shape, std, rng);
            if *init == Init::Ones {
                v = v.map(|x| x + T::one());
            }
            store.set(id, v).expect("same shape");
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn rope(&self) -> &RopeNdConfig {
        &self.rope
    }

    pub fn null_label(&self) -> usize {
        self.cfg.num_labels
    }

    /// Checks that `store` has exactly this model's parameter layout.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(0);
        let (_, fresh_store) = Acdit::new::<T, _>(self.cfg.clone(), &mut rng)?;
        if !fresh_store.same_layout(store) {
            return Err(Error::Config("parameter set does not match the model config".into()));
        }
        Ok(())
    }

    fn scale<T: Real>(&self) -> T {
        T::of(1.0 / (self.cfg.head_dim() as f64).sqrt())
    }

    fn linear<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(p, w)?;
        let bv = g.param(p, b)?;
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    /// silu(MLP(sinusoid(t)) + label embedding), one row per condition.
    fn condition<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        timesteps: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        for &t in timesteps {
            if t < 1 || t > self.cfg.timesteps {
                return Err(Error::Timestep { t, lo: 1, hi: self.cfg.timesteps });
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l > self.cfg.num_labels) {
            return Err(Error::Invalid(format!("label {l} exceeds null label {}", self.cfg.num_labels)));
        }
        let emb = g.constant(timestep_embedding(timesteps, self.cfg.hidden))?;
        let x = self.linear(g, p, emb, self.ids.t1_w, self.ids.t1_b)?;
        let x = g.silu(x)?;
        let t = self.linear(g, p, x, self.ids.t2_w, self.ids.t2_b)?;
        let table = g.param(p, self.ids.labels)?;
        let y = g.gather_rows(table, labels.to_vec())?;
        let c = g.add(t, y)?;
        g.silu(c)
    }

    /// Per-token modulation `(rows × k·h)`; identity rows use `identity`.
    fn expand<T: Real>(
        &self,
        g: &mut Graph<T>,
        rows: Var,
        token_rows: &[Option<usize>],
        identity: &[T],
    ) -> Result<Var> {
        let n = g.value(rows).rows();
        if token_rows.iter().all(Option::is_some) {
            return g.gather_rows(rows, token_rows.iter().map(|r| r.unwrap()).collect());
        }
        let id = g.constant(Array::new(vec![1, identity.len()], identity.to_vec())?)?;
        let ext = g.concat_rows(rows, id)?;
        g.gather_rows(ext, token_rows.iter().map(|r| r.unwrap_or(n)).collect())
    }

    fn qk_norm<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, w: ParamId) -> Result<Var> {
        let rows = g.value(x).rows();
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim());
        let r = g.reshape(x, [rows * heads, hd])?;
        let wv = g.param(p, w)?;
        let n = g.rms_norm(r, wv, T::of(self.cfg.norm_eps))?;
        g.reshape(n, [rows, heads * hd])
    }

    /// One transformer block. Returns the new hidden state and this stream's
    /// own keys and values (post QK-norm and rotary).
    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        l: usize,
        x: Var,
        s: &Stream<'_, T>,
        cached: Option<&(Array<T>, Array<T>)>,
    ) -> Result<(Var, Var, Var)> {
        let ids = &self.ids.layers[l];
        let h = self.cfg.hidden;
        let eps = T::of(self.cfg.norm_eps);
        let modulation = match &s.modulation {
            Some(m) => {
                let rows = self.linear(g, p, m.cond, ids.ada_w, ids.ada_b)?;
                let mut ident = vec![T::zero(); 6 * h];
                ident[2 * h..3 * h].fill(T::one());
                ident[5 * h..].fill(T::one());
                Some(self.expand(g, rows, &m.token_rows, &ident)?)
            }
            None => None,
        };
        let part = |g: &mut Graph<T>, k: usize| -> Result<Option<Var>> {
            modulation.map(|m| g.slice_cols(m, k * h, h)).transpose()
        };

        let w1 = g.param(p, ids.norm1)?;
        let mut a = g.rms_norm(x, w1, eps)?;
        if let (Some(shift), Some(scale)) = (part(g, 0)?, part(g, 1)?) {
            a = modulate(g, a, shift, scale)?;
        }
        let qkv = self.linear(g, p, a, ids.qkv_w, ids.qkv_b)?;
        let q = g.slice_cols(qkv, 0, h)?;
        let k = g.slice_cols(qkv, h, h)?;
        let v = g.slice_cols(qkv, 2 * h, h)?;
        let q = self.qk_norm(g, p, q, ids.q_norm)?;
        let k = self.qk_norm(g, p, k, ids.k_norm)?;
        let q = g.rotary(q, s.table.clone())?;
        let k = g.rotary(k, s.table.clone())?;
        let (kk, vv) = match cached {
            None => (k, v),
            Some((keys, values)) => {
                let ck = g.constant(keys.clone())?;
                let cv = g.constant(values.clone())?;
                (g.interleave_seq(ck, k, s.batch)?, g.interleave_seq(cv, v, s.batch)?)
            }
        };
        let o = g.attention(q, kk, vv, s.mask.clone(), self.cfg.heads, self.scale())?;
        let mut o = self.linear(g, p, o, ids.proj_w, ids.proj_b)?;
        if let Some(gate) = part(g, 2)? {
            o = g.mul(o, gate)?;
        }
        let x = g.add(x, o)?;

        let w2 = g.param(p, ids.norm2)?;
        let mut a = g.rms_norm(x, w2, eps)?;
        if let (Some(shift), Some(scale)) = (part(g, 3)?, part(g, 4)?) {
            a = modulate(g, a, shift, scale)?;
        }
        let m = self.linear(g, p, a, ids.fc1_w, ids.fc1_b)?;
        let m = g.gelu(m)?;
        let mut m = self.linear(g, p, m, ids.fc2_w, ids.fc2_b)?;
        if let Some(gate) = part(g, 5)? {
            m = g.mul(m, gate)?;
        }
        Ok((g.add(x, m)?, k, v))
    }

    /// Runs all layers over a token stream; returns the final hidden state and
    /// per-layer (keys, values) of the stream's own tokens.
    fn run_stream<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        tokens: Var,
        s: &Stream<'_, T>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let mut x = self.linear(g, p, tokens, self.ids.patch_w, self.ids.patch_b)?;
        let mut kv = Vec::with_capacity(self.cfg.layers);
        let cached: Vec<Option<(Array<T>, Array<T>)>> = (0..self.cfg.layers)
            .map(|l| {
                s.cache
                    .and_then(|c| Some((c.keys(l)?, c.values(l)?)))
            })
            .collect();
        for (l, cached) in cached.iter().enumerate() {
            let (nx, k, v) = self.block(g, p, l, x, s, cached.as_ref())?;
            x = nx;
            kv.push((k, v));
        }
        Ok((x, kv))
    }

    /// Final adaLN + linear head applied to `rows` of hidden state.
    fn head<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        cond: Var,
        token_rows: Vec<usize>,
    ) -> Result<Var> {
        let h = self.cfg.hidden;
        let w = g.param(p, self.ids.final_norm)?;
        let a = g.rms_norm(x, w, T::of(self.cfg.norm_eps))?;
        let rows = self.linear(g, p, cond, self.ids.final_ada_w, self.ids.final_ada_b)?;
        let m = g.gather_rows(rows, token_rows)?;
        let shift = g.slice_cols(m, 0, h)?;
        let scale = g.slice_cols(m, h, h)?;
        let a = modulate(g, a, shift, scale)?;
        self.linear(g, p, a, self.ids.head_w, self.ids.head_b)
    }

    fn check_tokens<T: Real>(&self, x: &Array<T>, rows: usize, what: &'static str) -> Result<()> {
        let tc = self.cfg.token_channels();
        if x.len() != rows * tc || x.cols() != tc {
            return Err(shape_err(
                what,
                format!("{:?}, expected {rows} tokens of {tc} channels", x.shape()),
            ));
        }
        Ok(())
    }

    fn table<T: Real>(&self, positions: &[Vec<usize>]) -> Result<Arc<RotaryTable<T>>> {
        Ok(Arc::new(self.rope.table(positions)?))
    }

    /// Full training pass over `[clean | noise]` per batch element.
    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        inputs: &TrainInputs<T>,
        mask: &ScamMask,
    ) -> Result<TrainOutputs> {
        let (n, b, l) = (self.layout.num_blocks(), self.layout.block_size(), self.layout.seq_len());
        if mask.num_blocks() != n || mask.block_size() != b {
            return Err(Error::Layout(format!(
                "mask is {}x{} blocks, layout is {n}x{b}",
                mask.num_blocks(),
                mask.block_size()
            )));
        }
        let batch = inputs.labels.len();
        if batch == 0 {
            return Err(shape_err("forward_train", "empty batch"));
        }
        self.check_tokens(&inputs.clean, batch * l, "forward_train clean")?;
        self.check_tokens(&inputs.noise, batch * l, "forward_train noise")?;
        if inputs.timesteps.len() != batch * n {
            return Err(shape_err(
                "forward_train",
                format!("{} timesteps for {batch}x{n} blocks", inputs.timesteps.len()),
            ));
        }
        let tc = self.cfg.token_channels();
        let clean = inputs.clean.clone().reshape([batch * l, tc])?;
        let noise = inputs.noise.clone().reshape([batch * l, tc])?;
        let cv = g.constant(clean)?;
        let nv = g.constant(noise)?;
        let tokens = g.interleave_seq(cv, nv, batch)?;

        let cond_labels: Vec<usize> =
            inputs.labels.iter().flat_map(|&y| std::iter::repeat_n(y, n)).collect();
        let cond = self.condition(g, p, &inputs.timesteps, &cond_labels)?;
        let token_rows = (0..batch)
            .flat_map(|e| {
                let clean = std::iter::repeat_n(None, l);
                let noise = (0..l).map(move |s| Some(e * n + s / b));
                clean.chain(noise)
            })
            .collect();
        let positions = self.layout.positions();
        let both: Vec<Vec<usize>> = positions.iter().chain(&positions).cloned().collect();
        let stream = Stream {
            batch,
            table: self.table(&both)?,
            mask: Arc::new(mask.to_attention()),
            modulation: Some(Modulation { cond, token_rows }),
            cache: None,
        };
        let (x, _) = self.run_stream(g, p, tokens, &stream)?;
        let noise_rows: Vec<usize> =
            (0..batch).flat_map(|e| (0..l).map(move |s| e * 2 * l + l + s)).collect();
        let clean_rows: Vec<usize> =
            (0..batch).flat_map(|e| (0..l).map(move |s| e * 2 * l + s)).collect();
        let xn = g.gather_rows(x, noise_rows)?;
        let clean_hidden = g.gather_rows(x, clean_rows)?;
        let head_rows = (0..batch * l).map(|r| (r / l) * n + (r % l) / b).collect();
        let pred_eps = self.head(g, p, xn, cond, head_rows)?;
        Ok(TrainOutputs { pred_eps, clean_hidden })
    }

    /// ε prediction for noise block `i` of every batch element, attending the
    /// cached clean blocks `0..i`.
    pub fn forward_block_infer<T: Real>(
        &self,
        p: &ParamStore<T>,
        noise: &Array<T>,
        t: usize,
        labels: &[usize],
        cache: &KvCache<T>,
        i: usize,
    ) -> Result<Array<T>> {
        let b = self.layout.block_size();
        let batch = labels.len();
        self.check_cache(cache, batch, i)?;
        self.check_tokens(noise, batch * b, "forward_block_infer")?;
        let mut g = Graph::new();
        let tokens = g.constant(noise.clone().reshape([batch * b, self.cfg.token_channels()])?)?;
        let cond = self.condition(&mut g, p, &vec![t; batch], labels)?;
        let token_rows = (0..batch * b).map(|r| Some(r / b)).collect();
        let positions: Vec<Vec<usize>> = (0..b).map(|o| self.layout.coord_of(i, o)).collect();
        let stream = Stream {
            batch,
            table: self.table(&positions)?,
            mask: Arc::new(inference_mask(i, &self.layout)?),
            modulation: Some(Modulation { cond, token_rows }),
            cache: Some(cache),
        };
        let (x, _) = self.run_stream(&mut g, p, tokens, &stream)?;
        let head_rows = (0..batch * b).map(|r| r / b).collect();
        let out = self.head(&mut g, p, x, cond, head_rows)?;
        Ok(g.value(out).clone())
    }

    /// Runs clean block `i` through the stack (attending `c_≤i`) and appends
    /// its per-layer keys and values to `cache`.
    pub fn commit_clean_block<T: Real>(
        &self,
        p: &ParamStore<T>,
        clean: &Array<T>,
        cache: &mut KvCache<T>,
        i: usize,
    ) -> Result<()> {
        let b = self.layout.block_size();
        let batch = cache.batch();
        if i != cache.committed() {
            return Err(Error::Cache(format!(
                "commit of block {i} but {} blocks are cached",
                cache.committed()
            )));
        }
        self.check_cache(cache, batch, i)?;
        self.check_tokens(clean, batch * b, "commit_clean_block")?;
        let mut g = Graph::new();
        let tokens = g.constant(clean.clone().reshape([batch * b, self.cfg.token_channels()])?)?;
        let positions: Vec<Vec<usize>> = (0..b).map(|o| self.layout.coord_of(i, o)).collect();
        let stream = Stream {
            batch,
            table: self.table(&positions)?,
            mask: Arc::new(inference_mask(i, &self.layout)?),
            modulation: None,
            cache: Some(cache),
        };
        let (_, kv) = self.run_stream(&mut g, p, tokens, &stream)?;
        let kv = kv
            .into_iter()
            .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect();
        cache.push_block(i, kv)
    }

    fn check_cache<T: Real>(&self, cache: &KvCache<T>, batch: usize, i: usize) -> Result<()> {
        if i >= self.layout.num_blocks() {
            return Err(Error::Layout(format!("block {i} of {}", self.layout.num_blocks())));
        }
        if cache.committed() != i {
            return Err(Error::Cache(format!(
                "block {i} needs {i} cached blocks, cache holds {}",
                cache.committed()
            )));
        }
        if cache.batch() != batch || cache.layers() != self.cfg.layers {
            return Err(Error::Cache(format!(
                "cache for batch {} / {} layers, model needs batch {batch} / {} layers",
                cache.batch(),
                cache.layers(),
                self.cfg.layers
            )));
        }
        cache.check()
    }

    pub fn new_cache<T: Real>(&self, batch: usize) -> KvCache<T> {
        KvCache::new(self.cfg.layers, batch, self.layout.block_size(), self.cfg.hidden)
    }

    /// Plain full-sequence diffusion over noise tokens only: no clean stream,
    /// bidirectional attention over all `L` tokens in grid raster order, one
    /// timestep per batch element.
    pub fn forward_full_sequence<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        noise: &Array<T>,
        timesteps: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        let l = self.layout.seq_len();
        let batch = labels.len();
        if timesteps.len() != batch || batch == 0 {
            return Err(shape_err("forward_full_sequence", "one timestep per label required"));
        }
        self.check_tokens(noise, batch * l, "forward_full_sequence")?;
        let tokens = g.constant(noise.clone().reshape([batch * l, self.cfg.token_channels()])?)?;
        let cond = self.condition(g, p, timesteps, labels)?;
        let grid = self.layout.grid().to_vec();
        let positions: Vec<Vec<usize>> = (0..l)
            .map(|mut r| {
                let mut c = vec![0; grid.len()];
                for (o, &e) in c.iter_mut().zip(&grid).rev() {
                    *o = r % e;
                    r /= e;
                }
                c
            })
            .collect();
        let stream = Stream {
            batch,
            table: self.table(&positions)?,
            mask: Arc::new(AttentionMask::full(l, l)?),
            modulation: Some(Modulation { cond, token_rows: (0..batch * l).map(|r| Some(r / l)).collect() }),
            cache: None,
        };
        let (x, _) = self.run_stream(g, p, tokens, &stream)?;
        self.head(g, p, x, cond, (0..batch * l).map(|r| r / l).collect())
    }
}

/// `x ⊙ (1 + scale) + shift`.
fn modulate<T: Real>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = g.add_scalar(scale, T::one())?;
    let y = g.mul(x, s1)?;
    g.add(y, shift)
}

fn trunc_normal<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Array<T> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Array::new(shape, data).expect("positive extents")
}

impl Acdit {
    /// `[grid…, channels]` data → `L × token_channels` tokens in block order.
    pub fn grid_to_tokens<T: Real>(&self, grid: &Array<T>) -> Result<Array<T>> {
        let tokens = crate::layout::patchify(grid, &self.cfg.patch)?;
        let blocks = self.layout.blockify(&tokens)?;
        blocks.reshape([self.layout.seq_len(), self.cfg.token_channels()])
    }

    /// Inverse of [`grid_to_tokens`](Self::grid_to_tokens).
    pub fn tokens_to_grid<T: Real>(&self, tokens: &Array<T>) -> Result<Array<T>> {
        let (n, b) = (self.layout.num_blocks(), self.layout.block_size());
        let blocks = tokens.clone().reshape([n, b, self.cfg.token_channels()])?;
        let grid = self.layout.unblockify(&blocks)?;
        crate::layout::unpatchify(&grid, &self.cfg.patch, self.cfg.channels)
    }
}

/// Per-head RMS normalization of queries and keys with learned per-dimension
/// scales, applied before rotary encoding and the dot product.
pub fn qk_norm<T: Real>(
    q: &Array<T>,
    k: &Array<T>,
    heads: usize,
    q_scale: &Array<T>,
    k_scale: &Array<T>,
    eps: T,
) -> Result<(Array<T>, Array<T>)> {
    let norm = |x: &Array<T>, w: &Array<T>| -> Result<Array<T>> {
        if heads == 0 || !x.cols().is_multiple_of(heads) || x.cols() / heads != w.len() {
            return Err(shape_err(
                "qk_norm",
                format!("{:?} with {heads} heads and scale {:?}", x.shape(), w.shape()),
            ));
        }
        let hd = x.cols() / heads;
        let flat = x.clone().reshape([x.rows() * heads, hd])?;
        crate::numerics::rms_norm(&flat, w, eps)?.reshape(x.shape().to_vec())
    };
    Ok((norm(q, q_scale)?, norm(k, k_scale)?))
}
