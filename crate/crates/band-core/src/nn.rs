//! Parameterized building blocks: linear layers, 3D residual blocks,
//! multi-head self-attention, transformer encoder layers, LSTM stacks, and
//! sinusoidal positional encoding.
//!
//! Parameters live in a [`ParamStore`] (named, ordered, trainable-flagged).
//! Each forward pass binds the store onto a fresh tape; layer structs hold
//! store indices, not values, so the same description serves f32 training
//! and f64 gradient checking.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{EmbedderConfig, LstmConfig, TransformerConfig};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{BnBatchStats, Element, Mode, Tape, TensorId};

// ── parameter store ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub trainable: bool,
}

/// How a parameter is filled at construction. Draws are made in f64 and
/// converted, so f32 and f64 stores built from the same seed agree.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// N(0, gain/sqrt(fan_in))
    FanIn { fan_in: usize, gain: f64 },
    /// N(0, std)
    Normal { std: f64 },
}

/// Ordered, named parameter registry.
#[derive(Debug, Clone)]
pub struct ParamStore<E> {
    params: Vec<Param<E>>,
    by_name: HashMap<String, usize>,
    pub seed: u64,
}

impl<E: Element> ParamStore<E> {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new(), seed }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<E>, trainable: bool) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "param '{name}': shape {shape:?} vs {} values",
                data.len()
            )));
        }
        let idx = self.params.len();
        self.by_name.insert(name.to_string(), idx);
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), data, trainable });
        Ok(idx)
    }

    /// Add a parameter initialized from the store seed and its own name, so
    /// values do not depend on registration order.
    pub fn add_init(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::FanIn { fan_in, gain } => {
                let std = gain / (fan_in as f64).sqrt();
                self.draw_normal(name, n, std)
            }
            Init::Normal { std } => self.draw_normal(name, n, std),
        };
        self.add(name, shape, data, trainable)
    }

    fn draw_normal(&self, name: &str, n: usize, std: f64) -> Vec<E> {
        let mut rng = stream(self.seed, name, &[]);
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| E::from_f64(dist.sample(&mut rng))).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param<E> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<E> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    /// Total element count, trainable parameters only.
    pub fn trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    /// Total element count across all parameters (including running stats).
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Flip the trainable flag on every parameter whose name starts with
    /// `prefix`; returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }
}

/// Store-index → tape-id mapping for one forward pass.
#[derive(Debug)]
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    /// Pair pre-existing tape ids with store indices (used by gradient
    /// checks that bind probe leaves themselves).
    pub fn from_ids(ids: Vec<TensorId>) -> Self {
        Bound { ids }
    }

    pub fn id(&self, param: usize) -> TensorId {
        self.ids[param]
    }
}

/// Bind every parameter as a leaf on `tape` (gradients tracked for
/// trainable ones).
pub fn bind<E: Element>(store: &ParamStore<E>, tape: &mut Tape<E>) -> Bound {
    let ids = store
        .params
        .iter()
        .map(|p| {
            tape.leaf(&p.shape, p.data.clone(), p.trainable)
                .expect("store invariant: shape matches data")
        })
        .collect();
    Bound { ids }
}

// ── forward context ──────────────────────────────────────────────────

/// Attention weights captured from one layer: `heads[h]` is the row-major
/// S×S weight matrix (row = query, column = key; index 0 = pooling token
/// when one is present).
#[derive(Debug, Clone)]
pub struct AttentionRecord<E> {
    pub layer: usize,
    pub seq: usize,
    pub heads: Vec<Vec<E>>,
}

/// Running-stat refresh produced by one training-mode batch-norm site.
#[derive(Debug, Clone)]
pub struct BnUpdate<E> {
    pub mean_param: usize,
    pub var_param: usize,
    pub stats: BnBatchStats<E>,
}

/// Per-pass state: mode, dropout keying, attention capture, batch-norm
/// stat collection.
#[derive(Debug)]
pub struct ForwardCtx<E> {
    pub mode: Mode,
    pub seed: u64,
    /// (epoch, step, sample) — differentiates dropout masks across the run.
    pub salt: [u64; 3],
    pub capture: bool,
    pub use_pe: bool,
    pub records: Vec<AttentionRecord<E>>,
    pub bn_updates: Vec<BnUpdate<E>>,
    site: u64,
    layer_counter: usize,
}

impl<E: Element> ForwardCtx<E> {
    pub fn new(mode: Mode, seed: u64, salt: [u64; 3]) -> Self {
        ForwardCtx {
            mode,
            seed,
            salt,
            capture: false,
            use_pe: true,
            records: Vec::new(),
            bn_updates: Vec::new(),
            site: 0,
            layer_counter: 0,
        }
    }

    pub fn eval(seed: u64) -> Self {
        Self::new(Mode::Eval, seed, [0, 0, 0])
    }

    pub fn capturing(mut self) -> Self {
        self.capture = true;
        self
    }
}

/// Everything a layer needs during one forward pass.
pub struct Fwd<'a, E: Element> {
    pub tape: &'a mut Tape<E>,
    pub store: &'a ParamStore<E>,
    pub bound: &'a Bound,
    pub ctx: &'a mut ForwardCtx<E>,
}

impl<'a, E: Element> Fwd<'a, E> {
    pub fn new(
        tape: &'a mut Tape<E>,
        store: &'a ParamStore<E>,
        bound: &'a Bound,
        ctx: &'a mut ForwardCtx<E>,
    ) -> Self {
        Fwd { tape, store, bound, ctx }
    }

    /// Dropout with a mask keyed by (seed, site ordinal, epoch/step/sample):
    /// stable across structurally identical passes, fresh across steps.
    pub fn dropout(&mut self, x: TensorId, rate: f64) -> Result<TensorId> {
        let site = self.ctx.site;
        self.ctx.site += 1;
        let mut rng = stream(
            self.ctx.seed,
            "dropout",
            &[site, self.ctx.salt[0], self.ctx.salt[1], self.ctx.salt[2]],
        );
        self.tape.dropout(x, rate, self.ctx.mode, &mut rng)
    }
}

// ── linear ───────────────────────────────────────────────────────────

/// Dense layer y = x·W (+ b); weights stored [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add_init(
            &format!("{name}.w"),
            &[in_dim, out_dim],
            Init::FanIn { fan_in: in_dim, gain: 1.0 },
            true,
        )?;
        let b = if bias {
            Some(store.add_init(&format!("{name}.b"), &[out_dim], Init::Zeros, true)?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    /// x: [S, in] → [S, out]
    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId) -> Result<TensorId> {
        let y = f.tape.matmul(x, f.bound.id(self.w))?;
        match self.b {
            Some(b) => f.tape.add_row_bias(y, f.bound.id(b)),
            None => Ok(y),
        }
    }
}

// ── batch norm site ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub eps: f64,
}

impl BnLayer {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize, eps: f64) -> Result<Self> {
        Ok(BnLayer {
            gamma: store.add_init(&format!("{name}.gamma"), &[channels], Init::Ones, true)?,
            beta: store.add_init(&format!("{name}.beta"), &[channels], Init::Zeros, true)?,
            running_mean: store.add_init(&format!("{name}.running_mean"), &[channels], Init::Zeros, false)?,
            running_var: store.add_init(&format!("{name}.running_var"), &[channels], Init::Ones, false)?,
            eps,
        })
    }

    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId) -> Result<TensorId> {
        let eps = E::from_f64(self.eps);
        match f.ctx.mode {
            Mode::Train => {
                let (y, stats) =
                    f.tape
                        .batch_norm_train(x, f.bound.id(self.gamma), f.bound.id(self.beta), eps)?;
                f.ctx.bn_updates.push(BnUpdate {
                    mean_param: self.running_mean,
                    var_param: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => f.tape.batch_norm_eval(
                x,
                f.bound.id(self.gamma),
                f.bound.id(self.beta),
                &f.store.get(self.running_mean).data,
                &f.store.get(self.running_var).data,
                eps,
            ),
        }
    }
}

// ── conv layer & residual block ──────────────────────────────────────

/// conv3d with optional bias; bias is used exactly when batch norm is off.
#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub w: usize,
    pub b: Option<usize>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k * k;
        let w = store.add_init(
            &format!("{name}.w"),
            &[c_out, c_in, k, k, k],
            Init::FanIn { fan_in, gain: 2.0f64.sqrt() },
            true,
        )?;
        let b = if bias {
            Some(store.add_init(&format!("{name}.b"), &[c_out], Init::Zeros, true)?)
        } else {
            None
        };
        Ok(Conv3dLayer { w, b, stride, pad })
    }

    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId) -> Result<TensorId> {
        let y = f.tape.conv3d(x, f.bound.id(self.w), self.stride, self.pad)?;
        match self.b {
            Some(b) => f.tape.add_chan_bias(y, f.bound.id(b)),
            None => Ok(y),
        }
    }
}

/// Two 3×3×3 convs with a skip path; 1×1×1 projection when shape changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock3d {
    pub conv1: Conv3dLayer,
    pub bn1: Option<BnLayer>,
    pub conv2: Conv3dLayer,
    pub bn2: Option<BnLayer>,
    pub proj: Option<(Conv3dLayer, Option<BnLayer>)>,
}

impl ResidualBlock3d {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        cfg: &EmbedderConfig,
    ) -> Result<Self> {
        let bias = !cfg.batch_norm;
        let conv1 = Conv3dLayer::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, bias)?;
        let conv2 = Conv3dLayer::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, bias)?;
        let (bn1, bn2) = if cfg.batch_norm {
            (
                Some(BnLayer::new(store, &format!("{name}.bn1"), c_out, cfg.bn_eps)?),
                Some(BnLayer::new(store, &format!("{name}.bn2"), c_out, cfg.bn_eps)?),
            )
        } else {
            (None, None)
        };
        let proj = if stride != 1 || c_in != c_out {
            let c = Conv3dLayer::new(store, &format!("{name}.proj"), c_in, c_out, 1, stride, 0, bias)?;
            let pbn = if cfg.batch_norm {
                Some(BnLayer::new(store, &format!("{name}.proj_bn"), c_out, cfg.bn_eps)?)
            } else {
                None
            };
            Some((c, pbn))
        } else {
            None
        };
        Ok(ResidualBlock3d { conv1, bn1, conv2, bn2, proj })
    }

    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId) -> Result<TensorId> {
        let mut main = self.conv1.forward(f, x)?;
        if let Some(bn) = &self.bn1 {
            main = bn.forward(f, main)?;
        }
        main = f.tape.relu(main);
        main = self.conv2.forward(f, main)?;
        if let Some(bn) = &self.bn2 {
            main = bn.forward(f, main)?;
        }
        let skip = match &self.proj {
            None => x,
            Some((conv, pbn)) => {
                let mut s = conv.forward(f, x)?;
                if let Some(bn) = pbn {
                    s = bn.forward(f, s)?;
                }
                s
            }
        };
        let sum = f.tape.add(main, skip)?;
        Ok(f.tape.relu(sum))
    }
}

/// ResNet-18 3D trunk: 7×7×7 stride-2 stem, four stages of two residual
/// blocks (stage strides 1,2,2,2), global average pool. No max-pool after
/// the stem — small inputs would collapse too early.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub conv1: Conv3dLayer,
    pub bn1: Option<BnLayer>,
    pub stem_pool: bool,
    pub stages: Vec<Vec<ResidualBlock3d>>,
    pub out_dim: usize,
}

impl Embedder {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        cfg: &EmbedderConfig,
        in_channels: usize,
    ) -> Result<Self> {
        let bias = !cfg.batch_norm;
        let conv1 = Conv3dLayer::new(store, &format!("{name}.conv1"), in_channels, cfg.widths[0], 7, 2, 3, bias)?;
        let bn1 = if cfg.batch_norm {
            Some(BnLayer::new(store, &format!("{name}.bn1"), cfg.widths[0], cfg.bn_eps)?)
        } else {
            None
        };
        let mut stages = Vec::with_capacity(4);
        let mut c_in = cfg.widths[0];
        for (s, (&width, stride)) in cfg.widths.iter().zip([1usize, 2, 2, 2]).enumerate() {
            let mut blocks = Vec::with_capacity(2);
            for b in 0..2 {
                let (ci, st) = if b == 0 { (c_in, stride) } else { (width, 1) };
                blocks.push(ResidualBlock3d::new(
                    store,
                    &format!("{name}.stage{}.block{}", s + 1, b),
                    ci,
                    width,
                    st,
                    cfg,
                )?);
            }
            stages.push(blocks);
            c_in = width;
        }
        Ok(Embedder { conv1, bn1, stem_pool: cfg.stem_pool, stages, out_dim: cfg.widths[3] })
    }

    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId) -> Result<TensorId> {
        let (e, _) = self.forward_inner(f, x, false)?;
        Ok(e)
    }

    /// Forward that also returns each named conv-stage activation, the
    /// hooks for spatial attribution.
    pub fn forward_taps<E: Element>(
        &self,
        f: &mut Fwd<E>,
        x: TensorId,
    ) -> Result<(TensorId, Vec<(String, TensorId)>)> {
        let (e, taps) = self.forward_inner(f, x, true)?;
        Ok((e, taps))
    }

    fn forward_inner<E: Element>(
        &self,
        f: &mut Fwd<E>,
        x: TensorId,
        tap: bool,
    ) -> Result<(TensorId, Vec<(String, TensorId)>)> {
        let mut taps = Vec::new();
        let mut x = self.conv1.forward(f, x)?;
        if let Some(bn) = &self.bn1 {
            x = bn.forward(f, x)?;
        }
        x = f.tape.relu(x);
        if tap {
            taps.push(("conv1".to_string(), x));
        }
        if self.stem_pool {
            x = f.tape.maxpool3d(x, 3, 2, 1)?;
        }
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(f, x)?;
            }
            if tap {
                taps.push((format!("stage{}", s + 1), x));
            }
        }
        let e = f.tape.global_avg_pool3d(x)?;
        Ok((e, taps))
    }
}

/// Two dense layers with a ReLU and dropout between: d_in → hidden →
/// classes.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Classifier {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Classifier {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, classes, true)?,
            dropout,
        })
    }

    /// x is [1, d_in]; returns [1, classes].
    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId) -> Result<TensorId> {
        let h = self.fc1.forward(f, x)?;
        let h = f.tape.relu(h);
        let h = f.dropout(h, self.dropout)?;
        self.fc2.forward(f, h)
    }
}

// ── multi-head self-attention ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "attention: d_model {d_model} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), d_model, d_model, true)?,
            wk: Linear::new(store, &format!("{name}.wk"), d_model, d_model, true)?,
            wv: Linear::new(store, &format!("{name}.wv"), d_model, d_model, true)?,
            wo: Linear::new(store, &format!("{name}.wo"), d_model, d_model, true)?,
            heads,
            d_model,
        })
    }

    /// x: [S, d] → [S, d]; records per-head S×S weights when capture is on.
    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId, layer: usize) -> Result<TensorId> {
        let s = f.tape.shape(x)[0];
        if f.tape.shape(x)[1] != self.d_model {
            return Err(Error::ShapeMismatch(format!(
                "attention: input dim {} vs d_model {}",
                f.tape.shape(x)[1],
                self.d_model
            )));
        }
        let dh = self.d_model / self.heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.wq.forward(f, x)?;
        let k = self.wk.forward(f, x)?;
        let v = self.wv.forward(f, x)?;
        let mut captured: Vec<Vec<E>> = Vec::new();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = f.tape.slice_cols(q, lo, hi)?;
            let kh = f.tape.slice_cols(k, lo, hi)?;
            let vh = f.tape.slice_cols(v, lo, hi)?;
            let kt = f.tape.transpose(kh)?;
            let scores = f.tape.matmul(qh, kt)?;
            let scaled = f.tape.scale(scores, scale);
            let attn = f.tape.softmax(scaled, 1)?;
            if f.ctx.capture {
                captured.push(f.tape.data(attn).to_vec());
            }
            head_outs.push(f.tape.matmul(attn, vh)?);
        }
        if f.ctx.capture {
            f.ctx.records.push(AttentionRecord { layer, seq: s, heads: captured });
        }
        let merged = f.tape.concat_cols(&head_outs)?;
        self.wo.forward(f, merged)
    }
}

// ── layer norm site ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl LnLayer {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Result<Self> {
        Ok(LnLayer {
            gamma: store.add_init(&format!("{name}.gamma"), &[dim], Init::Ones, true)?,
            beta: store.add_init(&format!("{name}.beta"), &[dim], Init::Zeros, true)?,
            eps: 1e-5,
        })
    }

    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId) -> Result<TensorId> {
        f.tape
            .layer_norm(x, f.bound.id(self.gamma), f.bound.id(self.beta), E::from_f64(self.eps))
    }
}

// ── transformer encoder layer ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TransformerEncoderLayer {
    pub mha: MultiHeadAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LnLayer,
    pub ln2: LnLayer,
    pub dropout: f64,
    pub pre_norm: bool,
    pub index: usize,
}

impl TransformerEncoderLayer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        cfg: &TransformerConfig,
        index: usize,
    ) -> Result<Self> {
        Ok(TransformerEncoderLayer {
            mha: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.d_model, cfg.ff_dim, true)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ff_dim, cfg.d_model, true)?,
            ln1: LnLayer::new(store, &format!("{name}.ln1"), cfg.d_model)?,
            ln2: LnLayer::new(store, &format!("{name}.ln2"), cfg.d_model)?,
            dropout: cfg.dropout,
            pre_norm: cfg.pre_norm,
            index,
        })
    }

    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, x: TensorId) -> Result<TensorId> {
        if self.pre_norm {
            let n1 = self.ln1.forward(f, x)?;
            let a = self.mha.forward(f, n1, self.index)?;
            let a = f.dropout(a, self.dropout)?;
            let x = f.tape.add(x, a)?;
            let n2 = self.ln2.forward(f, x)?;
            let h = self.ff1.forward(f, n2)?;
            let h = f.tape.relu(h);
            let h = self.ff2.forward(f, h)?;
            let h = f.dropout(h, self.dropout)?;
            f.tape.add(x, h)
        } else {
            let a = self.mha.forward(f, x, self.index)?;
            let a = f.dropout(a, self.dropout)?;
            let sum = f.tape.add(x, a)?;
            let x = self.ln1.forward(f, sum)?;
            let h = self.ff1.forward(f, x)?;
            let h = f.tape.relu(h);
            let h = self.ff2.forward(f, h)?;
            let h = f.dropout(h, self.dropout)?;
            let sum2 = f.tape.add(x, h)?;
            self.ln2.forward(f, sum2)
        }
    }
}

// ── LSTM ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LstmCellParams {
    /// [d_in, 4h], gate order (input, forget, cell, output)
    pub w_ih: usize,
    /// [h, 4h]
    pub w_hh: usize,
    /// [4h]
    pub b: usize,
}

impl LstmCellParams {
    fn new<E: Element>(store: &mut ParamStore<E>, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(LstmCellParams {
            w_ih: store.add_init(
                &format!("{name}.w_ih"),
                &[d_in, 4 * hidden],
                Init::FanIn { fan_in: d_in, gain: 1.0 },
                true,
            )?,
            w_hh: store.add_init(
                &format!("{name}.w_hh"),
                &[hidden, 4 * hidden],
                Init::FanIn { fan_in: hidden, gain: 1.0 },
                true,
            )?,
            b: store.add_init(&format!("{name}.b"), &[4 * hidden], Init::Zeros, true)?,
        })
    }
}

/// Stacked (optionally bidirectional) LSTM; layer l consumes layer l-1's
/// full output sequence.
#[derive(Debug, Clone)]
pub struct LstmStack {
    pub layers: Vec<(LstmCellParams, Option<LstmCellParams>)>,
    pub hidden: usize,
}

impl LstmStack {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        cfg: &LstmConfig,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        let dir_out = if cfg.bidirectional { 2 * cfg.hidden } else { cfg.hidden };
        for l in 0..cfg.layers {
            let input = if l == 0 { d_in } else { dir_out };
            let fwd = LstmCellParams::new(store, &format!("{name}.l{l}.fwd"), input, cfg.hidden)?;
            let bwd = if cfg.bidirectional {
                Some(LstmCellParams::new(store, &format!("{name}.l{l}.bwd"), input, cfg.hidden)?)
            } else {
                None
            };
            layers.push((fwd, bwd));
        }
        Ok(LstmStack { layers, hidden: cfg.hidden })
    }

    pub fn out_dim(&self) -> usize {
        match self.layers.last() {
            Some((_, Some(_))) => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    fn run_direction<E: Element>(
        &self,
        f: &mut Fwd<E>,
        cell: &LstmCellParams,
        rows: &[TensorId],
        reversed: bool,
    ) -> Result<Vec<TensorId>> {
        let h_dim = self.hidden;
        let mut h = f.tape.zeros(&[1, h_dim], false);
        let mut c = f.tape.zeros(&[1, h_dim], false);
        let order: Vec<usize> = if reversed {
            (0..rows.len()).rev().collect()
        } else {
            (0..rows.len()).collect()
        };
        let mut outs = vec![h; rows.len()];
        for t in order {
            let zi = f.tape.matmul(rows[t], f.bound.id(cell.w_ih))?;
            let zh = f.tape.matmul(h, f.bound.id(cell.w_hh))?;
            let z = f.tape.add(zi, zh)?;
            let z = f.tape.add_row_bias(z, f.bound.id(cell.b))?;
            let i_g = f.tape.slice_cols(z, 0, h_dim)?;
            let f_g = f.tape.slice_cols(z, h_dim, 2 * h_dim)?;
            let g_g = f.tape.slice_cols(z, 2 * h_dim, 3 * h_dim)?;
            let o_g = f.tape.slice_cols(z, 3 * h_dim, 4 * h_dim)?;
            let i_s = f.tape.sigmoid(i_g);
            let f_s = f.tape.sigmoid(f_g);
            let g_t = f.tape.tanh(g_g);
            let o_s = f.tape.sigmoid(o_g);
            let fc = f.tape.mul(f_s, c)?;
            let ig = f.tape.mul(i_s, g_t)?;
            c = f.tape.add(fc, ig)?;
            let ct = f.tape.tanh(c);
            h = f.tape.mul(o_s, ct)?;
            outs[t] = h;
        }
        Ok(outs)
    }

    /// seq: [S, d_in] → [S, h] (or [S, 2h] bidirectional).
    pub fn forward<E: Element>(&self, f: &mut Fwd<E>, seq: TensorId) -> Result<TensorId> {
        let s = f.tape.shape(seq)[0];
        if s == 0 {
            return Err(Error::Contract("lstm: empty sequence".into()));
        }
        let mut current = seq;
        for (fwd, bwd) in &self.layers {
            let cols = f.tape.shape(current)[1];
            let rows: Vec<TensorId> = (0..s)
                .map(|t| {
                    let r = f.tape.slice_row(current, t)?;
                    f.tape.reshape(r, &[1, cols])
                })
                .collect::<Result<_>>()?;
            let outs_f = self.run_direction(f, fwd, &rows, false)?;
            let per_t: Vec<TensorId> = match bwd {
                None => outs_f,
                Some(bcell) => {
                    let outs_b = self.run_direction(f, bcell, &rows, true)?;
                    outs_f
                        .iter()
                        .zip(&outs_b)
                        .map(|(&a, &b)| f.tape.concat_cols(&[a, b]))
                        .collect::<Result<_>>()?
                }
            };
            // Each per-t output is [1, h_out]; flatten into [S, h_out].
            let flat: Vec<TensorId> = per_t;
            current = f.tape.stack_rows(&flat)?;
        }
        Ok(current)
    }
}

// ── positional encoding ──────────────────────────────────────────────

/// Sinusoidal table: PE[pos, 2i] = sin(pos/10000^(2i/d)),
/// PE[pos, 2i+1] = cos(pos/10000^(2i/d)).
pub fn positional_encode_values(s: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even dim, got {d}")));
    }
    let mut pe = vec![0.0f64; s * d];
    for pos in 0..s {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = rate.sin();
            pe[pos * d + 2 * i + 1] = rate.cos();
        }
    }
    Ok(pe)
}

/// The table as a constant tape tensor of shape [S, d].
pub fn positional_encode<E: Element>(tape: &mut Tape<E>, s: usize, d: usize) -> Result<TensorId> {
    let vals = positional_encode_values(s, d)?;
    tape.constant(&[s, d], vals.into_iter().map(E::from_f64).collect())
}
