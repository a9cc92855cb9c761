//! Optimization: Adam with cosine annealing, the standard training loop,
//! frozen-trunk stage-2 training over cached embeddings, and the three
//! transfer regimes.

use rayon::prelude::*;

use crate::checkpoint::params_digest;
use crate::config::ModelConfig;
use crate::data::{window_indices, window_start, Volume4D, WindowMode};
use crate::error::{Error, Result};
use crate::models::{argmax, Model};
use crate::nn::{bind, ForwardCtx, Fwd, ParamStore};
use crate::rng::stream;
use crate::tensor::{Element, Mode, Tape};

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Classic coupled L2 (decay added to the gradient) by default; set
    /// for the decoupled variant (decay applied directly to weights).
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, decoupled: false }
    }
}

/// First/second moment buffers mirroring the parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new<E: Element>(store: &ParamStore<E>, cfg: AdamConfig) -> AdamState {
        let m = store.iter().map(|p| vec![0.0; p.data.len()]).collect::<Vec<_>>();
        AdamState { v: m.clone(), m, step: 0, cfg }
    }

    /// One bias-corrected update. `grads[i]` is the summed-and-averaged
    /// gradient for parameter i, or None for frozen/untouched parameters.
    pub fn apply<E: Element>(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient slots vs {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(i);
            if !p.trainable {
                continue;
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient {bad} in parameter {}",
                    p.name
                )));
            }
            for (j, w) in p.data.iter_mut().enumerate() {
                let wv = w.to_f64();
                let mut gj = g[j];
                if !self.cfg.decoupled {
                    gj += self.cfg.weight_decay * wv;
                }
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * gj;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * gj * gj;
                let mhat = *m / c1;
                let vhat = *v / c2;
                let mut next = wv - lr * mhat / (vhat.sqrt() + self.cfg.eps);
                if self.cfg.decoupled {
                    next -= lr * self.cfg.weight_decay * wv;
                }
                *w = E::from_f64(next);
            }
        }
        Ok(())
    }
}

// ── learning-rate schedule ───────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub total_steps: u64,
}

/// lr(t) = min + ½(base−min)(1 + cos(π t / T)).
pub fn cosine_lr(t: u64, s: &LrSchedule) -> Result<f64> {
    if t > s.total_steps {
        return Err(Error::Contract(format!("step {t} beyond schedule length {}", s.total_steps)));
    }
    if s.total_steps == 0 {
        return Ok(s.base);
    }
    let frac = t as f64 / s.total_steps as f64;
    Ok(s.min + 0.5 * (s.base - s.min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Micro-batches each optimizer step is accumulated over; must divide
    /// `batch`.
    pub accum: usize,
    pub lr_base: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Parameter-name prefixes excluded from training.
    pub freeze: Vec<String>,
    /// Window length fed to the model.
    pub window: usize,
}

impl TrainConfig {
    pub fn quick(window: usize, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 8,
            accum: 1,
            lr_base: 1e-3,
            lr_min: 1e-5,
            adam: AdamConfig::default(),
            seed,
            freeze: Vec::new(),
            window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.accum == 0 || self.window == 0 {
            return Err(Error::Config("epochs, batch, accum, and window must all be ≥ 1".into()));
        }
        if self.batch % self.accum != 0 {
            return Err(Error::Config(format!(
                "batch {} not divisible into {} micro-batches",
                self.batch, self.accum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitRef<'a> {
    pub train: &'a [usize],
    pub val: &'a [usize],
}

#[derive(Debug)]
pub struct TrainOutcome<E: Element> {
    /// Parameters rolled back to the best-validation snapshot.
    pub model: Model<E>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub steps_per_epoch: usize,
    /// JSON-lines metrics: one object per epoch plus a final summary.
    pub log: Vec<String>,
}

/// Per-frame embeddings for every instance, replacing live trunk passes
/// in stage-2 training. `digest` ties the rows to the trunk parameters
/// and model config that produced them.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    pub digest: String,
    /// rows[instance][frame] = embedding vector.
    pub rows: Vec<Vec<Vec<f32>>>,
}

pub fn cache_digest<E: Element>(model: &Model<E>, n_instances: usize) -> String {
    format!(
        "{}-{}-{}",
        model.cfg.digest(),
        params_digest(&model.store, "embedder."),
        n_instances
    )
}

/// Embed every native frame of every instance once.
pub fn build_embedding_cache<E: Element>(
    model: &Model<E>,
    volumes: &[Volume4D],
) -> Result<EmbeddingCache> {
    let rows = volumes
        .par_iter()
        .map(|v| {
            let frames: Vec<Vec<E>> = (0..v.t)
                .map(|i| v.frame(i).iter().map(|&x| E::from_f64(x as f64)).collect())
                .collect();
            let emb = model.embed_frames_inference(&frames)?;
            Ok(emb
                .into_iter()
                .map(|e| e.into_iter().map(|x| x.to_f64() as f32).collect())
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingCache { digest: cache_digest(model, volumes.len()), rows })
}

pub fn clip_values<E: Element>(v: &Volume4D, k: usize, start: usize) -> Vec<E> {
    let vox = v.voxels();
    let mut out = Vec::with_capacity(k * vox);
    for i in window_indices(v.t, k, start) {
        out.extend(v.frame(i).iter().map(|&x| E::from_f64(x as f64)));
    }
    out
}

/// Forward+backward for one sample; returns (loss, per-parameter gradient
/// sums, batch-norm updates). `embeddings` short-circuits the trunk.
#[allow(clippy::too_many_arguments)]
fn sample_pass<E: Element>(
    model: &Model<E>,
    v: &Volume4D,
    k: usize,
    start: usize,
    seed: u64,
    salt: [u64; 3],
    embeddings: Option<&Vec<Vec<f32>>>,
) -> Result<(f64, Vec<Option<Vec<f64>>>, Vec<crate::nn::BnUpdate<E>>)> {
    let mut tape = Tape::<E>::new();
    let bound = bind(&model.store, &mut tape);
    let mut ctx = ForwardCtx::new(Mode::Train, seed, salt);
    let logits = {
        let mut f = Fwd::new(&mut tape, &model.store, &bound, &mut ctx);
        match embeddings {
            Some(rows) => {
                let d = rows[0].len();
                let ids = window_indices(v.t, k, start)
                    .into_iter()
                    .map(|i| {
                        let vals: Vec<E> = rows[i].iter().map(|&x| E::from_f64(x as f64)).collect();
                        f.tape.leaf(&[d], vals, false)
                    })
                    .collect::<Result<Vec<_>>>()?;
                model.head_forward(&mut f, &ids)?
            }
            None => {
                let [dx, dy, dz] = model.cfg.extents;
                let clip = f.tape.leaf(&[k, dx, dy, dz], clip_values(v, k, start), false)?;
                model.forward(&mut f, clip)?
            }
        }
    };
    let loss = tape.cross_entropy(logits, &[v.label])?;
    let loss_val = tape.data(loss)[0].to_f64();
    if !loss_val.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss_val}")));
    }
    tape.backward(loss)?;
    let grads = (0..model.store.len())
        .map(|i| {
            tape.grad(bound.id(i))
                .map(|g| g.iter().map(|&x| Element::to_f64(x)).collect::<Vec<f64>>())
        })
        .collect();
    Ok((loss_val, grads, std::mem::take(&mut ctx.bn_updates)))
}

fn apply_bn_updates<E: Element>(store: &mut ParamStore<E>, updates: Vec<crate::nn::BnUpdate<E>>) {
    let momentum = 0.1;
    for u in updates {
        for (idx, stats) in [(u.mean_param, &u.stats.mean), (u.var_param, &u.stats.var)] {
            let p = store.get_mut(idx);
            for (r, &b) in p.data.iter_mut().zip(stats.iter()) {
                let rv = r.to_f64();
                *r = E::from_f64((1.0 - momentum) * rv + momentum * b.to_f64());
            }
        }
    }
}

/// Accuracy over `idx` using deterministic evaluation windows (start 0).
pub fn evaluate<E: Element>(
    model: &Model<E>,
    volumes: &[Volume4D],
    idx: &[usize],
    k: usize,
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = idx
        .par_iter()
        .map(|&i| {
            let v = &volumes[i];
            let clip = clip_values::<E>(v, k, 0);
            let (logits, _) = model.infer_logits(&clip, k, false)?;
            Ok(usize::from(argmax(&logits) == v.label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / idx.len() as f64)
}

/// Standard loop: shuffled batches, Adam + cosine schedule, per-epoch
/// validation, best-validation snapshot retained (ties → earlier epoch).
pub fn train_run<E: Element>(
    mut model: Model<E>,
    volumes: &[Volume4D],
    split: SplitRef,
    cfg: &TrainConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    for prefix in &cfg.freeze {
        if model.store.set_trainable_prefix(prefix, false) == 0 {
            return Err(Error::Parameter(format!("freeze prefix {prefix:?} matches no parameters")));
        }
    }
    if let Some(c) = cache {
        let want = cache_digest(&model, volumes.len());
        if c.digest != want {
            return Err(Error::StaleCache(format!(
                "embedding cache digest {} does not match model/trunk state {want}",
                c.digest
            )));
        }
    }
    let k = cfg.window;
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch);
    let sched = LrSchedule {
        base: cfg.lr_base,
        min: cfg.lr_min,
        total_steps: (steps_per_epoch * cfg.epochs) as u64,
    };
    let mut adam = AdamState::new(&model.store, cfg.adam.clone());
    let mut best: Option<(f64, usize, ParamStore<E>)> = None;
    let mut log = Vec::new();
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = split.train.to_vec();
        let mut erng = stream(cfg.seed, "epoch-shuffle", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut erng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let lr = cosine_lr(global_step, &sched)?;
            last_lr = lr;
            let mut accum: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
            // Micro-batches sequential; samples within one micro-batch in
            // parallel, reduced in sample order so worker count cannot
            // change the result.
            for micro in chunk.chunks(cfg.batch / cfg.accum) {
                let passes: Vec<_> = micro
                    .par_iter()
                    .map(|&vi| {
                        let v = &volumes[vi];
                        let mut wrng =
                            stream(cfg.seed, "window-start", &[epoch as u64, step as u64, vi as u64]);
                        let start = window_start(v.t, k, WindowMode::Train, &mut wrng);
                        // Salted by the instance index, so micro-batch
                        // structure cannot change dropout masks.
                        sample_pass(
                            model_ref(&model),
                            v,
                            k,
                            start,
                            cfg.seed,
                            [epoch as u64, step as u64, vi as u64],
                            cache.map(|c| &c.rows[vi]),
                        )
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| annotate_divergence(e, epoch, step))?;
                for (loss, grads, bn) in passes {
                    epoch_loss += loss;
                    for (slot, g) in accum.iter_mut().zip(grads) {
                        match (slot.as_mut(), g) {
                            (Some(acc), Some(g)) => {
                                for (a, b) in acc.iter_mut().zip(g) {
                                    *a += b;
                                }
                            }
                            (None, Some(g)) => *slot = Some(g),
                            _ => {}
                        }
                    }
                    apply_bn_updates(&mut model.store, bn);
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for slot in accum.iter_mut().flatten() {
                for g in slot.iter_mut() {
                    *g *= scale;
                }
            }
            adam
                .apply(&mut model.store, &accum, lr)
                .map_err(|e| annotate_divergence(e, epoch, step))?;
            global_step += 1;
        }
        let train_loss = epoch_loss / split.train.len() as f64;
        let val_acc = evaluate(&model, volumes, split.val, k)?;
        let is_best = match &best {
            None => true,
            Some((acc, _, _)) => val_acc > *acc,
        };
        if is_best {
            best = Some((val_acc, epoch, model.store.clone()));
        }
        log.push(
            serde_json::json!({
                "epoch": epoch,
                "step": global_step,
                "lr": last_lr,
                "train_loss": train_loss,
                "val_acc": val_acc,
                "best": is_best,
            })
            .to_string(),
        );
    }
    let (best_val_acc, best_epoch, best_store) = best.unwrap();
    model.store = best_store;
    log.push(
        serde_json::json!({
            "event": "summary",
            "best_epoch": best_epoch,
            "best_val_acc": best_val_acc,
            "steps_per_epoch": steps_per_epoch,
        })
        .to_string(),
    );
    Ok(TrainOutcome { model, best_epoch, best_val_acc, steps_per_epoch, log })
}

// Borrow helper: rayon closures capture &Model, but `model.store` is
// mutated between batches; this pins the immutable phase explicitly.
fn model_ref<E: Element>(m: &Model<E>) -> &Model<E> {
    m
}

fn annotate_divergence(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch} step {step}: {msg}")),
        other => other,
    }
}

/// Stage-2 protocol: trunk frozen, head trained, trunk passes replaced by
/// cached per-frame embeddings when a cache is supplied.
pub fn frozen_head_train<E: Element>(
    mut model: Model<E>,
    volumes: &[Volume4D],
    split: SplitRef,
    cfg: &TrainConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<TrainOutcome<E>> {
    let mut cfg = cfg.clone();
    if !cfg.freeze.iter().any(|p| p == "embedder.") {
        cfg.freeze.push("embedder.".into());
    }
    // Re-mark in case a previous run flipped flags.
    model.store.set_trainable_prefix("embedder.", true);
    train_run(model, volumes, split, &cfg, cache)
}

// ── transfer regimes ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferRegime {
    Freeze,
    Finetune,
    Scratch,
}

impl TransferRegime {
    pub fn parse(s: &str) -> Result<TransferRegime> {
        match s {
            "freeze" => Ok(TransferRegime::Freeze),
            "finetune" => Ok(TransferRegime::Finetune),
            "scratch" => Ok(TransferRegime::Scratch),
            _ => Err(Error::Config(format!("unknown regime {s:?} (freeze|finetune|scratch)"))),
        }
    }
}

pub struct TransferSetup<E: Element> {
    pub model: Model<E>,
    pub freeze: Vec<String>,
    /// Human-readable notes (e.g. ignored-checkpoint warning) for the log.
    pub warnings: Vec<String>,
}

/// Assemble the starting model for a transfer run against a target config
/// whose class count may differ from the source checkpoint's.
pub fn transfer_setup<E: Element>(
    source: Option<&Model<E>>,
    target_cfg: &ModelConfig,
    regime: TransferRegime,
    seed: u64,
) -> Result<TransferSetup<E>> {
    let mut warnings = Vec::new();
    let mut model: Model<E> = Model::build(target_cfg.clone(), seed)?;
    match regime {
        TransferRegime::Scratch => {
            if source.is_some() {
                warnings.push("scratch regime ignores the supplied checkpoint".to_string());
            }
            Ok(TransferSetup { model, freeze: Vec::new(), warnings })
        }
        TransferRegime::Freeze | TransferRegime::Finetune => {
            let src = source.ok_or_else(|| {
                Error::Config(format!("{regime:?} regime requires a source checkpoint"))
            })?;
            // Freeze: trunk only, fresh head. Finetune: everything except
            // the class-count-dependent output layer.
            let skip_head = regime == TransferRegime::Freeze;
            let mut copied = 0usize;
            for p in src.store.iter() {
                if skip_head && !p.name.starts_with("embedder.") {
                    continue;
                }
                if p.name.starts_with("head.classifier.fc2") {
                    continue;
                }
                if let Some(idx) = model.store.index_of(&p.name) {
                    let dst = model.store.get_mut(idx);
                    if dst.shape == p.shape {
                        dst.data = p.data.clone();
                        copied += 1;
                    } else {
                        return Err(Error::ShapeMismatch(format!(
                            "transfer: {} is {:?} in source, {:?} in target",
                            p.name, p.shape, dst.shape
                        )));
                    }
                }
            }
            if copied == 0 {
                return Err(Error::Contract("transfer copied no parameters".into()));
            }
            let freeze = if skip_head { vec!["embedder.".to_string()] } else { Vec::new() };
            Ok(TransferSetup { model, freeze, warnings })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelKind, ModelConfig};
    use crate::data::{generate_synthetic, stratified_split, SyntheticTaskSpec};
    use approx::assert_relative_eq;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule { base: 0.1, min: 0.001, total_steps: 100 };
        assert_relative_eq!(cosine_lr(0, &s).unwrap(), 0.1);
        assert_relative_eq!(cosine_lr(100, &s).unwrap(), 0.001);
        assert_relative_eq!(cosine_lr(50, &s).unwrap(), (0.1 + 0.001) / 2.0, epsilon = 1e-12);
        assert!(cosine_lr(101, &s).is_err());
        // Monotone non-increasing.
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(t, &s).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    fn toy_store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        s.add("w", &[values.len()], values.to_vec(), true).unwrap();
        s
    }

    #[test]
    fn adam_first_step_magnitude() {
        // With constant gradient g and zero decay, the bias-corrected
        // first step is lr·g/(|g|+ε') ≈ lr·sign(g).
        let mut store = toy_store(&[1.0, -2.0, 3.0]);
        let mut adam = AdamState::new(&store, AdamConfig { weight_decay: 0.0, ..Default::default() });
        let g = vec![Some(vec![0.5, -0.25, 1.0])];
        adam.apply(&mut store, &g, 0.01).unwrap();
        let w = &store.get(0).data;
        // After one step m̂ = g and √v̂ = |g|, so the update is
        // lr·g/(|g|+ε) ≈ lr·sign(g).
        for (i, (&wi, &w0)) in w.iter().zip(&[1.0, -2.0, 3.0]).enumerate() {
            let g0: f64 = [0.5, -0.25, 1.0][i];
            let expect = w0 - 0.01 * g0 / (g0.abs() + 1e-8);
            assert!((wi - expect).abs() < 1e-6, "{wi} vs {expect}");
        }
    }

    #[test]
    fn adam_zero_grad_no_decay_is_identity() {
        let mut store = toy_store(&[1.5, -0.5]);
        let mut adam = AdamState::new(&store, AdamConfig { weight_decay: 0.0, ..Default::default() });
        adam.apply(&mut store, &[Some(vec![0.0, 0.0])], 0.1).unwrap();
        assert_eq!(store.get(0).data, vec![1.5, -0.5]);
        // None slot is also untouched.
        adam.apply(&mut store, &[None], 0.1).unwrap();
        assert_eq!(store.get(0).data, vec![1.5, -0.5]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(w) = ‖w‖², ∇f = 2w.
        let mut store = toy_store(&[3.0, -4.0, 0.5]);
        let mut adam = AdamState::new(&store, AdamConfig { weight_decay: 0.0, ..Default::default() });
        let f = |s: &ParamStore<f64>| s.get(0).data.iter().map(|w| w * w).sum::<f64>();
        let mut prev = f(&store);
        for step in 0..50 {
            let g: Vec<f64> = store.get(0).data.iter().map(|w| 2.0 * w).collect();
            adam.apply(&mut store, &[Some(g)], 0.05).unwrap();
            let now = f(&store);
            if step >= 3 {
                assert!(now <= prev + 1e-12, "step {step}: {now} > {prev}");
            }
            prev = now;
        }
        // Adam moves ≈ lr per element per step; 50 steps at 0.05 cover
        // half the distance from the farthest start.
        assert!(prev < 5.0, "f after 50 steps: {prev}");
    }

    #[test]
    fn adam_flags_nan_gradient_with_name() {
        let mut store = toy_store(&[1.0]);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let err = adam.apply(&mut store, &[Some(vec![f64::NAN])], 0.1).unwrap_err();
        match err {
            Error::Divergence(msg) => assert!(msg.contains('w'), "{msg}"),
            e => panic!("{e:?}"),
        }
    }

    fn tiny_dataset(dir: &std::path::Path) -> (Vec<Volume4D>, crate::data::SplitManifest) {
        // Three well-separated bump classes on 8³ volumes whose native
        // length equals the window (4), so every window sees the peak.
        use crate::data::{Blob, ClassSpec, Course};
        let class = |name: &str, center: [usize; 3]| ClassSpec {
            name: name.into(),
            native_len: 4,
            blobs: vec![Blob {
                center,
                radius: 1.5,
                amplitude: 1.0,
                course: Course::Bump { peak: 2, width: 1.2 },
            }],
            phase_jitter: None,
        };
        let spec = SyntheticTaskSpec {
            extents: [8, 8, 8],
            noise_sigma: 0.2,
            gain_jitter: 0.05,
            classes: vec![
                class("a", [2, 2, 2]),
                class("b", [5, 5, 5]),
                class("c", [2, 5, 5]),
            ],
        };
        let manifest = generate_synthetic(&spec, 5, 1, 11, dir).unwrap();
        let split = stratified_split(&manifest, (0.7, 0.1, 0.2), 1).unwrap();
        let volumes = crate::data::load_all(dir, &manifest).unwrap();
        (volumes, split)
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let (volumes, split) = tiny_dataset(dir.path());
        let mut cfg_m = ModelConfig::tiny(ModelKind::Band);
        cfg_m.window = 4;
        let model: Model<f32> = Model::build(cfg_m, 3).unwrap();
        let before: Vec<Vec<f32>> = model.store.iter().map(|p| p.data.clone()).collect();
        let mut cfg = TrainConfig::quick(4, 1, 5);
        cfg.lr_base = 0.0;
        cfg.lr_min = 0.0;
        cfg.adam.weight_decay = 0.0;
        let out = train_run(
            model,
            &volumes,
            SplitRef { train: &split.train, val: &split.val },
            &cfg,
            None,
        )
        .unwrap();
        for (p, b) in out.model.store.iter().zip(&before) {
            assert_eq!(&p.data, b, "{}", p.name);
        }
    }

    #[test]
    fn same_seed_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let (volumes, split) = tiny_dataset(dir.path());
        let run = || {
            let mut cfg_m = ModelConfig::tiny(ModelKind::Band);
            cfg_m.window = 4;
            let model: Model<f32> = Model::build(cfg_m, 3).unwrap();
            let cfg = TrainConfig::quick(4, 2, 5);
            train_run(
                model,
                &volumes,
                SplitRef { train: &split.train, val: &split.val },
                &cfg,
                None,
            )
            .unwrap()
            .log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_parameters_receive_zero_gradient() {
        let dir = tempfile::tempdir().unwrap();
        let (volumes, _) = tiny_dataset(dir.path());
        let mut cfg_m = ModelConfig::tiny(ModelKind::Band);
        cfg_m.window = 4;
        let mut model: Model<f64> = Model::build(cfg_m, 3).unwrap();
        model.store.set_trainable_prefix("embedder.", false);
        let (_, grads, _) = sample_pass(&model, &volumes[0], 4, 0, 1, [0, 0, 0], None).unwrap();
        for (i, g) in grads.iter().enumerate() {
            let p = model.store.get(i);
            if p.name.starts_with("embedder.") {
                assert!(g.is_none(), "{} has a gradient", p.name);
            } else if p.trainable {
                assert!(g.is_some(), "{} missing gradient", p.name);
            }
        }
    }

    #[test]
    fn accumulation_matches_single_batch_in_f64() {
        let dir = tempfile::tempdir().unwrap();
        let (volumes, split) = tiny_dataset(dir.path());
        let run = |accum: usize| {
            let mut cfg_m = ModelConfig::tiny(ModelKind::Band);
            cfg_m.window = 4;
            let model: Model<f64> = Model::build(cfg_m, 3).unwrap();
            let mut cfg = TrainConfig::quick(4, 1, 5);
            cfg.batch = 4;
            cfg.accum = accum;
            let out = train_run(
                model,
                &volumes,
                SplitRef { train: &split.train, val: &split.val },
                &cfg,
                None,
            )
            .unwrap();
            out.model.store.iter().map(|p| p.data.clone()).collect::<Vec<_>>()
        };
        let whole = run(1);
        let micro = run(4);
        for (a, b) in whole.iter().zip(&micro) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn overfits_eight_instances() {
        let dir = tempfile::tempdir().unwrap();
        let (volumes, _) = tiny_dataset(dir.path());
        let idx: Vec<usize> = (0..8.min(volumes.len())).collect();
        let mut cfg_m = ModelConfig::tiny(ModelKind::Band);
        cfg_m.window = 4;
        cfg_m.transformer.dropout = 0.0;
        let model: Model<f32> = Model::build(cfg_m, 3).unwrap();
        let mut cfg = TrainConfig::quick(4, 60, 5);
        cfg.batch = 4;
        cfg.lr_base = 3e-3;
        let out = train_run(
            model,
            &volumes,
            SplitRef { train: &idx, val: &idx },
            &cfg,
            None,
        )
        .unwrap();
        // 60 epochs × 2 steps = 120 steps ≤ 300 budget.
        assert!(out.best_val_acc >= 0.99, "train-set accuracy {}", out.best_val_acc);
    }

    #[test]
    fn cache_digest_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (volumes, split) = tiny_dataset(dir.path());
        let mut cfg_m = ModelConfig::tiny(ModelKind::Band);
        cfg_m.window = 4;
        let model: Model<f32> = Model::build(cfg_m, 3).unwrap();
        let mut cache = build_embedding_cache(&model, &volumes).unwrap();
        cache.digest = "stale".into();
        let cfg = TrainConfig::quick(4, 1, 5);
        let err = frozen_head_train(
            model,
            &volumes,
            SplitRef { train: &split.train, val: &split.val },
            &cfg,
            Some(&cache),
        )
        .unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)), "{err:?}");
    }

    #[test]
    fn frozen_head_training_keeps_trunk_and_matches_live() {
        let dir = tempfile::tempdir().unwrap();
        let (volumes, split) = tiny_dataset(dir.path());
        let mut cfg_m = ModelConfig::tiny(ModelKind::Band);
        cfg_m.window = 4;
        let model: Model<f32> = Model::build(cfg_m.clone(), 3).unwrap();
        let trunk_before = params_digest(&model.store, "embedder.");
        let cache = build_embedding_cache(&model, &volumes).unwrap();
        let cfg = TrainConfig::quick(4, 2, 5);
        let split_ref = SplitRef { train: &split.train, val: &split.val };

        let cached = frozen_head_train(model, &volumes, split_ref, &cfg, Some(&cache)).unwrap();
        assert_eq!(params_digest(&cached.model.store, "embedder."), trunk_before);

        // Live frozen run (no cache) from the same init: identical log.
        let model2: Model<f32> = Model::build(cfg_m, 3).unwrap();
        let live = frozen_head_train(model2, &volumes, split_ref, &cfg, None).unwrap();
        assert_eq!(cached.log, live.log);
    }

    #[test]
    fn transfer_setup_regimes() {
        let src_cfg = ModelConfig::tiny(ModelKind::Band);
        let src: Model<f32> = Model::build(src_cfg.clone(), 3).unwrap();
        let mut tgt_cfg = src_cfg.clone();
        tgt_cfg.classes = 5;

        let s = transfer_setup(Some(&src), &tgt_cfg, TransferRegime::Scratch, 9).unwrap();
        assert_eq!(s.warnings.len(), 1);

        let f = transfer_setup(Some(&src), &tgt_cfg, TransferRegime::Finetune, 9).unwrap();
        assert!(f.freeze.is_empty());
        // Embedder and head carried over; classifier output re-initialized
        // with the new class count.
        let w = |m: &Model<f32>, n: &str| m.store.get(m.store.index_of(n).unwrap()).data.clone();
        assert_eq!(w(&f.model, "embedder.conv1.w"), w(&src, "embedder.conv1.w"));
        assert_eq!(w(&f.model, "head.layer0.attn.wq.w"), w(&src, "head.layer0.attn.wq.w"));
        let fc2 = f.model.store.get(f.model.store.index_of("head.classifier.fc2.w").unwrap());
        assert_eq!(fc2.shape, vec![32, 5]);

        let z = transfer_setup(Some(&src), &tgt_cfg, TransferRegime::Freeze, 9).unwrap();
        assert_eq!(z.freeze, vec!["embedder.".to_string()]);
        assert_eq!(w(&z.model, "embedder.conv1.w"), w(&src, "embedder.conv1.w"));
        assert_ne!(w(&z.model, "head.layer0.attn.wq.w"), w(&src, "head.layer0.attn.wq.w"));

        assert!(transfer_setup::<f32>(None, &tgt_cfg, TransferRegime::Finetune, 9).is_err());
    }
}
