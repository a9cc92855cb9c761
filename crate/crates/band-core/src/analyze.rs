//! Attribution analyses on trained models: temporal attention maps,
//! gradient-weighted class activation maps over the conv stages, and
//! embedding export.

use rayon::prelude::*;

use crate::config::ModelKind;
use crate::data::Volume4D;
use crate::error::{Error, Result};
use crate::models::{argmax, Arch, Model};
use crate::nn::{bind, positional_encode_values, ForwardCtx, Fwd};
use crate::tensor::{Element, Tape};
use crate::train::clip_values;

// ── temporal attention maps ──────────────────────────────────────────

/// Per-class average of the pooling token's attention over frame
/// positions, taken from the final transformer layer on correctly
/// classified instances.
#[derive(Debug, Clone)]
pub struct TemporalMap {
    pub k: usize,
    /// `weights[class][frame]`; rows with `counts[class] > 0` sum to 1.
    pub weights: Vec<Vec<f64>>,
    /// Correctly classified instances that contributed, per class.
    pub counts: Vec<usize>,
}

impl TemporalMap {
    pub fn argmax_frame(&self, class: usize) -> usize {
        argmax(&self.weights[class])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,frame,weight\n");
        for (c, row) in self.weights.iter().enumerate() {
            for (f, w) in row.iter().enumerate() {
                s.push_str(&format!("{c},{f},{w}\n"));
            }
        }
        s
    }
}

/// Pooling-token row of one captured layer: query row 0 with its
/// self-attention column dropped, renormalized over the frame positions.
pub fn renormalized_token_row<E: Element>(rec: &crate::nn::AttentionRecord<E>) -> Result<Vec<f64>> {
    let row: Vec<f64> = rec.heads[0][1..rec.seq]
        .iter()
        .map(|&w| Element::to_f64(w))
        .collect();
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("pooling token attends only to itself".into()));
    }
    Ok(row.iter().map(|w| w / total).collect())
}

/// Final-layer pooling-token attention of one eval pass, or None when the
/// model misclassifies the instance.
fn token_attention_row<E: Element>(model: &Model<E>, v: &Volume4D, k: usize) -> Result<Option<(usize, Vec<f64>)>> {
    let clip: Vec<E> = clip_values(v, k, 0);
    let (logits, records) = model.infer_logits(&clip, k, true)?;
    if argmax(&logits) != v.label {
        return Ok(None);
    }
    let rec = records.last().ok_or_else(|| {
        Error::Contract("attention capture produced no records".into())
    })?;
    Ok(Some((v.label, renormalized_token_row(rec)?)))
}

/// Average pooling-token attention per true class over the correctly
/// classified instances of `volumes`, each evaluated on its leading
/// k-frame window.
pub fn temporal_attention_map<E: Element>(
    model: &Model<E>,
    volumes: &[Volume4D],
    k: usize,
) -> Result<TemporalMap> {
    if model.cfg.kind != ModelKind::Band {
        return Err(Error::Config(
            "temporal attention maps need the transformer-head model".into(),
        ));
    }
    if model.cfg.transformer.heads != 1 {
        return Err(Error::Config(format!(
            "temporal attention maps need a single-head model; this one has {} heads — retrain with heads = 1",
            model.cfg.transformer.heads
        )));
    }
    let rows: Vec<Option<(usize, Vec<f64>)>> = volumes
        .par_iter()
        .map(|v| token_attention_row(model, v, k))
        .collect::<Result<_>>()?;
    let classes = model.cfg.classes;
    let mut weights = vec![vec![0.0; k]; classes];
    let mut counts = vec![0usize; classes];
    for (label, row) in rows.into_iter().flatten() {
        for (acc, w) in weights[label].iter_mut().zip(&row) {
            *acc += w;
        }
        counts[label] += 1;
    }
    for (row, &n) in weights.iter_mut().zip(&counts) {
        if n > 0 {
            for w in row.iter_mut() {
                *w /= n as f64;
            }
        }
    }
    Ok(TemporalMap { k, weights, counts })
}

// ── 3D Grad-CAM ──────────────────────────────────────────────────────

/// Nonnegative relevance volume at input resolution for one class logit.
#[derive(Debug, Clone)]
pub struct SpatialMap {
    pub extents: [usize; 3],
    pub values: Vec<f64>,
    pub stage: String,
    pub frame: usize,
    pub class: usize,
}

impl SpatialMap {
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        let [_, ey, ez] = self.extents;
        self.values[(x * ey + y) * ez + z]
    }

    /// Relevance mass inside an inclusive box vs outside it.
    pub fn mass_split(&self, lo: [usize; 3], hi: [usize; 3]) -> (f64, f64) {
        let mut inside = 0.0;
        let mut outside = 0.0;
        let [ex, ey, ez] = self.extents;
        for x in 0..ex {
            for y in 0..ey {
                for z in 0..ez {
                    let v = self.at(x, y, z);
                    let inb = (lo[0]..=hi[0]).contains(&x)
                        && (lo[1]..=hi[1]).contains(&y)
                        && (lo[2]..=hi[2]).contains(&z);
                    if inb {
                        inside += v;
                    } else {
                        outside += v;
                    }
                }
            }
        }
        (inside, outside)
    }
}

pub fn valid_stages(kind: ModelKind) -> &'static [&'static str] {
    match kind {
        ModelKind::Cnn3d => &["conv1", "conv2", "conv3", "conv4"],
        _ => &["conv1", "stage1", "stage2", "stage3", "stage4"],
    }
}

/// Endpoint-preserving trilinear resampling of a dense volume.
pub fn trilinear_upsample(src: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let [fx, fy, fz] = from;
    let [tx, ty, tz] = to;
    let ratio = |t: usize, f: usize, i: usize| -> f64 {
        if t <= 1 || f <= 1 {
            0.0
        } else {
            i as f64 * (f - 1) as f64 / (t - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(tx * ty * tz);
    for x in 0..tx {
        let gx = ratio(tx, fx, x);
        let (x0, dx) = (gx.floor() as usize, gx.fract());
        let x1 = (x0 + 1).min(fx - 1);
        for y in 0..ty {
            let gy = ratio(ty, fy, y);
            let (y0, dy) = (gy.floor() as usize, gy.fract());
            let y1 = (y0 + 1).min(fy - 1);
            for z in 0..tz {
                let gz = ratio(tz, fz, z);
                let (z0, dz) = (gz.floor() as usize, gz.fract());
                let z1 = (z0 + 1).min(fz - 1);
                let s = |xi: usize, yi: usize, zi: usize| src[(xi * fy + yi) * fz + zi];
                let c00 = s(x0, y0, z0) * (1.0 - dx) + s(x1, y0, z0) * dx;
                let c01 = s(x0, y0, z1) * (1.0 - dx) + s(x1, y0, z1) * dx;
                let c10 = s(x0, y1, z0) * (1.0 - dx) + s(x1, y1, z0) * dx;
                let c11 = s(x0, y1, z1) * (1.0 - dx) + s(x1, y1, z1) * dx;
                let c0 = c00 * (1.0 - dy) + c10 * dy;
                let c1 = c01 * (1.0 - dy) + c11 * dy;
                out.push(c0 * (1.0 - dz) + c1 * dz);
            }
        }
    }
    out
}

/// Channel-weighted activation map: weights are the spatial mean of the
/// logit's gradient on the chosen stage, map = ReLU(Σ_c w_c·A_c).
fn cam_from(acts: &[f64], grads: &[f64], channels: usize, spatial: [usize; 3]) -> Vec<f64> {
    let vol = spatial[0] * spatial[1] * spatial[2];
    let mut cam = vec![0.0; vol];
    for c in 0..channels {
        let g = &grads[c * vol..(c + 1) * vol];
        let w: f64 = g.iter().sum::<f64>() / vol as f64;
        let a = &acts[c * vol..(c + 1) * vol];
        for (m, &av) in cam.iter_mut().zip(a) {
            *m += w * av;
        }
    }
    for m in &mut cam {
        *m = m.max(0.0);
    }
    cam
}

/// Gradient-weighted class activation map for `target_class`, taken at
/// conv stage `stage`. For sequence models the map localizes within the
/// 0-indexed `frame` of the clip; the whole-clip baselines ignore `frame`
/// since their conv stacks see every frame at once.
pub fn grad_cam_3d<E: Element>(
    model: &Model<E>,
    clip: &[E],
    t_frames: usize,
    target_class: usize,
    frame: usize,
    stage: &str,
) -> Result<SpatialMap> {
    let stages = valid_stages(model.cfg.kind);
    if !stages.contains(&stage) {
        return Err(Error::Config(format!(
            "unknown conv stage {stage:?}; valid stages: {}",
            stages.join(", ")
        )));
    }
    if target_class >= model.cfg.classes {
        return Err(Error::Parameter(format!(
            "class {target_class} out of range for {} classes",
            model.cfg.classes
        )));
    }
    if frame >= t_frames {
        return Err(Error::Parameter(format!(
            "frame {frame} out of range for {t_frames}-frame clip"
        )));
    }
    let [dx, dy, dz] = model.cfg.extents;
    let vox = dx * dy * dz;
    if clip.len() != t_frames * vox {
        return Err(Error::ShapeMismatch(format!(
            "clip data {} vs {t_frames} frames x {vox} voxels",
            clip.len()
        )));
    }

    let mut tape = Tape::<E>::new();
    let bound = bind(&model.store, &mut tape);
    let mut ctx = ForwardCtx::eval(model.store.seed);
    let (logits, taps) = match &model.arch {
        Arch::Band { embedder, .. } | Arch::BandLstm { embedder, .. } => {
            // Only the inspected frame runs on the gradient tape; the rest
            // enter the head as constants from throwaway inference passes,
            // which bounds memory at paper-scale extents and leaves the
            // logits bitwise identical.
            let frames: Vec<Vec<E>> =
                (0..t_frames).map(|t| clip[t * vox..(t + 1) * vox].to_vec()).collect();
            let fixed = model.embed_frames_inference(&frames)?;
            let x = tape.leaf(&[1, dx, dy, dz], frames[frame].clone(), false)?;
            let mut f = Fwd::new(&mut tape, &model.store, &bound, &mut ctx);
            let (e_tap, taps) = embedder.forward_taps(&mut f, x)?;
            let mut emb = Vec::with_capacity(t_frames);
            for (i, row) in fixed.iter().enumerate() {
                if i == frame {
                    emb.push(e_tap);
                } else {
                    emb.push(f.tape.constant(&[row.len()], row.clone())?);
                }
            }
            let logits = model.head_forward(&mut f, &emb)?;
            (logits, taps)
        }
        Arch::Resnet3d { .. } | Arch::Cnn3d { .. } => {
            let x = tape.leaf(&[t_frames, dx, dy, dz], clip.to_vec(), false)?;
            let mut f = Fwd::new(&mut tape, &model.store, &bound, &mut ctx);
            model.forward_with_taps(&mut f, x, 0)?
        }
    };

    let &(_, tap_id) = taps
        .iter()
        .find(|(name, _)| name == stage)
        .ok_or_else(|| Error::Contract(format!("stage {stage} not tapped")))?;
    // Pick the target logit as a scalar: one-hot mask then sum.
    let mut mask = vec![E::zero(); model.cfg.classes];
    mask[target_class] = E::one();
    let mask_t = tape.constant(&[model.cfg.classes], mask)?;
    let picked = tape.mul(logits, mask_t)?;
    let scalar = tape.sum(picked);
    tape.backward(scalar)?;

    let shape = tape.shape(tap_id).to_vec();
    let (channels, spatial) = match shape.as_slice() {
        [c, d, h, w] => (*c, [*d, *h, *w]),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "stage activation shape {other:?}, expected [C, d, h, w]"
            )))
        }
    };
    let acts: Vec<f64> = tape.data(tap_id).iter().map(|&v| Element::to_f64(v)).collect();
    let grads: Vec<f64> = match tape.grad(tap_id) {
        Some(g) => g.iter().map(|&v| Element::to_f64(v)).collect(),
        None => vec![0.0; acts.len()],
    };
    let cam = cam_from(&acts, &grads, channels, spatial);
    let values = trilinear_upsample(&cam, spatial, model.cfg.extents);
    Ok(SpatialMap { extents: model.cfg.extents, values, stage: stage.to_string(), frame, class: target_class })
}

// ── embedding export ─────────────────────────────────────────────────

/// Pre-classifier feature of one eval-window pass: the pooling token's
/// final-layer output for the transformer head, the last hidden state for
/// the LSTM head, and the pooled conv feature for the whole-clip models.
pub fn feature_vector<E: Element>(model: &Model<E>, v: &Volume4D, k: usize) -> Result<Vec<f64>> {
    let clip: Vec<E> = clip_values(v, k, 0);
    let [dx, dy, dz] = model.cfg.extents;
    match &model.arch {
        Arch::Band { pool_token, layers, .. } => {
            let frames: Vec<Vec<E>> =
                (0..k).map(|t| clip[t * dx * dy * dz..(t + 1) * dx * dy * dz].to_vec()).collect();
            let emb = model.embed_frames_inference(&frames)?;
            let d = model.cfg.transformer.d_model;
            let mut tape = Tape::<E>::inference();
            let bound = bind(&model.store, &mut tape);
            let mut ctx = ForwardCtx::eval(model.store.seed);
            let mut f = Fwd::new(&mut tape, &model.store, &bound, &mut ctx);
            let mut rows = vec![f.bound.id(*pool_token)];
            for row in &emb {
                rows.push(f.tape.constant(&[row.len()], row.clone())?);
            }
            let mut x = f.tape.stack_rows(&rows)?;
            if f.ctx.use_pe {
                let pe = positional_encode_values(emb.len(), d)?;
                let mut table = vec![E::zero(); (emb.len() + 1) * d];
                for (i, pv) in pe.into_iter().enumerate() {
                    table[d + i] = E::from_f64(pv);
                }
                let pe_t = f.tape.constant(&[emb.len() + 1, d], table)?;
                x = f.tape.add(x, pe_t)?;
            }
            for layer in layers {
                x = layer.forward(&mut f, x)?;
            }
            let z_star = f.tape.slice_row(x, 0)?;
            Ok(tape.data(z_star).iter().map(|&v| Element::to_f64(v)).collect())
        }
        Arch::BandLstm { lstm, .. } => {
            let frames: Vec<Vec<E>> =
                (0..k).map(|t| clip[t * dx * dy * dz..(t + 1) * dx * dy * dz].to_vec()).collect();
            let emb = model.embed_frames_inference(&frames)?;
            let mut tape = Tape::<E>::inference();
            let bound = bind(&model.store, &mut tape);
            let mut ctx = ForwardCtx::eval(model.store.seed);
            let mut f = Fwd::new(&mut tape, &model.store, &bound, &mut ctx);
            let rows: Vec<_> = emb
                .iter()
                .map(|row| f.tape.constant(&[row.len()], row.clone()))
                .collect::<Result<_>>()?;
            let seq = f.tape.stack_rows(&rows)?;
            let out = lstm.forward(&mut f, seq)?;
            let last = f.tape.slice_row(out, emb.len() - 1)?;
            Ok(tape.data(last).iter().map(|&v| Element::to_f64(v)).collect())
        }
        Arch::Resnet3d { embedder, .. } => {
            let mut tape = Tape::<E>::inference();
            let bound = bind(&model.store, &mut tape);
            let mut ctx = ForwardCtx::eval(model.store.seed);
            let x = tape.leaf(&[k, dx, dy, dz], clip, false)?;
            let mut f = Fwd::new(&mut tape, &model.store, &bound, &mut ctx);
            let e = embedder.forward(&mut f, x)?;
            Ok(tape.data(e).iter().map(|&v| Element::to_f64(v)).collect())
        }
        Arch::Cnn3d { convs, bns, .. } => {
            let mut tape = Tape::<E>::inference();
            let bound = bind(&model.store, &mut tape);
            let mut ctx = ForwardCtx::eval(model.store.seed);
            let x = tape.leaf(&[k, dx, dy, dz], clip, false)?;
            let mut f = Fwd::new(&mut tape, &model.store, &bound, &mut ctx);
            let mut h = x;
            for (conv, bn) in convs.iter().zip(bns) {
                h = conv.forward(&mut f, h)?;
                if let Some(bn) = bn {
                    h = bn.forward(&mut f, h)?;
                }
                h = f.tape.relu(h);
            }
            let pooled = f.tape.global_avg_pool3d(h)?;
            Ok(tape.data(pooled).iter().map(|&v| Element::to_f64(v)).collect())
        }
    }
}

/// One CSV row per instance — `instance,label,e0..e{d−1}` — sorted by
/// instance id for deterministic output.
pub fn export_embeddings<E: Element>(
    model: &Model<E>,
    volumes: &[Volume4D],
    k: usize,
) -> Result<String> {
    let mut rows: Vec<(String, usize, Vec<f64>)> = volumes
        .par_iter()
        .map(|v| {
            let id = format!("{}_r{}", v.subject, v.run);
            Ok((id, v.label, feature_vector(model, v, k)?))
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let dim = rows.first().map_or(0, |r| r.2.len());
    let mut out = String::from("instance,label");
    for i in 0..dim {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');
    for (id, label, feat) in rows {
        out.push_str(&format!("{id},{label}"));
        for v in feat {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_synthetic, load_all, SyntheticTaskSpec};
    use crate::nn::ParamStore;

    fn tiny_band(heads: usize) -> Model<f32> {
        let mut cfg = ModelConfig::tiny(ModelKind::Band);
        cfg.transformer.heads = heads;
        Model::build(cfg, 11).unwrap()
    }

    fn volume_of(values: Vec<f32>, t: usize, extents: [usize; 3], label: usize) -> Volume4D {
        Volume4D { t, extents, frames: values, label, subject: "s000".into(), run: 0 }
    }

    #[test]
    fn temporal_map_rejects_multi_head() {
        let model = tiny_band(2);
        let v = volume_of(vec![0.0; 4 * 512], 4, [8, 8, 8], 0);
        match temporal_attention_map(&model, &[v], 4) {
            Err(Error::Config(msg)) => assert!(msg.contains("heads = 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn temporal_map_rows_normalized_and_counts_tracked() {
        let model = tiny_band(1);
        let mut vols = Vec::new();
        for i in 0..6 {
            let mut vals = vec![0.0f32; 4 * 512];
            for (j, v) in vals.iter_mut().enumerate() {
                *v = ((i * 31 + j) % 17) as f32 / 17.0;
            }
            vols.push(volume_of(vals, 4, [8, 8, 8], 0));
        }
        // Label every instance with the model's own prediction so each one
        // counts as correct.
        for v in &mut vols {
            let clip: Vec<f32> = clip_values(v, 4, 0);
            let (logits, _) = model.infer_logits(&clip, 4, false).unwrap();
            v.label = argmax(&logits);
        }
        let map = temporal_attention_map(&model, &vols, 4).unwrap();
        assert_eq!(map.counts.iter().sum::<usize>(), 6);
        for (row, &n) in map.weights.iter().zip(&map.counts) {
            if n == 0 {
                continue;
            }
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn temporal_map_instance_order_invariant() {
        let model = tiny_band(1);
        let mut vols = Vec::new();
        for i in 0..5 {
            let mut vals = vec![0.0f32; 4 * 512];
            for (j, v) in vals.iter_mut().enumerate() {
                *v = ((i * 13 + j * 7) % 23) as f32 / 23.0;
            }
            let mut vol = volume_of(vals, 4, [8, 8, 8], 0);
            let clip: Vec<f32> = clip_values(&vol, 4, 0);
            let (logits, _) = model.infer_logits(&clip, 4, false).unwrap();
            vol.label = argmax(&logits);
            vols.push(vol);
        }
        let a = temporal_attention_map(&model, &vols, 4).unwrap();
        vols.reverse();
        let b = temporal_attention_map(&model, &vols, 4).unwrap();
        for (ra, rb) in a.weights.iter().zip(&b.weights) {
            for (wa, wb) in ra.iter().zip(rb) {
                assert!((wa - wb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_attention_gives_uniform_map() {
        // S=4 frames + token, uniform 0.2 everywhere: dropping the token
        // column and renormalizing gives exactly [0.25; 4].
        let rec = crate::nn::AttentionRecord::<f64> {
            layer: 1,
            seq: 5,
            heads: vec![vec![0.2; 25]],
        };
        let row = renormalized_token_row(&rec).unwrap();
        assert_eq!(row.len(), 4);
        for &w in &row {
            assert!((w - 0.25).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn grad_cam_rejects_unknown_stage() {
        let model = tiny_band(1);
        let clip = vec![0.1f32; 4 * 512];
        match grad_cam_3d(&model, &clip, 4, 0, 0, "stage9") {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("stage4") && msg.contains("conv1"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grad_cam_nonnegative_and_input_shaped() {
        let model = tiny_band(1);
        let mut clip = vec![0.0f32; 4 * 512];
        for (i, v) in clip.iter_mut().enumerate() {
            *v = ((i % 29) as f32) / 29.0;
        }
        // A single class can legitimately yield an all-zero map at random
        // init (every channel weight negative), so require mass from any
        // of the three classes rather than one in particular.
        let mut survived = false;
        for class in 0..3 {
            let map = grad_cam_3d(&model, &clip, 4, class, 2, "stage3").unwrap();
            assert_eq!(map.extents, [8, 8, 8]);
            assert_eq!(map.values.len(), 512);
            assert!(map.values.iter().all(|&v| v >= 0.0));
            survived |= map.values.iter().any(|&v| v > 0.0);
        }
        assert!(survived, "map vanished for every class");
    }

    #[test]
    fn grad_cam_matches_closed_form_on_linear_toy() {
        // One 1x1x1 conv (identity-ish weights we control), identity head:
        // logit_c = sum over voxels and channels of A. Grad-CAM weights are
        // then exact means we can compute by hand.
        let mut store = ParamStore::<f64>::new(3);
        let w = vec![
            // conv [2 out][1 in][1;1;1]
            0.7, -0.3,
        ];
        store.add("conv.w", &[2, 1, 1, 1, 1], w, true).unwrap();
        let conv = crate::nn::Conv3dLayer { w: 0, b: None, stride: 1, pad: 0 };
        // Head: logit = sum_c h_c * mean-pooled A_c with fixed h.
        let h = vec![1.5, -2.0];
        store.add("head.w", &[2, 1], h.clone(), true).unwrap();

        let x: Vec<f64> = (0..64).map(|i| (i as f64 / 63.0) - 0.4).collect();
        let mut tape = Tape::<f64>::new();
        let bound = bind(&store, &mut tape);
        let mut ctx = ForwardCtx::eval(0);
        let xt = tape.leaf(&[1, 4, 4, 4], x.clone(), false).unwrap();
        let act = {
            let mut f = Fwd::new(&mut tape, &store, &bound, &mut ctx);
            conv.forward(&mut f, xt).unwrap()
        };
        let pooled = tape.global_avg_pool3d(act).unwrap();
        let row = tape.reshape(pooled, &[1, 2]).unwrap();
        let logit = tape.matmul(row, bound.id(1)).unwrap();
        let scalar = tape.sum(logit);
        tape.backward(scalar).unwrap();

        let grads = tape.grad(act).unwrap().to_vec();
        let acts = tape.data(act).to_vec();
        let cam = cam_from(&acts, &grads, 2, [4, 4, 4]);
        // Closed form: dlogit/dA_c = h_c/64 everywhere, w_c = h_c/64,
        // cam(v) = relu(sum_c h_c/64 * A_c(v)); A_0 = 0.7x, A_1 = -0.3x.
        for (i, &xv) in x.iter().enumerate() {
            let expect = (1.5 / 64.0 * 0.7 * xv + (-2.0) / 64.0 * (-0.3) * xv).max(0.0);
            assert!((cam[i] - expect).abs() < 1e-6, "voxel {i}: {} vs {expect}", cam[i]);
        }
    }

    #[test]
    fn grad_cam_zero_gradient_gives_zero_map() {
        // A logit mask of a class the head cannot reach would need a rigged
        // model; instead verify the primitive: zero grads → zero map.
        let acts = vec![1.0, -2.0, 3.0, 0.5];
        let grads = vec![0.0; 4];
        let cam = cam_from(&acts, &grads, 2, [1, 1, 2]);
        assert_eq!(cam, vec![0.0, 0.0]);
    }

    #[test]
    fn trilinear_identity_and_endpoints() {
        let src: Vec<f64> = (0..27).map(|i| i as f64).collect();
        // Same-size resample is the identity.
        assert_eq!(trilinear_upsample(&src, [3, 3, 3], [3, 3, 3]), src);
        // Upsampled corners equal source corners.
        let up = trilinear_upsample(&src, [3, 3, 3], [5, 5, 5]);
        assert_eq!(up[0], src[0]);
        assert_eq!(up[5 * 5 * 5 - 1], src[26]);
        // Midpoints interpolate linearly.
        assert!((up[2 * 25 + 2 * 5 + 2] - 13.0).abs() < 1e-12);
    }

    #[test]
    fn export_rows_sorted_and_deterministic() {
        use crate::data::{Blob, ClassSpec, Course};
        let dir = tempfile::tempdir().unwrap();
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
            classes: vec![class("a", [2, 2, 2]), class("b", [5, 5, 5])],
        };
        let manifest = generate_synthetic(&spec, 3, 2, 5, dir.path()).unwrap();
        let volumes = load_all(dir.path(), &manifest).unwrap();
        assert_eq!(manifest.classes.len(), spec.classes.len());
        let model = tiny_band(1);
        let csv = export_embeddings(&model, &volumes, 4).unwrap();
        let again = export_embeddings(&model, &volumes, 4).unwrap();
        assert_eq!(csv, again);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), volumes.len() + 1);
        let d = model.cfg.transformer.d_model;
        assert_eq!(lines[0].split(',').count(), d + 2);
        let ids: Vec<&str> = lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap())
            .collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }
}
