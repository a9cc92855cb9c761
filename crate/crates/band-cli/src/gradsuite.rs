//! The `gradcheck` subcommand's op list: named finite-difference checks in
//! f64, each reporting its worst relative error. Layer and model entries
//! check the gradient with respect to the input, which exercises the whole
//! backward chain through the block.

use band_core::config::{LstmConfig, ModelConfig, ModelKind, TransformerConfig};
use band_core::gradcheck::{check, fill, CheckOutcome, CheckSpec};
use band_core::models::Model;
use band_core::nn::{bind, ForwardCtx, Fwd, LstmStack, ParamStore, TransformerEncoderLayer};
use band_core::rng::stream;
use band_core::tensor::{Mode, Tape, TensorId};
use band_core::Result;

type Runner = Box<dyn Fn(&CheckSpec) -> Result<CheckOutcome> + Sync>;

pub struct Entry {
    pub name: &'static str,
    run: Runner,
}

impl Entry {
    pub fn run(&self, spec: &CheckSpec) -> Result<CheckOutcome> {
        (self.run)(spec)
    }
}

fn entry<F>(name: &'static str, inputs: Vec<(Vec<usize>, Vec<f64>)>, build: F) -> Entry
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId> + Sync + 'static,
{
    Entry { name, run: Box::new(move |spec| check(&inputs, &build, spec)) }
}

fn model_entry(name: &'static str, kind: ModelKind) -> Entry {
    let mut cfg = ModelConfig::tiny(kind);
    cfg.transformer.dropout = 0.0;
    let model = Model::<f64>::build(cfg, 31).expect("tiny config builds");
    let vox: usize = model.cfg.extents.iter().product();
    let shape = vec![
        model.cfg.window,
        model.cfg.extents[0],
        model.cfg.extents[1],
        model.cfg.extents[2],
    ];
    let inputs = vec![(shape, fill(&[model.cfg.window * vox], 99, 0.8).1)];
    let build = move |t: &mut Tape<f64>, ids: &[TensorId]| -> Result<TensorId> {
        let bound = bind(&model.store, t);
        let mut ctx = ForwardCtx::eval(model.store.seed);
        let logits = {
            let mut f = Fwd::new(t, &model.store, &bound, &mut ctx);
            model.forward(&mut f, ids[0])?
        };
        let row = t.reshape(logits, &[1, 3])?;
        t.cross_entropy(row, &[1])
    };
    Entry { name, run: Box::new(move |spec| check(&inputs, &build, spec)) }
}

pub fn suite() -> Vec<Entry> {
    let mut v = vec![
        entry("relu", vec![fill(&[3, 7], 41, 1.5)], |t, ids| {
            let y = t.relu(ids[0]);
            Ok(t.sum(y))
        }),
        entry("sigmoid", vec![fill(&[3, 7], 41, 1.5)], |t, ids| {
            let y = t.sigmoid(ids[0]);
            Ok(t.sum(y))
        }),
        entry("tanh", vec![fill(&[3, 7], 41, 1.5)], |t, ids| {
            let y = t.tanh(ids[0]);
            Ok(t.sum(y))
        }),
        entry("scale", vec![fill(&[3, 7], 41, 1.5)], |t, ids| {
            let y = t.scale(ids[0], -1.75);
            Ok(t.sum(y))
        }),
        entry("mean", vec![fill(&[3, 7], 41, 1.5)], |t, ids| Ok(t.mean(ids[0]))),
        entry("add", vec![fill(&[4, 5], 42, 1.0), fill(&[4, 5], 43, 1.0)], |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("sub", vec![fill(&[4, 5], 42, 1.0), fill(&[4, 5], 43, 1.0)], |t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("mul", vec![fill(&[4, 5], 42, 1.0), fill(&[4, 5], 43, 1.0)], |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            Ok(t.sum(y))
        }),
        entry("matmul", vec![fill(&[3, 4], 1, 1.0), fill(&[4, 2], 2, 1.0)], |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            Ok(t.sum(y))
        }),
        entry("transpose", vec![fill(&[4, 5], 61, 1.0)], |t, ids| {
            let y = t.transpose(ids[0])?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("reshape", vec![fill(&[4, 5], 61, 1.0)], |t, ids| {
            let y = t.reshape(ids[0], &[5, 4])?;
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        }),
        entry("slice-row", vec![fill(&[4, 5], 61, 1.0)], |t, ids| {
            let y = t.slice_row(ids[0], 2)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("slice-cols", vec![fill(&[4, 5], 61, 1.0)], |t, ids| {
            let y = t.slice_cols(ids[0], 1, 4)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("pick", vec![fill(&[4, 5], 61, 1.0)], |t, ids| {
            let y = t.pick(ids[0], 7)?;
            Ok(t.sum(y))
        }),
        entry(
            "stack-rows",
            vec![fill(&[6], 71, 1.0), fill(&[6], 72, 1.0), fill(&[6], 73, 1.0)],
            |t, ids| {
                let y = t.stack_rows(ids)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        entry("concat-cols", vec![fill(&[3, 2], 74, 1.0), fill(&[3, 4], 75, 1.0)], |t, ids| {
            let y = t.concat_cols(ids)?;
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        }),
        entry("add-row-bias", vec![fill(&[3, 5], 76, 1.0), fill(&[5], 77, 1.0)], |t, ids| {
            let y = t.add_row_bias(ids[0], ids[1])?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("add-chan-bias", vec![fill(&[24], 78, 1.0), fill(&[3], 79, 1.0)], |t, ids| {
            let x = t.reshape(ids[0], &[3, 2, 2, 2])?;
            let y = t.add_chan_bias(x, ids[1])?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("global-avg-pool3d", vec![fill(&[4, 5], 61, 1.0)], |t, ids| {
            let r = t.reshape(ids[0], &[4, 5, 1, 1])?;
            let y = t.global_avg_pool3d(r)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("maxpool3d", vec![fill(&[2, 5, 6, 5], 63, 1.0)], |t, ids| {
            let y = t.maxpool3d(ids[0], 3, 2, 1)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry(
            "conv3d",
            vec![fill(&[2, 5, 5, 5], 11, 1.0), fill(&[3, 2, 3, 3, 3], 12, 0.5)],
            |t, ids| {
                let y = t.conv3d(ids[0], ids[1], 1, 1)?;
                Ok(t.sum(y))
            },
        ),
        entry(
            "conv3d-strided",
            vec![fill(&[2, 7, 6, 5], 21, 1.0), fill(&[4, 2, 3, 3, 3], 71, 0.5)],
            |t, ids| {
                let y = t.conv3d(ids[0], ids[1], 2, 1)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        entry("softmax", vec![fill(&[4, 6], 82, 2.0)], |t, ids| {
            let y = t.softmax(ids[0], 1)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        }),
        entry("cross-entropy", vec![fill(&[4, 3], 9, 2.0)], |t, ids| {
            t.cross_entropy(ids[0], &[2, 0, 1, 2])
        }),
        entry(
            "layer-norm",
            vec![fill(&[5, 8], 83, 1.5), fill(&[8], 84, 1.0), fill(&[8], 85, 0.5)],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        entry(
            "batch-norm",
            vec![fill(&[12], 86, 1.0), fill(&[3], 87, 1.0), fill(&[3], 88, 0.5)],
            |t, ids| {
                let x = t.reshape(ids[0], &[3, 4, 1, 1])?;
                let (y, _) = t.batch_norm_train(x, ids[1], ids[2], 1e-5)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        entry("dropout", vec![fill(&[20], 92, 1.0)], |t, ids| {
            let mut rng = stream(7, "gradsuite-dropout", &[0]);
            let y = t.dropout(ids[0], 0.4, Mode::Train, &mut rng)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        }),
        entry("attention-layer", vec![fill(&[5, 16], 13, 1.0)], |t, ids| {
            let cfg = TransformerConfig {
                d_model: 16,
                heads: 2,
                layers: 1,
                ff_dim: 32,
                dropout: 0.0,
                pre_norm: false,
            };
            let mut store = ParamStore::<f64>::new(5);
            let layer = TransformerEncoderLayer::new(&mut store, "l0", &cfg, 0)?;
            let bound = bind(&store, t);
            let mut ctx = ForwardCtx::eval(0);
            let mut f = Fwd::new(t, &store, &bound, &mut ctx);
            let y = layer.forward(&mut f, ids[0])?;
            let y = f.tape.tanh(y);
            Ok(f.tape.sum(y))
        }),
        entry("lstm-stack", vec![fill(&[6, 8], 15, 1.0)], |t, ids| {
            let cfg = LstmConfig { hidden: 8, layers: 2, bidirectional: false };
            let mut store = ParamStore::<f64>::new(8);
            let lstm = LstmStack::new(&mut store, "lstm", 8, &cfg)?;
            let bound = bind(&store, t);
            let mut ctx = ForwardCtx::eval(0);
            let mut f = Fwd::new(t, &store, &bound, &mut ctx);
            let y = lstm.forward(&mut f, ids[0])?;
            let y = f.tape.tanh(y);
            Ok(f.tape.sum(y))
        }),
    ];
    v.push(model_entry("model-band", ModelKind::Band));
    v.push(model_entry("model-band-lstm", ModelKind::BandLstm));
    v.push(model_entry("model-resnet3d", ModelKind::Resnet3d));
    v.push(model_entry("model-cnn3d", ModelKind::Cnn3d));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_unique_and_all_pass() {
        let entries = suite();
        let mut names: Vec<&str> = entries.iter().map(|e| e.name).collect();
        names.sort_unstable();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());

        let spec = CheckSpec { sample: Some(12), ..Default::default() };
        for e in &entries {
            let out = e.run(&spec).unwrap_or_else(|err| panic!("{}: {err}", e.name));
            assert!(out.passes(1e-4), "{}: worst rel {:.3e}", e.name, out.worst_rel);
        }
    }
}
