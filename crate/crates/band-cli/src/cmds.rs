//! One function per subcommand. Every command returns a JSON envelope
//! `{command, config, result}` where `config` echoes the fully resolved
//! settings the run actually used.

use band_core::checkpoint;
use band_core::config::{ModelConfig, ModelKind, Profile};
use band_core::connectome::{
    butterworth_bandpass_sos, cascade_gain, fcnn_fit, logistic_fit, pipeline_features,
    synthetic_connectome_task, L1Options,
};
use band_core::data::{
    generate_synthetic, load_all, stratified_split, DatasetManifest, SyntheticTaskSpec,
};
use band_core::gradcheck::CheckSpec;
use band_core::models::Model;
use band_core::train::{
    build_embedding_cache, clip_values, evaluate, frozen_head_train, train_run, AdamConfig,
    SplitRef, TrainConfig, TransferRegime,
};
use band_core::{analyze, Error, Result};
use rayon::prelude::*;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

use crate::cfg::{parse_fractions, resolve_k, Common, FileConfig};
use crate::{
    gradsuite, AnalyzeArgs, ConnectomeArgs, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs,
    TransferArgs,
};

/// JSON payload plus the process exit code (nonzero only for gradcheck
/// failures, which still emit their report).
pub struct Outcome {
    pub json: Value,
    pub code: u8,
}

fn ok(json: Value) -> Result<Outcome> {
    Ok(Outcome { json, code: 0 })
}

fn envelope(command: &str, config: Value, result: Value) -> Value {
    json!({ "command": command, "config": config, "result": result })
}

fn data_dir(flag: &Option<PathBuf>, file: &FileConfig, cmd: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| Error::Config(format!("{cmd} needs --data <dir>")))
}

fn parse_log(lines: &[String]) -> Vec<Value> {
    lines
        .iter()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|_| Value::String(l.clone())))
        .collect()
}

fn resolve_kind(
    model_flag: Option<&str>,
    head_flag: Option<&str>,
    file: &FileConfig,
) -> Result<ModelKind> {
    let base = model_flag
        .map(str::to_string)
        .or_else(|| file.model.clone())
        .unwrap_or_else(|| "band".to_string());
    let kind = ModelKind::parse(&base)?;
    let head = head_flag.map(str::to_string).or_else(|| file.head.clone());
    match head.as_deref() {
        None => Ok(kind),
        Some("transformer") if matches!(kind, ModelKind::Band | ModelKind::BandLstm) => {
            Ok(ModelKind::Band)
        }
        Some("lstm") if matches!(kind, ModelKind::Band | ModelKind::BandLstm) => {
            Ok(ModelKind::BandLstm)
        }
        Some(h) => Err(Error::Config(format!(
            "--head {h} selects the sequence head of the frame-embedding models and cannot apply to {}",
            kind.name()
        ))),
    }
}

// ── gen-data ─────────────────────────────────────────────────────────

pub fn gen_data(common: &Common, args: &GenDataArgs) -> Result<Outcome> {
    let dir = data_dir(&args.data, &common.file, "gen-data")?;
    let mut spec = match (common.profile, args.task.as_str()) {
        (Profile::Tiny, _) => {
            return Err(Error::Config(
                "the tiny profile has no synthetic task; use --profile desk".into(),
            ))
        }
        (Profile::Desk, "classify") => SyntheticTaskSpec::desk_classification(),
        (Profile::Desk, "lag-probe") => SyntheticTaskSpec::desk_lag_probe(),
        (Profile::Desk, "transfer") => SyntheticTaskSpec::desk_transfer_target(),
        (Profile::HcpShape, "classify") => SyntheticTaskSpec::full_scale_shape(),
        (Profile::HcpShape, task) => {
            return Err(Error::Config(format!(
                "task {task} exists only at the desk profile"
            )))
        }
        (_, task) => return Err(Error::Config(format!("unknown task {task}"))),
    };
    if let Some(sigma) = args.noise {
        spec.noise_sigma = sigma;
    }
    if let Some(classes) = args.classes {
        if classes != spec.classes.len() {
            return Err(Error::Config(format!(
                "task {} has {} classes, --classes asked for {classes}",
                args.task,
                spec.classes.len()
            )));
        }
    }
    eprintln!(
        "rendering {} subjects x {} runs x {} classes at {:?}",
        args.subjects,
        args.runs,
        spec.classes.len(),
        spec.extents
    );
    let manifest = generate_synthetic(&spec, args.subjects, args.runs, common.seed, &dir)?;
    let config = json!({
        "seed": common.seed,
        "profile": common.profile.name(),
        "workers": rayon::current_num_threads(),
        "task": args.task,
        "subjects": args.subjects,
        "runs": args.runs,
        "noise_sigma": spec.noise_sigma,
        "data": dir.display().to_string(),
    });
    let native_lens: Vec<usize> = spec.classes.iter().map(|c| c.native_len).collect();
    let result = json!({
        "classes": manifest.classes,
        "native_lens": native_lens,
        "extents": manifest.extents,
        "instances": manifest.instances.len(),
    });
    ok(envelope("gen-data", config, result))
}

// ── train ────────────────────────────────────────────────────────────

fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<band_core::data::Volume4D>)> {
    let manifest = DatasetManifest::load(dir)?;
    let volumes = load_all(dir, &manifest)?;
    eprintln!(
        "loaded {} instances, {} classes, extents {:?}",
        volumes.len(),
        manifest.classes.len(),
        manifest.extents
    );
    Ok((manifest, volumes))
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<Outcome> {
    let dir = data_dir(&args.data, &common.file, "train")?;
    let (manifest, volumes) = load_dataset(&dir)?;
    let kind = resolve_kind(args.model.as_deref(), args.head.as_deref(), &common.file)?;
    let mut mcfg = ModelConfig::for_profile(common.profile, kind);
    mcfg.classes = manifest.classes.len();
    mcfg.extents = manifest.extents;
    mcfg.window = resolve_k(args.k, &common.file, mcfg.window)?;
    if let Some(h) = args.heads.or(common.file.heads) {
        mcfg.transformer.heads = h;
    }
    if let Some(l) = args.layers.or(common.file.layers) {
        mcfg.transformer.layers = l;
    }
    mcfg.validate()?;

    let fractions = parse_fractions(&args.fractions, &common.file)?;
    let split = stratified_split(&manifest, fractions, common.seed)?;
    let tcfg = TrainConfig {
        epochs: args.epochs.or(common.file.epochs).unwrap_or(8),
        batch: args.batch.or(common.file.batch).unwrap_or(8),
        accum: args.accum.or(common.file.accum).unwrap_or(1),
        lr_base: args.lr.or(common.file.lr).unwrap_or(1e-3),
        lr_min: args.lr_min.or(common.file.lr_min).unwrap_or(1e-5),
        adam: AdamConfig::default(),
        seed: common.seed,
        freeze: Vec::new(),
        window: mcfg.window,
    };

    let model: Model<f32> = match &args.init {
        Some(path) => {
            let m = checkpoint::load_model(path)?;
            if m.cfg.digest() != mcfg.digest() {
                return Err(Error::Config(
                    "checkpoint was trained under a different model config; \
                     match its profile/model/k/heads/layers flags"
                        .into(),
                ));
            }
            m
        }
        None => Model::build(mcfg.clone(), common.seed)?,
    };

    let sref = SplitRef { train: &split.train, val: &split.val };
    let outcome = match args.stage2.as_deref() {
        None => train_run(model, &volumes, sref, &tcfg, None)?,
        Some(mode) => {
            if args.init.is_none() {
                return Err(Error::Config(
                    "--stage2 continues from a trained checkpoint; pass --init".into(),
                ));
            }
            match mode {
                "live" => frozen_head_train(model, &volumes, sref, &tcfg, None)?,
                _ => {
                    eprintln!("embedding {} instances once for the stage-2 cache", volumes.len());
                    let cache = build_embedding_cache(&model, &volumes)?;
                    frozen_head_train(model, &volumes, sref, &tcfg, Some(&cache))?
                }
            }
        }
    };
    let test_acc = evaluate(&outcome.model, &volumes, &split.test, tcfg.window)?;
    if let Some(path) = &args.save {
        checkpoint::save_model(path, &outcome.model)?;
        eprintln!("saved checkpoint to {}", path.display());
    }

    let config = json!({
        "seed": common.seed,
        "profile": common.profile.name(),
        "workers": rayon::current_num_threads(),
        "data": dir.display().to_string(),
        "fractions": [fractions.0, fractions.1, fractions.2],
        "stage2": args.stage2,
        "epochs": tcfg.epochs,
        "batch": tcfg.batch,
        "accum": tcfg.accum,
        "lr": tcfg.lr_base,
        "lr_min": tcfg.lr_min,
        "model": mcfg,
    });
    let result = json!({
        "best_epoch": outcome.best_epoch,
        "best_val_acc": outcome.best_val_acc,
        "test_acc": test_acc,
        "steps_per_epoch": outcome.steps_per_epoch,
        "sizes": { "train": split.train.len(), "val": split.val.len(), "test": split.test.len() },
        "log": parse_log(&outcome.log),
    });
    ok(envelope("train", config, result))
}

// ── eval ─────────────────────────────────────────────────────────────

pub fn eval(common: &Common, args: &EvalArgs) -> Result<Outcome> {
    let model: Model<f32> = checkpoint::load_model(&args.init)?;
    let dir = data_dir(&args.data, &common.file, "eval")?;
    let (manifest, volumes) = load_dataset(&dir)?;
    if manifest.extents != model.cfg.extents {
        return Err(Error::ShapeMismatch(format!(
            "dataset extents {:?} vs model {:?}",
            manifest.extents, model.cfg.extents
        )));
    }
    let k = resolve_k(args.k, &common.file, model.cfg.window)?;
    let fractions = parse_fractions(&args.fractions, &common.file)?;
    let idx: Vec<usize> = if args.split == "all" {
        (0..volumes.len()).collect()
    } else {
        let split = stratified_split(&manifest, fractions, common.seed)?;
        match args.split.as_str() {
            "train" => split.train,
            "val" => split.val,
            _ => split.test,
        }
    };
    let accuracy = evaluate(&model, &volumes, &idx, k)?;
    let config = json!({
        "seed": common.seed,
        "workers": rayon::current_num_threads(),
        "data": dir.display().to_string(),
        "init": args.init.display().to_string(),
        "split": args.split,
        "fractions": [fractions.0, fractions.1, fractions.2],
        "k": k,
        "model": model.cfg,
    });
    let result = json!({ "n": idx.len(), "accuracy": accuracy });
    ok(envelope("eval", config, result))
}

// ── transfer ─────────────────────────────────────────────────────────

pub fn transfer(common: &Common, args: &TransferArgs) -> Result<Outcome> {
    let dir = data_dir(&args.data, &common.file, "transfer")?;
    let (manifest, volumes) = load_dataset(&dir)?;
    let regime_name = args
        .regime
        .clone()
        .or_else(|| common.file.regime.clone())
        .ok_or_else(|| Error::Config("transfer needs --regime freeze|finetune|scratch".into()))?;
    let regime = TransferRegime::parse(&regime_name)?;
    let source: Option<Model<f32>> = match &args.init {
        Some(path) => Some(checkpoint::load_model(path)?),
        None => None,
    };
    // Topology follows the source checkpoint when there is one, so its
    // parameters can be copied; only the task-facing fields change.
    let mut mcfg = match &source {
        Some(m) => m.cfg.clone(),
        None => {
            let kind = resolve_kind(args.model.as_deref(), None, &common.file)?;
            ModelConfig::for_profile(common.profile, kind)
        }
    };
    mcfg.classes = manifest.classes.len();
    mcfg.extents = manifest.extents;
    mcfg.window = resolve_k(args.k, &common.file, mcfg.window)?;
    mcfg.validate()?;

    let setup = band_core::train::transfer_setup(source.as_ref(), &mcfg, regime, common.seed)?;
    for w in &setup.warnings {
        eprintln!("warning: {w}");
    }
    let fractions = parse_fractions(&args.fractions, &common.file)?;
    let split = stratified_split(&manifest, fractions, common.seed)?;
    let tcfg = TrainConfig {
        epochs: args.epochs.or(common.file.epochs).unwrap_or(8),
        batch: args.batch.or(common.file.batch).unwrap_or(8),
        accum: common.file.accum.unwrap_or(1),
        lr_base: args.lr.or(common.file.lr).unwrap_or(1e-3),
        lr_min: args.lr_min.or(common.file.lr_min).unwrap_or(1e-5),
        adam: AdamConfig::default(),
        seed: common.seed,
        freeze: setup.freeze.clone(),
        window: mcfg.window,
    };
    let outcome = train_run(setup.model, &volumes, SplitRef { train: &split.train, val: &split.val }, &tcfg, None)?;
    let test_acc = evaluate(&outcome.model, &volumes, &split.test, tcfg.window)?;
    if let Some(path) = &args.save {
        checkpoint::save_model(path, &outcome.model)?;
    }

    let config = json!({
        "seed": common.seed,
        "profile": common.profile.name(),
        "workers": rayon::current_num_threads(),
        "data": dir.display().to_string(),
        "regime": regime_name,
        "init": args.init.as_ref().map(|p| p.display().to_string()),
        "fractions": [fractions.0, fractions.1, fractions.2],
        "epochs": tcfg.epochs,
        "batch": tcfg.batch,
        "lr": tcfg.lr_base,
        "lr_min": tcfg.lr_min,
        "model": mcfg,
    });
    let result = json!({
        "warnings": setup.warnings,
        "frozen_prefixes": tcfg.freeze,
        "best_epoch": outcome.best_epoch,
        "best_val_acc": outcome.best_val_acc,
        "test_acc": test_acc,
        "steps_per_epoch": outcome.steps_per_epoch,
        "log": parse_log(&outcome.log),
    });
    ok(envelope("transfer", config, result))
}

// ── connectome ───────────────────────────────────────────────────────

pub fn connectome(common: &Common, args: &ConnectomeArgs) -> Result<Outcome> {
    if args.classifier == "l1" && args.per_class < args.folds {
        return Err(Error::Config(format!(
            "--per-class {} cannot fill {} CV folds",
            args.per_class, args.folds
        )));
    }
    let fs = 1.0 / args.period;
    let sos = butterworth_bandpass_sos(args.low, args.high, args.order, fs)?;
    let center = (args.low * args.high).sqrt();
    let response = json!({
        "gain_low": cascade_gain(&sos, args.low, fs),
        "gain_center": cascade_gain(&sos, center, fs),
        "gain_high": cascade_gain(&sos, args.high, fs),
    });

    let (train_xs, train_ys) = synthetic_connectome_task(
        args.classes, args.per_class, args.regions, args.frames, args.period, args.coupling,
        common.seed,
    )?;
    let (test_xs, test_ys) = synthetic_connectome_task(
        args.classes, args.per_class, args.regions, args.frames, args.period, args.coupling,
        common.seed + 1,
    )?;
    eprintln!(
        "pipeline on {} train + {} test series ({} regions x {} frames)",
        train_xs.len(),
        test_xs.len(),
        args.regions,
        args.frames
    );
    let features = |xs: &[band_core::connectome::ParcelSeries]| -> Result<Vec<Vec<f64>>> {
        xs.par_iter()
            .map(|x| pipeline_features(x, args.low, args.high, args.order))
            .collect()
    };
    let ftrain = features(&train_xs)?;
    let ftest = features(&test_xs)?;

    let chance = 1.0 / args.classes as f64;
    let result = match args.classifier.as_str() {
        "fcnn" => {
            let m = fcnn_fit(&ftrain, &train_ys, args.hidden, args.epochs, common.seed)?;
            json!({
                "response": response,
                "features": ftrain[0].len(),
                "chance": chance,
                "train_acc": m.accuracy(&ftrain, &train_ys)?,
                "test_acc": m.accuracy(&ftest, &test_ys)?,
            })
        }
        kind => {
            let l1 = (kind == "l1").then(|| L1Options {
                folds: args.folds,
                seed: common.seed,
                ..Default::default()
            });
            let fit = logistic_fit(&ftrain, &train_ys, l1)?;
            let cv: Vec<Value> =
                fit.cv_table.iter().map(|(c, a)| json!({ "c": c, "cv_acc": a })).collect();
            json!({
                "response": response,
                "features": ftrain[0].len(),
                "chance": chance,
                "selected_c": fit.selected_c,
                "cv_table": cv,
                "nonzero_weights": fit.model.nonzero_weights(),
                "train_acc": fit.model.accuracy(&ftrain, &train_ys),
                "test_acc": fit.model.accuracy(&ftest, &test_ys),
            })
        }
    };
    let config = json!({
        "seed": common.seed,
        "workers": rayon::current_num_threads(),
        "regions": args.regions,
        "frames": args.frames,
        "classes": args.classes,
        "per_class": args.per_class,
        "coupling": args.coupling,
        "classifier": args.classifier,
        "low_hz": args.low,
        "high_hz": args.high,
        "order": args.order,
        "period_s": args.period,
        "folds": args.folds,
        "hidden": args.hidden,
        "epochs": args.epochs,
    });
    ok(envelope("connectome", config, result))
}

// ── analyze ──────────────────────────────────────────────────────────

pub fn analyze(common: &Common, args: &AnalyzeArgs) -> Result<Outcome> {
    let model: Model<f32> = checkpoint::load_model(&args.init)?;
    let dir = data_dir(&args.data, &common.file, "analyze")?;
    let (manifest, volumes) = load_dataset(&dir)?;
    if manifest.extents != model.cfg.extents {
        return Err(Error::ShapeMismatch(format!(
            "dataset extents {:?} vs model {:?}",
            manifest.extents, model.cfg.extents
        )));
    }
    let k = resolve_k(args.k, &common.file, model.cfg.window)?;
    if let Some(d) = &args.dump {
        std::fs::create_dir_all(d)?;
    }
    let config = json!({
        "seed": common.seed,
        "workers": rayon::current_num_threads(),
        "data": dir.display().to_string(),
        "init": args.init.display().to_string(),
        "mode": args.mode,
        "k": k,
        "frame": args.frame,
        "stage": args.stage,
        "class": args.class,
        "instance": args.instance,
        "model": model.cfg,
    });

    let result = match args.mode.as_str() {
        "temporal" => {
            let map = analyze::temporal_attention_map(&model, &volumes, k)?;
            if let Some(d) = &args.dump {
                std::fs::write(d.join("temporal_map.csv"), map.to_csv())?;
                eprintln!("wrote {}", d.join("temporal_map.csv").display());
            }
            let peaks: Vec<Value> = (0..model.cfg.classes)
                .map(|c| {
                    json!({
                        "class": c,
                        "count": map.counts[c],
                        "argmax_frame": map.argmax_frame(c),
                    })
                })
                .collect();
            json!({ "k": map.k, "peaks": peaks, "weights": map.weights })
        }
        "gradcam" => {
            if args.instance >= volumes.len() {
                return Err(Error::Parameter(format!(
                    "--instance {} out of range for {} instances",
                    args.instance,
                    volumes.len()
                )));
            }
            if args.frame < 1 || args.frame > k as i64 {
                return Err(Error::Config(format!(
                    "--frame {} outside 1..={k} (frames are 1-indexed)",
                    args.frame
                )));
            }
            let v = &volumes[args.instance];
            let class = args.class.unwrap_or(v.label);
            let clip: Vec<f32> = clip_values(v, k, 0);
            let map =
                analyze::grad_cam_3d(&model, &clip, k, class, args.frame as usize - 1, &args.stage)?;
            if let Some(d) = &args.dump {
                let as_f32: Vec<f32> = map.values.iter().map(|&x| x as f32).collect();
                band_core::data::save_t4d(&d.join("gradcam.t4d"), 1, map.extents, &as_f32)?;
                let meta = json!({
                    "stage": map.stage,
                    "frame": args.frame,
                    "class": class,
                    "extents": map.extents,
                    "instance": args.instance,
                    "subject": v.subject,
                    "run": v.run,
                });
                std::fs::write(
                    d.join("gradcam.json"),
                    serde_json::to_string_pretty(&meta)? + "\n",
                )?;
                eprintln!("wrote {}", d.join("gradcam.t4d").display());
            }
            let total: f64 = map.values.iter().sum();
            let peak = map
                .values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite map"))
                .map(|(i, &v)| (i, v))
                .unwrap_or((0, 0.0));
            let [_, ey, ez] = map.extents;
            json!({
                "stage": map.stage,
                "class": class,
                "frame": args.frame,
                "total_mass": total,
                "peak_value": peak.1,
                "peak_voxel": [peak.0 / (ey * ez), (peak.0 / ez) % ey, peak.0 % ez],
            })
        }
        "embeddings" => {
            let csv = analyze::export_embeddings(&model, &volumes, k)?;
            let cols = csv.lines().next().map_or(0, |h| h.split(',').count());
            if let Some(d) = &args.dump {
                std::fs::write(d.join("embeddings.csv"), &csv)?;
                eprintln!("wrote {}", d.join("embeddings.csv").display());
            }
            json!({ "rows": volumes.len(), "dim": cols.saturating_sub(2) })
        }
        other => return Err(Error::Config(format!("unknown mode {other}"))),
    };
    ok(envelope("analyze", config, result))
}

// ── gradcheck ────────────────────────────────────────────────────────

pub fn gradcheck(common: &Common, args: &GradcheckArgs) -> Result<Outcome> {
    let entries = gradsuite::suite();
    let selected: Vec<&gradsuite::Entry> = if args.all {
        entries.iter().collect()
    } else if let Some(op) = &args.op {
        let found: Vec<_> = entries.iter().filter(|e| e.name == op).collect();
        if found.is_empty() {
            let names: Vec<&str> = entries.iter().map(|e| e.name).collect();
            return Err(Error::Config(format!(
                "unknown op {op:?}; available: {}",
                names.join(", ")
            )));
        }
        found
    } else {
        return Err(Error::Config("pass --all or --op <name>".into()));
    };

    let spec = CheckSpec { tol: args.tol, ..Default::default() };
    let mut ops = Vec::new();
    let mut all_pass = true;
    for e in &selected {
        let out = e.run(&spec)?;
        let pass = out.passes(args.tol);
        all_pass &= pass;
        eprintln!(
            "{:<18} checked {:>3}  worst rel {:.3e}  {}",
            e.name,
            out.checked,
            out.worst_rel,
            if pass { "ok" } else { "FAIL" }
        );
        ops.push(json!({
            "op": e.name,
            "checked": out.checked,
            "worst_rel": out.worst_rel,
            "pass": pass,
        }));
    }
    let config = json!({
        "seed": common.seed,
        "workers": rayon::current_num_threads(),
        "tol": args.tol,
        "ops": selected.len(),
    });
    let json = envelope("gradcheck", config, json!({ "ops": ops, "all_pass": all_pass }));
    Ok(Outcome { json, code: if all_pass { 0 } else { 4 } })
}
