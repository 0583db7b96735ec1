//! The five commands behind the binary: generate, train, eval, ablate,
//! bench.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cropmap_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use cropmap_core::data::{
    channel_stats, generate_dataset, load_dataset, normalize_with, save_dataset, split_scenes,
    SceneSequence,
};
use cropmap_core::decoder::{save_label_png, save_label_record};
use cropmap_core::ensemble::{adaboost_train, evaluate_ensemble, write_manifest};
use cropmap_core::metrics::SegmentationMetrics;
use cropmap_core::model::{build_model, Paradigm, SequenceModel};
use cropmap_core::train::{evaluate, train_with, EpochLog};
use cropmap_core::Error;

use crate::config::{resolve_config, Cli, Command, EvalSplit, RunConfig, USAGE};
use crate::error::CliError;
use crate::report::{aligned_table, csv_table, fmt_metric};

/// Parse arguments, resolve config, dispatch. Returns the process error
/// for exit-code mapping.
pub fn run(args: &[String]) -> Result<(), CliError> {
    let cli = crate::config::parse_args(args)?;
    if cli.command == Command::Help {
        print!("{USAGE}");
        return Ok(());
    }
    let cfg = resolve_config(&cli)?;
    if cfg.threads > 0 {
        // A global pool can only be installed once per process; later
        // invocations with a different cap keep the existing pool.
        let result = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
        if result.is_err() {
            log::warn!("thread pool already initialized; --threads ignored");
        }
    }
    match cli.command {
        Command::Generate => cmd_generate(&cli, &cfg),
        Command::Train => cmd_train(&cli, &cfg),
        Command::Eval => cmd_eval(&cli, &cfg),
        Command::Ablate => cmd_ablate(&cli, &cfg),
        Command::Bench => cmd_bench(&cli, &cfg),
        Command::Help => unreachable!(),
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create output dir {}: {e}", dir.display())))?;
    Ok(dir)
}

fn require_dataset(cli: &Cli) -> Result<&Path, CliError> {
    cli.dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --dataset PATH".into()))
}

fn load_scenes(path: &Path) -> Result<Vec<SceneSequence>, CliError> {
    load_dataset(path).map_err(CliError::Dataset)
}

struct Prepared {
    train: Vec<SceneSequence>,
    test: Vec<SceneSequence>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Split and normalize: statistics come from the training split only.
fn prepare(scenes: &[SceneSequence], fraction: f64, seed: u64) -> Result<Prepared, CliError> {
    let (train, test) = split_scenes(scenes, fraction, seed).map_err(CliError::Other)?;
    let (mean, std) = channel_stats(&train).map_err(CliError::Other)?;
    Ok(Prepared {
        train: normalize_with(&train, &mean, &std).map_err(CliError::Other)?,
        test: normalize_with(&test, &mean, &std).map_err(CliError::Other)?,
        mean,
        std,
    })
}

fn cmd_generate(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let path = match &cli.dataset {
        Some(p) => p.clone(),
        None => out_dir(cli)?.join("dataset.spst"),
    };
    let scenes = generate_dataset(cfg.seed, &cfg.gen).map_err(CliError::Other)?;
    save_dataset(&path, &scenes).map_err(CliError::Other)?;
    println!(
        "wrote {} ({} scenes, {}x{}x{}x{}, {} classes)",
        path.display(),
        scenes.len(),
        cfg.gen.frames,
        cfg.gen.bands,
        cfg.gen.height,
        cfg.gen.width,
        cfg.gen.classes
    );
    Ok(())
}

const METRIC_COLUMNS: [&str; 8] = [
    "epoch", "lr", "loss", "accuracy", "precision", "recall", "f1", "miou",
];

fn epoch_csv_row(log: &EpochLog) -> Vec<String> {
    vec![
        log.epoch.to_string(),
        format!("{:.8}", log.lr),
        format!("{:.6}", log.loss),
        fmt_metric(log.metrics.accuracy),
        fmt_metric(log.metrics.macro_precision),
        fmt_metric(log.metrics.macro_recall),
        fmt_metric(log.metrics.macro_f1),
        fmt_metric(log.metrics.miou),
    ]
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = require_dataset(cli)?;
    let out = out_dir(cli)?;
    let scenes = load_scenes(dataset)?;
    let prepared = prepare(&scenes, cfg.train.train_fraction, cfg.seed)?;

    let model_cfg = cfg.model_config()?;
    let mut model = build_model(&model_cfg, cfg.seed).map_err(CliError::Other)?;
    let meta = CheckpointMeta {
        model: model_cfg.clone(),
        train_seed: cfg.seed,
        train_fraction: cfg.train.train_fraction,
    };

    let best_path = out.join("best.ckpt");
    let final_path = out.join("final.ckpt");
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut best_miou = f64::NEG_INFINITY;
    let t0 = Instant::now();

    train_with(&mut model, &prepared.train, &cfg.train, |log, m| {
        rows.push(epoch_csv_row(log));
        println!(
            "epoch {:3}  lr {:.6}  loss {:.4}  acc {:.4}  miou {:.4}",
            log.epoch, log.lr, log.loss, log.metrics.accuracy, log.metrics.miou
        );
        if log.metrics.miou > best_miou {
            best_miou = log.metrics.miou;
            if let Err(e) = save_checkpoint(&best_path, m, &meta, &prepared.mean, &prepared.std) {
                log::error!("failed to write best checkpoint: {e}");
                return false;
            }
        }
        true
    })
    .map_err(CliError::Other)?;

    save_checkpoint(&final_path, &model, &meta, &prepared.mean, &prepared.std)
        .map_err(CliError::Other)?;
    let csv = csv_table(&METRIC_COLUMNS, &rows);
    fs::write(out.join("metrics.csv"), csv).map_err(|e| CliError::Other(Error::Io(e)))?;

    let test_metrics = evaluate(&model, &prepared.test).map_err(CliError::Other)?;
    println!(
        "trained {} epochs in {:.1}s; best train mIoU {:.4}; test acc {:.4} miou {:.4}",
        rows.len(),
        t0.elapsed().as_secs_f64(),
        best_miou,
        test_metrics.accuracy,
        test_metrics.miou
    );
    println!("wrote {}", out.join("metrics.csv").display());
    println!("wrote {}", best_path.display());
    println!("wrote {}", final_path.display());
    Ok(())
}

fn metric_report(metrics: &SegmentationMetrics) -> (String, String) {
    let headers = ["scope", "accuracy", "precision", "recall", "f1", "iou"];
    let mut rows = vec![vec![
        "overall".to_string(),
        fmt_metric(metrics.accuracy),
        fmt_metric(metrics.macro_precision),
        fmt_metric(metrics.macro_recall),
        fmt_metric(metrics.macro_f1),
        fmt_metric(metrics.miou),
    ]];
    for c in 0..metrics.per_class_precision.len() {
        rows.push(vec![
            format!("class_{c}"),
            String::new(),
            fmt_metric(metrics.per_class_precision[c]),
            fmt_metric(metrics.per_class_recall[c]),
            fmt_metric(metrics.per_class_f1[c]),
            fmt_metric(metrics.per_class_iou[c]),
        ]);
    }
    (aligned_table(&headers, &rows), csv_table(&headers, &rows))
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt_path = cli
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("eval needs --checkpoint PATH".into()))?;
    let dataset = require_dataset(cli)?;
    let out = out_dir(cli)?;

    let (model, meta, (mean, std)) = load_checkpoint(ckpt_path).map_err(|e| match e {
        Error::CheckpointIncompatible(_) => CliError::Checkpoint(e),
        Error::Io(_) | Error::Format(_) => CliError::Checkpoint(e),
        other => CliError::Other(other),
    })?;
    let scenes = load_scenes(dataset)?;
    let (train, test) = split_scenes(&scenes, meta.train_fraction, meta.train_seed)
        .map_err(CliError::Other)?;
    let selected = match cfg.eval_split {
        EvalSplit::Train => train,
        EvalSplit::Test => test,
        EvalSplit::All => scenes,
    };
    let selected = normalize_with(&selected, &mean, &std).map_err(CliError::Other)?;

    let metrics = evaluate(&model, &selected).map_err(CliError::Other)?;
    let (txt, csv) = metric_report(&metrics);
    fs::write(out.join("eval_metrics.txt"), &txt).map_err(|e| CliError::Other(Error::Io(e)))?;
    fs::write(out.join("eval_metrics.csv"), &csv).map_err(|e| CliError::Other(Error::Io(e)))?;

    let maps_dir = out.join("maps");
    fs::create_dir_all(&maps_dir).map_err(|e| CliError::Other(Error::Io(e)))?;
    for scene in &selected {
        let pred = model.predict(&scene.frames).map_err(CliError::Other)?;
        save_label_png(&maps_dir.join(format!("scene_{:05}.png", scene.id)), &pred)
            .map_err(CliError::Other)?;
        save_label_record(&maps_dir.join(format!("scene_{:05}.tsr", scene.id)), &pred)
            .map_err(CliError::Other)?;
    }

    print!("{txt}");
    println!(
        "evaluated {} scenes; wrote {} and {} plus {} map images",
        selected.len(),
        out.join("eval_metrics.txt").display(),
        out.join("eval_metrics.csv").display(),
        selected.len()
    );
    Ok(())
}

fn cmd_ablate(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = require_dataset(cli)?;
    let out = out_dir(cli)?;
    let scenes = load_scenes(dataset)?;
    let prepared = prepare(&scenes, cfg.train.train_fraction, cfg.seed)?;

    let headers = [
        "paradigm", "conv", "ensemble", "accuracy", "precision", "recall", "f1", "miou",
    ];
    let mut rows = Vec::with_capacity(12);
    for paradigm in Paradigm::ALL {
        for separable in [false, true] {
            let conv_name = if separable { "separable" } else { "standard" };
            let model_cfg = cfg.model_config_for(paradigm, separable)?;

            let mut model = build_model(&model_cfg, cfg.seed).map_err(CliError::Other)?;
            cropmap_core::train::train(&mut model, &prepared.train, &cfg.train)
                .map_err(CliError::Other)?;
            let single = evaluate(&model, &prepared.test).map_err(CliError::Other)?;
            rows.push(ablate_row(paradigm, conv_name, "single", &single));
            println!(
                "{paradigm}/{conv_name}/single: acc {:.4} miou {:.4}",
                single.accuracy, single.miou
            );

            let (ens, _) = adaboost_train(
                &prepared.train,
                &model_cfg,
                &cfg.train,
                cfg.ensemble_members,
                cfg.ensemble_threshold,
                cfg.seed,
            )
            .map_err(CliError::Other)?;
            let boosted = evaluate_ensemble(&ens, &prepared.test, model_cfg.n_classes())
                .map_err(CliError::Other)?;
            let label = format!("adaboost{}", cfg.ensemble_members);
            rows.push(ablate_row(paradigm, conv_name, &label, &boosted));
            println!(
                "{paradigm}/{conv_name}/{label}: acc {:.4} miou {:.4}",
                boosted.accuracy, boosted.miou
            );
        }
    }

    let txt = aligned_table(&headers, &rows);
    fs::write(out.join("ablation.txt"), &txt).map_err(|e| CliError::Other(Error::Io(e)))?;
    fs::write(out.join("ablation.csv"), csv_table(&headers, &rows))
        .map_err(|e| CliError::Other(Error::Io(e)))?;
    print!("{txt}");
    println!("wrote {}", out.join("ablation.txt").display());
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

fn ablate_row(
    paradigm: Paradigm,
    conv: &str,
    ensemble: &str,
    m: &SegmentationMetrics,
) -> Vec<String> {
    vec![
        paradigm.to_string(),
        conv.to_string(),
        ensemble.to_string(),
        fmt_metric(m.accuracy),
        fmt_metric(m.macro_precision),
        fmt_metric(m.macro_recall),
        fmt_metric(m.macro_f1),
        fmt_metric(m.miou),
    ]
}

fn cmd_bench(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cli)?;
    let gen_one = cropmap_core::data::GenConfig {
        n_scenes: 1,
        ..cfg.gen.clone()
    };
    let scenes = generate_dataset(cfg.seed, &gen_one).map_err(CliError::Other)?;
    let frames = &scenes[0].frames;

    let mut built: Vec<(String, SequenceModel)> = Vec::new();
    for separable in [false, true] {
        let name = if separable { "separable" } else { "standard" };
        let model_cfg = cfg.model_config_for(cfg.paradigm, separable)?;
        let model = build_model(&model_cfg, cfg.seed).map_err(CliError::Other)?;
        built.push((name.to_string(), model));
    }

    let headers = [
        "conv", "encoder_params", "model_params", "forward_ms", "param_delta", "closed_form_delta",
    ];
    // closed-form per-layer difference (k^2 - 2k) * C_in * C_out over the
    // converted branch conv blocks
    let sep_cfg = cfg.model_config_for(cfg.paradigm, true)?;
    let closed_form: usize = sep_cfg
        .encoder
        .branch_block_dims()
        .iter()
        .take(sep_cfg.encoder.shallow_separable_depth)
        .map(|&(ci, co, k)| (k * k - 2 * k) * ci * co)
        .sum();
    let encoder_params: Vec<usize> = built.iter().map(|(_, m)| m.encoder.param_count()).collect();
    let delta = encoder_params[0] - encoder_params[1];

    let mut rows = Vec::new();
    for (i, (name, model)) in built.iter().enumerate() {
        // warm-up pass, then the timed repeats
        model.forward(frames, cropmap_core::tensor::BnMode::Train).map_err(CliError::Other)?;
        let mut times = Vec::new();
        for _ in 0..5 {
            let t0 = Instant::now();
            model.forward(frames, cropmap_core::tensor::BnMode::Train).map_err(CliError::Other)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        rows.push(vec![
            name.clone(),
            encoder_params[i].to_string(),
            model.param_count().to_string(),
            format!("{median:.2}"),
            if i == 1 { delta.to_string() } else { String::new() },
            if i == 1 { closed_form.to_string() } else { String::new() },
        ]);
    }

    let txt = aligned_table(&headers, &rows);
    fs::write(out.join("bench.txt"), &txt).map_err(|e| CliError::Other(Error::Io(e)))?;
    fs::write(out.join("bench.csv"), csv_table(&headers, &rows))
        .map_err(|e| CliError::Other(Error::Io(e)))?;
    print!("{txt}");
    println!("separable shallow layers remove {delta} encoder parameters (closed form: {closed_form})");
    println!("wrote {}", out.join("bench.txt").display());
    println!("wrote {}", out.join("bench.csv").display());
    Ok(())
}

/// Train an AdaBoost ensemble and write member checkpoints plus the
/// manifest; exposed for tests and the ablation path.
pub fn train_ensemble_artifacts(
    cfg: &RunConfig,
    prepared_train: &[SceneSequence],
    norm: (&[f64], &[f64]),
    out: &Path,
) -> Result<(), CliError> {
    let model_cfg = cfg.model_config()?;
    let (ens, rounds) = adaboost_train(
        prepared_train,
        &model_cfg,
        &cfg.train,
        cfg.ensemble_members,
        cfg.ensemble_threshold,
        cfg.seed,
    )
    .map_err(CliError::Other)?;
    let mut member_paths = Vec::new();
    let mut alphas = Vec::new();
    for (i, member) in ens.members.iter().enumerate() {
        let path = out.join(format!("member_{i}.ckpt"));
        let meta = CheckpointMeta {
            model: model_cfg.clone(),
            train_seed: cfg.seed,
            train_fraction: cfg.train.train_fraction,
        };
        save_checkpoint(&path, &member.model, &meta, norm.0, norm.1).map_err(CliError::Other)?;
        member_paths.push(path.file_name().unwrap().to_string_lossy().into_owned());
        alphas.push(member.alpha);
    }
    write_manifest(
        &out.join("ensemble.manifest"),
        &member_paths,
        &alphas,
        cfg.ensemble_threshold,
        cfg.seed,
    )
    .map_err(CliError::Other)?;
    for r in &rounds {
        println!(
            "round {}: subset {} eps {:.4} alpha {:.4}{}",
            r.round,
            r.subset_size,
            r.eps,
            r.alpha,
            if r.clamped { " (clamped)" } else { "" }
        );
    }
    Ok(())
}
