//! Subcommand implementations.

use crate::dataset::{for_each_subject, list_subjects, load_mcv, subject_base};
use crate::manifest::ManifestBuilder;
use crate::patch_store;
use crate::svg::{Frame, Svg};
use crate::{
    usage_error, CliError, EvaluateArgs, PlotArgs, PredictArgs, PreprocessArgs, SampleArgs,
    SynthArgs, TrainArgs,
};
use anyhow::anyhow;
use serde_json::json;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use voxseg::loss::LossConfig;
use voxseg::metrics::{evaluate_subject, volume_agreement};
use voxseg::network::checkpoint::{load_checkpoint, save_checkpoint};
use voxseg::network::{ModelConfig, ModelParams};
use voxseg::preprocess::build_channels;
use voxseg::rng::SplitMix64;
use voxseg::sampler::{sample_patches, SampleWarning, SamplerConfig};
use voxseg::synth::{generate_synthetic, SynthSpec};
use voxseg::trainer::{self, predict_volume, LossKind, TrainConfig};
use voxseg::volume::{LabelVolume, Volume};

type CliResult = Result<(), CliError>;

/// `<base>.json` — appends rather than replacing an "extension", since base
/// paths like `best.ckpt` contain dots.
fn json_sidecar(base: &Path) -> std::path::PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

fn ensure_out_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| usage_error(format!("cannot create {}: {e}", dir.display())))
}

fn parse_dims(s: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| usage_error(format!("invalid extent `{p}` in --dims")))
    };
    match parts.as_slice() {
        [one] => {
            let d = parse(one)?;
            Ok([d, d, d])
        }
        [d, h, w] => Ok([parse(d)?, parse(h)?, parse(w)?]),
        _ => Err(usage_error("--dims takes one extent or three comma-separated extents")),
    }
}

/// Per-subject seed stream used by both `synth` and `sample`.
fn subject_seed(seed: u64, stream: u64) -> u64 {
    SplitMix64::derive(seed, stream).next_u64()
}

// ───────────────────────── synth ─────────────────────────

pub fn synth(args: &SynthArgs) -> CliResult {
    let dims = parse_dims(&args.dims)?;
    if args.radius_min < 1.0 || args.radius_min > args.radius_max {
        return Err(usage_error("need 1 <= --radius-min <= --radius-max"));
    }
    if args.subjects == 0 {
        return Err(usage_error("--subjects must be >= 1"));
    }
    ensure_out_dir(&args.out)?;
    let mut manifest = ManifestBuilder::new(
        "synth",
        json!({
            "subjects": args.subjects,
            "dims": dims,
            "lesions": args.lesions,
            "radius_min": args.radius_min,
            "radius_max": args.radius_max,
            "intensity": args.intensity,
            "noise": args.noise,
        }),
        Some(args.seed),
    );
    for s in 0..args.subjects {
        let spec = SynthSpec {
            dims,
            n_lesions: args.lesions,
            lesion_radius_range: [args.radius_min, args.radius_max],
            lesion_intensity: args.intensity,
            noise_sigma: args.noise,
            seed: subject_seed(args.seed, s as u64),
        };
        let out = generate_synthetic(&spec)?;
        let flair = subject_base(&args.out, s, "flair");
        let mask = subject_base(&args.out, s, "mask");
        out.volume.write(&flair)?;
        out.mask.write(&mask)?;
        manifest.output(&flair);
        manifest.output(&mask);
    }
    manifest.write(&args.out).map_err(CliError::Pipeline)?;
    println!("synth: wrote {} subjects to {}", args.subjects, args.out.display());
    Ok(())
}

// ───────────────────────── preprocess ─────────────────────────

pub fn preprocess(args: &PreprocessArgs, threads: usize) -> CliResult {
    let subjects = list_subjects(&args.input, "flair")?;
    if args.clip_limit <= 0.0 {
        return Err(usage_error("--clip-limit must be positive"));
    }
    if args.tiles == 0 {
        return Err(usage_error("--tiles must be >= 1"));
    }
    ensure_out_dir(&args.out)?;
    let mut manifest = ManifestBuilder::new(
        "preprocess",
        json!({ "clip_limit": args.clip_limit, "tiles": args.tiles, "threads": threads }),
        None,
    );
    manifest.input(&args.input);
    for_each_subject(&subjects, threads, |s| {
        let volume = Volume::read(&subject_base(&args.input, s, "flair"))?;
        let mcv = build_channels(&volume, args.clip_limit, [args.tiles, args.tiles])?;
        let n = mcv.dims.iter().product::<usize>();
        for c in 0..2 {
            let chan = Volume::new(mcv.dims, mcv.voxel_mm, mcv.data[c * n..(c + 1) * n].to_vec())?;
            chan.write(&subject_base(&args.out, s, &format!("chan{c}")))?;
        }
        // Masks ride along so downstream stages need one directory.
        let mask = LabelVolume::read(&subject_base(&args.input, s, "mask"))?;
        mask.write(&subject_base(&args.out, s, "mask"))?;
        Ok(())
    })?;
    for &s in &subjects {
        manifest.output(&subject_base(&args.out, s, "chan0"));
        manifest.output(&subject_base(&args.out, s, "chan1"));
    }
    manifest.write(&args.out).map_err(CliError::Pipeline)?;
    println!("preprocess: {} subjects -> {}", subjects.len(), args.out.display());
    Ok(())
}

// ───────────────────────── sample ─────────────────────────

pub fn sample(args: &SampleArgs) -> CliResult {
    let subjects = list_subjects(&args.input, "chan0")?;
    if subjects.len() < 3 {
        return Err(usage_error(format!(
            "need at least 3 subjects (train/validation/held-out), found {}",
            subjects.len()
        )));
    }
    if !(0.0..=1.0).contains(&args.lesion_fraction) {
        return Err(usage_error("--lesion-fraction must lie in [0, 1]"));
    }
    if args.count == 0 || args.val_count == 0 {
        return Err(usage_error("--count and --val-count must be >= 1"));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out_dir(parent)?;
        }
    }

    // Last subject is held out for evaluation, the one before it validates.
    let holdout = *subjects.last().unwrap();
    let val_subject = subjects[subjects.len() - 2];
    let train_subjects: Vec<usize> = subjects[..subjects.len() - 2].to_vec();

    let per = args.count / train_subjects.len();
    let rem = args.count % train_subjects.len();
    let mut train = Vec::with_capacity(args.count);
    let mut warned = Vec::new();
    for (i, &s) in train_subjects.iter().enumerate() {
        let count = per + usize::from(i < rem);
        let mcv = load_mcv(&args.input, s)?;
        let mask = LabelVolume::read(&subject_base(&args.input, s, "mask"))?;
        let cfg = SamplerConfig {
            patch_size: args.patch_size,
            lesion_fraction: args.lesion_fraction,
            count,
            seed: subject_seed(args.seed, 100 + s as u64),
            source_id: s as u32,
        };
        let result = sample_patches(&mcv, &mask, &cfg)?;
        warned.extend(result.warnings.into_iter().map(|w| (s, w)));
        train.extend(result.patches);
    }
    let mcv = load_mcv(&args.input, val_subject)?;
    let mask = LabelVolume::read(&subject_base(&args.input, val_subject, "mask"))?;
    let vcfg = SamplerConfig {
        patch_size: args.patch_size,
        lesion_fraction: args.lesion_fraction,
        count: args.val_count,
        seed: subject_seed(args.seed, 100 + val_subject as u64),
        source_id: val_subject as u32,
    };
    let vres = sample_patches(&mcv, &mask, &vcfg)?;
    warned.extend(vres.warnings.into_iter().map(|w| (val_subject, w)));
    for (s, w) in &warned {
        let kind = match w {
            SampleWarning::EmptyMask => "no lesion voxels",
            SampleWarning::FullMask => "no background voxels",
        };
        eprintln!("warning: subject {s:03}: {kind}; quota reassigned");
    }

    patch_store::save(&args.out, &train, &vres.patches, &train_subjects, val_subject, holdout)
        .map_err(CliError::Pipeline)?;
    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut manifest = ManifestBuilder::new(
        "sample",
        json!({
            "patch_size": args.patch_size,
            "count": args.count,
            "val_count": args.val_count,
            "lesion_fraction": args.lesion_fraction,
            "train_subjects": train_subjects,
            "val_subject": val_subject,
            "holdout_subject": holdout,
        }),
        Some(args.seed),
    );
    manifest.input(&args.input);
    manifest.output(&args.out);
    manifest.write(&out_dir).map_err(CliError::Pipeline)?;
    println!(
        "sample: {} train + {} val patches (holdout subject {holdout:03}) -> {}",
        train.len(),
        vres.patches.len(),
        args.out.display()
    );
    Ok(())
}

// ───────────────────────── train ─────────────────────────

fn preset_config(name: &str) -> Result<ModelConfig, CliError> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "paper" => Ok(ModelConfig::paper()),
        other => Err(usage_error(format!("unknown preset `{other}` (expected toy|paper)"))),
    }
}

pub fn train(args: &TrainArgs) -> CliResult {
    let archive = patch_store::load(&args.patches).map_err(|e| {
        if json_sidecar(&args.patches).exists() {
            CliError::Pipeline(e)
        } else {
            usage_error(format!("patch archive {} not found", args.patches.display()))
        }
    })?;
    let cfg = preset_config(&args.preset)?;
    let summary = cfg.validate()?;
    let factor = cfg.downsample_factor();
    if archive.header.patch_size % factor != 0 {
        return Err(usage_error(format!(
            "archive patch size {} is not a multiple of the model's downsampling factor {factor}",
            archive.header.patch_size
        )));
    }
    let loss_kind = match args.loss.as_str() {
        "focal" => LossKind::FocalTversky,
        "tversky" => LossKind::Tversky,
        other => return Err(usage_error(format!("unknown loss `{other}` (expected focal|tversky)"))),
    };
    ensure_out_dir(&args.out)?;
    let epochs = args.epochs.unwrap_or(if args.preset == "paper" { 100 } else { 30 });
    let tcfg = TrainConfig {
        epochs,
        lr0: args.lr,
        decay: args.decay,
        batch_size: args.batch_size,
        seed: args.seed,
        loss: LossConfig { alpha: args.alpha, beta: args.beta, gamma: args.gamma, ..Default::default() },
        loss_kind,
        ..Default::default()
    };
    let mut params = ModelParams::<f32>::init(&cfg, args.seed)?;
    let ckpt = args.out.join("best.ckpt");

    let mut manifest = ManifestBuilder::new(
        "train",
        json!({
            "preset": args.preset,
            "layers": summary.conv_deconv_layers,
            "sca_voxres_modules": summary.sca_voxres_modules,
            "tap_channels": summary.tap_channels,
            "epochs": epochs,
            "lr0": args.lr,
            "decay": args.decay,
            "batch_size": args.batch_size,
            "loss": args.loss,
            "alpha": args.alpha,
            "beta": args.beta,
            "gamma": args.gamma,
        }),
        Some(args.seed),
    );
    manifest.input(&args.patches);

    if epochs == 0 {
        // Nothing to optimize: the checkpoint is the initialization.
        save_checkpoint(&ckpt, &cfg, &params)?;
        std::fs::write(args.out.join("loss.csv"), "epoch,train_loss,val_loss,lr\n")
            .map_err(|e| CliError::Pipeline(e.into()))?;
        manifest.output(&ckpt);
        manifest.write(&args.out).map_err(CliError::Pipeline)?;
        println!("train: 0 epochs requested; checkpoint equals initialization");
        return Ok(());
    }

    let state = trainer::train(&cfg, &mut params, &archive.train, &archive.val, &tcfg, &ckpt)?;

    let mut csv = String::from("epoch,train_loss,val_loss,lr\n");
    for r in &state.history {
        writeln!(csv, "{},{:.9},{:.9},{:.9e}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
    }
    let csv_path = args.out.join("loss.csv");
    std::fs::write(&csv_path, csv).map_err(|e| CliError::Pipeline(e.into()))?;
    manifest.output(&ckpt);
    manifest.output(&csv_path);
    manifest.write(&args.out).map_err(CliError::Pipeline)?;
    println!(
        "train: best epoch {} (validation loss {:.6}) -> {}",
        state.best_epoch,
        state.best_val_loss,
        ckpt.display()
    );
    Ok(())
}

// ───────────────────────── predict ─────────────────────────

pub fn predict(args: &PredictArgs, threads: usize) -> CliResult {
    if !json_sidecar(&args.checkpoint).exists() {
        return Err(usage_error(format!(
            "checkpoint {} not found",
            args.checkpoint.display()
        )));
    }
    let (cfg, params) = load_checkpoint::<f32>(&args.checkpoint)?;
    let subjects = list_subjects(&args.input, "chan0")?;
    ensure_out_dir(&args.out)?;
    let mut manifest = ManifestBuilder::new(
        "predict",
        json!({ "patch_size": args.patch_size, "threads": threads }),
        None,
    );
    manifest.input(&args.input);
    manifest.input(&args.checkpoint);
    for_each_subject(&subjects, threads, |s| {
        let mcv = load_mcv(&args.input, s)?;
        let pred = predict_volume(&cfg, &params, &mcv, args.patch_size)?;
        pred.write(&subject_base(&args.out, s, "pred"))?;
        Ok(())
    })?;
    for &s in &subjects {
        manifest.output(&subject_base(&args.out, s, "pred"));
    }
    manifest.write(&args.out).map_err(CliError::Pipeline)?;
    println!("predict: {} subjects -> {}", subjects.len(), args.out.display());
    Ok(())
}

// ───────────────────────── evaluate ─────────────────────────

pub fn evaluate(args: &EvaluateArgs, threads: usize) -> CliResult {
    let subjects = list_subjects(&args.pred, "pred")?;
    ensure_out_dir(&args.out)?;
    let results: Mutex<Vec<(usize, voxseg::metrics::SubjectEval)>> = Mutex::new(Vec::new());
    for_each_subject(&subjects, threads, |s| {
        let pred = LabelVolume::read(&subject_base(&args.pred, s, "pred"))?;
        let gt_base = subject_base(&args.gt, s, "mask");
        if !json_sidecar(&gt_base).exists() {
            return Err(usage_error(format!("ground truth {} not found", gt_base.display())));
        }
        let gt = LabelVolume::read(&gt_base)?;
        let eval = evaluate_subject(&pred, &gt)?;
        results.lock().unwrap().push((s, eval));
        Ok(())
    })?;
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(s, _)| *s);

    let mut metrics_csv = String::from("subject,dsc,ltpr,lfpr,avd,n_gt,n_pred\n");
    let mut volumes_csv = String::from("subject,gt_volume,pred_volume\n");
    let mut sums = [0.0f64; 4];
    let mut avd_count = 0usize;
    let mut all_pairs = Vec::new();
    for (s, eval) in &results {
        let avd_field = match eval.avd {
            Some(v) => {
                sums[3] += v;
                avd_count += 1;
                format!("{v:.6}")
            }
            None => {
                eprintln!("warning: subject {s:03}: AVD undefined (empty prediction)");
                "nan".to_string()
            }
        };
        writeln!(
            metrics_csv,
            "{s:03},{:.6},{:.6},{:.6},{avd_field},{},{}",
            eval.dsc, eval.ltpr, eval.lfpr, eval.n_gt_lesions, eval.n_pred_lesions
        )
        .unwrap();
        sums[0] += eval.dsc;
        sums[1] += eval.ltpr;
        sums[2] += eval.lfpr;
        for (g, p) in &eval.lesion_volume_pairs {
            writeln!(volumes_csv, "{s:03},{g},{p}").unwrap();
            all_pairs.push((*g, *p));
        }
    }
    let n = results.len() as f64;
    let mean_avd = if avd_count > 0 {
        format!("{:.6}", sums[3] / avd_count as f64)
    } else {
        "nan".to_string()
    };
    writeln!(
        metrics_csv,
        "mean,{:.6},{:.6},{:.6},{mean_avd},,",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n
    )
    .unwrap();

    let metrics_path = args.out.join("metrics.csv");
    let volumes_path = args.out.join("volumes.csv");
    std::fs::write(&metrics_path, &metrics_csv).map_err(|e| CliError::Pipeline(e.into()))?;
    std::fs::write(&volumes_path, &volumes_csv).map_err(|e| CliError::Pipeline(e.into()))?;

    let mut manifest = ManifestBuilder::new("evaluate", json!({ "subjects": subjects }), None);
    manifest.input(&args.pred);
    manifest.input(&args.gt);
    manifest.output(&metrics_path);
    manifest.output(&volumes_path);
    manifest.write(&args.out).map_err(CliError::Pipeline)?;

    println!(
        "evaluate: {} subjects; mean dsc {:.4} ltpr {:.4} lfpr {:.4} avd {mean_avd}",
        results.len(),
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
    );
    if all_pairs.len() >= 2 {
        if let Ok((r, slope)) = volume_agreement(&all_pairs) {
            println!("evaluate: lesion volume agreement n={} pearson_r={r:.4} slope={slope:.4}", all_pairs.len());
        }
    }
    Ok(())
}

// ───────────────────────── plot ─────────────────────────

fn read_csv(path: &Path, expected_header: &str) -> Result<Vec<Vec<String>>, CliError> {
    if !path.exists() {
        return Err(usage_error(format!("input CSV {} not found", path.display())));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Pipeline(anyhow!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == expected_header => {}
        Some(h) => {
            return Err(CliError::Pipeline(anyhow!(
                "{}: expected header `{expected_header}`, found `{h}`",
                path.display()
            )))
        }
        None => return Err(CliError::Pipeline(anyhow!("{}: empty file", path.display()))),
    }
    let rows: Vec<Vec<String>> = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let fields: Vec<String> = l.split(',').map(|f| f.trim().to_string()).collect();
            (i, fields)
        })
        .map(|(_, f)| f)
        .collect();
    if rows.is_empty() {
        return Err(CliError::Pipeline(anyhow!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn parse_field(path: &Path, row_idx: usize, field: &str) -> Result<f64, CliError> {
    field.parse::<f64>().map_err(|_| {
        CliError::Pipeline(anyhow!(
            "{}: row {}: `{field}` is not a number",
            path.display(),
            row_idx + 2
        ))
    })
}

pub fn plot_loss(args: &PlotArgs) -> CliResult {
    let rows = read_csv(&args.input, "epoch,train_loss,val_loss,lr")?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if row.len() < 4 {
            return Err(CliError::Pipeline(anyhow!(
                "{}: row {}: expected 4 fields, found {}",
                args.input.display(),
                i + 2,
                row.len()
            )));
        }
        let epoch = parse_field(&args.input, i, &row[0])?;
        train.push((epoch, parse_field(&args.input, i, &row[1])?));
        val.push((epoch, parse_field(&args.input, i, &row[2])?));
    }
    let (best_idx, best) = val
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty");

    let x_max = train.last().unwrap().0;
    let y_max = train
        .iter()
        .chain(&val)
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame::new(0.0, x_max, 0.0, y_max * 1.05);
    let mut svg = Svg::new();
    svg.axes(&frame, "epoch", "loss");
    let to_px = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
        pts.iter().map(|(x, y)| (frame.x(*x), frame.y(*y))).collect()
    };
    svg.polyline(&to_px(&train), "#1f77b4", 1.5);
    svg.polyline(&to_px(&val), "#ff7f0e", 1.5);
    svg.circle(frame.x(best.0), frame.y(best.1), 4.0, "none", "#d62728");
    svg.text(frame.x(best.0), frame.y(best.1) - 8.0, &format!("best @ {}", best.0), "middle", 11);
    svg.text(frame.x(x_max * 0.02), frame.y(y_max), "train", "start", 11);
    svg.circle(frame.x(x_max * 0.012), frame.y(y_max) - 4.0, 3.0, "#1f77b4", "none");
    svg.text(frame.x(x_max * 0.02), frame.y(y_max * 0.93), "validation", "start", 11);
    svg.circle(frame.x(x_max * 0.012), frame.y(y_max * 0.93) - 4.0, 3.0, "#ff7f0e", "none");
    std::fs::write(&args.out, svg.finish()).map_err(|e| CliError::Pipeline(e.into()))?;
    println!(
        "plot loss: {} epochs, best validation {:.6} at epoch {} -> {}",
        rows.len(),
        best.1,
        val[best_idx].0,
        args.out.display()
    );
    Ok(())
}

pub fn plot_volumes(args: &PlotArgs) -> CliResult {
    let rows = read_csv(&args.input, "subject,gt_volume,pred_volume")?;
    let mut pairs = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if row.len() < 3 {
            return Err(CliError::Pipeline(anyhow!(
                "{}: row {}: expected 3 fields, found {}",
                args.input.display(),
                i + 2,
                row.len()
            )));
        }
        pairs.push((
            parse_field(&args.input, i, &row[1])?,
            parse_field(&args.input, i, &row[2])?,
        ));
    }
    let (r, slope) = volume_agreement(&pairs)?;
    let intercept = {
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        my - slope * mx
    };

    let max_v = pairs
        .iter()
        .flat_map(|(a, b)| [*a, *b])
        .fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame::new(0.0, max_v * 1.05, 0.0, max_v * 1.05);
    let mut svg = Svg::new();
    svg.axes(&frame, "ground-truth lesion volume (voxels)", "predicted lesion volume (voxels)");
    svg.line(frame.x(0.0), frame.y(0.0), frame.x(max_v), frame.y(max_v), "#999", 1.0, true);
    let y0 = intercept;
    let y1 = slope * max_v + intercept;
    svg.line(frame.x(0.0), frame.y(y0), frame.x(max_v), frame.y(y1), "#d62728", 1.2, false);
    for (g, p) in &pairs {
        svg.circle(frame.x(*g), frame.y(*p), 3.0, "#1f77b4", "none");
    }
    svg.text(
        frame.x(max_v * 0.05),
        frame.y(max_v * 0.97),
        &format!("r = {r:.2}, slope = {slope:.2}"),
        "start",
        12,
    );
    std::fs::write(&args.out, svg.finish()).map_err(|e| CliError::Pipeline(e.into()))?;
    println!(
        "plot volumes: n={} pearson_r={r:.4} slope={slope:.4} -> {}",
        pairs.len(),
        args.out.display()
    );
    Ok(())
}
