use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use wait_core::ablation::{self, Sweep};
use wait_core::checkpoint::Checkpoint;
use wait_core::config::{Variant, VariantConfig};
use wait_core::data_pipeline::{
    extract_frames, list_images, write_manifest, write_source_split, write_target_split, DatasetManifest,
    FrameSequence, SplitStats, MANIFEST_FILE as DATASET_FILE,
};
use wait_core::evaluation::{evaluate, EvalInputs, Translator};
use wait_core::metrics::{extractor_by_name, FeatureStats, FlowDir};
use wait_core::training::{stylize_video, train, Model, RunDir, TrainOptions, TrainingData};
use wait_core::{Error, Result};

use crate::manifest::{guard, RunManifest};
use crate::{AblateArgs, Cli, Command, EvaluateArgs, PrepareArgs, StylizeArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::Config(format!(
            "device {} is not available; only cpu is supported",
            cli.device
        )));
    }
    match &cli.command {
        Command::Prepare(a) => prepare(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Stylize(a) => stylize(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Ablate(a) => ablate(cli, a),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

/// Loads `--config`, applies `--seed` and resolves relative data paths
/// against the config file's directory.
fn load_config(cli: &Cli) -> Result<Option<VariantConfig>> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = VariantConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut Option<PathBuf>| {
        if let Some(p) = p {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    };
    resolve(&mut cfg.data.root);
    resolve(&mut cfg.data.flows);
    Ok(Some(cfg))
}

fn dataset_digest(m: &mut RunManifest, cfg: &VariantConfig) -> Result<()> {
    if let Some(root) = &cfg.data.root {
        m.digest("dataset", &root.join(DATASET_FILE))?;
    }
    Ok(())
}

// prepare

/// A directory holding images is one clip; otherwise every subdirectory or
/// media file below it is a clip.
fn collect_clips(path: &Path, stride: usize) -> Result<Vec<FrameSequence>> {
    if !path.exists() {
        return Err(Error::Data(format!("{} does not exist", path.display())));
    }
    if path.is_file() || !list_images(path)?.is_empty() {
        return Ok(vec![extract_frames(path, stride)?]);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    let mut clips = Vec::new();
    for p in entries {
        if p.is_dir() && list_images(&p)?.is_empty() {
            continue;
        }
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')) {
            continue;
        }
        clips.push(extract_frames(&p, stride)?);
    }
    let mut seen = BTreeSet::new();
    for c in &clips {
        if !seen.insert(c.source_id.clone()) {
            return Err(Error::Data(format!("two clips named {} under {}", c.source_id, path.display())));
        }
    }
    if clips.is_empty() {
        return Err(Error::Data(format!("no frames found under {}", path.display())));
    }
    Ok(clips)
}

fn target_images(path: &Path) -> Result<Vec<PathBuf>> {
    let files = if path.is_dir() { list_images(path)? } else { Vec::new() };
    if files.is_empty() {
        return Err(Error::Data(format!("no target images in {}", path.display())));
    }
    Ok(files)
}

enum SplitInput {
    Clips(Vec<FrameSequence>),
    Images(Vec<PathBuf>),
}

fn prepare(cli: &Cli, a: &PrepareArgs) -> Result<()> {
    let out = out_dir(cli)?;
    guard(out, cli.force)?;
    let mut splits: Vec<(&str, &Path, bool)> = vec![("trainA", &a.source, true), ("trainB", &a.target, false)];
    if let Some(p) = &a.test_source {
        splits.push(("testA", p, true));
    }
    if let Some(p) = &a.test_target {
        splits.push(("testB", p, false));
    }
    // Read everything before touching the output.
    let mut inputs = Vec::new();
    for (name, path, is_source) in &splits {
        if *is_source || a.target_ordered {
            let stride = if *is_source { a.stride } else { 1 };
            inputs.push((*name, SplitInput::Clips(collect_clips(path, stride)?)));
        } else {
            inputs.push((*name, SplitInput::Images(target_images(path)?)));
        }
    }
    create_dir(out)?;
    let mut m = RunManifest::start("prepare");
    let mut dataset = DatasetManifest::default();
    let mut counts: BTreeMap<String, SplitStats> = BTreeMap::new();
    for (name, input) in inputs {
        let dir = out.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let stats = match input {
            SplitInput::Clips(clips) => write_source_split(out, name, &clips, &mut dataset)?,
            SplitInput::Images(files) => write_target_split(out, name, &files, &mut dataset)?,
        };
        if stats.frames == 0 {
            return Err(Error::Data(format!("split {name} ended up empty")));
        }
        if stats.skipped > 0 {
            m.notes.push(format!("{name}: skipped {} undecodable image(s)", stats.skipped));
        }
        m.outputs.push(dir);
        counts.insert(name.to_string(), stats);
    }
    write_manifest(out, &dataset)?;
    m.outputs.push(out.join(DATASET_FILE));
    m.digest("dataset", &out.join(DATASET_FILE))?;
    m.notes.push(format!("source stride {}", a.stride));
    m.finish(out)?;
    print_json(&serde_json::to_value(&counts).expect("json"));
    Ok(())
}

// train

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = load_config(cli)?.ok_or_else(|| Error::Config("train needs --config".into()))?;
    let out = out_dir(cli)?;
    if !a.resume {
        guard(out, cli.force)?;
    }
    let data = TrainingData::from_config(&cfg)?;
    create_dir(out)?;
    let mut m = RunManifest::start("train");
    dataset_digest(&mut m, &cfg)?;
    let summary = train(&cfg, &data, out, &TrainOptions { resume: a.resume })?;
    let run = RunDir::new(out);
    m.outputs.push(run.config());
    m.outputs.push(run.losses());
    m.outputs.extend(summary.checkpoints.iter().cloned());
    if run.latest().is_file() {
        m.outputs.push(run.latest());
    }
    if a.resume {
        m.notes.push(format!("resumed; {} epoch(s) run", summary.epochs));
    }
    m.config = Some(cfg);
    m.finish(out)?;
    print_json(&json!({
        "epochs": summary.epochs,
        "iterations": summary.iterations,
        "last": summary.last,
        "checkpoints": summary.checkpoints,
    }));
    Ok(())
}

// stylize

fn load_model(path: &Path, m: &mut RunManifest) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    m.digest("checkpoint", path)?;
    m.config = Some(ckpt.meta.config.clone());
    Model::from_checkpoint(&ckpt)
}

fn stylize(cli: &Cli, a: &StylizeArgs) -> Result<()> {
    let out = out_dir(cli)?;
    guard(out, cli.force)?;
    if !a.frames.is_dir() {
        return Err(Error::Data(format!("{} is not a frame directory", a.frames.display())));
    }
    let mut m = RunManifest::start("stylize");
    let model = load_model(&a.checkpoint, &mut m)?;
    let seq = extract_frames(&a.frames, 1)?;
    let size = model.config.image_size;

    let mut names = BTreeSet::new();
    let mut sizes = BTreeSet::new();
    let mut stems = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames().iter().enumerate() {
        let stem = seq.frame_stem(i)?;
        if !names.insert(stem.clone()) {
            return Err(Error::Data(format!("two input frames share the name {stem}")));
        }
        sizes.insert(f.handle.dimensions()?);
        if let wait_core::data_pipeline::ImageHandle::File(p) = &f.handle {
            m.digest(format!("frame:{stem}"), p)?;
        }
        stems.push(stem);
    }
    let resized = sizes.iter().filter(|&&(w, h)| (w as usize, h as usize) != (size, size)).count();
    if sizes.len() > 1 {
        m.notes.push(format!(
            "inputs have {} different sizes; all resized to {size}x{size} before inference",
            sizes.len()
        ));
    } else if resized > 0 {
        m.notes.push(format!("inputs resized to {size}x{size} before inference"));
    }

    let frames = stylize_video(&model, &seq, usize::MAX)?;
    create_dir(out)?;
    for (stem, img) in stems.iter().zip(&frames) {
        let path = out.join(format!("{stem}.png"));
        img.to_rgb8()
            .save(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        m.outputs.push(path);
    }
    m.finish(out)?;
    println!("{} frame(s) written to {}", frames.len(), out.display());
    Ok(())
}

// evaluate

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let out = out_dir(cli)?;
    guard(out, cli.force)?;
    let mut m = RunManifest::start("evaluate");
    let translator = if a.checkpoint == "identity" {
        if a.image_size == 0 {
            return Err(Error::Config("--image-size must be >= 1".into()));
        }
        m.notes.push(format!("identity translation at {0}x{0}", a.image_size));
        Translator::Identity { image_size: a.image_size }
    } else {
        Translator::Model(Box::new(load_model(Path::new(&a.checkpoint), &mut m)?))
    };
    let ds = wait_core::data_pipeline::Dataset::open(&a.data)?;
    m.digest("dataset", &a.data.join(DATASET_FILE))?;
    let clips = ds.clips(&a.split)?;
    let extractor = extractor_by_name(&a.extractor)?;
    let (real_stats, target) = match &a.real_stats {
        Some(p) => {
            m.digest("real_stats", p)?;
            (Some(FeatureStats::load(p)?), None)
        }
        None => (None, Some(ds.images(&a.target_split)?)),
    };
    let flows = FlowDir::new(&a.flows);
    let inputs = EvalInputs {
        clips: &clips,
        flows: &flows,
        extractor: extractor.as_ref(),
        real_stats,
        target: target.as_ref(),
    };
    let (report, fake) = evaluate(&translator, &inputs)?;
    create_dir(out)?;
    let report_path = out.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, &text).map_err(|e| Error::io(&report_path, e))?;
    let stats_path = out.join("fake_stats.json");
    fake.save(&stats_path)?;
    m.notes.push(format!("feature extractor {}", extractor.name()));
    m.outputs.extend([report_path, stats_path]);
    m.finish(out)?;
    println!("{text}");
    Ok(())
}

// ablate

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let out = out_dir(cli)?;
    guard(out, cli.force)?;
    let base = match load_config(cli)? {
        Some(c) => c,
        None => {
            let mut c = VariantConfig::new(Variant::Wait);
            if let Some(seed) = cli.seed {
                c.seed = seed;
            }
            c
        }
    };
    let sweep = match &a.sweep {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Sweep::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Sweep::default(),
    };
    let runs = ablation::plan(&base, &sweep)?;
    let data = if a.train { Some(TrainingData::from_config(&base)?) } else { None };

    create_dir(out)?;
    let mut m = RunManifest::start("ablate");
    if let Some(p) = &a.sweep {
        m.digest("sweep", p)?;
    }
    if data.is_some() {
        dataset_digest(&mut m, &base)?;
    }
    let mut plan = Vec::new();
    for r in &runs {
        let dir = out.join(&r.name);
        create_dir(&dir)?;
        let cfg_path = dir.join("config.toml");
        r.config.save(&cfg_path)?;
        m.outputs.push(cfg_path);
        let mut entry = json!({ "name": r.name, "axis": r.axis, "value": r.value });
        if let Some(data) = &data {
            let summary = train(&r.config, data, &dir, &TrainOptions::default())?;
            entry["iterations"] = json!(summary.iterations);
            entry["last"] = json!(summary.last);
            m.outputs.extend(summary.checkpoints);
        }
        plan.push(entry);
    }
    let plan_path = out.join("plan.json");
    let text = serde_json::to_string_pretty(&plan).expect("plan serializes");
    fs::write(&plan_path, text).map_err(|e| Error::io(&plan_path, e))?;
    m.outputs.push(plan_path);
    m.config = Some(ablation::ablation_base(&base));
    m.finish(out)?;
    for r in &runs {
        println!("{}\t{}={}", r.name, r.axis.key(), r.value);
    }
    Ok(())
}
