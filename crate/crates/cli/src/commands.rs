//! One function per subcommand. Each returns what it wrote so tests can
//! inspect it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mosnet::alignment::align_block;
use mosnet::datasets::io::{format_pattern, load_gray, load_mask, resize_nearest, resolve, save_frame, save_gray};
use mosnet::datasets::{
    generate_synthetic_scene, load_scene, make_sliding_blocks, make_training_blocks, shuffle_and_split, write_scene,
    BlockTensor, Scene, SyntheticConfig,
};
use mosnet::inference::{align_tensor, predict_scene, PredictOptions};
use mosnet::labelspace::{relabel_lasiesta, LabelMask, RawAnnotationCodec, RawAnnotationMask};
use mosnet::metrics::{self, aggregate, pr_curve, SceneResult, Summary, METRIC_NAMES};
use mosnet::model::pretrained::{import_pretrained_encoder, read_npz};
use mosnet::model::{Graph, Network};
use mosnet::postprocess::{default_grid, sweep_threshold, BinaryMotionMask, ProbabilityMotionMask, SweepResult};
use mosnet::training::{
    restore, restore_for, train_with, validate, write_history, CheckpointPolicy, ResumeState,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

fn scene_category(name: &str) -> String {
    Path::new(name)
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Load a scene from an explicit directory with the run's layout and codec.
pub fn load_scene_at(cfg: &RunConfig, dir: &Path) -> CliResult<Scene> {
    Ok(load_scene(dir, &cfg.dataset.layout(), &cfg.dataset.codec(), cfg.resize_to())?)
}

fn check_paths_exist(cfg: &RunConfig, scenes: &[String]) -> CliResult<()> {
    let missing: Vec<String> = scenes
        .iter()
        .map(|s| cfg.scene_path(s))
        .chain(cfg.pretrained.clone())
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!("missing paths: {}", missing.join(", "))))
    }
}

fn latest_epoch_checkpoint(run: &Path) -> Option<(usize, PathBuf)> {
    let dir = run.join("checkpoints");
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let n: usize = name.strip_prefix("epoch_")?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
}

/// Train on the development scenes; returns the run directory.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> CliResult<PathBuf> {
    cfg.validate()?;
    if cfg.split.development_scenes.is_empty() {
        return Err(CliError::Config("split.development_scenes is empty".into()));
    }
    check_paths_exist(cfg, &cfg.split.development_scenes)?;
    let run = cfg.output_dir.clone();
    std::fs::create_dir_all(&run)?;
    std::fs::write(run.join("config.toml"), cfg.to_toml())?;

    let mut all = BlockTensor::default();
    for name in &cfg.split.development_scenes {
        let scene = load_scene_at(cfg, &cfg.scene_path(name))?;
        all.extend(make_training_blocks(&scene, cfg.model.n)?);
    }
    let (mut train_set, mut val_set) = shuffle_and_split(all, &cfg.split)?;
    if val_set.is_empty() {
        return Err(CliError::Config(
            "validation split is empty; raise split.validation_fraction or add scenes".into(),
        ));
    }
    if cfg.alignment.enabled {
        train_set = align_tensor(&train_set, &cfg.alignment.params);
        val_set = align_tensor(&val_set, &cfg.alignment.params);
    }
    log::info!("{} training blocks, {} validation blocks", train_set.len(), val_set.len());

    let (mut net, state) = match latest_epoch_checkpoint(&run).filter(|_| resume) {
        Some((epoch, path)) => {
            log::info!("resuming from {}", path.display());
            let ck = restore_for(&path, &cfg.model)?;
            let mut state = ResumeState::from_checkpoint(&ck);
            let best = CheckpointPolicy::best_path(&run);
            if best.exists() {
                let b = restore(&best)?;
                if b.epoch != Some(epoch) {
                    state.best_weights = Some(b.network.params().iter().map(|p| p.data.clone()).collect());
                }
            }
            (ck.network, Some(state))
        }
        None => {
            if resume {
                log::warn!("no checkpoint under {}; starting fresh", run.display());
            }
            let mut net = Network::new(&cfg.model)?;
            match &cfg.pretrained {
                Some(p) => import_pretrained_encoder(&mut net, &read_npz(p)?)?,
                None if cfg.model.freeze_vgg => {
                    log::warn!("freeze_vgg is set but no pretrained weights are configured; the encoder stays at its random initialization")
                }
                None => {}
            }
            (net, None)
        }
    };
    let policy = CheckpointPolicy {
        run_dir: Some(run.clone()),
    };
    let (loss, t, bs) = (cfg.train.loss, cfg.train.validation_threshold, cfg.train.mini_batch_size);
    let history = train_with(
        &mut net,
        &train_set,
        &cfg.train,
        |m: &Network| validate(m, &val_set, &loss, t, bs),
        &policy,
        state,
    )?;
    write_history(&run.join("history.csv"), &history)?;
    Ok(run)
}

#[derive(Debug, Clone, Default)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub scene: PathBuf,
    pub out: PathBuf,
    pub probabilities: bool,
    /// Overrides `alignment.enabled` when set.
    pub align: Option<bool>,
}

/// Write `bin%06d.png` (and optionally `prob%06d.png`) per eligible frame,
/// numbered like the input frames. Returns the number of masks written.
pub fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> CliResult<usize> {
    cfg.validate()?;
    let ck = restore_for(&args.checkpoint, &cfg.model)?;
    let scene = load_scene_at(cfg, &args.scene)?;
    let align = args.align.unwrap_or(cfg.alignment.enabled);
    let opts = PredictOptions {
        batch_size: cfg.predict_batch_size,
        align: align.then(|| cfg.alignment.params.clone()),
        post: cfg.postprocess,
    };
    let preds = predict_scene(&ck.network, &scene, &opts)?;
    std::fs::create_dir_all(&args.out)?;
    for p in &preds {
        let idx = scene.first_index + p.target_index;
        let (h, w) = (p.binary.height(), p.binary.width());
        save_gray(&args.out.join(format!("bin{idx:06}.png")), h, w, &p.binary.to_gray())?;
        if args.probabilities {
            let g: Vec<u8> = p
                .probability
                .values()
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect();
            save_gray(&args.out.join(format!("prob{idx:06}.png")), h, w, &g)?;
        }
    }
    Ok(preds.len())
}

/// Masks of a prediction directory, keyed by frame index.
fn list_masks(dir: &Path, prefix: &str) -> CliResult<BTreeMap<usize, PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read prediction directory {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for e in entries.filter_map(|e| e.ok()) {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(idx) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(".png"))
            .and_then(|r| r.parse::<usize>().ok())
        {
            out.insert(idx, e.path());
        }
    }
    Ok(out)
}

fn load_gt(cfg: &RunConfig, scene_dir: &Path, index: usize) -> CliResult<Option<LabelMask>> {
    let layout = cfg.dataset.layout();
    let name = scene_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let gt_dir = scene_dir.join(format_pattern(&layout.gt_dir, &name, 0));
    let Some(path) = resolve(&gt_dir, &format_pattern(&layout.gt_pattern, &name, index)) else {
        return Ok(None);
    };
    let mask = load_mask(&path, &cfg.dataset.codec())?;
    Ok(Some(match cfg.resize_to() {
        Some((h, w)) if (mask.height(), mask.width()) != (h, w) => resize_nearest(&mask, h, w),
        _ => mask,
    }))
}

/// Prediction masks paired with their ground truth for one scene.
struct Paired {
    binary: Vec<BinaryMotionMask>,
    prob: Vec<ProbabilityMotionMask>,
    gt: Vec<LabelMask>,
}

fn pair_scene(cfg: &RunConfig, pred_root: &Path, scene: &str, need_prob: bool) -> CliResult<Paired> {
    let pred_dir = pred_root.join(scene);
    let scene_dir = cfg.scene_path(scene);
    let bins = list_masks(&pred_dir, "bin")?;
    let probs = if need_prob { list_masks(&pred_dir, "prob")? } else { BTreeMap::new() };
    let keys: Vec<usize> = if need_prob {
        probs.keys().copied().collect()
    } else {
        bins.keys().copied().collect()
    };
    if keys.is_empty() {
        return Err(CliError::Data(format!("no predictions in {}", pred_dir.display())));
    }
    let mut out = Paired {
        binary: Vec::new(),
        prob: Vec::new(),
        gt: Vec::new(),
    };
    let mut unpaired = Vec::new();
    for idx in keys {
        let Some(gt) = load_gt(cfg, &scene_dir, idx)? else {
            unpaired.push(idx);
            continue;
        };
        if need_prob {
            let (h, w, g) = load_gray(&probs[&idx])?;
            let p = ProbabilityMotionMask::new(h, w, g.iter().map(|&v| v as f32 / 255.0).collect())?;
            out.prob.push(p);
        } else {
            let (h, w, g) = load_gray(&bins[&idx])?;
            out.binary.push(BinaryMotionMask::from_gray(h, w, &g)?);
        }
        out.gt.push(gt);
    }
    if !unpaired.is_empty() {
        let list: Vec<String> = unpaired.iter().map(|i| i.to_string()).collect();
        return Err(CliError::Data(format!(
            "scene {scene}: predictions without ground truth for frames {}",
            list.join(", ")
        )));
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

pub fn scenes_csv(rows: &[SceneResult]) -> String {
    let mut s = format!("scene,category,tp,fp,fn,tn,{}\n", METRIC_NAMES.join(","));
    for r in rows {
        let vals: Vec<String> = r.report.values().iter().map(|v| fmt_opt(*v)).collect();
        let c = &r.counts;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.scene, r.category, c.tp, c.fp, c.fn_, c.tn, vals.join(","));
    }
    s
}

pub fn summary_csv(summary: &Summary) -> String {
    let mut s = format!("group,members,undefined_f,{}\n", METRIC_NAMES.join(","));
    for g in summary.categories.iter().chain(std::iter::once(&summary.overall)) {
        let vals: Vec<String> = g.means.values().iter().map(|v| fmt_opt(*v)).collect();
        let _ = writeln!(s, "{},{},{},{}", g.name, g.members, g.undefined_count, vals.join(","));
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub predictions: PathBuf,
    /// Scenes to evaluate; the config's evaluation scenes when empty.
    pub scenes: Vec<String>,
    pub out: PathBuf,
    pub pr_curve: bool,
    pub sweep: bool,
}

fn eval_scenes(cfg: &RunConfig, scenes: &[String]) -> CliResult<Vec<String>> {
    let list = if scenes.is_empty() {
        cfg.split.evaluation_scenes.clone()
    } else {
        scenes.to_vec()
    };
    if list.is_empty() {
        return Err(CliError::Config("no scenes to evaluate".into()));
    }
    Ok(list)
}

/// Per-scene, per-category and overall reports.
pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> CliResult<Summary> {
    let scenes = eval_scenes(cfg, &args.scenes)?;
    let mut rows = Vec::new();
    for name in &scenes {
        let p = pair_scene(cfg, &args.predictions, name, false)?;
        let mut counts = metrics::ConfusionCounts::default();
        for (b, g) in p.binary.iter().zip(&p.gt) {
            counts += metrics::count(b, g)?;
        }
        let scene = Path::new(name).file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push(SceneResult::new(scene, scene_category(name), counts));
    }
    let summary = aggregate(&rows);
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("scenes.csv"), scenes_csv(&rows))?;
    std::fs::write(args.out.join("summary.csv"), summary_csv(&summary))?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(args.out.join("summary.json"), json)?;
    if args.pr_curve || args.sweep {
        let (mut preds, mut gts) = (Vec::new(), Vec::new());
        for name in &scenes {
            let p = pair_scene(cfg, &args.predictions, name, true)?;
            preds.extend(p.prob);
            gts.extend(p.gt);
        }
        if args.pr_curve {
            let curve = pr_curve(&preds, &gts, &default_grid())?;
            let mut s = String::from("threshold,precision,recall\n");
            for pt in &curve.points {
                let _ = writeln!(s, "{:.1},{},{}", pt.threshold, fmt_opt(pt.precision), fmt_opt(pt.recall));
            }
            let _ = writeln!(s, "# auc,{}", fmt_opt(curve.auc));
            std::fs::write(args.out.join("pr_curve.csv"), s)?;
        }
        if args.sweep {
            let r = sweep_threshold(&preds, &gts, &default_grid())?;
            std::fs::write(args.out.join("sweep.csv"), sweep_csv(&r))?;
        }
    }
    Ok(summary)
}

pub fn sweep_csv(r: &SweepResult) -> String {
    let mut s = String::from("threshold,f_measure\n");
    for row in &r.table {
        let _ = writeln!(s, "{:.1},{}", row.threshold, fmt_opt(row.f_measure));
    }
    s
}

/// Global threshold sweep over probability masks (`prob%06d.png`).
pub fn cmd_sweep(cfg: &RunConfig, predictions: &Path, scenes: &[String], out: &Path) -> CliResult<SweepResult> {
    let scenes = eval_scenes(cfg, scenes)?;
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for name in &scenes {
        let p = pair_scene(cfg, predictions, name, true)?;
        preds.extend(p.prob);
        gts.extend(p.gt);
    }
    let r = sweep_threshold(&preds, &gts, &default_grid())?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, sweep_csv(&r))?;
    Ok(r)
}

/// Align every sliding block of a scene. Writes `input_aligned/` and
/// `validity_aligned/` (one image per block frame, `t%06d_k%d.png`) and,
/// optionally, `homographies.txt` with `t k h00 .. h22` per line.
pub fn cmd_align(cfg: &RunConfig, scene_dir: &Path, out: &Path, dump_homographies: bool) -> CliResult<usize> {
    let scene = load_scene_at(cfg, scene_dir)?;
    let blocks = make_sliding_blocks(&scene, cfg.model.n)?;
    let frames_dir = out.join("input_aligned");
    let valid_dir = out.join("validity_aligned");
    std::fs::create_dir_all(&frames_dir)?;
    std::fs::create_dir_all(&valid_dir)?;
    let mut text = String::new();
    for b in &blocks {
        let a = align_block(b, &cfg.alignment.params);
        let t = scene.first_index + b.target_index;
        for k in 0..a.n {
            let f = &a.frames[k];
            save_frame(&frames_dir.join(format!("t{t:06}_k{k}.png")), f)?;
            let v: Vec<u8> = a.validity[k].iter().map(|&ok| if ok { 255 } else { 0 }).collect();
            save_gray(&valid_dir.join(format!("t{t:06}_k{k}.png")), f.height(), f.width(), &v)?;
            let _ = writeln!(text, "{t} {k} {}", a.homographies[k].to_line());
        }
    }
    if dump_homographies {
        std::fs::write(out.join("homographies.txt"), text)?;
    }
    Ok(blocks.len())
}

pub fn cmd_report_params(cfg: &RunConfig) -> CliResult<String> {
    Ok(Graph::build(&cfg.model)?.parameter_report().to_csv())
}

pub fn cmd_report_rf(cfg: &RunConfig) -> CliResult<String> {
    let g = Graph::build(&cfg.model)?;
    Ok(g.receptive_field_report().to_csv(&g))
}

pub fn cmd_report_dims(cfg: &RunConfig) -> CliResult<String> {
    let g = Graph::build(&cfg.model)?;
    Ok(mosnet::model::graph::dims_csv(&g.dims_report()))
}

/// Write `count` scenes under `<root>/<category>/<name><i>` in the CDNet
/// layout, with seeds `base.seed + i`. Each scene also gets `camera.txt`
/// holding the per-frame camera offsets. Returns the scene names relative
/// to `root`.
pub fn cmd_make_synthetic(base: &SyntheticConfig, root: &Path, count: usize) -> CliResult<Vec<String>> {
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let cfg = SyntheticConfig {
            name: format!("{}{i}", base.name),
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let s = generate_synthetic_scene(&cfg)?;
        let rel = format!("{}/{}", cfg.category, cfg.name);
        let dir = root.join(&rel);
        write_scene(&s.scene, &dir)?;
        let mut cam = String::from("frame dx dy\n");
        for (t, (x, y)) in s.camera_offsets.iter().enumerate() {
            let _ = writeln!(cam, "{} {x} {y}", s.scene.first_index + t);
        }
        std::fs::write(dir.join("camera.txt"), cam)?;
        names.push(rel);
    }
    Ok(names)
}

/// Convert LASIESTA annotation images to gray label masks
/// (0 static, 255 motion, 170 ignore). Returns the number converted.
pub fn cmd_relabel_lasiesta(input: &Path, out: &Path) -> CliResult<usize> {
    let codec = RawAnnotationCodec::lasiesta();
    std::fs::create_dir_all(out)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|x| matches!(x.to_string_lossy().to_lowercase().as_str(), "png" | "bmp"))
        })
        .collect();
    files.sort();
    for f in &files {
        let img = image_rgb(f)?;
        let raw = RawAnnotationMask::from_rgb(img.0, img.1, &img.2)?;
        let mask = relabel_lasiesta(&raw, &codec).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        let name = f.with_extension("png");
        let name = name.file_name().expect("file has a name");
        save_gray(&out.join(name), mask.height(), mask.width(), &mask.to_gray())?;
    }
    Ok(files.len())
}

fn image_rgb(path: &Path) -> CliResult<(usize, usize, Vec<u8>)> {
    let f = mosnet::datasets::io::load_frame(path)?;
    Ok((f.height(), f.width(), f.to_rgb8()))
}
