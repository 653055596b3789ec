use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use osscl::checkpoint::Checkpoint;
use osscl::config::{PathsConfig, RunConfig, EFFECTIVE_CONFIG_FILE};
use osscl::corpus::{scan_dataset, synth_generate, DatasetManifest, MachineKey, SynthConfig};
use osscl::eval::{evaluate, write_eval_outputs, EvalOptions, EvalReport, Scorer};
use osscl::training::{train_with_progress, EpochRecord};
use serde::Serialize;

use crate::{AblateArgs, EvalArgs, RunArgs, ScoreArgs, SynthArgs, TrainArgs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug)]
pub enum CliError {
    /// Bad input: missing path, unknown machine, invalid config. Exit code 2.
    Usage(String),
    Failed(osscl::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Failed(e) => write!(f, "{e}"),
        }
    }
}

impl From<osscl::Error> for CliError {
    fn from(e: osscl::Error) -> Self {
        use osscl::Error::*;
        match e {
            MissingDirectory(_) | UnknownMachine(_) | Config(_) => CliError::Usage(e.to_string()),
            e => CliError::Failed(e),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_failure(context: String, e: std::io::Error) -> CliError {
    CliError::Failed(osscl::Error::Io { context, source: e })
}

fn require_file(what: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn require_dir(what: &str, p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| io_failure(format!("creating {}", p.display()), e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failure(format!("writing {}", path.display()), e))
}

/// Flag, then config, then `OSSCL_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var("OSSCL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("OSSCL_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Loads the config and applies flag overrides. The returned config has its
/// seed and paths filled in and has been validated.
fn resolve_run(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            require_file("config", p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(mode) = args.feature {
        cfg.feature_mode = mode;
    }
    if let Some(n) = args.epochs {
        cfg.train.epochs = n;
    }
    if let Some(n) = args.batch_size {
        cfg.train.batch_size = n;
    }
    cfg.train.seed = Some(resolve_seed(args.seed, cfg.train.seed)?);

    let data_root = args.data_root.clone().or(cfg.paths.data_root.take()).ok_or_else(|| {
        CliError::Usage("no corpus given: pass --data-root or set paths.data_root".into())
    })?;
    require_dir("data root", &data_root)?;
    let out = args
        .out
        .clone()
        .or(cfg.paths.out.take())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set paths.out".into()))?;
    cfg.paths = PathsConfig {
        data_root: Some(data_root),
        out: Some(out),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn paths(cfg: &RunConfig) -> (&Path, &Path) {
    (cfg.paths.data_root.as_deref().unwrap(), cfg.paths.out.as_deref().unwrap())
}

fn print_epoch(total: usize) -> impl FnMut(&EpochRecord) {
    move |r| {
        eprintln!(
            "epoch {:>4}/{total}  loss {:.4}  supcon {:.4}  namix {:.4}  lr {:.3e}  {:.1}s",
            r.epoch, r.loss_total, r.loss_supcon, r.loss_namix, r.lr, r.wall_time
        )
    }
}

fn train_run(cfg: &RunConfig, manifest: &DatasetManifest, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    cfg.save(&out.join(EFFECTIVE_CONFIG_FILE))?;
    let model_cfg = cfg.model_config(manifest.num_classes());
    Ok(train_with_progress(
        manifest,
        &model_cfg,
        &cfg.contrastive,
        &cfg.train,
        out,
        print_epoch(cfg.train.epochs),
    )?)
}

fn check_finite(report: &EvalReport) -> Result<()> {
    let a = report.summary();
    let all = report
        .per_id
        .iter()
        .flat_map(|m| [m.auc, m.pauc])
        .chain([a.auc, a.pauc, a.mauc]);
    for x in all {
        if !x.is_finite() {
            return Err(CliError::Failed(osscl::Error::InvalidArgument("report contains non-finite metrics".into())));
        }
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_run(&args.run)?;
    let (root, out) = paths(&cfg);
    let manifest = scan_dataset(root)?;
    let ckpt = train_run(&cfg, &manifest, out)?;
    println!("{}", ckpt.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    require_file("checkpoint", &args.checkpoint)?;
    require_dir("data root", &args.data_root)?;
    let opts = EvalOptions {
        weights: args.weights,
        p: args.p,
        summary_over_ids: args.summary_over_ids,
    };
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = RunConfig::from_checkpoint(&ckpt);
    cfg.eval = opts;
    cfg.paths = PathsConfig {
        data_root: Some(args.data_root.clone()),
        out: Some(args.out.clone()),
    };
    cfg.validate()?;

    let manifest = scan_dataset(&args.data_root)?;
    create_dir(&args.out)?;
    write_json(&EvalRun { checkpoint: &args.checkpoint, config: &cfg }, &args.out.join(EFFECTIVE_CONFIG_FILE))?;
    let (scored, report) = evaluate(&ckpt, &manifest, &opts)?;
    check_finite(&report)?;
    write_eval_outputs(&scored, &report, &args.out)?;
    print!("{}", report.summary_table());
    Ok(())
}

#[derive(Serialize)]
struct EvalRun<'a> {
    checkpoint: &'a Path,
    #[serde(flatten)]
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct ScoreRun<'a> {
    checkpoint: &'a Path,
    id: &'a MachineKey,
    wav: &'a [PathBuf],
    #[serde(flatten)]
    config: &'a RunConfig,
}

pub fn score(args: ScoreArgs) -> Result<()> {
    require_file("checkpoint", &args.checkpoint)?;
    for w in &args.wav {
        require_file("wav", w)?;
    }
    let key: MachineKey = args.id.parse().map_err(|e: osscl::Error| CliError::Usage(e.to_string()))?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if ckpt.class_map.get(&key).is_none() {
        let known: Vec<String> = ckpt.class_map.keys().iter().map(ToString::to_string).collect();
        return Err(CliError::Usage(format!(
            "unknown machine {key}; the checkpoint knows {}",
            known.join(", ")
        )));
    }
    if let Some(out) = &args.out {
        let mut cfg = RunConfig::from_checkpoint(&ckpt);
        cfg.eval.weights = args.weights;
        cfg.paths.out = Some(out.clone());
        create_dir(out)?;
        let run = ScoreRun {
            checkpoint: &args.checkpoint,
            id: &key,
            wav: &args.wav,
            config: &cfg,
        };
        write_json(&run, &out.join(EFFECTIVE_CONFIG_FILE))?;
    }

    let scorer = Scorer::new(&ckpt, args.weights)?;
    for w in &args.wav {
        let s = scorer.score_file(w, &key)?;
        if !s.is_finite() {
            return Err(CliError::Failed(osscl::Error::InvalidArgument(format!("non-finite score for {}", w.display()))));
        }
        println!("{s}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthRun<'a> {
    out: &'a Path,
    ids: usize,
    clips_per_id: usize,
    test_clips_per_id: usize,
    clip_samples: usize,
    seed: u64,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, None)?;
    let mut cfg = SynthConfig::new(args.ids, args.clips_per_id, seed);
    if let Some(n) = args.test_clips_per_id {
        cfg.test_clips_per_id = n;
    }
    cfg.clip_samples = args.clip_samples;
    let manifest = synth_generate(&cfg, &args.out).map_err(|e| match e {
        osscl::Error::InvalidArgument(msg) => CliError::Usage(msg),
        e => e.into(),
    })?;
    manifest.save_json(&args.out.join(MANIFEST_FILE))?;
    let run = SynthRun {
        out: &args.out,
        ids: cfg.n_ids,
        clips_per_id: cfg.train_clips_per_id,
        test_clips_per_id: cfg.test_clips_per_id,
        clip_samples: cfg.clip_samples,
        seed,
    };
    write_json(&run, &args.out.join(EFFECTIVE_CONFIG_FILE))?;
    eprintln!("wrote {} clips for {} machines to {}", manifest.clips.len(), manifest.num_classes(), args.out.display());
    Ok(())
}

fn reduction_label(r: Option<usize>) -> String {
    r.map_or_else(|| "none".to_string(), |r| r.to_string())
}

#[derive(Serialize)]
struct AblationRun<'a> {
    reductions: Vec<String>,
    #[serde(flatten)]
    config: &'a RunConfig,
}

pub fn ablate_fph(args: AblateArgs) -> Result<()> {
    let base = resolve_run(&args.run)?;
    let dim = base.backbone.embedding_dim;
    if args.reductions.is_empty() {
        return Err(CliError::Usage("no reductions given".into()));
    }
    if let Some(r) = args.reductions.iter().flatten().find(|&&r| r > dim) {
        return Err(CliError::Usage(format!("reduction {r} exceeds the embedding dimension {dim}")));
    }
    let (root, out) = paths(&base);
    let labels: Vec<String> = args.reductions.iter().map(|&r| reduction_label(r)).collect();
    create_dir(out)?;
    write_json(
        &AblationRun {
            reductions: labels.clone(),
            config: &base,
        },
        &out.join(EFFECTIVE_CONFIG_FILE),
    )?;
    let manifest = scan_dataset(root)?;

    let mut reports = Vec::new();
    for (&r, label) in args.reductions.iter().zip(&labels) {
        eprintln!("reduction {label}");
        let mut cfg = base.clone();
        cfg.fph.reduction = r;
        let run_dir = out.join(format!("fph_{label}"));
        cfg.paths.out = Some(run_dir.clone());
        let ckpt_path = train_run(&cfg, &manifest, &run_dir)?;
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let (scored, report) = evaluate(&ckpt, &manifest, &cfg.eval)?;
        check_finite(&report)?;
        write_eval_outputs(&scored, &report, &run_dir)?;
        reports.push(report);
    }

    let table = ablation_table(&labels, &reports);
    let path = out.join(ABLATION_FILE);
    let mut wtr = csv::Writer::from_path(&path).map_err(|e| io_failure(format!("creating {}", path.display()), e.into()))?;
    for row in &table {
        wtr.write_record(row).map_err(|e| io_failure(format!("writing {}", path.display()), e.into()))?;
    }
    wtr.flush().map_err(|e| io_failure(format!("writing {}", path.display()), e))?;
    for row in &table {
        println!("{}", row.iter().map(|c| format!("{c:>12}")).collect::<String>());
    }
    Ok(())
}

/// Rows are machine types plus the average, columns are reductions, cells are
/// AUC in percent.
fn ablation_table(labels: &[String], reports: &[EvalReport]) -> Vec<Vec<String>> {
    let mut rows = vec![std::iter::once("machine_type".to_string()).chain(labels.iter().cloned()).collect::<Vec<_>>()];
    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    for (i, t) in reports[0].per_type.iter().enumerate() {
        let mut row = vec![t.machine_type.clone()];
        row.extend(reports.iter().map(|r| pct(r.per_type[i].auc)));
        rows.push(row);
    }
    let mut avg = vec!["Average".to_string()];
    avg.extend(reports.iter().map(|r| pct(r.summary().auc)));
    rows.push(avg);
    rows
}
