//! Subcommands of the `adf` binary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use adf_core::config::{Checkpoint, CONFIG_FILE, LOSS_FILE, WEIGHTS_FILE};
use adf_core::datapipe::{decode_image, list_images, IMAGE_EXTENSIONS};
use adf_core::evalkit::{CategoryRow, ScoredEntry};
use adf_core::trainer::{score_images, transform_nlls};
use adf_core::{fsutil, grad_cam, load_dataset, render_report, synth_dataset, train, write_heatmap_overlay};
use adf_core::{Error, EvalReport, Label, ReportFormat, Result, RunConfig, ScoredSet, Tensor};
use clap::{Args, Parser, Subcommand};

pub use adf_core::datapipe::synth::CATEGORY as SYNTH_CATEGORY;

#[derive(Debug, Parser)]
#[command(name = "adf", version, about = "Attention-augmented normalizing-flow anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic texture dataset.
    Synth(SynthArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Score images with a trained checkpoint.
    Score(ScoreArgs),
    /// Compute AUROC and thresholds and render a report.
    Eval(EvalArgs),
    /// Write a Grad-CAM overlay for one image.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test_good: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test_defect: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint directory; falls back to `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file, or a directory searched recursively.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the checkpoint's `n_eval_transforms`.
    #[arg(long)]
    pub n_eval_transforms: Option<usize>,
    /// Print every per-transform nll to stderr.
    #[arg(long)]
    pub debug: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV with `id,score` and optional `label`, `category`, `variant` columns.
    #[arg(long, required = true)]
    pub scores: Vec<PathBuf>,
    /// CSV with `id,label` and an optional `category` column.
    #[arg(long, conflicts_with = "dataset")]
    pub labels: Option<PathBuf>,
    /// Dataset root; labels come from the test folders of `--category`.
    #[arg(long, requires = "category")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub category: Option<String>,
    /// Variant name for score files without a `variant` column.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value = "markdown")]
    pub format: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Target stage, e.g. `stage5`; defaults to the last stage.
    #[arg(long)]
    pub stage: Option<String>,
    /// Output directory for `{id}.{stage}.ppm`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 2,
        Error::Io { .. } => 3,
        _ => 1,
    }
}

/// Sizes the global rayon pool from `ADF_THREADS` when set.
pub fn init_threads(var: Option<&str>) -> Result<()> {
    let Some(v) = var else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ADF_THREADS must be a positive integer, got {v:?}")))?;
    // A second initialization (tests calling in-process) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Score(a) => cmd_score(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Explain(a) => cmd_explain(&a, out),
    }
}

fn say(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::Io { path: "<stdout>".into(), source: e })
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let layout = synth_dataset(&a.out, a.n_train, a.n_test_good, a.n_test_defect, a.seed)?;
    let mut per_folder: BTreeMap<String, usize> = BTreeMap::new();
    for p in &layout.test_anomalous {
        *per_folder.entry(p.folder.clone()).or_default() += 1;
    }
    let (n_train, n_good, _) = layout.counts();
    say(out, &format!("{}/train/good {n_train}", layout.category))?;
    say(out, &format!("{}/test/good {n_good}", layout.category))?;
    for (folder, n) in per_folder {
        say(out, &format!("{}/test/{folder} {n}", layout.category))?;
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = RunConfig::load(&a.config)?;
    let dir = a
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("output_dir: not set and no --out given".into()))?;
    let root = config
        .dataset_root
        .clone()
        .ok_or_else(|| Error::Config("dataset_root: required for training".into()))?;
    let category = config.category.clone().unwrap_or_else(|| SYNTH_CATEGORY.to_string());
    let layout = load_dataset(&root, &category)?;
    let images: Vec<Tensor> = layout.load_train()?.into_iter().map(|s| s.image).collect();
    let (mut backbone, mut flow) = config.build()?;
    let mut lines = Vec::new();
    let report = train(&mut backbone, &mut flow, &images, &config.train_config(), |s| {
        lines.push(format!("epoch {} mean_nll {:.6}", s.epoch + 1, s.mean_nll));
    });
    for l in &lines {
        say(out, l)?;
    }
    let report = report?;
    let ckpt = Checkpoint { config, backbone, flow, epoch_losses: report.epoch_losses };
    ckpt.save(&dir)?;
    say(out, &format!("wrote {} {} {}", WEIGHTS_FILE, CONFIG_FILE, LOSS_FILE))
}

/// Image files under `path` with ids: the file stem for a single file, the
/// extension-less relative path (joined by `/`) for a directory. Sorted by id.
pub fn collect_images(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.is_file() {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(id, path.to_path_buf())]);
    }
    if !path.is_dir() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        });
    }
    let mut found = Vec::new();
    walk(path, path, &mut found)?;
    found.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    if found.is_empty() {
        return Err(Error::Input(format!(
            "no {} images under {}",
            IMAGE_EXTENSIONS.join("/"),
            path.display()
        )));
    }
    Ok(found)
}

fn walk(root: &Path, dir: &Path, found: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for p in list_images(dir)? {
        let rel = p.strip_prefix(root).expect("under root").with_extension("");
        let id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        found.push((id, p));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        walk(root, &d, found)?;
    }
    Ok(())
}

pub fn render_scores(rows: &[(String, f64)]) -> String {
    let mut s = String::from("id,score\n");
    for (id, score) in rows {
        s.push_str(&format!("{id},{score}\n"));
    }
    s
}

pub fn cmd_score(a: &ScoreArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut scoring = ckpt.config.scoring_config();
    if let Some(n) = a.n_eval_transforms {
        scoring.n_eval_transforms = n;
    }
    scoring.validate()?;
    let files = collect_images(&a.images)?;
    let images: Vec<Tensor> = files
        .iter()
        .map(|(_, p)| decode_image(p).map(|s| s.image))
        .collect::<Result<_>>()?;
    if a.debug {
        let degrees = scoring.rotations();
        for ((id, _), img) in files.iter().zip(&images) {
            let nlls = transform_nlls(&ckpt.backbone, &ckpt.flow, img, &scoring)?;
            for (deg, nll) in degrees.iter().zip(nlls) {
                say(err, &format!("nll {id} rot {deg} {nll}"))?;
            }
        }
    }
    let scores = score_images(&ckpt.backbone, &ckpt.flow, &images, &scoring)?;
    let rows: Vec<(String, f64)> = files.into_iter().map(|(id, _)| id).zip(scores).collect();
    fsutil::write_atomic(&a.out, render_scores(&rows).as_bytes())?;
    say(out, &format!("scored {} images", rows.len()))
}

/// A parsed CSV with a header row. Fields are split on commas; quoting is
/// not supported.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    path: PathBuf,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Input(format!("{}: empty file", path.display())))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(|s| s.trim().to_string()).collect()).collect();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != header.len() {
                return Err(Error::Input(format!(
                    "{}: line {} has {} fields, header has {}",
                    path.display(),
                    i + 2,
                    r.len(),
                    header.len()
                )));
            }
        }
        Ok(Table { header, rows, path: path.to_path_buf() })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.column(name)
            .ok_or_else(|| Error::Input(format!("{}: missing column {name:?}", self.path.display())))
    }
}

/// Entries grouped by key, keys in first-seen order.
struct Ordered<T>(Vec<(String, T)>);

impl<T> Default for Ordered<T> {
    fn default() -> Self {
        Ordered(Vec::new())
    }
}

impl<T: Default> Ordered<T> {
    fn entry(&mut self, key: &str) -> &mut T {
        let pos = match self.0.iter().position(|(k, _)| k == key) {
            Some(p) => p,
            None => {
                self.0.push((key.to_string(), T::default()));
                self.0.len() - 1
            }
        };
        &mut self.0[pos].1
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let format: ReportFormat = a.format.parse().map_err(|_| {
        Error::Config(format!("--format: expected csv or markdown, got {:?}", a.format))
    })?;
    let default_category = a.category.clone().unwrap_or_else(|| "all".to_string());
    // (category, id) -> label
    let mut labels: BTreeMap<(String, String), Label> = BTreeMap::new();
    if let Some(root) = &a.dataset {
        let layout = load_dataset(root, &default_category)?;
        for p in layout.test_paths() {
            labels.insert((layout.category.clone(), p.id()), p.label());
        }
    } else if let Some(path) = &a.labels {
        let t = Table::read(path)?;
        let (id, label) = (t.require("id")?, t.require("label")?);
        let cat = t.column("category");
        for r in &t.rows {
            let c = cat.map_or(default_category.clone(), |i| r[i].clone());
            labels.insert((c, r[id].clone()), r[label].parse()?);
        }
    }

    // variant -> category -> entries
    let mut grouped: Ordered<Ordered<Vec<ScoredEntry>>> = Ordered::default();
    for path in &a.scores {
        let t = Table::read(path)?;
        let (id, score) = (t.require("id")?, t.require("score")?);
        let (label_col, cat_col, var_col) = (t.column("label"), t.column("category"), t.column("variant"));
        let file_variant = a.variant.clone().unwrap_or_else(|| {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        });
        for r in &t.rows {
            let category = cat_col.map_or(default_category.clone(), |i| r[i].clone());
            let variant = var_col.map_or(file_variant.clone(), |i| r[i].clone());
            let value: f64 = r[score]
                .parse()
                .map_err(|_| Error::Input(format!("{}: bad score {:?} for {}", t.path.display(), r[score], r[id])))?;
            let label = match label_col {
                Some(i) => r[i].parse()?,
                None => *labels.get(&(category.clone(), r[id].clone())).ok_or_else(|| {
                    Error::Input(format!("no label for id {:?} in category {category:?}", r[id]))
                })?,
            };
            grouped.entry(&variant).entry(&category).push(ScoredEntry { id: r[id].clone(), score: value, label });
        }
    }
    if grouped.0.is_empty() {
        return Err(Error::Input("score files contain no rows".into()));
    }

    let mut reports = Vec::new();
    for (variant, cats) in grouped.0 {
        let rows = cats
            .0
            .into_iter()
            .map(|(cat, entries)| CategoryRow::evaluate(&cat, &ScoredSet { entries }))
            .collect::<Result<Vec<_>>>()?;
        reports.push(EvalReport { variant, rows });
    }
    let text = render_report(&reports, format)?;
    match &a.out {
        Some(p) => fsutil::write_atomic(p, text.as_bytes()),
        None => out.write_all(text.as_bytes()).map_err(|e| Error::Io { path: "<stdout>".into(), source: e }),
    }
}

pub fn cmd_explain(a: &ExplainArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let names = ckpt.backbone.spec().stage_names();
    let stage = a.stage.clone().unwrap_or_else(|| names.last().cloned().expect("at least one stage"));
    // Validate before decoding so a bad stage is reported first.
    ckpt.backbone.spec().stage_index(&stage)?;
    let sample = decode_image(&a.image)?;
    let mut heatmap = grad_cam(&ckpt.backbone, &ckpt.flow, &sample.image, &stage, &ckpt.config.scoring_config())?;
    heatmap.input_id = sample.id;
    fsutil::create_dir_all(&a.out)?;
    let path = a.out.join(heatmap.file_name());
    write_heatmap_overlay(&sample.image, &heatmap, &path)?;
    say(out, &format!("wrote {}", path.display()))
}
