//! Experiment configs, grid enumeration, run execution, best-checkpoint
//! selection, and report assembly.
//!
//! A run is a directory holding a copy of its config, a version stamp,
//! checkpoints, a metrics log, and a best-checkpoint marker, so every
//! result is reproducible from the directory alone.

use crate::composition::ComposeMode;
use crate::datasets::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::evaluation::{compute_fid, ConvEmbedder, Embedder, PixelEmbedder};
use crate::models::{Discriminator, Generator, ModelConfig};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::training::{train, BestMark, MetricsRow, RealBatches, TrainConfig, TrainOutcome};
use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable that redirects run output, overriding the config's
/// `output_root`. Nothing else is read from the environment.
pub const OUTPUT_ROOT_ENV: &str = "KGAN_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Trained classifier embedder file; when absent a coarse pixel
    /// embedder scores FID instead.
    pub embedder: Option<PathBuf>,
    /// Generated samples per FID evaluation.
    pub fid_samples: usize,
    /// Downsampling side of the fallback pixel embedder.
    pub pixel_embedder_side: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { embedder: None, fid_samples: 1000, pixel_embedder_side: 8 }
    }
}

/// One experiment, serializable to a single TOML file. Unknown keys are
/// rejected so a typo cannot silently fall back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Run directory name under the output root.
    pub name: String,
    /// Dataset bundle directory.
    pub data: PathBuf,
    pub output_root: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config render: {e}")))
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut faults = Vec::new();
        if self.version != CONFIG_VERSION {
            faults.push(format!(
                "config version {} is not the supported version {CONFIG_VERSION}",
                self.version
            ));
        }
        if self.name.is_empty()
            || self.name.contains(std::path::is_separator)
            || self.name == ".."
        {
            faults.push(format!("name '{}' is not a plain directory name", self.name));
        }
        if let Err(e) = self.model.validate() {
            faults.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            faults.push(e.to_string());
        }
        if self.model.spectral_norm != self.train.spectral_norm {
            faults.push("model and train disagree on spectral_norm".to_string());
        }
        if self.eval.fid_samples < 2 {
            faults.push("eval.fid_samples must be at least 2".to_string());
        }
        if self.eval.pixel_embedder_side < 2 {
            faults.push("eval.pixel_embedder_side must be at least 2".to_string());
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(Error::config(faults.join("; ")))
        }
    }

    /// Output root with the environment override applied.
    pub fn output_root(&self) -> PathBuf {
        resolve_output_root(&self.output_root, std::env::var_os(OUTPUT_ROOT_ENV))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }
}

fn resolve_output_root(configured: &Path, env_override: Option<OsString>) -> PathBuf {
    match env_override {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

/// Display tag in the K-count notation: relational stages make it "rel.",
/// otherwise "ind.".
pub fn run_tag(model: &ModelConfig) -> String {
    let kind = if model.relational.is_identity() { "ind." } else { "rel." };
    format!("{}-GAN {kind}", model.k)
}

// ---------------------------------------------------------------------------
// dataset-backed batches

/// Training batches drawn from a dataset bundle's train split. A batch is a
/// pure function of (seed, index), so interrupted runs resume exactly.
pub struct BundleBatches<'a, F: Scalar> {
    bundle: &'a DatasetBundle,
    _marker: std::marker::PhantomData<F>,
}

impl<'a, F: Scalar> BundleBatches<'a, F> {
    pub fn new(bundle: &'a DatasetBundle) -> Result<Self> {
        if bundle.count_of(Split::Train) == 0 {
            return Err(Error::data("bundle has no training scenes"));
        }
        Ok(BundleBatches { bundle, _marker: std::marker::PhantomData })
    }
}

impl<F: Scalar> RealBatches<F> for BundleBatches<'_, F> {
    fn image_size(&self) -> usize {
        self.bundle.image_size()
    }

    fn batch(&self, seed: u64, index: u64, size: usize) -> Result<Array4<F>> {
        let scenes = self.bundle.sample_batch::<F>(
            Split::Train,
            size,
            &mut stream(seed, "real-batch", index),
        )?;
        let s = self.image_size();
        let mut out = Array4::zeros((size, 3, s, s));
        for (i, scene) in scenes.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&scene.image_chw());
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// running one experiment

#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub tag: String,
    pub outcome: TrainOutcome,
    pub warnings: Vec<String>,
}

/// Execute one experiment: check the dataset, train with periodic FID at
/// every checkpoint, and leave a self-describing run directory behind.
/// Rerunning with the same config resumes from the latest checkpoint;
/// rerunning with a different config against the same directory fails.
pub fn run_experiment<F: Scalar>(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let rendered = cfg.to_toml()?;
    let cfg_copy = dir.join("config.toml");
    if cfg_copy.exists() {
        let prev = fs::read_to_string(&cfg_copy).map_err(|e| Error::io(&cfg_copy, e))?;
        if prev != rendered {
            return Err(Error::config(format!(
                "{} already holds a different config; refusing to resume",
                dir.display()
            )));
        }
    } else {
        fs::write(&cfg_copy, &rendered).map_err(|e| Error::io(&cfg_copy, e))?;
    }
    let stamp = dir.join("version.txt");
    fs::write(&stamp, concat!("kgan ", env!("CARGO_PKG_VERSION"), "\n"))
        .map_err(|e| Error::io(&stamp, e))?;

    let bundle = DatasetBundle::open(&cfg.data)?;
    if bundle.image_size() != cfg.model.image_size {
        return Err(Error::shape(format!(
            "bundle images are {0}x{0} but the model generates {1}x{1}",
            bundle.image_size(),
            cfg.model.image_size
        )));
    }
    if !bundle.spec.scene.variant.is_additive() && cfg.model.compose == ComposeMode::SumClip {
        return Err(Error::config(
            "sum composition cannot occlude; this dataset needs an alpha compose mode",
        ));
    }

    let gen = Generator::new(cfg.model.clone())?;
    let disc = Discriminator::new(cfg.model.clone())?;
    let mut store = ParamStore::<F>::new();
    gen.init(&mut store, &mut stream(cfg.train.seed, "init-g", 0));
    disc.init(&mut store, &mut stream(cfg.train.seed, "init-d", 0));

    let holdout = bundle.split_images::<F>(Split::Holdout)?;
    if holdout.shape()[0] < 2 {
        return Err(Error::data("hold-out split is too small to score FID"));
    }
    let embedder: Box<dyn Embedder<F>> = match &cfg.eval.embedder {
        Some(path) => Box::new(ConvEmbedder::load(path)?),
        None => Box::new(PixelEmbedder { side: cfg.eval.pixel_embedder_side }),
    };

    let warnings = RefCell::new(Vec::new());
    let mut hook = |g: &Generator, s: &ParamStore<F>| -> Result<f64> {
        let fid = compute_fid(g, s, &holdout, embedder.as_ref(), cfg.eval.fid_samples, cfg.train.seed)?;
        if let Some(w) = fid.warning {
            let mut ws = warnings.borrow_mut();
            if !ws.contains(&w) {
                ws.push(w);
            }
        }
        Ok(fid.fid)
    };

    let data = BundleBatches::<F>::new(&bundle)?;
    let outcome = train(&gen, &disc, &mut store, &cfg.train, &data, &dir, Some(&mut hook))?;
    Ok(RunSummary {
        dir,
        tag: run_tag(&cfg.model),
        outcome,
        warnings: warnings.into_inner(),
    })
}

// ---------------------------------------------------------------------------
// best-checkpoint selection

/// Checkpoint with the lowest FID; ties go to the earliest step. The result
/// does not depend on row order.
pub fn select_best(rows: &[MetricsRow]) -> Result<BestMark> {
    let mut best: Option<(u64, f64)> = None;
    for row in rows {
        let Some(fid) = row.fid else { continue };
        let better = match best {
            None => true,
            Some((bstep, bfid)) => fid < bfid || (fid == bfid && row.step < bstep),
        };
        if better {
            best = Some((row.step, fid));
        }
    }
    let (step, fid) = best.ok_or_else(|| Error::data("no FID rows to select from"))?;
    Ok(BestMark { step, fid, checkpoint: format!("step-{step:07}.ckpt") })
}

/// Mean and population standard deviation of per-run best FIDs.
pub fn summarize_best(per_run: &[f64]) -> Result<(f64, f64)> {
    if per_run.is_empty() {
        return Err(Error::data("no runs to summarize"));
    }
    let n = per_run.len() as f64;
    let mean = per_run.iter().sum::<f64>() / n;
    let var = per_run.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// grid enumeration

/// One grid axis: each entry of `values` assigns one value per path, so an
/// axis can move several config fields in lockstep (paired betas, the two
/// spectral_norm switches).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub paths: Vec<String>,
    pub values: Vec<Vec<toml::Value>>,
}

impl GridAxis {
    pub fn single(path: &str, values: Vec<toml::Value>) -> Self {
        GridAxis { paths: vec![path.to_string()], values: values.into_iter().map(|v| vec![v]).collect() }
    }

    fn key(&self) -> String {
        self.paths.join("+")
    }

    fn validate(&self) -> Result<()> {
        if self.paths.is_empty() || self.values.is_empty() {
            return Err(Error::config("grid axis needs paths and at least one value"));
        }
        for row in &self.values {
            if row.len() != self.paths.len() {
                return Err(Error::config(format!(
                    "axis {} rows must carry {} values",
                    self.key(),
                    self.paths.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Seeds applied to every cell; empty keeps the base config's seed.
    pub seeds: Vec<u64>,
    pub axis: Vec<GridAxis>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for axis in &self.axis {
            axis.validate()?;
        }
        Ok(())
    }

    /// (cells, seeds per cell, total configs).
    pub fn size(&self) -> (usize, usize, usize) {
        let cells = self.axis.iter().map(|a| a.values.len()).product::<usize>();
        let seeds = self.seeds.len().max(1);
        (cells, seeds, cells * seeds)
    }
}

/// Assign `value` at a dotted path inside a TOML tree; the field must
/// already exist.
fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = doc;
    while let Some(part) = parts.next() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("'{path}' does not name a config field")))?;
        if parts.peek().is_none() {
            if !table.contains_key(part) {
                return Err(Error::config(format!("unknown config field '{path}'")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .get_mut(part)
            .ok_or_else(|| Error::config(format!("unknown config table '{part}' in '{path}'")))?;
    }
    Err(Error::config(format!("empty field path '{path}'")))
}

/// Expand a grid over a base config. Axes apply in lexicographic order of
/// their joined paths, values in listed order, seeds innermost; the output
/// order is a pure function of the spec. Cell `i`, seed `s` is named
/// `{base}-c{i:03}-s{s}`.
pub fn enumerate_grid(base: &ExperimentConfig, spec: &GridSpec) -> Result<Vec<ExperimentConfig>> {
    spec.validate()?;
    let mut axes = spec.axis.clone();
    axes.sort_by_key(|a| a.key());
    let counts: Vec<usize> = axes.iter().map(|a| a.values.len()).collect();
    let (cells, _, total) = spec.size();
    let seeds = if spec.seeds.is_empty() { vec![base.train.seed] } else { spec.seeds.clone() };

    let mut out = Vec::with_capacity(total);
    for cell in 0..cells {
        let mut rem = cell;
        let mut choice = vec![0usize; axes.len()];
        for (i, c) in counts.iter().enumerate().rev() {
            choice[i] = rem % c;
            rem /= c;
        }
        let mut doc = toml::Value::try_from(base)
            .map_err(|e| Error::config(format!("config to toml: {e}")))?;
        for (axis, &pick) in axes.iter().zip(&choice) {
            for (path, value) in axis.paths.iter().zip(&axis.values[pick]) {
                set_path(&mut doc, path, value.clone())?;
            }
        }
        for &seed in &seeds {
            set_path(&mut doc, "train.seed", toml::Value::Integer(seed as i64))?;
            set_path(
                &mut doc,
                "name",
                toml::Value::String(format!("{}-c{cell:03}-s{seed}", base.name)),
            )?;
            let cfg: ExperimentConfig = doc
                .clone()
                .try_into()
                .map_err(|e| Error::config(format!("cell {cell}: {e}")))?;
            cfg.validate()
                .map_err(|e| Error::config(format!("cell {cell}: {e}")))?;
            out.push(cfg);
        }
    }
    Ok(out)
}

/// Write every enumerated config as `{name}.toml` under `dir`.
pub fn write_grid_configs(
    base: &ExperimentConfig,
    spec: &GridSpec,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let configs = enumerate_grid(base, spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let path = dir.join(format!("{}.toml", cfg.name));
        fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridPreset {
    /// Single-generator sweep: loss kind, penalty, penalty weight,
    /// spectral normalization, and Adam beta pairs. 48 cells.
    Baseline,
    /// Compositional sweep: object count, relational stage shape, and
    /// spectral normalization, with the adversarial side fixed. 42 cells.
    Structured,
}

impl std::str::FromStr for GridPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(GridPreset::Baseline),
            "structured" => Ok(GridPreset::Structured),
            other => Err(Error::config(format!("unknown grid preset '{other}'"))),
        }
    }
}

fn beta_axis(pairs: &[(f64, f64)]) -> GridAxis {
    GridAxis {
        paths: vec!["train.adam_beta1".into(), "train.adam_beta2".into()],
        values: pairs
            .iter()
            .map(|&(b1, b2)| vec![toml::Value::Float(b1), toml::Value::Float(b2)])
            .collect(),
    }
}

fn spectral_axis(options: &[bool]) -> GridAxis {
    GridAxis {
        paths: vec!["model.spectral_norm".into(), "train.spectral_norm".into()],
        values: options
            .iter()
            .map(|&b| vec![toml::Value::Boolean(b), toml::Value::Boolean(b)])
            .collect(),
    }
}

fn relational_axis(options: &[(usize, usize, bool, bool)]) -> GridAxis {
    GridAxis {
        paths: vec![
            "model.relational.n_blocks".into(),
            "model.relational.n_heads".into(),
            "model.relational.share_across_blocks".into(),
            "model.relational.include_background".into(),
        ],
        values: options
            .iter()
            .map(|&(blocks, heads, share, bg)| {
                vec![
                    toml::Value::Integer(blocks as i64),
                    toml::Value::Integer(heads as i64),
                    toml::Value::Boolean(share),
                    toml::Value::Boolean(bg),
                ]
            })
            .collect(),
    }
}

/// Built-in grid over a base config. Every swept value is encoded in the
/// spec itself, so the two presets enumerate to exactly 48 and 42 cells
/// regardless of the base.
pub fn preset_grid(preset: GridPreset, seeds: &[u64]) -> GridSpec {
    let s = |v: &str| toml::Value::String(v.to_string());
    match preset {
        GridPreset::Baseline => GridSpec {
            seeds: seeds.to_vec(),
            axis: vec![
                GridAxis::single("model.k", vec![toml::Value::Integer(1)]),
                GridAxis::single("model.use_background", vec![toml::Value::Boolean(false)]),
                relational_axis(&[(0, 1, false, false)]),
                spectral_axis(&[false, true]),
                GridAxis::single("train.loss", vec![s("ns_gan"), s("wgan")]),
                GridAxis::single("train.penalty", vec![s("none"), s("wgan_gp")]),
                GridAxis::single(
                    "train.penalty_lambda",
                    vec![toml::Value::Float(1.0), toml::Value::Float(10.0)],
                ),
                beta_axis(&[(0.5, 0.9), (0.5, 0.999), (0.9, 0.999)]),
            ],
        },
        GridPreset::Structured => GridSpec {
            seeds: seeds.to_vec(),
            axis: vec![
                GridAxis::single(
                    "model.k",
                    vec![
                        toml::Value::Integer(3),
                        toml::Value::Integer(4),
                        toml::Value::Integer(5),
                    ],
                ),
                GridAxis::single("model.compose", vec![s("learned_alpha")]),
                GridAxis::single("model.use_background", vec![toml::Value::Boolean(true)]),
                relational_axis(&[
                    (0, 1, false, false),
                    (1, 1, false, false),
                    (1, 2, false, false),
                    (2, 1, true, false),
                    (2, 2, true, false),
                    (1, 1, false, true),
                    (1, 2, false, true),
                ]),
                spectral_axis(&[false, true]),
                GridAxis::single("train.loss", vec![s("ns_gan")]),
                GridAxis::single("train.penalty", vec![s("wgan_gp")]),
                GridAxis::single("train.penalty_lambda", vec![toml::Value::Float(1.0)]),
                beta_axis(&[(0.9, 0.999)]),
            ],
        },
    }
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub name: String,
    /// Cell identity: the name with its `-s{seed}` suffix stripped.
    pub group: String,
    pub tag: String,
    pub seed: u64,
    pub best: Option<BestMark>,
}

fn group_of(name: &str, seed: u64) -> String {
    match name.rsplit_once("-s") {
        Some((head, tail)) if tail.parse::<u64>() == Ok(seed) => head.to_string(),
        _ => name.to_string(),
    }
}

/// Scan a directory of runs (subdirectories holding `config.toml`).
pub fn collect_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("config.toml").exists())
        .collect();
    dirs.sort();
    for dir in dirs {
        let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
        let metrics_path = dir.join("metrics.jsonl");
        let best = if metrics_path.is_file() {
            select_best(&crate::training::read_metrics(&metrics_path)?).ok()
        } else {
            None
        };
        records.push(RunRecord {
            group: group_of(&cfg.name, cfg.train.seed),
            tag: run_tag(&cfg.model),
            seed: cfg.train.seed,
            name: cfg.name,
            best,
        });
    }
    Ok(records)
}

/// Markdown report: one row per cell with mean and spread of per-seed best
/// FIDs, sorted by mean, cells without any FID at the bottom.
pub fn render_report(records: &[RunRecord]) -> String {
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.group).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (group, runs) in &groups {
        let bests: Vec<f64> = runs.iter().filter_map(|r| r.best.as_ref().map(|b| b.fid)).collect();
        let tag = &runs[0].tag;
        let summary = summarize_best(&bests).ok();
        rows.push((group.to_string(), tag.clone(), runs.len(), bests.len(), summary));
    }
    rows.sort_by(|a, b| match (&a.4, &b.4) {
        (Some(x), Some(y)) => x.0.total_cmp(&y.0).then_with(|| a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    let mut out = String::from("# FID report\n\n| cell | tag | seeds | best FID (mean ± std) |\n|---|---|---|---|\n");
    for (group, tag, total, scored, summary) in rows {
        let fid = match summary {
            Some((mean, std)) => format!("{mean:.4} ± {std:.4} ({scored}/{total} seeds)"),
            None => format!("no FID rows (0/{total} seeds)"),
        };
        out.push_str(&format!("| {group} | {tag} | {total} | {fid} |\n"));
    }
    out
}
