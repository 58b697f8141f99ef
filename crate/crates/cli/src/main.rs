//! Command-line front end for the scene synthesis crate: dataset builders,
//! adversarial training, FID scoring, latent traversals, component dumps,
//! segmentation by inversion, grid sweeps, and run reports.
//!
//! All numeric work runs in f32. Parameter files are precision-tagged, so
//! one binary sticks to one precision; checkpoints written here are not
//! interchangeable with f64 stores.
//!
//! Exit codes: 0 on success, 1 for invalid configuration or data, 2 for
//! runtime failures (I/O, numerical divergence).

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ndarray::{Array1, Array4, Axis};
use rand::Rng;

use kgan::datasets::{
    build_cifar_mm, build_multi_mnist, ingest_clevr, save_rgb_png, DatasetBundle, DigitCorpus,
    ImageCorpus, SceneSpec, Split, Variant,
};
use kgan::evaluation::{
    compute_fid, image_grid, train_embedder, traverse_latent, write_component_dump, ConvEmbedder,
    Embedder, EmbedderConfig, EmbedderTrainConfig, PixelEmbedder, TraversalSpec,
};
use kgan::models::{generate, load_checkpoint, sample_latents, Generator};
use kgan::orchestration::{
    collect_runs, preset_grid, render_report, run_experiment, write_grid_configs,
    ExperimentConfig, GridSpec,
};
use kgan::rng::stream;
use kgan::segmentation::{
    evaluate_segmenter, export_generated_pairs, train_segmenter, train_segmenter_on, LabelMap,
    Segmenter, SegmenterConfig, SegmenterTrainConfig, SegmenterTrainOutcome,
};
use kgan::{Error, Result};

/// Print to stdout, shrugging off a closed pipe (`kgan grid ... | head`)
/// instead of panicking mid-command.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "kgan", version, about = "Scene synthesis from object parts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or ingest labeled scene datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Run one training experiment from a TOML config.
    Train {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the config's output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluation tools: embedder training and FID scoring.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Walk one component's latent and write the frames plus a PNG strip.
    Traverse {
        /// Generator checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Object index in 0..K, or K for the background latent.
        #[arg(long)]
        component: usize,
        /// Latent coordinate to walk; a seeded random unit direction when
        /// omitted.
        #[arg(long)]
        dim: Option<usize>,
        /// Frame count, spaced evenly over [-1, 1].
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Seed for the base latents (and the direction when --dim is
        /// omitted).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspection dumps from a checkpoint.
    #[command(subcommand)]
    Dump(DumpCmd),
    /// Segmentation by inversion: extract labels, train, evaluate.
    #[command(subcommand)]
    Segment(SegmentCmd),
    /// Expand a hyperparameter grid into per-run configs.
    Grid {
        /// Base experiment config; each cell rewrites some of its fields.
        #[arg(long)]
        base: PathBuf,
        /// Built-in sweep: baseline or structured.
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        /// Grid spec TOML with its own seeds and axes.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Seeds for a preset sweep.
        #[arg(long, num_args = 1.., conflicts_with = "spec", default_values_t = [0u64])]
        seeds: Vec<u64>,
        /// Directory for the generated configs.
        #[arg(long)]
        out: PathBuf,
        /// Launch every run after writing the configs.
        #[arg(long)]
        run: bool,
        /// Concurrent runs when launching.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Summarize finished runs under a directory as a markdown table.
    Report {
        /// Directory whose subdirectories are runs.
        #[arg(long)]
        root: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Render a multi-digit scene dataset.
    Build {
        /// independent_mm, triplet_mm, rgb_occluded_mm, or cifar10_mm.
        #[arg(long)]
        variant: String,
        /// Scenes to render.
        #[arg(long)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// IDX digit images (ubyte); synthetic digits when omitted.
        #[arg(long, requires = "mnist_labels")]
        mnist_images: Option<PathBuf>,
        /// IDX digit labels.
        #[arg(long, requires = "mnist_images")]
        mnist_labels: Option<PathBuf>,
        /// Synthetic digits per class when no IDX files are given.
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// CIFAR-10 binary batches for cifar10_mm backdrops.
        #[arg(long)]
        cifar_bin: Vec<PathBuf>,
        /// Synthetic backdrop count when no CIFAR binaries are given.
        #[arg(long, default_value_t = 1000)]
        backdrops: usize,
    },
    /// Downsample and center-crop a directory of rendered photographs.
    IngestClevr {
        /// Directory of source images.
        #[arg(long)]
        src: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Train the classifier embedder on a dataset's object crops.
    Embedder {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Embedder output file.
        #[arg(long)]
        out: PathBuf,
        /// Crop side in pixels; must be divisible by 8.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fréchet distance between generator samples and the hold-out split.
    Fid {
        /// Generator checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Trained embedder file; coarse pixel features when omitted.
        #[arg(long)]
        embedder: Option<PathBuf>,
        /// Generated sample count.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DumpCmd {
    /// Write sampled scenes layer by layer: composite, RGBA components,
    /// background.
    Components {
        /// Generator checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Scenes to sample.
        #[arg(long, default_value_t = 1)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; one subdirectory per scene.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SegmentCmd {
    /// Sample a generator and write its scenes as image/label pairs in the
    /// dataset layout.
    Extract {
        /// Generator checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Scenes to write.
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmentation network on generated scenes (--ckpt) or on a
    /// labeled dataset (--data).
    Train {
        /// Generator checkpoint to sample training scenes from.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        ckpt: Option<PathBuf>,
        /// Labeled dataset to train on instead.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Object channels when training from a dataset.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Segmenter output file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3125)]
        steps: u64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Channels after the first encoder convolution.
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a segmenter against a labeled split, one ARI per scene.
    Eval {
        /// Segmenter file.
        #[arg(long)]
        segmenter: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Report file: per-scene ARI lines plus aggregate mean and std.
        #[arg(long)]
        report: PathBuf,
        /// train, holdout, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Cap on scored scenes.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Data(cmd) => run_data(cmd),
        Command::Train { config, data, out } => run_train(config, data, out),
        Command::Eval(cmd) => run_eval(cmd),
        Command::Traverse { ckpt, component, dim, steps, seed, out } => {
            run_traverse(ckpt, component, dim, steps, seed, out)
        }
        Command::Dump(DumpCmd::Components { ckpt, n, seed, out }) => {
            run_dump(ckpt, n, seed, out)
        }
        Command::Segment(cmd) => run_segment(cmd),
        Command::Grid { base, preset, spec, seeds, out, run, parallel } => {
            run_grid(base, preset, spec, seeds, out, run, parallel)
        }
        Command::Report { root, out } => run_report(root, out),
    }
}

fn load_digits(
    mnist_images: Option<PathBuf>,
    mnist_labels: Option<PathBuf>,
    per_class: usize,
    seed: u64,
) -> Result<DigitCorpus<f32>> {
    match (mnist_images, mnist_labels) {
        (Some(images), Some(labels)) => DigitCorpus::from_idx_files(&images, &labels),
        _ => DigitCorpus::synthetic(per_class, seed),
    }
}

fn run_data(cmd: DataCmd) -> Result<()> {
    match cmd {
        DataCmd::Build {
            variant,
            count,
            seed,
            out,
            mnist_images,
            mnist_labels,
            per_class,
            cifar_bin,
            backdrops,
        } => {
            let variant: Variant = variant.parse()?;
            let spec = SceneSpec::new(variant, seed);
            let bundle = match variant {
                Variant::Clevr => {
                    return Err(Error::config(
                        "variant clevr is ingested from rendered files; use data ingest-clevr",
                    ));
                }
                Variant::Cifar10Mm => {
                    let digits = load_digits(mnist_images, mnist_labels, per_class, seed)?;
                    let photos = if cifar_bin.is_empty() {
                        ImageCorpus::synthetic(backdrops, seed)?
                    } else {
                        ImageCorpus::from_cifar_bins(&cifar_bin)?
                    };
                    build_cifar_mm(&spec, count, &digits, &photos, &out)?
                }
                _ => {
                    let digits = load_digits(mnist_images, mnist_labels, per_class, seed)?;
                    build_multi_mnist(&spec, count, &digits, &out)?
                }
            };
            say!(
                "built {} scenes at {} ({} train / {} holdout / {} test)",
                count,
                out.display(),
                bundle.count_of(Split::Train),
                bundle.count_of(Split::Holdout),
                bundle.count_of(Split::Test),
            );
        }
        DataCmd::IngestClevr { src, out } => {
            let report = ingest_clevr(&src, &out)?;
            for (path, reason) in &report.skipped {
                eprintln!("skipped {}: {reason}", path.display());
            }
            say!(
                "ingested {} scenes at {} ({} files skipped)",
                report.bundle.entries.len(),
                out.display(),
                report.skipped.len(),
            );
        }
    }
    Ok(())
}

fn run_train(config: PathBuf, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(d) = data {
        cfg.data = d;
    }
    if let Some(o) = out {
        cfg.output_root = o;
    }
    let summary = run_experiment::<f32>(&cfg)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    say!(
        "run {} ({}) finished at step {}",
        summary.dir.display(),
        summary.tag,
        summary.outcome.last_step,
    );
    if let Some(best) = &summary.outcome.best {
        say!("best fid {:.4} at step {} ({})", best.fid, best.step, best.checkpoint);
    }
    Ok(())
}

fn run_eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Embedder { data, out, size, steps, seed } => {
            let bundle = DatasetBundle::open(&data)?;
            let (crops, classes) = bundle.object_crops::<f32>(Split::Train, size)?;
            let n_classes = classes.iter().copied().max().unwrap_or(0) as usize + 1;
            let cfg = EmbedderConfig { classes: n_classes, ..EmbedderConfig::default() };
            let tcfg = EmbedderTrainConfig { steps, seed, ..EmbedderTrainConfig::default() };
            let emb = train_embedder(&crops, &classes, cfg, &tcfg)?;
            emb.save(&out)?;
            let holdout_acc = bundle
                .object_crops::<f32>(Split::Holdout, size)
                .and_then(|(hc, hl)| emb.accuracy(&hc, &hl));
            match holdout_acc {
                Ok(acc) => say!(
                    "embedder saved to {} (hold-out crop accuracy {:.3})",
                    out.display(),
                    acc
                ),
                Err(_) => say!("embedder saved to {}", out.display()),
            }
        }
        EvalCmd::Fid { ckpt, data, embedder, n, seed } => {
            let (meta, store) = load_checkpoint::<f32>(&ckpt)?;
            let gen = Generator::new(meta.config)?;
            let bundle = DatasetBundle::open(&data)?;
            let holdout = bundle.split_images::<f32>(Split::Holdout)?;
            let emb: Box<dyn Embedder<f32>> = match embedder {
                Some(path) => Box::new(ConvEmbedder::load(&path)?),
                None => Box::new(PixelEmbedder { side: 8 }),
            };
            let outcome = compute_fid(&gen, &store, &holdout, emb.as_ref(), n, seed)?;
            if let Some(w) = &outcome.warning {
                eprintln!("warning: {w}");
            }
            say!(
                "fid {:.4} ({} generated vs {} real)",
                outcome.fid, outcome.n_generated, outcome.n_real,
            );
        }
    }
    Ok(())
}

fn run_traverse(
    ckpt: PathBuf,
    component: usize,
    dim: Option<usize>,
    steps: usize,
    seed: u64,
    out: PathBuf,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    let (meta, store) = load_checkpoint::<f32>(&ckpt)?;
    let gen = Generator::new(meta.config)?;
    let base = sample_latents::<f32>(&gen.cfg, &mut stream(seed, "traverse-base", 0));
    let direction = match dim {
        Some(d) => {
            if d >= gen.cfg.latent_dim {
                return Err(Error::config(format!(
                    "dim {d} is out of range for latent_dim {}",
                    gen.cfg.latent_dim
                )));
            }
            let mut v = Array1::<f32>::zeros(gen.cfg.latent_dim);
            v[d] = 1.0;
            v
        }
        None => {
            let mut rng = stream(seed, "traverse-dir", 0);
            let mut v =
                Array1::<f32>::from_shape_fn(gen.cfg.latent_dim, |_| rng.gen_range(-1.0..1.0));
            let norm = v.dot(&v).sqrt();
            if norm == 0.0 {
                v[0] = 1.0;
            } else {
                v.mapv_inplace(|x| x / norm);
            }
            v
        }
    };
    let increments = if steps == 1 {
        vec![0.0]
    } else {
        (0..steps).map(|i| -1.0 + 2.0 * i as f64 / (steps - 1) as f64).collect()
    };
    let spec = TraversalSpec { component, direction, increments };
    let frames = traverse_latent(&gen, &store, &base, &spec)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let images: Vec<_> = frames.iter().map(|f| f.composite.image.clone()).collect();
    for (i, img) in images.iter().enumerate() {
        save_rgb_png(&out.join(format!("frame-{i:02}.png")), img)?;
    }
    let strip = image_grid(&images, images.len())?;
    save_rgb_png(&out.join("strip.png"), &strip)?;
    say!("wrote {} frames and strip.png to {}", images.len(), out.display());
    Ok(())
}

fn run_dump(ckpt: PathBuf, n: u64, seed: u64, out: PathBuf) -> Result<()> {
    let (meta, store) = load_checkpoint::<f32>(&ckpt)?;
    let gen = Generator::new(meta.config)?;
    for i in 0..n {
        let latents = sample_latents::<f32>(&gen.cfg, &mut stream(seed, "dump", i));
        let output = generate(&gen, &store, &latents)?;
        write_component_dump(&out.join(format!("sample-{i:03}")), &output)?;
    }
    say!("wrote {n} component dumps to {}", out.display());
    Ok(())
}

fn run_segment(cmd: SegmentCmd) -> Result<()> {
    match cmd {
        SegmentCmd::Extract { ckpt, n, seed, out } => {
            let (meta, store) = load_checkpoint::<f32>(&ckpt)?;
            let gen = Generator::new(meta.config)?;
            export_generated_pairs(&gen, &store, n, seed, &out)?;
            say!("wrote {n} image/label pairs to {}", out.display());
        }
        SegmentCmd::Train { ckpt, data, k, out, steps, batch, channels, seed } => {
            let tcfg = SegmenterTrainConfig {
                steps,
                batch,
                channels,
                seed,
                ..SegmenterTrainConfig::default()
            };
            let outcome: SegmenterTrainOutcome<f32> = match (ckpt, data) {
                (Some(ckpt), None) => {
                    let (meta, store) = load_checkpoint::<f32>(&ckpt)?;
                    let gen = Generator::new(meta.config)?;
                    train_segmenter(&gen, &store, &tcfg)?
                }
                (None, Some(data)) => {
                    let bundle = DatasetBundle::open(&data)?;
                    let size = bundle.image_size();
                    let cfg = SegmenterConfig { k, channels: tcfg.channels, image_size: size };
                    let batch = tcfg.batch;
                    let seed = tcfg.seed;
                    train_segmenter_on(cfg, &tcfg, move |step| {
                        let scenes = bundle.sample_batch::<f32>(
                            Split::Train,
                            batch,
                            &mut stream(seed, "seg-real", step),
                        )?;
                        let mut images = Array4::<f32>::zeros((batch, 3, size, size));
                        let mut labels = Vec::with_capacity(batch);
                        for (i, scene) in scenes.iter().enumerate() {
                            images.index_axis_mut(Axis(0), i).assign(&scene.image_chw());
                            labels.push(LabelMap {
                                labels: scene.labels.clone(),
                                ignore: scene.overlap.clone(),
                            });
                        }
                        Ok((images, labels))
                    })?
                }
                _ => unreachable!("clap enforces exactly one of --ckpt/--data"),
            };
            outcome.segmenter.save(&outcome.store, &out)?;
            match outcome.losses.last() {
                Some(loss) => say!(
                    "segmenter saved to {} (final matched loss {:.4}, {} skipped samples)",
                    out.display(),
                    loss,
                    outcome.skipped_samples,
                ),
                None => say!(
                    "segmenter saved to {} (no scorable samples, {} skipped)",
                    out.display(),
                    outcome.skipped_samples,
                ),
            }
        }
        SegmentCmd::Eval { segmenter, data, report, split, limit } => {
            let (seg, store) = Segmenter::load::<f32>(&segmenter)?;
            let bundle = DatasetBundle::open(&data)?;
            let split: Split = split.parse()?;
            let summary = evaluate_segmenter(&seg, &store, &bundle, split, limit)?;
            let mut text = String::new();
            for (index, ari) in &summary.rows {
                text.push_str(&format!("{index:07} {ari:.6}\n"));
            }
            text.push_str(&format!("mean {:.6}\n", summary.mean));
            text.push_str(&format!("std {:.6}\n", summary.std));
            if summary.skipped > 0 {
                text.push_str(&format!("skipped {}\n", summary.skipped));
            }
            fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
            say!(
                "ari mean {:.4} std {:.4} over {} scenes ({})",
                summary.mean,
                summary.std,
                summary.rows.len(),
                report.display(),
            );
        }
    }
    Ok(())
}

fn run_grid(
    base: PathBuf,
    preset: Option<String>,
    spec: Option<PathBuf>,
    seeds: Vec<u64>,
    out: PathBuf,
    launch: bool,
    parallel: usize,
) -> Result<()> {
    let base_cfg = ExperimentConfig::load(&base)?;
    let grid = match (preset, spec) {
        (Some(name), None) => preset_grid(name.parse()?, &seeds),
        (None, Some(path)) => GridSpec::load(&path)?,
        _ => unreachable!("clap enforces exactly one of --preset/--spec"),
    };
    let (cells, seed_count, total) = grid.size();
    say!("grid: {cells} cells x {seed_count} seeds = {total} runs");
    let paths = write_grid_configs(&base_cfg, &grid, &out)?;
    say!("wrote {} configs to {}", paths.len(), out.display());
    if !launch {
        return Ok(());
    }

    let exe = std::env::current_exe().map_err(|e| Error::io("kgan", e))?;
    let mut failures = 0usize;
    for chunk in paths.chunks(parallel.max(1)) {
        let mut children = Vec::with_capacity(chunk.len());
        for path in chunk {
            let child = std::process::Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(path)
                .spawn()
                .map_err(|e| Error::io(path, e))?;
            children.push((path, child));
        }
        for (path, mut child) in children {
            let status = child.wait().map_err(|e| Error::io(path.as_path(), e))?;
            if status.success() {
                say!("run ok: {}", path.display());
            } else {
                failures += 1;
                eprintln!("run failed ({status}): {}", path.display());
            }
        }
    }
    if failures > 0 {
        eprintln!("error: {failures} of {} runs failed", paths.len());
        std::process::exit(2);
    }
    Ok(())
}

fn run_report(root: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let records = collect_runs(&root)?;
    if records.is_empty() {
        return Err(Error::data(format!("no runs under {}", root.display())));
    }
    let text = render_report(&records);
    match out {
        Some(path) => {
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            say!("report for {} runs written to {}", records.len(), path.display());
        }
        None => {
            use std::io::Write;
            let _ = write!(std::io::stdout(), "{text}");
        }
    }
    Ok(())
}
