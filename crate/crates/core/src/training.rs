//! Adversarial optimization: the two loss families, the interpolated
//! gradient penalty, and the alternating update loop with checkpointing,
//! metric logging, and exact resume.
//!
//! Losses work in logit space. For score batches `s_r` (real) and `s_f`
//! (fake):
//!
//! * `ns_gan`: `L_D = mean sp(-s_r) + mean sp(s_f)`, `L_G = mean sp(-s_f)`
//!   with the softplus `sp`; the generator term is the non-saturating form.
//! * `wgan`: `L_D = mean s_f - mean s_r`, `L_G = -mean s_f`.
//!
//! The gradient penalty interpolates `xhat = eps*real + (1-eps)*fake` per
//! sample, differentiates the critic at `xhat`, and penalizes
//! `lambda * mean[(||grad||_2 - 1)^2]`. The needed derivative of that
//! penalty with respect to discriminator weights is a second derivative,
//! which the tape supports by emitting gradients as graph nodes.
//!
//! One training step = `disc_steps_per_gen` discriminator updates followed
//! by one generator update. All randomness is drawn from stateless streams
//! keyed by (seed, role, index), so resuming from a checkpoint at step `s`
//! replays exactly the batches a fresh run would see from step `s+1`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{
    load_checkpoint_matching, sample_latent_batch, save_checkpoint, CheckpointMeta, Discriminator,
    Generator,
};
use crate::opt::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::scalar::Scalar;
use indexmap::IndexMap;
use ndarray::{Array1, Array4, ArrayD, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Additive constant inside the penalty's norm square root; keeps the
/// second derivative finite when the critic gradient vanishes while
/// perturbing the norm by less than 1e-7.
pub const GP_NORM_EPS: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    NsGan,
    Wgan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    WganGp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub penalty: PenaltyKind,
    pub penalty_lambda: f64,
    /// Must agree with the discriminator's config.
    pub spectral_norm: bool,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch: usize,
    /// Generator steps; each is preceded by `disc_steps_per_gen`
    /// discriminator updates.
    pub total_steps: u64,
    pub disc_steps_per_gen: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::NsGan,
            penalty: PenaltyKind::None,
            penalty_lambda: 10.0,
            spectral_norm: false,
            adam_lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            batch: 64,
            total_steps: 1_000_000,
            disc_steps_per_gen: 5,
            checkpoint_every: 20_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::config("batch must be at least 2"));
        }
        if self.penalty == PenaltyKind::WganGp
            && self.penalty_lambda != 1.0
            && self.penalty_lambda != 10.0
        {
            return Err(Error::config("penalty_lambda must be 1 or 10 with wgan_gp"));
        }
        if !(self.adam_lr.is_finite() && self.adam_lr > 0.0) {
            return Err(Error::config("adam_lr must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.disc_steps_per_gen == 0 {
            return Err(Error::config("disc_steps_per_gen must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.adam_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}

/// One logged training step. `fid` is present on checkpoint steps when an
/// evaluation hook is installed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub penalty: f64,
    pub fid: Option<f64>,
    pub wall_s: f64,
}

fn softplus_scalar<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Discriminator and generator losses from score batches.
pub fn adversarial_losses<F: Scalar>(
    kind: LossKind,
    scores_real: &Array1<F>,
    scores_fake: &Array1<F>,
) -> Result<(F, F)> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::shape("score batches must be non-empty"));
    }
    if scores_real.len() != scores_fake.len() {
        return Err(Error::shape("score batches must have equal length"));
    }
    let mean = |a: &Array1<F>| a.sum() / F::c(a.len() as f64);
    match kind {
        LossKind::NsGan => {
            let d = mean(&scores_real.mapv(|s| softplus_scalar(-s)))
                + mean(&scores_fake.mapv(softplus_scalar));
            let g = mean(&scores_fake.mapv(|s| softplus_scalar(-s)));
            Ok((d, g))
        }
        LossKind::Wgan => {
            let d = mean(scores_fake) - mean(scores_real);
            let g = -mean(scores_fake);
            Ok((d, g))
        }
    }
}

/// Discriminator loss over score vars `[B]`.
pub fn disc_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    kind: LossKind,
    s_real: Var,
    s_fake: Var,
) -> Var {
    match kind {
        LossKind::NsGan => {
            let nr = g.neg(s_real);
            let a = g.softplus(nr);
            let am = g.mean_all(a);
            let b = g.softplus(s_fake);
            let bm = g.mean_all(b);
            g.add(am, bm)
        }
        LossKind::Wgan => {
            let fm = g.mean_all(s_fake);
            let rm = g.mean_all(s_real);
            g.sub(fm, rm)
        }
    }
}

/// Generator loss over fake score vars `[B]`.
pub fn gen_loss_graph<F: Scalar>(g: &mut Graph<F>, kind: LossKind, s_fake: Var) -> Var {
    match kind {
        LossKind::NsGan => {
            let nf = g.neg(s_fake);
            let a = g.softplus(nf);
            g.mean_all(a)
        }
        LossKind::Wgan => {
            let m = g.mean_all(s_fake);
            g.neg(m)
        }
    }
}

/// Differentiable penalty node `lambda * mean[(||grad D(xhat)||_2 - 1)^2]`
/// with `xhat[b] = eps[b]*real[b] + (1-eps[b])*fake[b]`. The critic
/// gradient is produced by an inner backward pass whose nodes stay on the
/// tape, so the returned var has exact derivatives with respect to critic
/// parameters.
pub fn gradient_penalty_var<F: Scalar>(
    g: &mut Graph<F>,
    score_fn: impl FnOnce(&mut Graph<F>, Var) -> Var,
    real: &ArrayD<F>,
    fake: &ArrayD<F>,
    lambda: f64,
    eps: &Array1<F>,
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::shape("real and fake batches differ in shape"));
    }
    let b = real.shape()[0];
    if b == 0 {
        return Err(Error::shape("gradient penalty needs a non-empty batch"));
    }
    if eps.len() != b {
        return Err(Error::shape("one interpolation coefficient per sample"));
    }
    let mut xv = fake.clone();
    for (i, mut row) in xv.axis_iter_mut(Axis(0)).enumerate() {
        let e = eps[i];
        let r = real.index_axis(Axis(0), i);
        row.zip_mut_with(&r, |f, &rv| *f = e * rv + (F::one() - e) * *f);
    }
    let xhat = g.param(xv);
    let scores = score_fn(g, xhat);
    let total = g.sum_all(scores);
    let grads = g.backward(total);
    let gx = match grads.wrt(xhat) {
        Some(v) => v,
        None => g.constant(ArrayD::zeros(real.raw_dim())),
    };
    if g.val(gx).iter().any(|v| !v.is_finite()) {
        return Err(Error::numerics("gradient penalty: non-finite critic gradient"));
    }
    let ndim = real.ndim();
    let sq = g.square(gx);
    let axes: Vec<usize> = (1..ndim).collect();
    let ssum = g.sum_axes(sq, &axes);
    let flat = g.reshape(ssum, &[b]);
    let shifted = g.add_scalar(flat, GP_NORM_EPS);
    let norm = g.sqrt(shifted);
    let dm1 = g.add_scalar(norm, -1.0);
    let sq2 = g.square(dm1);
    let mean = g.mean_all(sq2);
    Ok(g.mul_scalar(mean, lambda))
}

/// Penalty value with caller-supplied interpolation coefficients.
pub fn gradient_penalty_with_eps<F: Scalar>(
    score_fn: impl FnOnce(&mut Graph<F>, Var) -> Var,
    real: &ArrayD<F>,
    fake: &ArrayD<F>,
    lambda: f64,
    eps: &Array1<F>,
) -> Result<F> {
    let mut g = Graph::new();
    let v = gradient_penalty_var(&mut g, score_fn, real, fake, lambda, eps)?;
    Ok(g.scalar_value(v))
}

/// Penalty value with `eps ~ uniform(0,1)` per sample.
pub fn gradient_penalty<F: Scalar>(
    score_fn: impl FnOnce(&mut Graph<F>, Var) -> Var,
    real: &ArrayD<F>,
    fake: &ArrayD<F>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<F> {
    let b = real.shape().first().copied().unwrap_or(0);
    let dist = Uniform::new(F::zero(), F::one());
    let eps = Array1::from_shape_simple_fn(b, || dist.sample(rng));
    gradient_penalty_with_eps(score_fn, real, fake, lambda, &eps)
}

/// Deterministic source of real image batches `[B,3,S,S]`.
pub trait RealBatches<F: Scalar> {
    fn image_size(&self) -> usize;
    /// Batch for (seed, index); the same arguments must return the same
    /// batch.
    fn batch(&self, seed: u64, index: u64, size: usize) -> Result<Array4<F>>;
}

/// In-memory dataset sampled uniformly with replacement.
pub struct MemoryBatches<F: Scalar> {
    images: Array4<F>,
}

impl<F: Scalar> MemoryBatches<F> {
    pub fn new(images: Array4<F>) -> Result<Self> {
        let (n, c, h, w) = images.dim();
        if n == 0 || c != 3 || h != w {
            return Err(Error::shape("expected a non-empty [N,3,S,S] image tensor"));
        }
        Ok(MemoryBatches { images })
    }
}

impl<F: Scalar> RealBatches<F> for MemoryBatches<F> {
    fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn batch(&self, seed: u64, index: u64, size: usize) -> Result<Array4<F>> {
        let n = self.images.shape()[0];
        let mut rng = stream(seed, "real-batch", index);
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::zeros((size, c, h, w));
        for i in 0..size {
            let pick = rng.gen_range(0..n);
            out.index_axis_mut(Axis(0), i)
                .assign(&self.images.index_axis(Axis(0), pick));
        }
        Ok(out)
    }
}

/// Lowest-FID checkpoint marker, serialized to `best.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestMark {
    pub step: u64,
    pub fid: f64,
    pub checkpoint: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub last_step: u64,
    pub best: Option<BestMark>,
    /// Rows logged by this invocation (a resumed run only logs new rows).
    pub metrics: Vec<MetricsRow>,
}

/// Hook computing FID for the current parameters; invoked on checkpoint
/// steps.
pub type FidHook<'a, F> = &'a mut dyn FnMut(&Generator, &ParamStore<F>) -> Result<f64>;

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:07}.ckpt"))
}

/// Newest `step-*.ckpt` in `dir`, by step number.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(step) = num.parse::<u64>() {
                if best.as_ref().map_or(true, |(s, _)| step > *s) {
                    best = Some((step, entry.path()));
                }
            }
        }
    }
    Ok(best)
}

fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(row).map_err(|e| Error::data(format!("metrics row: {e}")))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Parses every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::data(format!("metrics line: {e}"))))
        .collect()
}

fn trim_metrics(path: &Path, keep_upto: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows = read_metrics(path)?;
    let kept: Vec<&MetricsRow> = rows.iter().filter(|r| r.step <= keep_upto).collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::data(format!("metrics row: {e}")))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn collect_grads<F: Scalar>(
    g: &Graph<F>,
    grads: &crate::graph::Gradients,
    p: &crate::params::BoundParams,
    names: impl Iterator<Item = String>,
) -> IndexMap<String, ArrayD<F>> {
    let mut out = IndexMap::new();
    for name in names {
        if let Some(v) = grads.wrt(p.get(&name)) {
            out.insert(name, g.val(v).clone());
        }
    }
    out
}

fn require_finite_loss<F: Scalar>(value: F, what: &str, step: u64) -> Result<f64> {
    let v = value.to_f64().unwrap_or(f64::NAN);
    if !v.is_finite() {
        return Err(Error::numerics(format!(
            "{what} became non-finite at step {step}; aborting with the last checkpoint retained"
        )));
    }
    Ok(v)
}

/// Runs (or resumes) adversarial training, writing checkpoints to
/// `out/checkpoints/`, metric rows to `out/metrics.jsonl`, and the
/// lowest-FID marker to `out/best.json`.
pub fn train<F: Scalar>(
    gen: &Generator,
    disc: &Discriminator,
    store: &mut ParamStore<F>,
    tcfg: &TrainConfig,
    data: &dyn RealBatches<F>,
    out_dir: &Path,
    mut fid_hook: Option<FidHook<'_, F>>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    gen.cfg.validate()?;
    if disc.cfg.spectral_norm != tcfg.spectral_norm {
        return Err(Error::config(
            "train config and discriminator disagree on spectral_norm",
        ));
    }
    if data.image_size() != gen.cfg.image_size {
        return Err(Error::config(format!(
            "dataset images are {0}x{0} but the model generates {1}x{1}",
            data.image_size(),
            gen.cfg.image_size
        )));
    }

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let best_path = out_dir.join("best.json");

    let adam_cfg = tcfg.adam();
    let resume = latest_checkpoint(&ckpt_dir)?;
    let start = match &resume {
        Some((_, path)) => {
            let (meta, loaded) = load_checkpoint_matching::<F>(path, &gen.cfg)?;
            *store = loaded;
            trim_metrics(&metrics_path, meta.step)?;
            meta.step
        }
        None => {
            Adam::<F>::new(adam_cfg).save_state(store, "opt.d");
            Adam::<F>::new(adam_cfg).save_state(store, "opt.g");
            let meta = CheckpointMeta { config: gen.cfg.clone(), step: 0 };
            save_checkpoint(&checkpoint_path(&ckpt_dir, 0), &meta, store)?;
            0
        }
    };
    let mut adam_d = Adam::<F>::load_state(store, "opt.d", adam_cfg);
    let mut adam_g = Adam::<F>::load_state(store, "opt.g", adam_cfg);

    let mut best: Option<BestMark> = if best_path.exists() {
        let text = fs::read_to_string(&best_path).map_err(|e| Error::io(&best_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::data(format!("best.json: {e}")))?)
    } else {
        None
    };

    let started = Instant::now();
    let mut logged = Vec::new();
    let batch = tcfg.batch;

    for step in start + 1..=tcfg.total_steps {
        let mut d_loss_value = 0.0;
        let mut penalty_value = 0.0;

        for i in 0..tcfg.disc_steps_per_gen {
            let substep = (step - 1) * tcfg.disc_steps_per_gen + i;
            if tcfg.spectral_norm {
                disc.update_spectral_estimates(store);
            }

            // fresh fakes, fully detached from generator parameters
            let (zo, zb) = sample_latent_batch::<F>(
                &gen.cfg,
                &mut stream(tcfg.seed, "latent-d", substep),
                batch,
            );
            let fakes = {
                let mut g = Graph::new();
                let p = store.bind_frozen(&mut g);
                let zov = g.constant(zo.into_dyn());
                let zbv = zb.map(|b| g.constant(b.into_dyn()));
                let fwd = gen.forward(&mut g, &p, zov, zbv, true);
                g.val(fwd.composite).clone()
            };
            let reals = data.batch(tcfg.seed, substep, batch)?.into_dyn();

            let mut g = Graph::new();
            let p = store.bind_where(&mut g, |n| n.starts_with("disc."));
            let xr = g.constant(reals.clone());
            let xf = g.constant(fakes.clone());
            let mut bn_real = Vec::new();
            let mut bn_scratch = Vec::new();
            let s_real = disc.forward(&mut g, &p, store, xr, true, &mut bn_real);
            let s_fake = disc.forward(&mut g, &p, store, xf, true, &mut bn_scratch);
            let mut loss = disc_loss_graph(&mut g, tcfg.loss, s_real, s_fake);
            if tcfg.penalty == PenaltyKind::WganGp {
                let dist = Uniform::new(F::zero(), F::one());
                let mut erng = stream(tcfg.seed, "gp", substep);
                let eps = Array1::from_shape_simple_fn(batch, || dist.sample(&mut erng));
                let pen = gradient_penalty_var(
                    &mut g,
                    |g2, xhat| {
                        let mut scratch = Vec::new();
                        disc.forward(g2, &p, store, xhat, true, &mut scratch)
                    },
                    &reals,
                    &fakes,
                    tcfg.penalty_lambda,
                    &eps,
                )?;
                penalty_value = require_finite_loss(g.scalar_value(pen), "penalty", step)?;
                loss = g.add(loss, pen);
            }
            d_loss_value = require_finite_loss(g.scalar_value(loss), "discriminator loss", step)?;
            let grads = g.backward(loss);
            let gmap = collect_grads(
                &g,
                &grads,
                &p,
                store
                    .trainable_names()
                    .into_iter()
                    .filter(|n| n.starts_with("disc.")),
            );
            adam_d.step(store, &gmap);
            for (bn, stats) in &bn_real {
                bn.update_running(store, stats);
            }
        }

        // generator update against the frozen critic
        let (zo, zb) = sample_latent_batch::<F>(
            &gen.cfg,
            &mut stream(tcfg.seed, "latent-g", step),
            batch,
        );
        let mut g = Graph::new();
        let p = store.bind_where(&mut g, |n| n.starts_with("gen."));
        let zov = g.constant(zo.into_dyn());
        let zbv = zb.map(|b| g.constant(b.into_dyn()));
        let fwd = gen.forward(&mut g, &p, zov, zbv, true);
        let mut scratch = Vec::new();
        let s_fake = disc.forward(&mut g, &p, store, fwd.composite, true, &mut scratch);
        let loss = gen_loss_graph(&mut g, tcfg.loss, s_fake);
        let g_loss_value = require_finite_loss(g.scalar_value(loss), "generator loss", step)?;
        let grads = g.backward(loss);
        let gmap = collect_grads(
            &g,
            &grads,
            &p,
            store
                .trainable_names()
                .into_iter()
                .filter(|n| n.starts_with("gen.")),
        );
        adam_g.step(store, &gmap);
        for (bn, stats) in &fwd.bn_updates {
            bn.update_running(store, stats);
        }

        let mut row = MetricsRow {
            step,
            d_loss: d_loss_value,
            g_loss: g_loss_value,
            penalty: penalty_value,
            fid: None,
            wall_s: started.elapsed().as_secs_f64(),
        };

        if step % tcfg.checkpoint_every == 0 || step == tcfg.total_steps {
            adam_d.save_state(store, "opt.d");
            adam_g.save_state(store, "opt.g");
            let path = checkpoint_path(&ckpt_dir, step);
            let meta = CheckpointMeta { config: gen.cfg.clone(), step };
            save_checkpoint(&path, &meta, store)?;
            if let Some(hook) = fid_hook.as_mut() {
                let fid = hook(gen, store)?;
                row.fid = Some(fid);
                let better = best.as_ref().map_or(true, |b| fid < b.fid);
                if better {
                    let mark = BestMark {
                        step,
                        fid,
                        checkpoint: path
                            .file_name()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                    };
                    let text = serde_json::to_string_pretty(&mark)
                        .map_err(|e| Error::data(format!("best mark: {e}")))?;
                    fs::write(&best_path, text).map_err(|e| Error::io(&best_path, e))?;
                    best = Some(mark);
                }
            }
        }

        append_metrics(&metrics_path, &row)?;
        logged.push(row);
    }

    Ok(TrainOutcome { last_step: tcfg.total_steps.max(start), best, metrics: logged })
}
