//! Fréchet-distance evaluation, latent traversals, and component dumps.
//!
//! Sample quality is scored as the Fréchet distance between Gaussians
//! fitted to embedded generated and held-out real images. The embedder is
//! pluggable behind [`Embedder`]; the built-in choice is a small
//! convolutional classifier trained on per-object crops of the target
//! dataset, so the whole pipeline is self-contained. Absolute values are
//! embedder-specific and only comparable within one embedder.

use crate::datasets::{bilinear_resize3, save_rgb_png, save_rgba_png};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{generate, generate_batch, sample_latent_batch, GenerateOutput, Generator, LatentSet};
use crate::nn::{Conv2dLayer, Linear};
use crate::opt::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::scalar::Scalar;
use indexmap::IndexMap;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Mean and covariance of a set of embedded images.
#[derive(Debug, Clone)]
pub struct EmbeddingStats {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub count: usize,
}

/// Sample mean and unbiased covariance of `features` rows.
pub fn gaussian_stats<F: Scalar>(features: &ArrayView2<F>) -> Result<EmbeddingStats> {
    let (n, _) = features.dim();
    if n < 2 {
        return Err(Error::data("need at least 2 feature rows for covariance"));
    }
    let feats = features.mapv(|v| v.to_f64().unwrap_or(f64::NAN));
    if feats.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerics("features contain non-finite values"));
    }
    let mean = feats.sum_axis(Axis(0)) / n as f64;
    let centered = &feats - &mean.view().insert_axis(Axis(0));
    let covariance = centered.t().dot(&centered) / (n as f64 - 1.0);
    Ok(EmbeddingStats { mean, covariance, count: n })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Symmetric PSD square root: eigendecompose the symmetrized input and
/// clamp negative eigenvalues to zero.
pub fn sqrt_psd(m: &Array2<f64>) -> Array2<f64> {
    let sym = (to_dmatrix(m) + to_dmatrix(m).transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let q = &eig.eigenvectors;
    let scaled = q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(roots));
    from_dmatrix(&(scaled * q.transpose()))
}

/// Fréchet distance between two Gaussians:
/// `||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})`, the cross term
/// evaluated as `sqrt(sqrt(Sa) Sb sqrt(Sa))` so every decomposition is of
/// a symmetric matrix.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(format!(
            "embedding dims differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    for stats in [a, b] {
        if stats.mean.iter().any(|v| !v.is_finite())
            || stats.covariance.iter().any(|v| !v.is_finite())
        {
            return Err(Error::numerics("embedding stats contain non-finite values"));
        }
    }
    let diff = &a.mean - &b.mean;
    let mean_term: f64 = diff.iter().map(|v| v * v).sum();
    let sa = sqrt_psd(&a.covariance);
    let inner = sa.dot(&b.covariance).dot(&sa);
    let cross = sqrt_psd(&inner);
    let trace = |m: &Array2<f64>| m.diag().sum();
    let value = mean_term + trace(&a.covariance) + trace(&b.covariance) - 2.0 * trace(&cross);
    Ok(value.max(0.0))
}

// ---------------------------------------------------------------------------
// embedders

/// Maps image batches `[B,3,S,S]` to feature rows `[B,D]`.
pub trait Embedder<F: Scalar> {
    fn dim(&self) -> usize;
    fn embed(&self, images: &Array4<F>) -> Result<Array2<f64>>;
}

/// Parameter-free fallback embedder: grayscale the image and bilinearly
/// shrink it to `side x side`, giving `side^2` features. Coarse, but usable
/// on any dataset without training.
#[derive(Debug, Clone, Copy)]
pub struct PixelEmbedder {
    pub side: usize,
}

impl<F: Scalar> Embedder<F> for PixelEmbedder {
    fn dim(&self) -> usize {
        self.side * self.side
    }

    fn embed(&self, images: &Array4<F>) -> Result<Array2<f64>> {
        let (b, c, h, w) = images.dim();
        if c != 3 {
            return Err(Error::shape("embedder expects [B,3,S,S] images"));
        }
        let mut out = Array2::zeros((b, self.side * self.side));
        for i in 0..b {
            let img = images.index_axis(Axis(0), i);
            let hwc = Array3::from_shape_fn((h, w, 3), |(r, cc, ch)| img[[ch, r, cc]]);
            let small = bilinear_resize3(&hwc, self.side, self.side);
            for r in 0..self.side {
                for cc in 0..self.side {
                    let gray = (small[[r, cc, 0]] + small[[r, cc, 1]] + small[[r, cc, 2]])
                        / F::c(3.0);
                    out[[i, r * self.side + cc]] = gray.to_f64().unwrap_or(0.0);
                }
            }
        }
        Ok(out)
    }
}

pub const EMBEDDER_FORMAT: &str = "kgan-embedder-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    /// First-stage channel count; features are `4 * channels` wide.
    pub channels: usize,
    pub classes: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { channels: 16, classes: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedderMeta {
    format: String,
    config: EmbedderConfig,
}

/// Fully convolutional classifier embedder. Three stride-2 stages and a
/// global average pool produce the feature vector, so any image size
/// divisible by 8 embeds with the same parameters regardless of the crop
/// size it was trained on.
#[derive(Debug, Clone)]
pub struct ConvEmbedder<F: Scalar> {
    pub cfg: EmbedderConfig,
    convs: Vec<Conv2dLayer>,
    head: Linear,
    store: ParamStore<F>,
}

fn embedder_layers(cfg: &EmbedderConfig) -> (Vec<Conv2dLayer>, Linear) {
    let c = cfg.channels;
    let convs = vec![
        Conv2dLayer::new("emb.c0", 3, c, 4, 2, 1),
        Conv2dLayer::new("emb.c1", c, 2 * c, 4, 2, 1),
        Conv2dLayer::new("emb.c2", 2 * c, 4 * c, 4, 2, 1),
    ];
    let head = Linear::new("emb.fc", 4 * c, cfg.classes);
    (convs, head)
}

fn embedder_features<F: Scalar>(
    g: &mut Graph<F>,
    p: &crate::params::BoundParams,
    convs: &[Conv2dLayer],
    x: Var,
) -> Var {
    let mut h = x;
    for conv in convs {
        h = conv.apply(g, p, h);
        h = g.leaky_relu(h, 0.2);
    }
    let pooled = g.mean_axes(h, &[2, 3]);
    let b = g.shape(pooled)[0];
    let c = g.shape(pooled)[1];
    g.reshape(pooled, &[b, c])
}

impl<F: Scalar> ConvEmbedder<F> {
    pub fn new(cfg: EmbedderConfig, store: ParamStore<F>) -> Result<Self> {
        if cfg.channels == 0 || cfg.classes < 2 {
            return Err(Error::config("embedder needs channels >= 1 and classes >= 2"));
        }
        let (convs, head) = embedder_layers(&cfg);
        for conv in &convs {
            for suffix in ["w", "b"] {
                let name = format!("{}.{suffix}", conv.name);
                if !store.contains(&name) {
                    return Err(Error::config(format!("embedder store is missing {name}")));
                }
            }
        }
        Ok(ConvEmbedder { cfg, convs, head, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = EmbedderMeta { format: EMBEDDER_FORMAT.to_string(), config: self.cfg };
        let header = serde_json::to_string(&meta)
            .map_err(|e| Error::data(format!("embedder meta: {e}")))?;
        self.store.save(path, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, header) = ParamStore::load(path)?;
        let meta: EmbedderMeta = serde_json::from_str(&header)
            .map_err(|e| Error::data(format!("embedder meta malformed: {e}")))?;
        if meta.format != EMBEDDER_FORMAT {
            return Err(Error::data(format!("{} is not an embedder file", path.display())));
        }
        Self::new(meta.config, store)
    }

    /// Class logits for labeled images, used by training and its tests.
    fn logits(&self, images: &Array4<F>) -> Result<Array2<F>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(images.clone().into_dyn());
        let f = embedder_features(&mut g, &p, &self.convs, x);
        let l = self.head.apply(&mut g, &p, f);
        let v = g.val(l);
        Ok(v.clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::shape("logits are not [B,C]"))?)
    }

    /// Fraction of rows whose argmax logit equals the label.
    pub fn accuracy(&self, images: &Array4<F>, classes: &[u8]) -> Result<f64> {
        let logits = self.logits(images)?;
        let mut hits = 0usize;
        for (row, &class) in logits.outer_iter().zip(classes) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if best == class as usize {
                hits += 1;
            }
        }
        Ok(hits as f64 / classes.len().max(1) as f64)
    }
}

impl<F: Scalar> Embedder<F> for ConvEmbedder<F> {
    fn dim(&self) -> usize {
        4 * self.cfg.channels
    }

    fn embed(&self, images: &Array4<F>) -> Result<Array2<f64>> {
        let (n, c, h, w) = images.dim();
        if c != 3 {
            return Err(Error::shape("embedder expects [B,3,S,S] images"));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape("embedder needs sides divisible by 8"));
        }
        let mut out = Array2::zeros((n, self.dim()));
        let chunk = 256;
        let mut at = 0;
        while at < n {
            let take = chunk.min(n - at);
            let part = images.slice(ndarray::s![at..at + take, .., .., ..]).to_owned();
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let x = g.constant(part.into_dyn());
            let f = embedder_features(&mut g, &p, &self.convs, x);
            let v = g.val(f);
            for i in 0..take {
                for d in 0..self.dim() {
                    out[[at + i, d]] = v[[i, d]].to_f64().unwrap_or(f64::NAN);
                }
            }
            at += take;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerics("embedding produced non-finite features"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig { steps: 2000, batch: 64, lr: 1e-3, seed: 0 }
    }
}

/// Softmax cross-entropy over `[B,C]` logits against integer classes.
fn class_ce_graph<F: Scalar>(g: &mut Graph<F>, logits: Var, classes: &[u8], n_classes: usize) -> Var {
    let b = classes.len();
    let mut onehot = Array2::<F>::zeros((b, n_classes));
    for (i, &c) in classes.iter().enumerate() {
        onehot[[i, c as usize]] = F::one();
    }
    let probs = g.softmax_last(logits);
    let lp = g.ln(probs);
    let mask = g.constant(onehot.into_dyn());
    let picked = g.mul(lp, mask);
    let total = g.sum_all(picked);
    g.mul_scalar(total, -1.0 / b as f64)
}

/// Train the built-in classifier embedder on labeled crops.
pub fn train_embedder<F: Scalar>(
    crops: &Array4<F>,
    classes: &[u8],
    cfg: EmbedderConfig,
    tcfg: &EmbedderTrainConfig,
) -> Result<ConvEmbedder<F>> {
    let n = crops.shape()[0];
    if n == 0 || n != classes.len() {
        return Err(Error::shape("need one class per crop"));
    }
    if classes.iter().any(|&c| c as usize >= cfg.classes) {
        return Err(Error::data("class id out of range for embedder config"));
    }
    if tcfg.batch == 0 || tcfg.lr <= 0.0 {
        return Err(Error::config("embedder training needs batch >= 1 and lr > 0"));
    }
    let (convs, head) = embedder_layers(&cfg);
    let mut store = ParamStore::new();
    let mut rng = stream(tcfg.seed, "emb-init", 0);
    for conv in &convs {
        conv.init(&mut store, &mut rng, 1.0);
    }
    head.init(&mut store, &mut rng, 1.0);
    let mut adam = Adam::new(AdamConfig { lr: tcfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });

    for step in 0..tcfg.steps {
        let mut brng = stream(tcfg.seed, "emb-batch", step);
        let mut batch = Array4::zeros((tcfg.batch, 3, crops.shape()[2], crops.shape()[3]));
        let mut batch_classes = Vec::with_capacity(tcfg.batch);
        for i in 0..tcfg.batch {
            let pick = brng.gen_range(0..n);
            batch.index_axis_mut(Axis(0), i).assign(&crops.index_axis(Axis(0), pick));
            batch_classes.push(classes[pick]);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(batch.into_dyn());
        let f = embedder_features(&mut g, &p, &convs, x);
        let logits = head.apply(&mut g, &p, f);
        let loss = class_ce_graph(&mut g, logits, &batch_classes, cfg.classes);
        let value = g.scalar_value(loss).to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::numerics(format!(
                "embedder loss became non-finite at step {step}"
            )));
        }
        let grads = g.backward(loss);
        let mut gmap = IndexMap::new();
        for name in store.trainable_names() {
            if let Some(v) = grads.wrt(p.get(&name)) {
                gmap.insert(name, g.val(v).clone());
            }
        }
        adam.step(&mut store, &gmap);
    }
    ConvEmbedder::new(cfg, store)
}

// ---------------------------------------------------------------------------
// fid

#[derive(Debug, Clone)]
pub struct FidOutcome {
    pub fid: f64,
    pub n_generated: usize,
    pub n_real: usize,
    /// Set when fewer real images were available than requested.
    pub warning: Option<String>,
}

/// Fréchet distance between embedded generator samples and held-out real
/// images. Real statistics always use every supplied hold-out row, so the
/// result does not depend on their order.
pub fn compute_fid<F: Scalar>(
    gen: &Generator,
    store: &ParamStore<F>,
    holdout: &Array4<F>,
    embedder: &dyn Embedder<F>,
    n_samples: usize,
    seed: u64,
) -> Result<FidOutcome> {
    if n_samples == 0 {
        return Err(Error::config("fid needs n_samples >= 1"));
    }
    let n_real = holdout.shape()[0];
    if n_real < 2 {
        return Err(Error::data("fid needs at least 2 hold-out images"));
    }
    if holdout.shape()[2] != gen.cfg.image_size {
        return Err(Error::shape("hold-out image size does not match the model"));
    }
    let warning = (n_real < n_samples).then(|| {
        format!("hold-out has only {n_real} images; using all of them against {n_samples} samples")
    });

    let mut fake_feats = Array2::zeros((n_samples, embedder.dim()));
    let chunk = 64usize;
    let mut at = 0;
    let mut batch_index = 0u64;
    while at < n_samples {
        let take = chunk.min(n_samples - at);
        let (zo, zb) =
            sample_latent_batch::<F>(&gen.cfg, &mut stream(seed, "fid-latent", batch_index), take);
        let images = generate_batch(gen, store, &zo, zb.as_ref())?;
        let feats = embedder.embed(&images)?;
        fake_feats.slice_mut(ndarray::s![at..at + take, ..]).assign(&feats);
        at += take;
        batch_index += 1;
    }
    let real_feats = embedder.embed(holdout)?;

    let fake_stats = gaussian_stats(&fake_feats.view())?;
    let real_stats = gaussian_stats(&real_feats.view())?;
    let fid = frechet_distance(&fake_stats, &real_stats)?;
    Ok(FidOutcome { fid, n_generated: n_samples, n_real, warning })
}

// ---------------------------------------------------------------------------
// traversal and dumps

/// A sweep through latent space: move one component's latent along
/// `direction` by each increment in turn.
#[derive(Debug, Clone)]
pub struct TraversalSpec<F: Scalar> {
    /// Object index in `0..K`, or `K` for the background latent.
    pub component: usize,
    pub direction: Array1<F>,
    pub increments: Vec<f64>,
}

impl<F: Scalar> TraversalSpec<F> {
    /// Eight evenly spaced increments spanning [-1, 1].
    pub fn default_increments() -> Vec<f64> {
        (0..8).map(|i| -1.0 + 2.0 * i as f64 / 7.0).collect()
    }

    pub fn validate(&self, k: usize, latent_dim: usize, has_background: bool) -> Result<()> {
        if self.component > k || (self.component == k && !has_background) {
            return Err(Error::config(format!(
                "component {} out of range for {k} objects{}",
                self.component,
                if has_background { " plus background" } else { "" }
            )));
        }
        if self.direction.len() != latent_dim {
            return Err(Error::shape("traversal direction width mismatch"));
        }
        if self.direction.iter().all(|v| *v == F::zero()) {
            return Err(Error::config("traversal direction must be nonzero"));
        }
        if self.increments.is_empty() || self.increments.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("traversal increments must be finite and nonempty"));
        }
        Ok(())
    }
}

/// Regenerate with `z_c <- z_c + t * direction` for each increment, all
/// other latents fixed; outputs in increment order.
pub fn traverse_latent<F: Scalar>(
    gen: &Generator,
    store: &ParamStore<F>,
    base: &LatentSet<F>,
    spec: &TraversalSpec<F>,
) -> Result<Vec<GenerateOutput<F>>> {
    base.check_compatible(&gen.cfg)?;
    spec.validate(gen.cfg.k, gen.cfg.latent_dim, gen.cfg.use_background)?;
    let mut out = Vec::with_capacity(spec.increments.len());
    for &t in &spec.increments {
        let mut latents = base.clone();
        let shift = spec.direction.mapv(|d| d * F::c(t));
        if spec.component < gen.cfg.k {
            let mut row = latents.objects.row_mut(spec.component);
            row += &shift;
        } else if let Some(bg) = latents.background.as_mut() {
            *bg += &shift;
        }
        out.push(generate(gen, store, &latents)?);
    }
    Ok(out)
}

/// Tile equally sized `[H,W,3]` images into a grid, row-major, with a
/// 2-pixel white gutter.
pub fn image_grid<F: Scalar>(images: &[Array3<F>], cols: usize) -> Result<Array3<F>> {
    if images.is_empty() || cols == 0 {
        return Err(Error::config("grid needs images and cols >= 1"));
    }
    let (h, w, c) = images[0].dim();
    if c != 3 || images.iter().any(|i| i.dim() != (h, w, 3)) {
        return Err(Error::shape("grid images must share one [H,W,3] shape"));
    }
    const GAP: usize = 2;
    let rows = images.len().div_ceil(cols);
    let gh = rows * h + (rows - 1) * GAP;
    let gw = cols * w + (cols - 1) * GAP;
    let mut grid = Array3::from_elem((gh, gw, 3), F::one());
    for (i, img) in images.iter().enumerate() {
        let r0 = (i / cols) * (h + GAP);
        let c0 = (i % cols) * (w + GAP);
        grid.slice_mut(ndarray::s![r0..r0 + h, c0..c0 + w, ..]).assign(img);
    }
    Ok(grid)
}

/// Write one generation as `composite.png`, `component-K.png` (RGBA), and
/// `background.png` when present.
pub fn write_component_dump<F: Scalar>(dir: &Path, out: &GenerateOutput<F>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_rgb_png(&dir.join("composite.png"), &out.composite.image)?;
    for (i, comp) in out.components.iter().enumerate() {
        let (h, w, _) = comp.color.dim();
        let alpha = match &comp.alpha {
            Some(a) => a.clone(),
            None => Array2::from_elem((h, w), F::one()),
        };
        save_rgba_png(&dir.join(format!("component-{i}.png")), &comp.color, &alpha)?;
    }
    if let Some(bg) = &out.background {
        save_rgb_png(&dir.join("background.png"), &bg.color)?;
    }
    Ok(())
}
