//! Model assembly: the latent prior, the weight-shared object decoder, the
//! background decoder, the relational stage, composition, the convolutional
//! discriminator, spectral normalization, and checkpointing.
//!
//! One `ParamStore` holds every tensor, namespaced `gen.obj.*`, `gen.bg.*`,
//! `gen.rel.*`, and `disc.*`. All K object components decode through the
//! same `gen.obj.*` arrays, so the object path's parameter count does not
//! depend on K.
//!
//! Decoder shape: a linear projection of the latent to a 4x4 seed map, then
//! stride-2 transposed convolutions (kernel 4, pad 1) that double the
//! spatial size and halve the channel count at each stage, batch norm and
//! ReLU between stages, sigmoid output. 64px images take 4 stages, 128px
//! take 5. The discriminator mirrors this with stride-2 convolutions,
//! leaky ReLU (slope 0.2), batch norm on the inner layers only when
//! spectral normalization is off, and a final linear map to one score.

use crate::composition::{
    alpha_composite, alpha_composite_with_weights_graph, compose_sum, compose_sum_graph,
    ComponentImage, ComposeMode, CompositeResult, CONTRIBUTION_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm2d, BnStats, Conv2dLayer, ConvT2dLayer, Linear};
use crate::params::{BoundParams, ParamStore};
use crate::relational::{RelationalConfig, RelationalParams};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView2, Axis, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Spatial size of the decoder seed map.
pub const SEED_SPATIAL: usize = 4;
/// Leaky ReLU slope in the discriminator.
pub const DISC_LEAK: f64 = 0.2;
/// Smallest singular value estimate used as a divisor.
pub const SPECTRAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of object components.
    pub k: usize,
    /// Output image side, 64 or 128.
    pub image_size: usize,
    pub latent_dim: usize,
    pub compose: ComposeMode,
    pub relational: RelationalConfig,
    /// Separate background decoder with its own weights. Requires an alpha
    /// composition mode; without it, alpha modes composite over black.
    pub use_background: bool,
    /// Channels of the 4x4 decoder seed map; halved at each upsampling
    /// stage.
    pub gen_channels: usize,
    /// Channels after the first discriminator convolution; doubled at each
    /// downsampling stage.
    pub disc_channels: usize,
    /// Spectral normalization on every discriminator weight; replaces
    /// discriminator batch norm.
    pub spectral_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            image_size: 64,
            latent_dim: 64,
            compose: ComposeMode::SumClip,
            relational: RelationalConfig::default(),
            use_background: false,
            gen_channels: 256,
            disc_channels: 64,
            spectral_norm: false,
        }
    }
}

impl ModelConfig {
    /// Up/downsampling stage count for the configured image size.
    pub fn stages(&self) -> usize {
        match self.image_size {
            64 => 4,
            128 => 5,
            _ => 0,
        }
    }

    pub fn decoder_out_channels(&self) -> usize {
        match self.compose {
            ComposeMode::LearnedAlpha => 4,
            _ => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !matches!(self.image_size, 64 | 128) {
            return Err(Error::config(format!(
                "image_size {} unsupported (use 64 or 128)",
                self.image_size
            )));
        }
        if self.latent_dim < 2 {
            return Err(Error::config("latent_dim must be at least 2"));
        }
        if self.use_background && !self.compose.uses_alpha() {
            return Err(Error::config(
                "use_background requires an alpha composition mode (threshold_alpha or learned_alpha)",
            ));
        }
        if self.relational.include_background && !self.use_background {
            return Err(Error::config(
                "relational.include_background requires use_background",
            ));
        }
        if self.relational.n_blocks > 0 && self.relational.n_heads == 0 {
            return Err(Error::config("relational.n_heads must be at least 1"));
        }
        let halvings = self.stages() - 1;
        if self.gen_channels >> halvings == 0 || self.gen_channels % (1 << halvings) != 0 {
            return Err(Error::config(format!(
                "gen_channels {} must be a positive multiple of {}",
                self.gen_channels,
                1 << halvings
            )));
        }
        if self.disc_channels == 0 {
            return Err(Error::config("disc_channels must be positive"));
        }
        Ok(())
    }
}

/// One draw from the prior: K object latents, plus a background latent when
/// the model has a background generator. Entries lie in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct LatentSet<F: Scalar> {
    /// `[K, latent_dim]`
    pub objects: Array2<F>,
    pub background: Option<Array1<F>>,
}

impl<F: Scalar> LatentSet<F> {
    /// Shape, background presence, and finiteness. Generation accepts any
    /// finite latents (traversals deliberately leave the prior's range).
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.objects.dim() != (cfg.k, cfg.latent_dim) {
            return Err(Error::shape(format!(
                "latents are {:?}, config wants ({}, {})",
                self.objects.dim(),
                cfg.k,
                cfg.latent_dim
            )));
        }
        match (&self.background, cfg.use_background) {
            (Some(b), true) if b.len() != cfg.latent_dim => {
                return Err(Error::shape("background latent width mismatch"))
            }
            (Some(_), false) => {
                return Err(Error::shape("background latent given but model has no background"))
            }
            (None, true) => return Err(Error::shape("model needs a background latent")),
            _ => {}
        }
        let all = self.objects.iter().chain(self.background.iter().flatten());
        for &v in all {
            if !v.is_finite() {
                return Err(Error::numerics("latents contain non-finite values"));
            }
        }
        Ok(())
    }

    /// [`check_compatible`](Self::check_compatible) plus the prior's range.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.check_compatible(cfg)?;
        let all = self.objects.iter().chain(self.background.iter().flatten());
        for &v in all {
            if v < F::c(-1.0) || v > F::one() {
                return Err(Error::numerics("latents must lie in [-1, 1]"));
            }
        }
        Ok(())
    }
}

/// K iid uniform latents on `[-1,1]`, plus a background latent when
/// configured.
pub fn sample_latents<F: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> LatentSet<F> {
    let dist = Uniform::new(F::c(-1.0), F::one());
    let objects = Array2::from_shape_simple_fn((cfg.k, cfg.latent_dim), || dist.sample(rng));
    let background = cfg
        .use_background
        .then(|| Array1::from_shape_simple_fn(cfg.latent_dim, || dist.sample(rng)));
    LatentSet { objects, background }
}

/// Batched prior draw: `[B,K,L]` object latents and optionally `[B,L]`
/// background latents, sampled scene by scene.
pub fn sample_latent_batch<F: Scalar>(
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    batch: usize,
) -> (Array3<F>, Option<Array2<F>>) {
    let mut objects = Array3::zeros((batch, cfg.k, cfg.latent_dim));
    let mut background =
        cfg.use_background.then(|| Array2::zeros((batch, cfg.latent_dim)));
    for b in 0..batch {
        let set = sample_latents(cfg, rng);
        objects.index_axis_mut(Axis(0), b).assign(&set.objects);
        if let (Some(bg), Some(v)) = (background.as_mut(), set.background.as_ref()) {
            bg.index_axis_mut(Axis(0), b).assign(v);
        }
    }
    (objects, background)
}

fn bn_shapes(name: &str, ch: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for field in ["gamma", "beta", "running_mean", "running_var"] {
        out.push((format!("{name}.{field}"), vec![ch]));
    }
}

fn check_shapes<F: Scalar>(store: &ParamStore<F>, shapes: &[(String, Vec<usize>)]) -> Result<()> {
    for (name, shape) in shapes {
        if !store.contains(name) {
            return Err(Error::config(format!("missing parameter {name}")));
        }
        if store.get(name).shape() != shape.as_slice() {
            return Err(Error::config(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                store.get(name).shape(),
                shape
            )));
        }
    }
    Ok(())
}

/// Latent-to-image decoder (used for both the shared object generator and
/// the background generator, under different name prefixes).
#[derive(Debug, Clone)]
struct DecoderNet {
    fc: Linear,
    bn_seed: BatchNorm2d,
    stages: Vec<(ConvT2dLayer, Option<BatchNorm2d>)>,
    seed_ch: usize,
}

impl DecoderNet {
    fn define(prefix: &str, cfg: &ModelConfig, out_ch: usize) -> Self {
        let n = cfg.stages();
        let seed_ch = cfg.gen_channels;
        let fc = Linear::new(
            format!("{prefix}.fc"),
            cfg.latent_dim,
            seed_ch * SEED_SPATIAL * SEED_SPATIAL,
        );
        let bn_seed = BatchNorm2d::new(format!("{prefix}.bn_seed"), seed_ch);
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let in_ch = seed_ch >> i;
            let last = i == n - 1;
            let out = if last { out_ch } else { seed_ch >> (i + 1) };
            let conv = ConvT2dLayer::new(format!("{prefix}.up{i}"), in_ch, out, 4, 2, 1);
            let bn = (!last).then(|| BatchNorm2d::new(format!("{prefix}.bn{i}"), out));
            stages.push((conv, bn));
        }
        DecoderNet { fc, bn_seed, stages, seed_ch }
    }

    fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.fc.init(store, rng, 1.0);
        self.bn_seed.init(store);
        for (conv, bn) in &self.stages {
            conv.init(store, rng, 1.0);
            if let Some(bn) = bn {
                bn.init(store);
            }
        }
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.push((format!("{}.w", self.fc.name), vec![self.fc.out_dim, self.fc.in_dim]));
        out.push((format!("{}.b", self.fc.name), vec![self.fc.out_dim]));
        bn_shapes(&self.bn_seed.name, self.seed_ch, &mut out);
        for (conv, bn) in &self.stages {
            out.push((
                format!("{}.w", conv.name),
                vec![conv.in_ch, conv.out_ch, conv.kernel, conv.kernel],
            ));
            out.push((format!("{}.b", conv.name), vec![conv.out_ch]));
            if let Some(bn) = bn {
                bn_shapes(&bn.name, conv.out_ch, &mut out);
            }
        }
        out
    }

    /// `z`: `[B, latent]` -> `[B, out_ch, S, S]`, values in (0,1).
    fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        z: Var,
        training: bool,
        bn_out: &mut Vec<(BatchNorm2d, BnStats<F>)>,
    ) -> Var {
        let b = g.shape(z)[0];
        let h = self.fc.apply(g, p, z);
        let x = g.reshape(h, &[b, self.seed_ch, SEED_SPATIAL, SEED_SPATIAL]);
        let (x, st) = self.bn_seed.apply(g, p, x, training);
        if let Some(s) = st {
            bn_out.push((self.bn_seed.clone(), s));
        }
        let mut x = g.relu(x);
        for (conv, bn) in &self.stages {
            x = conv.apply(g, p, x);
            if let Some(bn) = bn {
                let (y, st) = bn.apply(g, p, x, training);
                if let Some(s) = st {
                    bn_out.push((bn.clone(), s));
                }
                x = g.relu(y);
            }
        }
        g.sigmoid(x)
    }
}

/// Hard contribution mask of a color batch `[B,3,H,W]`, detached from the
/// graph: gradient reaches the generator through colors only.
fn threshold_mask<F: Scalar>(g: &mut Graph<F>, color: Var) -> Var {
    let v = g.val(color);
    let (b, h, w) = (v.shape()[0], v.shape()[2], v.shape()[3]);
    let thresh = F::c(CONTRIBUTION_THRESHOLD);
    let mut mask = ArrayD::<F>::zeros(IxDyn(&[b, 1, h, w]));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let m = (0..3).map(|c| v[[bi, c, y, x]]).fold(F::zero(), F::max);
                mask[[bi, 0, y, x]] = if m > thresh { F::one() } else { F::zero() };
            }
        }
    }
    g.constant(mask)
}

/// Everything one batched generator forward produces.
pub struct GenForward<F: Scalar> {
    /// `[B,3,S,S]`
    pub composite: Var,
    /// K color layers `[B,3,S,S]`, front-most first.
    pub colors: Vec<Var>,
    /// K alpha layers `[B,1,S,S]`; empty in sum mode.
    pub alphas: Vec<Var>,
    /// K+1 compositing weights (background last); empty in sum mode.
    pub weights: Vec<Var>,
    /// `[B,3,S,S]` decoded background, when the model has one.
    pub background: Option<Var>,
    /// Batch-norm statistics to fold into running buffers after the step.
    pub bn_updates: Vec<(BatchNorm2d, BnStats<F>)>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: ModelConfig,
    object_net: DecoderNet,
    background_net: Option<DecoderNet>,
    pub relational: RelationalParams,
}

impl Generator {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let object_net = DecoderNet::define("gen.obj", &cfg, cfg.decoder_out_channels());
        let background_net = cfg.use_background.then(|| DecoderNet::define("gen.bg", &cfg, 3));
        let relational = RelationalParams::define("gen.rel", cfg.relational, cfg.latent_dim)?;
        Ok(Generator { cfg, object_net, background_net, relational })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.object_net.init(store, rng);
        if let Some(bg) = &self.background_net {
            bg.init(store, rng);
        }
        self.relational.init(store, rng);
    }

    pub fn validate<F: Scalar>(&self, store: &ParamStore<F>) -> Result<()> {
        check_shapes(store, &self.object_net.shapes())?;
        if let Some(bg) = &self.background_net {
            check_shapes(store, &bg.shapes())?;
        }
        self.relational.validate(store)
    }

    /// Batched forward. `z_obj`: `[B,K,L]`; `z_bg`: `[B,L]` iff the model
    /// uses a background.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        z_obj: Var,
        z_bg: Option<Var>,
        training: bool,
    ) -> GenForward<F> {
        let shape = g.shape(z_obj).to_vec();
        let (b, k, l) = (shape[0], shape[1], shape[2]);
        assert_eq!(k, self.cfg.k, "latent row count");
        assert_eq!(z_bg.is_some(), self.cfg.use_background, "background latent presence");

        let include_bg = self.cfg.relational.include_background && z_bg.is_some();
        let rel_in = match (include_bg, z_bg) {
            (true, Some(zb)) => {
                let zb3 = g.reshape(zb, &[b, 1, l]);
                g.concat(&[z_obj, zb3], 1)
            }
            _ => z_obj,
        };
        let refined = self.relational.apply(g, p, rel_in);
        let (z_objects, z_background) = if include_bg {
            let zo = g.slice_axis(refined, 1, 0, k);
            let zb = g.slice_axis(refined, 1, k, 1);
            (zo, Some(g.reshape(zb, &[b, l])))
        } else {
            (refined, z_bg)
        };

        // All K components through one decoder pass: [B,K,L] -> [K*B,L],
        // so that component i occupies the contiguous row block i*B..(i+1)*B.
        let zt = g.transpose(z_objects, &[1, 0, 2]);
        let z2 = g.reshape(zt, &[k * b, l]);
        let mut bn_updates = Vec::new();
        let decoded = self.object_net.forward(g, p, z2, training, &mut bn_updates);
        let layers: Vec<Var> = (0..k).map(|i| g.slice_axis(decoded, 0, i * b, b)).collect();

        let background = match (&self.background_net, z_background) {
            (Some(net), Some(zb)) => Some(net.forward(g, p, zb, training, &mut bn_updates)),
            _ => None,
        };

        match self.cfg.compose {
            ComposeMode::SumClip => {
                let composite = compose_sum_graph(g, &layers);
                GenForward {
                    composite,
                    colors: layers,
                    alphas: vec![],
                    weights: vec![],
                    background,
                    bn_updates,
                }
            }
            ComposeMode::ThresholdAlpha | ComposeMode::LearnedAlpha => {
                let (colors, alphas): (Vec<Var>, Vec<Var>) = layers
                    .iter()
                    .map(|&layer| match self.cfg.compose {
                        ComposeMode::LearnedAlpha => {
                            (g.slice_axis(layer, 1, 0, 3), g.slice_axis(layer, 1, 3, 1))
                        }
                        _ => (layer, threshold_mask(g, layer)),
                    })
                    .unzip();
                let s = self.cfg.image_size;
                let bg = background.unwrap_or_else(|| {
                    g.constant(ArrayD::zeros(IxDyn(&[b, 3, s, s])))
                });
                let pairs: Vec<(Var, Var)> =
                    colors.iter().cloned().zip(alphas.iter().cloned()).collect();
                let (composite, weights) = alpha_composite_with_weights_graph(g, &pairs, bg);
                GenForward {
                    composite,
                    colors,
                    alphas,
                    weights,
                    background: Some(bg),
                    bn_updates,
                }
            }
        }
    }
}

/// One generated scene with its per-component layers, inference mode
/// (batch-norm running statistics), pure in (params, latents).
pub struct GenerateOutput<F: Scalar> {
    pub composite: CompositeResult<F>,
    /// K decoded components, front-most first, colors `[H,W,3]` with alphas
    /// present in the alpha composition modes.
    pub components: Vec<ComponentImage<F>>,
    pub background: Option<ComponentImage<F>>,
}

fn chw_to_hwc<F: Scalar>(v: &ArrayD<F>, sample: usize) -> Array3<F> {
    let (c, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[y, x, ch]] = v[[sample, ch, y, x]];
            }
        }
    }
    out
}

pub fn generate<F: Scalar>(
    gen: &Generator,
    store: &ParamStore<F>,
    latents: &LatentSet<F>,
) -> Result<GenerateOutput<F>> {
    latents.check_compatible(&gen.cfg)?;
    gen.validate(store)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let z_obj = g.constant(latents.objects.clone().insert_axis(Axis(0)).into_dyn());
    let z_bg = latents
        .background
        .as_ref()
        .map(|v| g.constant(v.clone().insert_axis(Axis(0)).into_dyn()));
    let fwd = gen.forward(&mut g, &p, z_obj, z_bg, false);

    let s = gen.cfg.image_size;
    let k = gen.cfg.k;
    let mut components = Vec::with_capacity(k);
    for i in 0..k {
        let color = chw_to_hwc(g.val(fwd.colors[i]), 0);
        let alpha = (!fwd.alphas.is_empty()).then(|| {
            let v = g.val(fwd.alphas[i]);
            Array2::from_shape_fn((s, s), |(y, x)| v[[0, 0, y, x]])
        });
        components.push(ComponentImage { color, alpha });
    }
    let background = gen
        .background_net
        .as_ref()
        .and_then(|_| fwd.background)
        .map(|bgv| ComponentImage::opaque(chw_to_hwc(g.val(bgv), 0)));

    let composite = match gen.cfg.compose {
        ComposeMode::SumClip => compose_sum(&components)?,
        _ => {
            let black = ComponentImage::opaque(Array3::zeros((s, s, 3)));
            let bg_ref = background.as_ref().unwrap_or(&black);
            alpha_composite(&components, bg_ref)?
        }
    };
    Ok(GenerateOutput { composite, components, background })
}

/// Inference-mode batched sampling of composite images `[B,3,S,S]`, for
/// evaluation pipelines.
pub fn generate_batch<F: Scalar>(
    gen: &Generator,
    store: &ParamStore<F>,
    z_obj: &Array3<F>,
    z_bg: Option<&Array2<F>>,
) -> Result<Array4<F>> {
    if z_obj.shape()[1] != gen.cfg.k || z_obj.shape()[2] != gen.cfg.latent_dim {
        return Err(Error::shape("latent batch does not match config"));
    }
    if z_bg.is_some() != gen.cfg.use_background {
        return Err(Error::shape("background latent presence does not match config"));
    }
    gen.validate(store)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let zo = g.constant(z_obj.clone().into_dyn());
    let zb = z_bg.map(|v| g.constant(v.clone().into_dyn()));
    let fwd = gen.forward(&mut g, &p, zo, zb, false);
    let v = g.val(fwd.composite);
    Ok(v.clone().into_dimensionality().expect("composite is 4-d"))
}

// ---- spectral normalization ----

/// Power-iteration state for one weight matrix. `u` stays unit-norm.
#[derive(Debug, Clone)]
pub struct SpectralNormState<F: Scalar> {
    pub u: Array1<F>,
    pub iterations: u64,
}

impl<F: Scalar> SpectralNormState<F> {
    pub fn init(rows: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Uniform::new(F::c(-1.0), F::one());
        let raw = Array1::from_shape_simple_fn(rows, || dist.sample(rng));
        SpectralNormState { u: normalized(&raw), iterations: 0 }
    }
}

fn normalized<F: Scalar>(x: &Array1<F>) -> Array1<F> {
    let norm = x.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b).sqrt();
    let floor = F::c(SPECTRAL_FLOOR);
    x.mapv(|v| v / norm.max(floor))
}

/// One power-iteration step: updates `state.u`, returns `W / sigma_hat` and
/// the estimate. A zero matrix keeps `u` unchanged and returns zeros.
pub fn spectral_normalize<F: Scalar>(
    w: &ArrayView2<F>,
    state: &mut SpectralNormState<F>,
) -> (Array2<F>, F) {
    assert_eq!(w.nrows(), state.u.len(), "u length must match rows");
    let floor = F::c(SPECTRAL_FLOOR);
    let v_raw = w.t().dot(&state.u);
    let v_norm = v_raw.iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b).sqrt();
    state.iterations += 1;
    if v_norm < floor {
        return (Array2::zeros(w.dim()), F::zero());
    }
    let v = v_raw.mapv(|x| x / v_norm);
    let u_raw = w.dot(&v);
    let u_norm = u_raw.iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b).sqrt();
    if u_norm < floor {
        return (Array2::zeros(w.dim()), F::zero());
    }
    state.u = u_raw.mapv(|x| x / u_norm);
    let sigma = state.u.dot(&w.dot(&v));
    let divisor = sigma.max(floor);
    (w.mapv(|x| x / divisor), sigma)
}

/// View an `[O, ...]` weight as the 2-D matrix spectral normalization acts
/// on.
fn as_matrix<F: Scalar>(w: &ArrayD<F>) -> Array2<F> {
    let rows = w.shape()[0];
    let cols: usize = w.shape()[1..].iter().product();
    w.clone()
        .into_shape_with_order((rows, cols))
        .expect("weight reshapes to 2-d")
}

// ---- discriminator ----

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: ModelConfig,
    convs: Vec<Conv2dLayer>,
    bns: Vec<Option<BatchNorm2d>>,
    fc: Linear,
}

impl Discriminator {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.stages();
        let mut convs = Vec::with_capacity(n);
        let mut bns = Vec::with_capacity(n);
        for i in 0..n {
            let in_ch = if i == 0 { 3 } else { cfg.disc_channels << (i - 1) };
            let out_ch = cfg.disc_channels << i;
            convs.push(Conv2dLayer::new(format!("disc.c{i}"), in_ch, out_ch, 4, 2, 1));
            bns.push((i > 0 && !cfg.spectral_norm).then(|| BatchNorm2d::new(format!("disc.bn{i}"), out_ch)));
        }
        let feat = (cfg.disc_channels << (n - 1)) * SEED_SPATIAL * SEED_SPATIAL;
        let fc = Linear::new("disc.fc", feat, 1);
        Ok(Discriminator { cfg, convs, bns, fc })
    }

    fn weight_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.convs.iter().map(|c| c.weight_name()).collect();
        names.push(self.fc.weight_name());
        names
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            conv.init(store, rng, 1.0);
            if let Some(bn) = bn {
                bn.init(store);
            }
        }
        self.fc.init(store, rng, 1.0);
        if self.cfg.spectral_norm {
            for name in self.weight_names() {
                let rows = store.get(&name).shape()[0];
                let state = SpectralNormState::<F>::init(rows, rng);
                store.insert_buffer(format!("{name}.sn_u"), state.u.into_dyn());
            }
        }
    }

    pub fn validate<F: Scalar>(&self, store: &ParamStore<F>) -> Result<()> {
        let mut shapes = Vec::new();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            shapes.push((
                format!("{}.w", conv.name),
                vec![conv.out_ch, conv.in_ch, conv.kernel, conv.kernel],
            ));
            shapes.push((format!("{}.b", conv.name), vec![conv.out_ch]));
            if let Some(bn) = bn {
                bn_shapes(&bn.name, conv.out_ch, &mut shapes);
            }
        }
        shapes.push((format!("{}.w", self.fc.name), vec![1, self.fc.in_dim]));
        shapes.push((format!("{}.b", self.fc.name), vec![1]));
        if self.cfg.spectral_norm {
            for name in self.weight_names() {
                let rows = shapes
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, s)| s[0])
                    .expect("weight listed");
                shapes.push((format!("{name}.sn_u"), vec![rows]));
            }
        }
        check_shapes(store, &shapes)
    }

    /// One power-iteration step on every weight's `u` buffer. Call before
    /// binding the store for a discriminator training step.
    pub fn update_spectral_estimates<F: Scalar>(&self, store: &mut ParamStore<F>) {
        if !self.cfg.spectral_norm {
            return;
        }
        for name in self.weight_names() {
            let w2 = as_matrix(store.get(&name));
            let ubuf = format!("{name}.sn_u");
            let u = store
                .get(&ubuf)
                .clone()
                .into_dimensionality()
                .expect("sn_u is 1-d");
            let mut state = SpectralNormState { u, iterations: 0 };
            let _ = spectral_normalize(&w2.view(), &mut state);
            *store.get_mut(&ubuf) = state.u.into_dyn();
        }
    }

    /// Builds `W / (u^T W v)` in-graph with `u`, `v` held constant, so the
    /// gradient flows through both occurrences of `W`.
    fn normalized_weight<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        store: &ParamStore<F>,
        name: &str,
    ) -> Var {
        let raw = store.get(name);
        let orig_shape = raw.shape().to_vec();
        let w2 = as_matrix(raw);
        let (rows, cols) = w2.dim();
        let u: Array1<F> = store
            .get(&format!("{name}.sn_u"))
            .clone()
            .into_dimensionality()
            .expect("sn_u is 1-d");
        let v = normalized(&w2.t().dot(&u));
        let w_var = p.get(name);
        let w2v = g.reshape(w_var, &[rows, cols]);
        let u_row = g.constant(u.insert_axis(Axis(0)).into_dyn());
        let v_col = g.constant(v.insert_axis(Axis(1)).into_dyn());
        let wv = g.matmul(w2v, v_col);
        let sigma = g.matmul(u_row, wv);
        let sigma = g.clamp_pass(sigma, SPECTRAL_FLOOR, f64::INFINITY);
        let wn = g.div(w2v, sigma);
        g.reshape(wn, &orig_shape)
    }

    /// `x`: `[B,3,S,S]` -> scores `[B]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        store: &ParamStore<F>,
        x: Var,
        training: bool,
        bn_out: &mut Vec<(BatchNorm2d, BnStats<F>)>,
    ) -> Var {
        let b = g.shape(x)[0];
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            h = if self.cfg.spectral_norm {
                let w = self.normalized_weight(g, p, store, &conv.weight_name());
                conv.apply_with_weight(g, p, w, h)
            } else {
                conv.apply(g, p, h)
            };
            if let Some(bn) = bn {
                let (y, st) = bn.apply(g, p, h, training);
                if let Some(s) = st {
                    bn_out.push((bn.clone(), s));
                }
                h = y;
            }
            h = g.leaky_relu(h, DISC_LEAK);
        }
        let flat = g.reshape(h, &[b, self.fc.in_dim]);
        let scores = if self.cfg.spectral_norm {
            let w = self.normalized_weight(g, p, store, &self.fc.weight_name());
            self.fc.apply_with_weight(g, p, w, flat)
        } else {
            self.fc.apply(g, p, flat)
        };
        g.reshape(scores, &[b])
    }
}

/// Inference scores for an image batch `[B,3,S,S]`.
pub fn discriminator_forward<F: Scalar>(
    disc: &Discriminator,
    store: &ParamStore<F>,
    images: &Array4<F>,
) -> Result<Array1<F>> {
    let (b, c, h, w) = images.dim();
    let s = disc.cfg.image_size;
    if b == 0 || c != 3 || h != s || w != s {
        return Err(Error::shape(format!(
            "discriminator expects [B,3,{s},{s}] images, got {:?}",
            images.dim()
        )));
    }
    if images.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerics("discriminator input contains non-finite values"));
    }
    disc.validate(store)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(images.clone().into_dyn());
    let mut bn = Vec::new();
    let scores = disc.forward(&mut g, &p, store, x, false, &mut bn);
    Ok(g.val(scores)
        .clone()
        .into_dimensionality()
        .expect("scores are 1-d"))
}

// ---- checkpoints ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<F>,
) -> Result<()> {
    let header = serde_json::to_string(meta)
        .map_err(|e| Error::data(format!("checkpoint meta serialization: {e}")))?;
    store.save(path, &header)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(CheckpointMeta, ParamStore<F>)> {
    let (store, header) = ParamStore::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&header)
        .map_err(|e| Error::data(format!("checkpoint meta malformed: {e}")))?;
    meta.config.validate()?;
    Ok((meta, store))
}

/// Load and insist the stored config equals `expected`.
pub fn load_checkpoint_matching<F: Scalar>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(CheckpointMeta, ParamStore<F>)> {
    let (meta, store) = load_checkpoint(path)?;
    if meta.config != *expected {
        return Err(Error::config(format!(
            "checkpoint at {} was trained with a different model config",
            path.display()
        )));
    }
    Ok((meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::s;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            k: 3,
            gen_channels: 16,
            disc_channels: 8,
            latent_dim: 12,
            ..Default::default()
        }
    }

    fn build_generator(cfg: ModelConfig, seed: u64) -> (Generator, ParamStore<f64>) {
        let gen = Generator::new(cfg).unwrap();
        let mut store = ParamStore::new();
        gen.init(&mut store, &mut stream(seed, "gen-init", 0));
        (gen, store)
    }

    #[test]
    fn sampled_latents_have_declared_shape_and_range() {
        let cfg = ModelConfig { k: 3, ..Default::default() };
        let set = sample_latents::<f64>(&cfg, &mut stream(1, "latents", 0));
        assert_eq!(set.objects.dim(), (3, 64));
        assert!(set.background.is_none());
        assert!(set.objects.iter().all(|v| (-1.0..=1.0).contains(v)));

        let cfg_bg = ModelConfig {
            use_background: true,
            compose: ComposeMode::LearnedAlpha,
            ..cfg
        };
        let set = sample_latents::<f64>(&cfg_bg, &mut stream(1, "latents", 0));
        assert_eq!(set.background.as_ref().unwrap().len(), 64);
    }

    #[test]
    fn same_stream_gives_identical_latents() {
        let cfg = ModelConfig::default();
        let a = sample_latents::<f64>(&cfg, &mut stream(7, "latents", 3));
        let b = sample_latents::<f64>(&cfg, &mut stream(7, "latents", 3));
        assert_eq!(a.objects, b.objects);
    }

    #[test]
    fn latent_prior_is_centered() {
        let cfg = ModelConfig { k: 1, ..Default::default() };
        let mut rng = stream(2, "latents-mc", 0);
        let n = 100_000;
        let mut acc = Array1::<f64>::zeros(64);
        for _ in 0..n {
            let set = sample_latents::<f64>(&cfg, &mut rng);
            acc += &set.objects.row(0);
        }
        acc /= n as f64;
        for &m in acc.iter() {
            assert!(m.abs() < 0.01, "coordinate mean {m}");
        }
    }

    #[test]
    fn generate_shapes_and_partition_of_unity() {
        let cfg = ModelConfig {
            k: 5,
            compose: ComposeMode::LearnedAlpha,
            use_background: true,
            ..tiny_cfg()
        };
        let (gen, store) = build_generator(cfg.clone(), 3);
        let latents = sample_latents(&cfg, &mut stream(3, "latents", 1));
        let out = generate(&gen, &store, &latents).unwrap();
        assert_eq!(out.composite.image.dim(), (64, 64, 3));
        assert!(out.composite.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.composite.layer_weights.dim(), (6, 64, 64));
        assert_eq!(out.components.len(), 5);
        for y in 0..64 {
            for x in 0..64 {
                let s: f64 = (0..6).map(|i| out.composite.layer_weights[[i, y, x]]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn components_are_independent_without_relational_stage() {
        let cfg = tiny_cfg();
        let (gen, store) = build_generator(cfg.clone(), 4);
        let latents = sample_latents(&cfg, &mut stream(4, "latents", 0));
        let base = generate(&gen, &store, &latents).unwrap();
        let mut nudged = latents.clone();
        nudged.objects[[2, 0]] = -nudged.objects[[2, 0]];
        let out = generate(&gen, &store, &nudged).unwrap();
        for i in 0..2 {
            let same = base.components[i]
                .color
                .iter()
                .zip(out.components[i].color.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "component {i} changed");
        }
        assert_ne!(base.components[2].color, out.components[2].color);
    }

    #[test]
    fn identical_latents_decode_identically() {
        let cfg = tiny_cfg();
        let (gen, store) = build_generator(cfg.clone(), 5);
        let mut latents = sample_latents(&cfg, &mut stream(5, "latents", 0));
        let row = latents.objects.row(0).to_owned();
        latents.objects.row_mut(1).assign(&row);
        let out = generate(&gen, &store, &latents).unwrap();
        let same = out.components[0]
            .color
            .iter()
            .zip(out.components[1].color.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn generate_is_pure() {
        let cfg = ModelConfig {
            compose: ComposeMode::ThresholdAlpha,
            use_background: true,
            ..tiny_cfg()
        };
        let (gen, store) = build_generator(cfg.clone(), 6);
        let latents = sample_latents(&cfg, &mut stream(6, "latents", 0));
        let a = generate(&gen, &store, &latents).unwrap();
        let b = generate(&gen, &store, &latents).unwrap();
        let same = a
            .composite
            .image
            .iter()
            .zip(b.composite.image.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }

    #[test]
    fn object_path_parameter_count_is_independent_of_k() {
        let (_, store3) = build_generator(ModelConfig { k: 3, ..tiny_cfg() }, 7);
        let (_, store5) = build_generator(ModelConfig { k: 5, ..tiny_cfg() }, 7);
        let names3: Vec<&str> = store3.names().collect();
        let names5: Vec<&str> = store5.names().collect();
        assert_eq!(names3, names5);
        assert_eq!(store3.trainable_len(), store5.trainable_len());
    }

    #[test]
    fn latent_mismatch_is_an_error() {
        let cfg = tiny_cfg();
        let (gen, store) = build_generator(cfg.clone(), 8);
        let wrong_k = LatentSet::<f64> {
            objects: Array2::zeros((2, cfg.latent_dim)),
            background: None,
        };
        assert!(generate(&gen, &store, &wrong_k).is_err());
        // outside the prior's range: rejected as a prior draw, but still
        // generates (latent traversals walk past the prior on purpose)
        let out_of_range = LatentSet::<f64> {
            objects: Array2::from_elem((cfg.k, cfg.latent_dim), 1.5),
            background: None,
        };
        assert!(out_of_range.validate(&cfg).is_err());
        assert!(generate(&gen, &store, &out_of_range).is_ok());
        let spurious_bg = LatentSet::<f64> {
            objects: Array2::zeros((cfg.k, cfg.latent_dim)),
            background: Some(Array1::zeros(cfg.latent_dim)),
        };
        assert!(generate(&gen, &store, &spurious_bg).is_err());
    }

    #[test]
    fn gradients_reach_every_object_latent() {
        for compose in [ComposeMode::LearnedAlpha, ComposeMode::ThresholdAlpha] {
            let cfg = ModelConfig {
                compose,
                use_background: true,
                k: 2,
                ..tiny_cfg()
            };
            let (gen, store) = build_generator(cfg.clone(), 9);
            let mut g = Graph::<f64>::new();
            let p = store.bind_frozen(&mut g);
            let (zo, zb) = sample_latent_batch::<f64>(&cfg, &mut stream(9, "latents", 0), 1);
            let z_obj = g.param(zo.into_dyn());
            let z_bg = g.constant(zb.unwrap().into_dyn());
            let fwd = gen.forward(&mut g, &p, z_obj, Some(z_bg), true);
            let loss = g.sum_all(fwd.composite);
            let grads = g.backward(loss);
            let gz = grads.wrt(z_obj).expect("latent gradient exists");
            let gv = g.val(gz);
            for k in 0..cfg.k {
                let row = gv.slice(s![0, k, ..]);
                let norm: f64 = row.iter().map(|v| v * v).sum();
                assert!(norm > 0.0, "{compose:?}: latent {k} got zero gradient");
            }
        }
    }

    #[test]
    fn discriminator_scores_batch() {
        let cfg = tiny_cfg();
        let disc = Discriminator::new(cfg.clone()).unwrap();
        let mut store = ParamStore::<f64>::new();
        disc.init(&mut store, &mut stream(10, "disc-init", 0));
        let mut rng = stream(10, "disc", 1);
        let dist = Uniform::new(0.0, 1.0);
        let mut images = Array4::from_shape_simple_fn((4, 3, 64, 64), || dist.sample(&mut rng));
        // duplicate row 2 into row 3
        let dup = images.index_axis(Axis(0), 2).to_owned();
        images.index_axis_mut(Axis(0), 3).assign(&dup);
        let scores = discriminator_forward(&disc, &store, &images).unwrap();
        assert_eq!(scores.len(), 4);
        assert_eq!(scores[2].to_bits(), scores[3].to_bits());

        let wrong = Array4::<f64>::zeros((2, 3, 32, 32));
        assert!(discriminator_forward(&disc, &store, &wrong).is_err());
    }

    #[test]
    fn power_iteration_matches_diagonal_and_orthogonal_cases() {
        // diagonal(3, 1): top singular value 3
        let w = ndarray::arr2(&[[3.0, 0.0], [0.0, 1.0]]);
        let mut state = SpectralNormState::<f64>::init(2, &mut stream(11, "sn", 0));
        let mut last = (Array2::zeros((2, 2)), 0.0);
        for _ in 0..50 {
            last = spectral_normalize(&w.view(), &mut state);
        }
        assert!((last.1 - 3.0).abs() < 1e-6, "sigma {}", last.1);
        assert!((last.0[[0, 0]] - 1.0).abs() < 1e-6);
        let unorm: f64 = state.u.iter().map(|v| v * v).sum();
        assert!((unorm - 1.0).abs() < 1e-12);

        // rotation matrix: spectral norm 1, unchanged
        let th = 0.7f64;
        let q = ndarray::arr2(&[[th.cos(), -th.sin()], [th.sin(), th.cos()]]);
        let mut state = SpectralNormState::<f64>::init(2, &mut stream(11, "sn", 1));
        let mut out = (Array2::zeros((2, 2)), 0.0);
        for _ in 0..20 {
            out = spectral_normalize(&q.view(), &mut state);
        }
        for (a, b) in out.0.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-3);
        }

        // zero matrix: zeros out, u preserved
        let z = Array2::<f64>::zeros((3, 2));
        let mut state = SpectralNormState::<f64>::init(3, &mut stream(11, "sn", 2));
        let u_before = state.u.clone();
        let (wn, sigma) = spectral_normalize(&z.view(), &mut state);
        assert_eq!(sigma, 0.0);
        assert!(wn.iter().all(|&v| v == 0.0));
        assert_eq!(state.u, u_before);
    }

    #[test]
    fn power_iteration_matches_svd_oracle() {
        let mut rng = stream(12, "sn-svd", 0);
        let dist = Uniform::new(-1.0, 1.0);
        let w = Array2::from_shape_simple_fn((64, 32), || dist.sample(&mut rng));
        let mut state = SpectralNormState::<f64>::init(64, &mut stream(12, "sn-svd", 1));
        let mut sigma = 0.0;
        for _ in 0..50 {
            sigma = spectral_normalize(&w.view(), &mut state).1;
        }
        let m = nalgebra::DMatrix::from_fn(64, 32, |i, j| w[[i, j]]);
        let svd = m.svd(false, false);
        let top = svd.singular_values.max();
        assert!(
            (sigma - top).abs() / top < 0.01,
            "power iteration {sigma} vs svd {top}"
        );
    }

    #[test]
    fn normalized_discriminator_weights_have_unit_spectral_norm() {
        let cfg = ModelConfig { spectral_norm: true, ..tiny_cfg() };
        let disc = Discriminator::new(cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        disc.init(&mut store, &mut stream(13, "disc-init", 0));
        for _ in 0..50 {
            disc.update_spectral_estimates(&mut store);
        }
        for name in disc.weight_names() {
            let w2 = as_matrix(store.get(&name));
            let u: Array1<f64> = store
                .get(&format!("{name}.sn_u"))
                .clone()
                .into_dimensionality()
                .unwrap();
            let v = normalized(&w2.t().dot(&u));
            let sigma = u.dot(&w2.dot(&v));
            let eff = w2.mapv(|x| x / sigma);
            let m = nalgebra::DMatrix::from_fn(eff.nrows(), eff.ncols(), |i, j| eff[[i, j]]);
            let top = m.svd(false, false).singular_values.max();
            assert!((top - 1.0).abs() < 1e-2, "{name}: effective spectral norm {top}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_config_mismatch() {
        let cfg = tiny_cfg();
        let (_, store) = build_generator(cfg.clone(), 14);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta { config: cfg.clone(), step: 1234 };
        save_checkpoint(&path, &meta, &store).unwrap();
        let (meta2, store2) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(store2.get("gen.obj.fc.w"), store.get("gen.obj.fc.w"));

        let other = ModelConfig { k: 4, ..cfg };
        assert!(load_checkpoint_matching::<f64>(&path, &other).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected()  {
        let bad_bg = ModelConfig {
            use_background: true,
            compose: ComposeMode::SumClip,
            ..Default::default()
        };
        assert!(bad_bg.validate().is_err());
        let bad_size = ModelConfig { image_size: 96, ..Default::default() };
        assert!(bad_size.validate().is_err());
        let bad_rel = ModelConfig {
            relational: RelationalConfig { include_background: true, ..Default::default() },
            ..Default::default()
        };
        assert!(bad_rel.validate().is_err());
        let bad_k = ModelConfig { k: 0, ..Default::default() };
        assert!(bad_k.validate().is_err());
    }
}
