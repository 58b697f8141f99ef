//! Relational refinement of object latents with multi-head dot-product
//! attention.
//!
//! Each block projects every latent to query/key/value vectors (linear,
//! ReLU, layer norm), attends with `softmax(QK^T / sqrt(d)) V`, maps the
//! attended vector through a two-layer update MLP, and adds the result back
//! onto the input latent followed by layer normalization. With more than one
//! head the per-head update candidates are concatenated and passed through a
//! combiner layer before the single residual addition. Zero blocks means the
//! stage is the identity.
//!
//! The background latent can either join the attention as an extra row or
//! bypass the stage untouched, controlled by [`RelationalConfig`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{BoundParams, ParamStore};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Width of query/key/value vectors.
pub const ATTN_PROJ_DIM: usize = 32;
/// Hidden width of the update MLP.
pub const ATTN_UPDATE_HIDDEN: usize = 64;
/// Init scale applied to the final pre-residual linear layer so a fresh
/// stage starts near the identity.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationalConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub share_across_blocks: bool,
    pub include_background: bool,
}

impl Default for RelationalConfig {
    fn default() -> Self {
        RelationalConfig {
            n_blocks: 0,
            n_heads: 1,
            share_across_blocks: false,
            include_background: false,
        }
    }
}

impl RelationalConfig {
    pub fn is_identity(&self) -> bool {
        self.n_blocks == 0
    }

    /// Number of parameter sets actually stored (1 when sharing).
    pub fn distinct_blocks(&self) -> usize {
        if self.share_across_blocks {
            self.n_blocks.min(1)
        } else {
            self.n_blocks
        }
    }
}

/// Linear, ReLU, layer norm.
#[derive(Debug, Clone)]
struct Projection {
    fc: Linear,
    ln: LayerNorm,
}

impl Projection {
    fn define(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Projection {
            fc: Linear::new(format!("{prefix}.fc"), in_dim, out_dim),
            ln: LayerNorm::new(format!("{prefix}.ln"), out_dim),
        }
    }

    fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.fc.init(store, rng, 1.0);
        self.ln.init(store);
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &BoundParams, x: Var) -> Var {
        let y = self.fc.apply(g, p, x);
        let y = g.relu(y);
        self.ln.apply(g, p, y)
    }

    fn shapes(&self, out: &mut Vec<(String, Vec<usize>)>) {
        out.push((format!("{}.w", self.fc.name), vec![self.fc.out_dim, self.fc.in_dim]));
        out.push((format!("{}.b", self.fc.name), vec![self.fc.out_dim]));
        out.push((format!("{}.gain", self.ln.name), vec![self.ln.dim]));
        out.push((format!("{}.bias", self.ln.name), vec![self.ln.dim]));
    }
}

fn linear_shapes(l: &Linear, out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{}.w", l.name), vec![l.out_dim, l.in_dim]));
    out.push((format!("{}.b", l.name), vec![l.out_dim]));
}

fn ln_shapes(l: &LayerNorm, out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{}.gain", l.name), vec![l.dim]));
    out.push((format!("{}.bias", l.name), vec![l.dim]));
}

#[derive(Debug, Clone)]
pub struct AttentionHeadParams {
    q: Projection,
    k: Projection,
    v: Projection,
    u1: Linear,
    u2: Linear,
    pub latent: usize,
}

impl AttentionHeadParams {
    pub fn define(prefix: &str, latent: usize) -> Self {
        AttentionHeadParams {
            q: Projection::define(&format!("{prefix}.q"), latent, ATTN_PROJ_DIM),
            k: Projection::define(&format!("{prefix}.k"), latent, ATTN_PROJ_DIM),
            v: Projection::define(&format!("{prefix}.v"), latent, ATTN_PROJ_DIM),
            u1: Linear::new(format!("{prefix}.u1"), ATTN_PROJ_DIM, ATTN_UPDATE_HIDDEN),
            u2: Linear::new(format!("{prefix}.u2"), ATTN_UPDATE_HIDDEN, latent),
            latent,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.q.init(store, rng);
        self.k.init(store, rng);
        self.v.init(store, rng);
        self.u1.init(store, rng, 1.0);
        self.u2.init(store, rng, 1.0);
    }

    /// `z3`: `[B,N,latent]`. Returns pre-residual update candidates
    /// `[B,N,latent]` and the attention weights `[B,N,N]`.
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &BoundParams, z3: Var) -> (Var, Var) {
        let shape = g.shape(z3).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let z2 = g.reshape(z3, &[b * n, d]);
        let q = self.q.apply(g, p, z2);
        let k = self.k.apply(g, p, z2);
        let v = self.v.apply(g, p, z2);
        let q3 = g.reshape(q, &[b, n, ATTN_PROJ_DIM]);
        let k3 = g.reshape(k, &[b, n, ATTN_PROJ_DIM]);
        let v3 = g.reshape(v, &[b, n, ATTN_PROJ_DIM]);
        let k3t = g.transpose(k3, &[0, 2, 1]);
        let logits = g.bmm(q3, k3t);
        let scaled = g.mul_scalar(logits, 1.0 / (ATTN_PROJ_DIM as f64).sqrt());
        let weights = g.softmax_last(scaled);
        let attended = g.bmm(weights, v3);
        let a2 = g.reshape(attended, &[b * n, ATTN_PROJ_DIM]);
        let h = self.u1.apply(g, p, a2);
        let h = g.relu(h);
        let u = self.u2.apply(g, p, h);
        let u = g.relu(u);
        let cand = g.reshape(u, &[b, n, self.latent]);
        (cand, weights)
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.q.shapes(&mut out);
        self.k.shapes(&mut out);
        self.v.shapes(&mut out);
        linear_shapes(&self.u1, &mut out);
        linear_shapes(&self.u2, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct AttentionBlockParams {
    pub heads: Vec<AttentionHeadParams>,
    combiner: Option<(Linear, LayerNorm)>,
    ln_out: LayerNorm,
    pub latent: usize,
}

impl AttentionBlockParams {
    pub fn define(prefix: &str, n_heads: usize, latent: usize) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::config("attention block needs at least one head"));
        }
        let heads = (0..n_heads)
            .map(|h| AttentionHeadParams::define(&format!("{prefix}.h{h}"), latent))
            .collect();
        let combiner = (n_heads > 1).then(|| {
            (
                Linear::new(format!("{prefix}.comb.fc"), n_heads * latent, latent),
                LayerNorm::new(format!("{prefix}.comb.ln"), latent),
            )
        });
        Ok(AttentionBlockParams {
            heads,
            combiner,
            ln_out: LayerNorm::new(format!("{prefix}.ln_out"), latent),
            latent,
        })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for head in &self.heads {
            head.init(store, rng);
        }
        if let Some((fc, ln)) = &self.combiner {
            fc.init(store, rng, 1.0);
            ln.init(store);
        }
        self.ln_out.init(store);
        // Scale the last linear layer before the residual so the block
        // starts close to the identity.
        let final_weights: Vec<String> = match &self.combiner {
            Some((fc, _)) => vec![fc.weight_name()],
            None => self.heads.iter().map(|h| h.u2.weight_name()).collect(),
        };
        for name in final_weights {
            let w = store.get_mut(&name);
            *w = &*w * F::c(RESIDUAL_INIT_SCALE);
        }
    }

    /// `z3`: `[B,N,latent]` -> updated latents `[B,N,latent]`.
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &BoundParams, z3: Var) -> Var {
        let shape = g.shape(z3).to_vec();
        let (b, n) = (shape[0], shape[1]);
        let cands: Vec<Var> = self.heads.iter().map(|h| h.apply(g, p, z3).0).collect();
        let update = match &self.combiner {
            None => cands[0],
            Some((fc, ln)) => {
                let cat = g.concat(&cands, 2);
                let cat2 = g.reshape(cat, &[b * n, self.heads.len() * self.latent]);
                let y = fc.apply(g, p, cat2);
                let y = g.relu(y);
                let y = ln.apply(g, p, y);
                g.reshape(y, &[b, n, self.latent])
            }
        };
        let res = g.add(z3, update);
        self.ln_out.apply(g, p, res)
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.extend(h.shapes());
        }
        if let Some((fc, ln)) = &self.combiner {
            linear_shapes(fc, &mut out);
            ln_shapes(ln, &mut out);
        }
        ln_shapes(&self.ln_out, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct RelationalParams {
    pub cfg: RelationalConfig,
    pub latent: usize,
    /// Distinct parameter sets; length 1 when sharing is on.
    pub blocks: Vec<AttentionBlockParams>,
}

impl RelationalParams {
    pub fn define(prefix: &str, cfg: RelationalConfig, latent: usize) -> Result<Self> {
        let blocks = (0..cfg.distinct_blocks())
            .map(|i| AttentionBlockParams::define(&format!("{prefix}.b{i}"), cfg.n_heads, latent))
            .collect::<Result<Vec<_>>>()?;
        Ok(RelationalParams { cfg, latent, blocks })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// Checks that `store` holds every tensor this stage needs, at the right
    /// shape.
    pub fn validate<F: Scalar>(&self, store: &ParamStore<F>) -> Result<()> {
        for block in &self.blocks {
            for (name, shape) in block.shapes() {
                if !store.contains(&name) {
                    return Err(Error::config(format!("missing parameter {name}")));
                }
                if store.get(&name).shape() != shape.as_slice() {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        store.get(&name).shape(),
                        shape
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies the configured number of blocks to `z3` `[B,N,latent]`.
    /// Callers decide whether the background latent is among the N rows.
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &BoundParams, z3: Var) -> Var {
        let mut z = z3;
        for i in 0..self.cfg.n_blocks {
            let block = if self.cfg.share_across_blocks { &self.blocks[0] } else { &self.blocks[i] };
            z = block.apply(g, p, z);
        }
        z
    }
}

fn require_finite<F: Scalar>(vals: impl IntoIterator<Item = F>, what: &str) -> Result<()> {
    if vals.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::numerics(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Attention core: `softmax(q k^T / sqrt(d)) v`.
/// `q`: `[N,d]`, `k`: `[M,d]`, `v`: `[M,dv]`.
#[derive(Debug, Clone)]
pub struct AttentionOutput<F: Scalar> {
    /// `[N, dv]`
    pub output: Array2<F>,
    /// Row-stochastic `[N, M]`.
    pub weights: Array2<F>,
}

pub fn scaled_dot_attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
) -> Result<AttentionOutput<F>> {
    let (n, d) = q.dim();
    let (m, dk) = k.dim();
    if dk != d {
        return Err(Error::shape("query/key width mismatch"));
    }
    if v.nrows() != m {
        return Err(Error::shape("key/value row count mismatch"));
    }
    require_finite(q.iter().chain(k).chain(v).cloned(), "attention inputs")?;
    let scale = F::c(1.0 / (d as f64).sqrt());
    let mut weights = Array2::<F>::zeros((n, m));
    for i in 0..n {
        let mut row = Array1::<F>::zeros(m);
        for j in 0..m {
            row[j] = q.row(i).dot(&k.row(j)) * scale;
        }
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for j in 0..m {
            row[j] = (row[j] - max).exp();
            denom += row[j];
        }
        for j in 0..m {
            weights[[i, j]] = row[j] / denom;
        }
    }
    let output = weights.dot(v);
    Ok(AttentionOutput { output, weights })
}

#[derive(Debug, Clone)]
pub struct HeadOutput<F: Scalar> {
    /// Pre-residual update candidates `[N, latent]`.
    pub candidates: Array2<F>,
    /// `[N, N]` attention weights.
    pub weights: Array2<F>,
}

fn eval_rows<F: Scalar, R>(
    store: &ParamStore<F>,
    latents: &Array2<F>,
    run: impl FnOnce(&mut Graph<F>, &BoundParams, Var) -> R,
) -> R {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let z = g.constant(latents.clone().insert_axis(Axis(0)).into_dyn());
    run(&mut g, &p, z)
}

/// Runs one attention head on `[N, latent]` rows.
pub fn attention_head<F: Scalar>(
    store: &ParamStore<F>,
    head: &AttentionHeadParams,
    latents: &Array2<F>,
) -> Result<HeadOutput<F>> {
    if latents.nrows() == 0 {
        return Err(Error::shape("attention needs at least one latent row"));
    }
    if latents.ncols() != head.latent {
        return Err(Error::shape("latent width does not match head parameters"));
    }
    require_finite(latents.iter().cloned(), "latents")?;
    let n = latents.nrows();
    Ok(eval_rows(store, latents, |g, p, z| {
        let (cand, w) = head.apply(g, p, z);
        let candidates = g
            .val(cand)
            .clone()
            .into_shape_with_order((n, head.latent))
            .expect("candidate shape");
        let weights = g.val(w).clone().into_shape_with_order((n, n)).expect("weight shape");
        HeadOutput { candidates, weights }
    }))
}

/// Runs one full attention block (heads, combiner, residual, norm) on
/// `[N, latent]` rows.
pub fn attention_block<F: Scalar>(
    store: &ParamStore<F>,
    block: &AttentionBlockParams,
    latents: &Array2<F>,
) -> Result<Array2<F>> {
    if latents.nrows() == 0 {
        return Err(Error::shape("attention needs at least one latent row"));
    }
    if latents.ncols() != block.latent {
        return Err(Error::shape("latent width does not match block parameters"));
    }
    require_finite(latents.iter().cloned(), "latents")?;
    let n = latents.nrows();
    Ok(eval_rows(store, latents, |g, p, z| {
        let out = block.apply(g, p, z);
        g.val(out)
            .clone()
            .into_shape_with_order((n, block.latent))
            .expect("block output shape")
    }))
}

/// Applies the whole relational stage to K object latents and an optional
/// background latent. With `include_background` the background joins the
/// attention as the last row and is returned updated; otherwise it is
/// returned untouched.
pub fn relational_stage<F: Scalar>(
    store: &ParamStore<F>,
    params: &RelationalParams,
    latents: &Array2<F>,
    background: Option<&Array1<F>>,
) -> Result<(Array2<F>, Option<Array1<F>>)> {
    if latents.nrows() == 0 {
        return Err(Error::shape("relational stage needs at least one latent row"));
    }
    if latents.ncols() != params.latent {
        return Err(Error::shape("latent width does not match stage parameters"));
    }
    if let Some(bg) = background {
        if bg.len() != params.latent {
            return Err(Error::shape("background latent width mismatch"));
        }
        require_finite(bg.iter().cloned(), "background latent")?;
    }
    require_finite(latents.iter().cloned(), "latents")?;
    params.validate(store)?;

    if params.cfg.is_identity() {
        return Ok((latents.clone(), background.cloned()));
    }

    let k = latents.nrows();
    let joins = params.cfg.include_background && background.is_some();
    let rows = if joins {
        let mut rows = Array2::<F>::zeros((k + 1, params.latent));
        rows.slice_mut(ndarray::s![..k, ..]).assign(latents);
        rows.row_mut(k).assign(background.expect("checked"));
        rows
    } else {
        latents.clone()
    };
    let n = rows.nrows();
    let out = eval_rows(store, &rows, |g, p, z| {
        let out = params.apply(g, p, z);
        g.val(out)
            .clone()
            .into_shape_with_order((n, params.latent))
            .expect("stage output shape")
    });
    if joins {
        let objects = out.slice(ndarray::s![..k, ..]).to_owned();
        let bg = out.row(k).to_owned();
        Ok((objects, Some(bg)))
    } else {
        Ok((out, background.cloned()))
    }
}
