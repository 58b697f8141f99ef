//! Image composition operators.
//!
//! Two ways to merge K decoded object layers into one image:
//!
//! * summation with clipping: `image = clip(sum_i color_i, 0, 1)`,
//! * fixed-order alpha compositing against an opaque background:
//!
//! ```text
//! image = sum_i x_i a_i prod_{j<i} (1 - a_j)  +  x_b prod_i (1 - a_i)
//! ```
//!
//! Component index 1 is front-most: its alpha is unattenuated and every
//! later layer is visible only through the transparency of the layers before
//! it. The per-layer factors `w_i = a_i prod_{j<i}(1-a_j)` and
//! `w_bg = prod_i(1-a_i)` form a partition of unity at every pixel, which is
//! what makes the composite a convex blend and is tested as such.
//!
//! Eager functions operate on `[H,W,3]` colors / `[H,W]` alphas and
//! validate shapes; the `*_graph` builders are the batched NCHW forms the
//! generator differentiates through.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

/// Threshold shared by composition masks, alpha thresholding, and label
/// extraction: a pixel "belongs" to a component when its color intensity
/// (maximum channel) exceeds this value.
pub const CONTRIBUTION_THRESHOLD: f64 = 0.1;

/// How decoded object layers merge into an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    /// Clipped sum of colors (no alphas, no background).
    SumClip,
    /// Alpha compositing with alphas derived by thresholding color intensity.
    ThresholdAlpha,
    /// Alpha compositing with generator-emitted alpha channels.
    LearnedAlpha,
}

impl ComposeMode {
    pub fn uses_alpha(self) -> bool {
        !matches!(self, ComposeMode::SumClip)
    }
}

/// One decoded layer: color in `[0,1]`, plus an alpha map for the
/// compositing modes.
#[derive(Debug, Clone)]
pub struct ComponentImage<F: Scalar> {
    /// `[H, W, 3]`
    pub color: Array3<F>,
    /// `[H, W]`, present for alpha compositing.
    pub alpha: Option<Array2<F>>,
}

impl<F: Scalar> ComponentImage<F> {
    pub fn opaque(color: Array3<F>) -> Self {
        ComponentImage { color, alpha: None }
    }

    pub fn with_alpha(color: Array3<F>, alpha: Array2<F>) -> Self {
        ComponentImage { color, alpha: Some(alpha) }
    }

    fn spatial(&self) -> (usize, usize) {
        (self.color.shape()[0], self.color.shape()[1])
    }
}

/// Composite image plus the per-layer weight maps (K object rows followed by
/// one background row).
#[derive(Debug, Clone)]
pub struct CompositeResult<F: Scalar> {
    /// `[H, W, 3]`
    pub image: Array3<F>,
    /// `[K+1, H, W]`; in alpha mode these are the convex visibility weights,
    /// in sum mode rows 0..K are contribution masks (intensity above
    /// [`CONTRIBUTION_THRESHOLD`]) and the last row marks pixels no
    /// component claimed.
    pub layer_weights: Array3<F>,
}

fn check_components<F: Scalar>(
    components: &[ComponentImage<F>],
    need_alpha: bool,
) -> Result<(usize, usize)> {
    let first = components
        .first()
        .ok_or_else(|| Error::shape("composition needs at least one component"))?;
    let (h, w) = first.spatial();
    for (i, c) in components.iter().enumerate() {
        if c.color.shape()[2] != 3 {
            return Err(Error::shape(format!("component {i}: color must be [H,W,3]")));
        }
        if c.spatial() != (h, w) {
            return Err(Error::shape(format!(
                "component {i}: spatial size {:?} differs from {:?}",
                c.spatial(),
                (h, w)
            )));
        }
        match (&c.alpha, need_alpha) {
            (Some(a), _) if a.dim() != (h, w) => {
                return Err(Error::shape(format!("component {i}: alpha size mismatch")))
            }
            (None, true) => {
                return Err(Error::shape(format!("component {i}: alpha required for compositing")))
            }
            _ => {}
        }
    }
    Ok((h, w))
}

/// Maximum channel value per pixel.
pub(crate) fn intensity<F: Scalar>(color: &Array3<F>) -> Array2<F> {
    color.map_axis(Axis(2), |px| px.iter().cloned().fold(F::zero(), F::max))
}

/// Clipped sum of component colors. Layer weights are the contribution
/// masks used by label extraction.
pub fn compose_sum<F: Scalar>(components: &[ComponentImage<F>]) -> Result<CompositeResult<F>> {
    let (h, w) = check_components(components, false)?;
    let mut acc = Array3::<F>::zeros((h, w, 3));
    for c in components {
        acc = acc + &c.color;
    }
    let image = acc.mapv(|v| v.max(F::zero()).min(F::one()));
    let thresh = F::c(CONTRIBUTION_THRESHOLD);
    let k = components.len();
    let mut layer_weights = Array3::<F>::zeros((k + 1, h, w));
    for (i, c) in components.iter().enumerate() {
        let mask = intensity(&c.color).mapv(|v| if v > thresh { F::one() } else { F::zero() });
        layer_weights.index_axis_mut(Axis(0), i).assign(&mask);
    }
    for y in 0..h {
        for x in 0..w {
            let claimed = (0..k).any(|i| layer_weights[[i, y, x]] > F::zero());
            layer_weights[[k, y, x]] = if claimed { F::zero() } else { F::one() };
        }
    }
    Ok(CompositeResult { image, layer_weights })
}

/// Per-layer convex weights of fixed-order alpha compositing: K object rows
/// and one background row, a partition of unity at every pixel.
pub fn composite_weights<F: Scalar>(
    components: &[ComponentImage<F>],
    background: &ComponentImage<F>,
) -> Result<Array3<F>> {
    let (h, w) = check_components(components, true)?;
    if background.spatial() != (h, w) {
        return Err(Error::shape("background spatial size mismatch"));
    }
    if background.alpha.is_some() {
        return Err(Error::shape("background must be opaque (no alpha)"));
    }
    let k = components.len();
    let mut weights = Array3::<F>::zeros((k + 1, h, w));
    let mut visibility = Array2::<F>::from_elem((h, w), F::one());
    for (i, c) in components.iter().enumerate() {
        let alpha = c.alpha.as_ref().expect("checked above");
        let wi = alpha * &visibility;
        weights.index_axis_mut(Axis(0), i).assign(&wi);
        visibility = visibility * &alpha.mapv(|a| F::one() - a);
    }
    weights.index_axis_mut(Axis(0), k).assign(&visibility);
    Ok(weights)
}

/// Fixed-order alpha compositing of object layers over an opaque background.
pub fn alpha_composite<F: Scalar>(
    components: &[ComponentImage<F>],
    background: &ComponentImage<F>,
) -> Result<CompositeResult<F>> {
    let layer_weights = composite_weights(components, background)?;
    let (h, w) = background.spatial();
    let mut image = Array3::<F>::zeros((h, w, 3));
    for (i, c) in components.iter().enumerate() {
        let wi = layer_weights.index_axis(Axis(0), i);
        for ch in 0..3 {
            let mut plane = image.index_axis_mut(Axis(2), ch);
            plane += &(&c.color.index_axis(Axis(2), ch) * &wi);
        }
    }
    let wbg = layer_weights.index_axis(Axis(0), components.len());
    for ch in 0..3 {
        let mut plane = image.index_axis_mut(Axis(2), ch);
        plane += &(&background.color.index_axis(Axis(2), ch) * &wbg);
    }
    Ok(CompositeResult { image, layer_weights })
}

// ---- graph builders (batched NCHW) ----

/// `components`: each `[B,3,H,W]`. Returns `clip(sum, 0, 1)` with
/// pass-through gradient inside the interval.
pub fn compose_sum_graph<F: Scalar>(g: &mut Graph<F>, components: &[Var]) -> Var {
    assert!(!components.is_empty(), "compose_sum_graph needs components");
    let total = g.add_n(components);
    g.clamp_pass(total, 0.0, 1.0)
}

/// Per-layer weights `[B,1,H,W]` for alphas `[B,1,H,W]`; returns K+1 vars,
/// background last.
pub fn composite_weights_graph<F: Scalar>(g: &mut Graph<F>, alphas: &[Var]) -> Vec<Var> {
    let mut weights = Vec::with_capacity(alphas.len() + 1);
    let mut visibility: Option<Var> = None;
    for &alpha in alphas {
        let wi = match visibility {
            Some(vis) => g.mul(alpha, vis),
            None => alpha,
        };
        weights.push(wi);
        let na = g.neg(alpha);
        let one_m = g.add_scalar(na, 1.0);
        visibility = Some(match visibility {
            Some(vis) => g.mul(vis, one_m),
            None => one_m,
        });
    }
    let vis = visibility.expect("at least one component");
    weights.push(vis);
    weights
}

/// Batched compositing that also returns the K+1 per-layer weight maps
/// (background last): colors `[B,3,H,W]`, alphas `[B,1,H,W]`, background
/// `[B,3,H,W]`.
pub fn alpha_composite_with_weights_graph<F: Scalar>(
    g: &mut Graph<F>,
    components: &[(Var, Var)],
    background: Var,
) -> (Var, Vec<Var>) {
    assert!(!components.is_empty(), "alpha_composite_graph needs components");
    let alphas: Vec<Var> = components.iter().map(|&(_, a)| a).collect();
    let weights = composite_weights_graph(g, &alphas);
    let mut out: Option<Var> = None;
    for (&(color, _), &wi) in components.iter().zip(&weights) {
        let term = g.mul(color, wi);
        out = Some(match out {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let bg_term = g.mul(background, weights[components.len()]);
    let acc = out.expect("components non-empty");
    (g.add(acc, bg_term), weights)
}

/// Batched fixed-order alpha compositing without the weight maps.
pub fn alpha_composite_graph<F: Scalar>(
    g: &mut Graph<F>,
    components: &[(Var, Var)],
    background: Var,
) -> Var {
    alpha_composite_with_weights_graph(g, components, background).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::assert_gradients_match;
    use crate::rng::stream;
    use ndarray::{Array2, Array3, IxDyn};
    use rand::Rng;

    fn rand_color(rng: &mut impl Rng, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_simple_fn((h, w, 3), || rng.gen_range(0.0..1.0))
    }

    fn rand_alpha(rng: &mut impl Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((h, w), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn sum_of_single_component_is_identity() {
        let mut rng = stream(1, "compose", 0);
        let c = rand_color(&mut rng, 4, 5);
        let out = compose_sum(&[ComponentImage::opaque(c.clone())]).unwrap();
        assert_eq!(out.image, c);
    }

    #[test]
    fn sum_clips_at_one() {
        let c = Array3::<f64>::from_elem((3, 3, 3), 0.6);
        let out = compose_sum(&[
            ComponentImage::opaque(c.clone()),
            ComponentImage::opaque(c),
        ])
        .unwrap();
        assert!(out.image.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scalar_pixel_example_evaluates_to_0_55() {
        let c1 = ComponentImage::with_alpha(
            Array3::<f64>::from_elem((1, 1, 3), 0.8),
            Array2::from_elem((1, 1), 0.5),
        );
        let c2 = ComponentImage::with_alpha(
            Array3::from_elem((1, 1, 3), 0.4),
            Array2::from_elem((1, 1), 0.5),
        );
        let bg = ComponentImage::opaque(Array3::from_elem((1, 1, 3), 0.2));
        let out = alpha_composite(&[c1, c2], &bg).unwrap();
        assert!((out.image[[0, 0, 0]] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn opaque_front_layer_wins() {
        let mut rng = stream(1, "compose", 1);
        let front = rand_color(&mut rng, 4, 4);
        let c1 = ComponentImage::with_alpha(front.clone(), Array2::from_elem((4, 4), 1.0));
        let c2 = ComponentImage::with_alpha(rand_color(&mut rng, 4, 4), rand_alpha(&mut rng, 4, 4));
        let bg = ComponentImage::opaque(rand_color(&mut rng, 4, 4));
        let out = alpha_composite(&[c1, c2], &bg).unwrap();
        assert!(out
            .image
            .iter()
            .zip(front.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn transparent_layers_pass_background() {
        let mut rng = stream(1, "compose", 2);
        let bgc = rand_color(&mut rng, 4, 4);
        let c1 = ComponentImage::with_alpha(rand_color(&mut rng, 4, 4), Array2::zeros((4, 4)));
        let bg = ComponentImage::opaque(bgc.clone());
        let out = alpha_composite(&[c1], &bg).unwrap();
        assert!(out.image.iter().zip(bgc.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn weights_partition_unity_and_convexity() {
        let mut rng = stream(1, "compose", 3);
        for _ in 0..10 {
            let comps: Vec<_> = (0..3)
                .map(|_| ComponentImage::with_alpha(rand_color(&mut rng, 5, 5), rand_alpha(&mut rng, 5, 5)))
                .collect();
            let bg = ComponentImage::opaque(rand_color(&mut rng, 5, 5));
            let out = alpha_composite(&comps, &bg).unwrap();
            for y in 0..5 {
                for x in 0..5 {
                    let s: f64 = (0..4).map(|i| out.layer_weights[[i, y, x]]).sum();
                    assert!((s - 1.0).abs() < 1e-6, "weight sum {s}");
                    for ch in 0..3 {
                        let px = out.image[[y, x, ch]];
                        let mut lo = bg.color[[y, x, ch]];
                        let mut hi = lo;
                        for c in &comps {
                            lo = lo.min(c.color[[y, x, ch]]);
                            hi = hi.max(c.color[[y, x, ch]]);
                        }
                        assert!(px >= lo - 1e-12 && px <= hi + 1e-12, "convexity {px} not in [{lo},{hi}]");
                    }
                }
            }
        }
    }

    #[test]
    fn order_matters_for_overlapping_alphas() {
        let mut rng = stream(1, "compose", 4);
        let a = ComponentImage::with_alpha(rand_color(&mut rng, 3, 3), Array2::from_elem((3, 3), 0.7));
        let b = ComponentImage::with_alpha(rand_color(&mut rng, 3, 3), Array2::from_elem((3, 3), 0.7));
        let bg = ComponentImage::opaque(rand_color(&mut rng, 3, 3));
        let ab = alpha_composite(&[a.clone(), b.clone()], &bg).unwrap();
        let ba = alpha_composite(&[b, a], &bg).unwrap();
        let diff: f64 = ab
            .image
            .iter()
            .zip(ba.image.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-3, "swapping layers changed nothing");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let c1 = ComponentImage::<f64>::opaque(Array3::zeros((4, 4, 3)));
        let c2 = ComponentImage::<f64>::opaque(Array3::zeros((5, 4, 3)));
        assert!(compose_sum(&[c1.clone(), c2]).is_err());
        assert!(compose_sum::<f64>(&[]).is_err());
        let bg = ComponentImage::opaque(Array3::zeros((4, 4, 3)));
        // missing alpha
        assert!(alpha_composite(&[c1], &bg).is_err());
    }

    #[test]
    fn graph_matches_eager() {
        let mut rng = stream(1, "compose", 5);
        let comps: Vec<_> = (0..3)
            .map(|_| ComponentImage::with_alpha(rand_color(&mut rng, 4, 4), rand_alpha(&mut rng, 4, 4)))
            .collect();
        let bg = ComponentImage::opaque(rand_color(&mut rng, 4, 4));
        let eager = alpha_composite(&comps, &bg).unwrap();

        let mut g = crate::graph::Graph::<f64>::new();
        let vars: Vec<(crate::graph::Var, crate::graph::Var)> = comps
            .iter()
            .map(|c| {
                // [H,W,3] -> [1,3,H,W]
                let chw = c.color.view().permuted_axes([2, 0, 1]).insert_axis(ndarray::Axis(0)).to_owned();
                let cv = g.constant(chw.into_dyn());
                let a = c.alpha.as_ref().unwrap().view().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)).to_owned();
                let av = g.constant(a.into_dyn());
                (cv, av)
            })
            .collect();
        let bgv = {
            let chw = bg.color.view().permuted_axes([2, 0, 1]).insert_axis(ndarray::Axis(0)).to_owned();
            g.constant(chw.into_dyn())
        };
        let out = alpha_composite_graph(&mut g, &vars, bgv);
        let got = g.val(out);
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..3 {
                    let a = got[[0, ch, y, x]];
                    let b = eager.image[[y, x, ch]];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // K=2 on 4x4: inputs are [x1, a1, x2, a2, bg], output = mean of composite.
        let build = |g: &mut crate::graph::Graph<f64>, vs: &[crate::graph::Var]| {
            let comps = vec![(vs[0], vs[1]), (vs[2], vs[3])];
            let out = alpha_composite_graph(g, &comps, vs[4]);
            g.mean_all(out)
        };
        let mut rng = stream(1, "compose", 6);
        let mk_color = |rng: &mut rand_chacha::ChaCha8Rng| {
            ndarray::ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 4, 4]), || rng.gen_range(0.05..0.95))
        };
        let mk_alpha = |rng: &mut rand_chacha::ChaCha8Rng| {
            ndarray::ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 4, 4]), || rng.gen_range(0.05..0.95))
        };
        let inputs = vec![
            mk_color(&mut rng),
            mk_alpha(&mut rng),
            mk_color(&mut rng),
            mk_alpha(&mut rng),
            mk_color(&mut rng),
        ];
        assert_gradients_match(&build, &inputs, 1e-4);
    }
}
