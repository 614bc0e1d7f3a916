//! Gradient-weighted class activation maps for segmentation.
//!
//! The logits of class `c` over a pixel set `M` are summed into one scalar
//! `λ · Σ_{(i,j)∈M} y_ij^c`. Its gradient at a tapped feature map `A` (shape
//! `[1, K, U, V]`) is averaged per channel into weights
//! `α_k = (1/N) Σ_{u,v} ∂y/∂A[k,u,v]`, `N = U·V`, and the heatmap is
//! `ReLU(Σ_k α_k A[k])` at tap resolution. Normalization and upsampling to
//! the input size happen afterwards and are display conventions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{GradientStore, NodeId};
use crate::model::{argmax_classes, ForwardOptions, ForwardPass, SegmentationNet};
use crate::render;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PixelSet {
    Single { i: usize, j: usize },
    /// Inclusive corners.
    Rect { i0: usize, j0: usize, i1: usize, j1: usize },
    /// Row-major membership flags over the output mask.
    Mask { height: usize, width: usize, bits: Vec<bool> },
    /// Every pixel whose predicted class is `class_id`.
    PredictedClass { class_id: usize },
    All,
}

impl std::fmt::Display for PixelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PixelSet::Single { i, j } => write!(f, "single({i},{j})"),
            PixelSet::Rect { i0, j0, i1, j1 } => write!(f, "rect({i0},{j0},{i1},{j1})"),
            PixelSet::Mask { height, width, bits } => {
                write!(f, "mask({height}x{width}, {} set)", bits.iter().filter(|b| **b).count())
            }
            PixelSet::PredictedClass { class_id } => write!(f, "predicted({class_id})"),
            PixelSet::All => write!(f, "all"),
        }
    }
}

/// Sorted, unique flat indices `i * W + j` selected by `ps` on `[1, C, H, W]`
/// logits.
pub fn resolve_pixel_set<T: Real>(ps: &PixelSet, logits: &Tensor<T>) -> Result<Vec<usize>> {
    let [_, c, h, w] = logits.dims4("resolve_pixel_set")?;
    let oob = |i, j| Error::PixelOutOfBounds {
        i,
        j,
        height: h,
        width: w,
    };
    let indices: Vec<usize> = match *ps {
        PixelSet::Single { i, j } => {
            if i >= h || j >= w {
                return Err(oob(i, j));
            }
            vec![i * w + j]
        }
        PixelSet::Rect { i0, j0, i1, j1 } => {
            if i1 >= h || j1 >= w {
                return Err(oob(i1, j1));
            }
            (i0..=i1).flat_map(|i| (j0..=j1).map(move |j| i * w + j)).collect()
        }
        PixelSet::Mask {
            height,
            width,
            ref bits,
        } => {
            if (height, width) != (h, w) || bits.len() != h * w {
                return Err(Error::InvalidShape(format!(
                    "pixel mask {height}x{width} ({} bits) does not match the {h}x{w} output",
                    bits.len()
                )));
            }
            bits.iter().enumerate().filter(|(_, b)| **b).map(|(p, _)| p).collect()
        }
        PixelSet::PredictedClass { class_id } => {
            if class_id >= c {
                return Err(Error::BadClass {
                    class: class_id,
                    num_classes: c,
                });
            }
            argmax_classes(logits)?
                .iter()
                .enumerate()
                .filter(|(_, &k)| k as usize == class_id)
                .map(|(p, _)| p)
                .collect()
        }
        PixelSet::All => (0..h * w).collect(),
    };
    if indices.is_empty() {
        return Err(Error::EmptyPixelSet);
    }
    Ok(indices)
}

/// Records `scale · Σ_{p ∈ indices} logits[0, class, p]` on the pass's graph.
pub fn objective_sum<T: Real>(
    pass: &mut ForwardPass<T>,
    indices: &[usize],
    class_id: usize,
    scale: T,
) -> Result<NodeId> {
    Ok(objective_nodes(pass, indices, class_id, scale)?.1)
}

/// `(Σ, scale · Σ)` as two nodes, so the sum can be differentiated with a
/// unit seed and the scalar factor applied once afterwards.
fn objective_nodes<T: Real>(
    pass: &mut ForwardPass<T>,
    indices: &[usize],
    class_id: usize,
    scale: T,
) -> Result<(NodeId, NodeId)> {
    let sum = pass
        .graph
        .pixel_sum(pass.logits, class_id, Arc::from(indices), T::one())?;
    let objective = pass.graph.scale(sum, scale)?;
    Ok((sum, objective))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamWeights<T: Real = f32> {
    pub alpha: Vec<T>,
    /// Spatial positions averaged over, `U · V`.
    pub n: usize,
}

/// Channel means of a `[1, K, U, V]` tap gradient.
pub fn cam_weights<T: Real>(tap_gradient: &Tensor<T>) -> Result<CamWeights<T>> {
    let [n, k, u, v] = tap_gradient.dims4("cam_weights")?;
    if n != 1 {
        return Err(Error::Shape {
            op: "cam_weights",
            axis: "batch",
            expected: 1,
            actual: n,
        });
    }
    let plane = u * v;
    // reductions accumulate in f64 whatever T is
    let alpha = tap_gradient
        .data()
        .chunks_exact(plane)
        .take(k)
        .map(|ch| T::of(ch.iter().map(|g| g.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Ok(CamWeights { alpha, n: plane })
}

/// `(pre_relu, raw)` with `pre_relu = Σ_k α_k A[k]` and `raw = ReLU(pre_relu)`,
/// both `[U, V]`.
pub fn cam_heatmap<T: Real>(
    activation: &Tensor<T>,
    weights: &CamWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, k, u, v] = activation.dims4("cam_heatmap")?;
    if n != 1 || k != weights.alpha.len() {
        return Err(Error::Shape {
            op: "cam_heatmap",
            axis: "channel",
            expected: weights.alpha.len(),
            actual: k,
        });
    }
    let plane = u * v;
    let mut pre = vec![0.0f64; plane];
    for (ch, &a) in activation.data().chunks_exact(plane).zip(&weights.alpha) {
        let a = a.as_f64();
        for (acc, &x) in pre.iter_mut().zip(ch) {
            *acc += a * x.as_f64();
        }
    }
    let pre_relu = Tensor::new(&[u, v], pre.into_iter().map(T::of).collect())?;
    let raw = pre_relu.map(|x| if x > T::zero() { x } else { T::zero() });
    Ok((pre_relu, raw))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainRequest {
    pub class_id: usize,
    pub tap: String,
    pub pixel_set: PixelSet,
    /// Positive objective scale λ; 1 unless testing invariance.
    pub scale: f64,
}

impl ExplainRequest {
    pub fn new(class_id: usize, tap: impl Into<String>, pixel_set: PixelSet) -> Self {
        Self {
            class_id,
            tap: tap.into(),
            pixel_set,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T: Real = f32> {
    pub tap: String,
    pub class_id: usize,
    pub pixel_set: PixelSet,
    pub weights: CamWeights<T>,
    /// `[U, V]` weighted sum before the ReLU.
    pub pre_relu: Tensor<T>,
    /// `[U, V]` post-ReLU, unnormalized.
    pub raw: Tensor<T>,
    /// `raw / max(raw)`, zeros if `raw` is all zero.
    pub normalized: Tensor<T>,
    /// `normalized` resized to the input `[H, W]`.
    pub upsampled: Tensor<T>,
}

/// A forward pass with the objective's gradients, ready to read off any tap.
pub struct Explained<T: Real> {
    pub pass: ForwardPass<T>,
    /// Gradients of the unscaled pixel sum.
    pub grads: GradientStore<T>,
    pub indices: Vec<usize>,
    pub objective: NodeId,
    pub scale: T,
}

fn check_request<T: Real>(net: &impl SegmentationNet<T>, class_id: usize, scale: f64) -> Result<()> {
    let num_classes = net.num_classes();
    if class_id >= num_classes {
        return Err(Error::BadClass {
            class: class_id,
            num_classes,
        });
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("objective scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Forward, resolve the pixel set, and backpropagate its class objective.
pub fn backprop_objective<T: Real>(
    net: &impl SegmentationNet<T>,
    image: &Tensor<T>,
    class_id: usize,
    pixel_set: &PixelSet,
    scale: f64,
    input_requires_grad: bool,
) -> Result<Explained<T>> {
    check_request(net, class_id, scale)?;
    let opts = ForwardOptions {
        input_requires_grad,
        ..ForwardOptions::default()
    };
    let mut pass = net.forward_with(image, &opts)?;
    let indices = resolve_pixel_set(pixel_set, pass.logits())?;
    let scale = T::of(scale);
    let (sum, objective) = objective_nodes(&mut pass, &indices, class_id, scale)?;
    // d(λΣ)/dA = λ · dΣ/dA: the scalar factor is applied after the sweep, so
    // the result is homogeneous in λ up to one rounding per element
    let grads = pass.graph.backward(sum, &Tensor::scalar(T::one()))?;
    Ok(Explained {
        pass,
        grads,
        indices,
        objective,
        scale,
    })
}

impl<T: Real> Explained<T> {
    /// `(activation, gradient)` at a tap.
    pub fn tap(&self, tap: &str) -> Result<(&Tensor<T>, Tensor<T>)> {
        let id = self.pass.graph.tap_node(tap)?;
        let activation = self.pass.graph.value(id)?;
        let grad = match self.grads.get(id) {
            Some(g) => g.scale(self.scale),
            // unreachable from the objective, e.g. a tap after the logits
            None => Tensor::zeros(activation.dims())?,
        };
        Ok((activation, grad))
    }

    pub fn heatmap(&self, tap: &str, class_id: usize, pixel_set: &PixelSet) -> Result<Heatmap<T>> {
        let (activation, grad) = self.tap(tap)?;
        let weights = cam_weights(&grad)?;
        let (pre_relu, raw) = cam_heatmap(activation, &weights)?;
        let normalized = render::normalize(&raw)?;
        let [_, _, h, w] = self.pass.graph.value(self.pass.input)?.dims4("heatmap")?;
        let upsampled = render::upsample_bilinear(&normalized, h, w)?;
        Ok(Heatmap {
            tap: tap.to_string(),
            class_id,
            pixel_set: pixel_set.clone(),
            weights,
            pre_relu,
            raw,
            normalized,
            upsampled,
        })
    }
}

pub fn seg_grad_cam<T: Real>(
    net: &impl SegmentationNet<T>,
    image: &Tensor<T>,
    request: &ExplainRequest,
) -> Result<Heatmap<T>> {
    net.check_tap(&request.tap)?;
    let explained = backprop_objective(
        net,
        image,
        request.class_id,
        &request.pixel_set,
        request.scale,
        false,
    )?;
    explained.heatmap(&request.tap, request.class_id, &request.pixel_set)
}

/// Per input pixel, the largest absolute objective gradient over channels,
/// min-max normalized to `[0, 1]`. The request's tap is not used.
pub fn saliency_map<T: Real>(
    net: &impl SegmentationNet<T>,
    image: &Tensor<T>,
    request: &ExplainRequest,
) -> Result<Tensor<T>> {
    let explained = backprop_objective(
        net,
        image,
        request.class_id,
        &request.pixel_set,
        request.scale,
        true,
    )?;
    let [_, c, h, w] = image.dims4("saliency_map")?;
    let plane = h * w;
    let grad = match explained.grads.get(explained.pass.input) {
        Some(g) => g.scale(explained.scale),
        None => Tensor::zeros(image.dims())?,
    };
    let g = grad.data();
    let map = Tensor::from_fn(&[h, w], |p| {
        (0..c)
            .map(|ch| g[ch * plane + p].abs())
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    })?;
    Ok(render::min_max_normalize(&map))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow<T: Real = f32> {
    pub heatmap: Heatmap<T>,
    /// Cosine similarity of the upsampled heatmap with the min-max
    /// normalized ReLU of the class logits.
    pub logit_similarity: f64,
    /// Cosine similarity with the Sobel edge map of the input.
    pub edge_similarity: f64,
}

/// One heatmap per tap from a single backward pass, with similarity scores.
pub fn layer_sweep<T: Real>(
    net: &impl SegmentationNet<T>,
    image: &Tensor<T>,
    class_id: usize,
    pixel_set: &PixelSet,
) -> Result<Vec<SweepRow<T>>> {
    let explained = backprop_objective(net, image, class_id, pixel_set, 1.0, false)?;
    let logit_plane = explained.pass.logits().channel_plane(0, class_id)?;
    let logit_ref = render::min_max_normalize(&logit_plane.map(|v| if v > T::zero() { v } else { T::zero() }));
    let edges: Tensor<T> = render::sobel_edges(&image.cast())?.cast();
    net.tap_names()
        .iter()
        .map(|tap| {
            let heatmap = explained.heatmap(tap, class_id, pixel_set)?;
            Ok(SweepRow {
                logit_similarity: render::cosine_similarity(&heatmap.upsampled, &logit_ref)?,
                edge_similarity: render::cosine_similarity(&heatmap.upsampled, &edges)?,
                heatmap,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, UNetConfig};

    fn t4(dims: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(&dims, v).unwrap()
    }

    #[test]
    fn resolve_examples() {
        let logits = Tensor::<f32>::zeros(&[1, 2, 8, 8]).unwrap();
        assert_eq!(resolve_pixel_set(&PixelSet::Single { i: 3, j: 5 }, &logits).unwrap(), vec![29]);
        let small = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        assert_eq!(resolve_pixel_set(&PixelSet::All, &small).unwrap().len(), 16);
        assert_eq!(
            resolve_pixel_set(&PixelSet::Rect { i0: 1, j0: 1, i1: 2, j1: 2 }, &small).unwrap(),
            vec![5, 6, 9, 10]
        );
        assert!(matches!(
            resolve_pixel_set(&PixelSet::Single { i: 4, j: 0 }, &small),
            Err(Error::PixelOutOfBounds { .. })
        ));
        // ties go to class 0, so class 1 is never predicted
        assert!(matches!(
            resolve_pixel_set(&PixelSet::PredictedClass { class_id: 1 }, &small),
            Err(Error::EmptyPixelSet)
        ));
        assert!(matches!(
            resolve_pixel_set(&PixelSet::Rect { i0: 2, j0: 0, i1: 1, j1: 0 }, &small),
            Err(Error::EmptyPixelSet)
        ));
        let bits = (0..16).map(|p| p % 5 == 0).collect();
        assert_eq!(
            resolve_pixel_set(&PixelSet::Mask { height: 4, width: 4, bits }, &small).unwrap(),
            vec![0, 5, 10, 15]
        );
    }

    #[test]
    fn cam_weights_examples() {
        let w = cam_weights(&t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(w.alpha, vec![2.5]);
        assert_eq!(w.n, 4);
        let z = cam_weights(&Tensor::<f64>::zeros(&[1, 3, 2, 2]).unwrap()).unwrap();
        assert_eq!(z.alpha, vec![0.0; 3]);
    }

    #[test]
    fn cam_heatmap_examples() {
        let a = t4([1, 1, 2, 2], vec![1.0, -1.0, 0.0, 2.0]);
        let (_, raw) = cam_heatmap(&a, &CamWeights { alpha: vec![1.0], n: 4 }).unwrap();
        assert_eq!(raw.data(), &[1.0, 0.0, 0.0, 2.0]);
        let (pre, raw) = cam_heatmap(&a, &CamWeights { alpha: vec![-1.0], n: 4 }).unwrap();
        assert_eq!(pre.data(), &[-1.0, 1.0, -0.0, -2.0]);
        assert_eq!(raw.data(), &[0.0, 1.0, 0.0, 0.0]);
        let a2 = t4([1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let (_, raw) = cam_heatmap(&a2, &CamWeights { alpha: vec![1.0, 2.0], n: 4 }).unwrap();
        assert_eq!(raw.data(), &[3.0, 1.0, 1.0, 3.0]);
        assert!(cam_heatmap(&a2, &CamWeights { alpha: vec![1.0], n: 4 }).is_err());
    }

    #[test]
    fn objective_examples() {
        let logits = Tensor::<f64>::new(&[1, 2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = crate::graph::Graph::new();
        let id = g.leaf(logits, false);
        let mut pass = ForwardPass {
            graph: g,
            input: id,
            logits: id,
            params: vec![],
        };
        let all = objective_sum(&mut pass, &[0, 1, 2, 3], 1, 1.0).unwrap();
        assert_eq!(pass.graph.value(all).unwrap().data(), &[10.0]);
        let one = objective_sum(&mut pass, &[2], 1, 1.0).unwrap();
        assert_eq!(pass.graph.value(one).unwrap().data(), &[3.0]);
        assert!(matches!(objective_sum(&mut pass, &[], 1, 1.0), Err(Error::EmptyPixelSet)));
    }

    #[test]
    fn request_validation() {
        let model = Model::<f32>::init(UNetConfig::default(), 1).unwrap();
        let image = Tensor::full(&[1, 3, 8, 8], 0.5f32).unwrap();
        let bad_class = ExplainRequest::new(4, "logits", PixelSet::All);
        assert!(matches!(seg_grad_cam(&model, &image, &bad_class), Err(Error::BadClass { .. })));
        let bad_tap = ExplainRequest::new(0, "nope", PixelSet::All);
        let err = seg_grad_cam(&model, &image, &bad_tap).unwrap_err();
        assert!(err.to_string().contains("bottleneck.conv2"), "{err}");
        let mut bad_scale = ExplainRequest::new(0, "logits", PixelSet::All);
        bad_scale.scale = 0.0;
        assert!(seg_grad_cam(&model, &image, &bad_scale).is_err());
    }

    #[test]
    fn heatmap_shapes_follow_tap() {
        let model = Model::<f32>::init(UNetConfig::default(), 1).unwrap();
        let image = Tensor::full(&[1, 3, 16, 16], 0.5f32).unwrap();
        let req = ExplainRequest::new(1, "bottleneck.conv2", PixelSet::Single { i: 3, j: 4 });
        let hm = seg_grad_cam(&model, &image, &req).unwrap();
        assert_eq!(hm.raw.dims(), &[4, 4]);
        assert_eq!(hm.weights.alpha.len(), 32);
        assert_eq!(hm.upsampled.dims(), &[16, 16]);
        assert!(hm.normalized.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
