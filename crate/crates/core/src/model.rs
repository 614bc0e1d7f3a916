//! A miniature U-Net with a named tap after every convolution.
//!
//! Architecture for `depth = D`, `base_channels = B` (all convs 3x3, "same"
//! zero padding, followed by ReLU unless noted):
//!
//! | layer                | in channels      | out channels | resolution |
//! |----------------------|------------------|--------------|------------|
//! | `enc{l}.conv1`       | `C_in` or `B·2^(l-1)` | `B·2^l` | `H/2^l`    |
//! | `enc{l}.conv2`       | `B·2^l`          | `B·2^l`      | `H/2^l`    |
//! | `bottleneck.conv1`   | `B·2^(D-1)`      | `B·2^D`      | `H/2^D`    |
//! | `bottleneck.conv2`   | `B·2^D`          | `B·2^D`      | `H/2^D`    |
//! | `dec{l}.upconv`      | `B·2^(l+1)`      | `B·2^l`      | `H/2^l`    |
//! | `dec{l}.conv1`       | `2·B·2^l`        | `B·2^l`      | `H/2^l`    |
//! | `dec{l}.conv2`       | `B·2^l`          | `B·2^l`      | `H/2^l`    |
//! | `logits` (1x1, raw)  | `B`              | classes      | `H`        |
//!
//! Encoder level `l` ends with a 2x2 max pool; decoder level `l` starts with a
//! nearest-neighbour 2x upsample feeding `upconv`, whose output is
//! concatenated after the `enc{l}.conv2` skip. Decoder levels run from
//! `D-1` down to `0`. Taps hold post-ReLU activations, `logits` holds the raw
//! class scores.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, TapPerturbation};
use crate::mask::ClassMask;
use crate::rng::{self, Purpose};
use crate::tensor::{Real, Tensor};

pub const BOTTLENECK_TAP: &str = "bottleneck.conv2";
pub const LOGITS_TAP: &str = "logits";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 4,
            base_channels: 8,
            depth: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Downsampling level: the layer runs at `H / 2^level`.
    pub level: usize,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        if self.depth > 8 {
            return Err(Error::InvalidConfig("depth must be <= 8".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.num_classes > 256 {
            return Err(Error::InvalidConfig("num_classes must be <= 256".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::InvalidConfig("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let divisor = self.divisor();
        if !height.is_multiple_of(divisor) || !width.is_multiple_of(divisor) {
            return Err(Error::Divisibility {
                height,
                width,
                divisor,
            });
        }
        Ok(())
    }

    /// Convolution layers in forward order. Each is also a tap of the same name.
    pub fn layer_table(&self) -> Vec<LayerSpec> {
        let b = self.base_channels;
        let mut layers = Vec::new();
        let mut push = |name: String, cin, cout, kernel, level| {
            layers.push(LayerSpec {
                name,
                in_channels: cin,
                out_channels: cout,
                kernel,
                level,
            })
        };
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let c = b << l;
            push(format!("enc{l}.conv1"), cin, c, 3, l);
            push(format!("enc{l}.conv2"), c, c, 3, l);
            cin = c;
        }
        let c = b << self.depth;
        push("bottleneck.conv1".into(), cin, c, 3, self.depth);
        push("bottleneck.conv2".into(), c, c, 3, self.depth);
        for l in (0..self.depth).rev() {
            let c = b << l;
            push(format!("dec{l}.upconv"), c * 2, c, 3, l);
            push(format!("dec{l}.conv1"), c * 2, c, 3, l);
            push(format!("dec{l}.conv2"), c, c, 3, l);
        }
        push(LOGITS_TAP.into(), b, self.num_classes, 1, 0);
        layers
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.layer_table().into_iter().map(|l| l.name).collect()
    }

    /// `(name, dims)` for every parameter tensor, kernel then bias per layer.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layer_table()
            .into_iter()
            .flat_map(|l| {
                [
                    (
                        format!("{}.weight", l.name),
                        vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                    ),
                    (format!("{}.bias", l.name), vec![l.out_channels]),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Knobs for a single forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOptions<T> {
    pub input_requires_grad: bool,
    pub params_require_grad: bool,
    pub perturbation: Option<TapPerturbation<T>>,
}

impl<T> Default for ForwardOptions<T> {
    fn default() -> Self {
        Self {
            input_requires_grad: false,
            params_require_grad: false,
            perturbation: None,
        }
    }
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass<T: Real> {
    pub graph: Graph<T>,
    pub input: NodeId,
    pub logits: NodeId,
    /// Parameter leaves, in the model's parameter order.
    pub params: Vec<NodeId>,
}

impl<T: Real> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits).expect("logits node exists")
    }
}

/// Anything that maps an image to per-pixel class logits through named taps.
pub trait SegmentationNet<T: Real>: Sync {
    fn num_classes(&self) -> usize;

    fn tap_names(&self) -> Vec<String>;

    fn forward_with(&self, image: &Tensor<T>, opts: &ForwardOptions<T>) -> Result<ForwardPass<T>>;

    fn forward(&self, image: &Tensor<T>) -> Result<ForwardPass<T>> {
        self.forward_with(image, &ForwardOptions::default())
    }

    fn check_tap(&self, tap: &str) -> Result<()> {
        let valid = self.tap_names();
        if valid.iter().any(|t| t == tap) {
            Ok(())
        } else {
            Err(Error::UnknownTap {
                name: tap.to_string(),
                valid,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: UNetConfig,
    params: Vec<Param<T>>,
    tap_names: Vec<String>,
}

impl<T: Real> Model<T> {
    /// Kaiming-normal kernels (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::generator(seed, Purpose::Init, 0);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let value = if dims.len() == 4 {
                    let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                        .expect("finite positive std");
                    Tensor::from_fn(&dims, |_| T::of(normal.sample(&mut rng)))?
                } else {
                    Tensor::zeros(&dims)?
                };
                Ok(Param { name, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(config, params.into_iter().map(|p| p.value).collect())
    }

    pub fn zeros(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(_, dims)| Tensor::zeros(&dims))
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(config, tensors)
    }

    /// Builds a model from tensors in [`UNetConfig::param_shapes`] order.
    pub fn from_params(config: UNetConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::InvalidShape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let params = shapes
            .into_iter()
            .zip(tensors)
            .map(|((name, dims), value)| {
                if value.dims() != dims.as_slice() {
                    return Err(Error::InvalidShape(format!(
                        "parameter {name}: expected {dims:?}, got {:?}",
                        value.dims()
                    )));
                }
                Ok(Param { name, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tap_names: config.tap_names(),
            config,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_param(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::InvalidShape(format!("no parameter #{index}")))?;
        if slot.value.dims() != value.dims() {
            return Err(Error::InvalidShape(format!(
                "parameter {}: expected {:?}, got {:?}",
                slot.name,
                slot.value.dims(),
                value.dims()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            tap_names: self.tap_names.clone(),
        }
    }

    /// Forward pass over a batch `[N, C_in, H, W]`.
    pub fn forward_batch(
        &self,
        images: &Tensor<T>,
        opts: &ForwardOptions<T>,
    ) -> Result<ForwardPass<T>> {
        let [_, c, h, w] = images.dims4("forward")?;
        if c != self.config.in_channels {
            return Err(Error::Shape {
                op: "forward",
                axis: "channel",
                expected: self.config.in_channels,
                actual: c,
            });
        }
        self.config.check_input_size(h, w)?;

        let mut g = Graph::with_perturbation(opts.perturbation.clone());
        let input = g.leaf(images.clone(), opts.input_requires_grad);
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), opts.params_require_grad))
            .collect();
        let mut next_param = params.iter().copied();
        let mut layers = self.config.layer_table().into_iter();
        let mut conv = |g: &mut Graph<T>, x: NodeId, relu: bool| -> Result<NodeId> {
            let layer = layers.next().expect("layer table covers the forward pass");
            let k = next_param.next().expect("kernel param");
            let b = next_param.next().expect("bias param");
            let y = g.conv2d(x, k, b, 1, layer.kernel / 2)?;
            let y = if relu { g.relu(y)? } else { y };
            g.tap(&layer.name, y)
        };

        let mut h_node = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            h_node = conv(&mut g, h_node, true)?;
            h_node = conv(&mut g, h_node, true)?;
            skips.push(h_node);
            h_node = g.maxpool2(h_node)?;
        }
        h_node = conv(&mut g, h_node, true)?;
        h_node = conv(&mut g, h_node, true)?;
        for skip in skips.into_iter().rev() {
            let up = g.upsample2(h_node)?;
            let up = conv(&mut g, up, true)?;
            let merged = g.concat_channels(skip, up)?;
            h_node = conv(&mut g, merged, true)?;
            h_node = conv(&mut g, h_node, true)?;
        }
        let logits = conv(&mut g, h_node, false)?;
        Ok(ForwardPass {
            graph: g,
            input,
            logits,
            params,
        })
    }
}

impl<T: Real> SegmentationNet<T> for Model<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn tap_names(&self) -> Vec<String> {
        self.tap_names.clone()
    }

    fn forward_with(&self, image: &Tensor<T>, opts: &ForwardOptions<T>) -> Result<ForwardPass<T>> {
        let [n, ..] = image.dims4("forward")?;
        if n != 1 {
            return Err(Error::Shape {
                op: "forward",
                axis: "batch",
                expected: 1,
                actual: n,
            });
        }
        self.forward_batch(image, opts)
    }
}

/// Per-pixel argmax over the class axis for every batch item, ties to the
/// lowest class index. Output is `N*H*W` ids.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = logits.dims4("predict_mask")?;
    let plane = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = data[base + p];
            for k in 1..c {
                let v = data[base + k * plane + p];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Argmax mask of a single-image logits tensor `[1, C, H, W]`.
pub fn predict_mask<T: Real>(logits: &Tensor<T>) -> Result<ClassMask> {
    let [n, _, h, w] = logits.dims4("predict_mask")?;
    if n != 1 {
        return Err(Error::Shape {
            op: "predict_mask",
            axis: "batch",
            expected: 1,
            actual: n,
        });
    }
    ClassMask::new(h, w, argmax_classes(logits)?)
}

/// A two-layer probe network: one `k x k` feature convolution (optionally
/// ReLU'd) tapped as `features`, then a 1x1 head tapped as `logits`.
/// Small enough for hand-derived explanation checks.
#[derive(Clone, Debug)]
pub struct ShallowNet<T: Real> {
    pub features_kernel: Tensor<T>,
    pub features_bias: Tensor<T>,
    pub relu: bool,
    pub head_kernel: Tensor<T>,
    pub head_bias: Tensor<T>,
}

impl<T: Real> SegmentationNet<T> for ShallowNet<T> {
    fn num_classes(&self) -> usize {
        self.head_kernel.dims()[0]
    }

    fn tap_names(&self) -> Vec<String> {
        vec!["features".into(), LOGITS_TAP.into()]
    }

    fn forward_with(&self, image: &Tensor<T>, opts: &ForwardOptions<T>) -> Result<ForwardPass<T>> {
        let mut g = Graph::with_perturbation(opts.perturbation.clone());
        let input = g.leaf(image.clone(), opts.input_requires_grad);
        let params: Vec<NodeId> = [
            &self.features_kernel,
            &self.features_bias,
            &self.head_kernel,
            &self.head_bias,
        ]
        .into_iter()
        .map(|t| g.leaf(t.clone(), opts.params_require_grad))
        .collect();
        let pad = self.features_kernel.dims4("shallow")?[2] / 2;
        let mut f = g.conv2d(input, params[0], params[1], 1, pad)?;
        if self.relu {
            f = g.relu(f)?;
        }
        let f = g.tap("features", f)?;
        let logits = g.conv2d(f, params[2], params[3], 1, 0)?;
        let logits = g.tap(LOGITS_TAP, logits)?;
        Ok(ForwardPass {
            graph: g,
            input,
            logits,
            params,
        })
    }
}
