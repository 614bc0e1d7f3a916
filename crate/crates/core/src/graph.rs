//! Recorded forward computation and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op validates shapes,
//! computes its output eagerly and keeps whatever it needs for the backward
//! sweep. Named taps point at intermediate nodes so explanation code can read
//! activations and their gradients by layer name.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    Reshape {
        input: NodeId,
    },
    PixelSum {
        input: NodeId,
        channel: usize,
        indices: Arc<[usize]>,
        scale: T,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Arc<[u32]>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Adds `delta` to one element of a tap's activation as it is recorded.
/// Used by finite-difference checks of tap gradients.
#[derive(Clone, Debug)]
pub struct TapPerturbation<T> {
    pub tap: String,
    pub index: usize,
    pub delta: T,
}

/// Deliberate backward bugs used as negative controls for the gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// ReLU passes gradients through ungated.
    ReluPassThrough,
}

#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    taps: Vec<(String, NodeId)>,
    perturbation: Option<TapPerturbation<T>>,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `∂objective/∂output` for every node reached by a backward sweep.
#[derive(Debug)]
pub struct GradientStore<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradientStore<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn same_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            axis: "rank",
            expected: a.len(),
            actual: b.len(),
        });
    }
    const AXES: [&str; 4] = ["batch", "channel", "height", "width"];
    for (k, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::Shape {
                op,
                axis: AXES[k + 4 - a.len()],
                expected: x,
                actual: y,
            });
        }
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            taps: Vec::new(),
            perturbation: None,
            fault: None,
        }
    }

    pub fn with_perturbation(perturbation: Option<TapPerturbation<T>>) -> Self {
        Self {
            perturbation,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        Ok(&self.node(id)?.value)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = self.value(input)?.dims4(OP)?;
        let [cout, kcin, kh, kw] = self.value(kernel)?.dims4(OP)?;
        let bias_dims = self.value(bias)?.dims();
        if bias_dims != [cout] {
            return Err(Error::Shape {
                op: OP,
                axis: "bias",
                expected: cout,
                actual: bias_dims.iter().product(),
            });
        }
        if kcin != cin {
            return Err(Error::Shape {
                op: OP,
                axis: "input-channel",
                expected: cin,
                actual: kcin,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "{OP}: kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidShape(format!("{OP}: stride must be >= 1")));
        }
        let out_extent = |len: usize, k: usize, axis: &'static str| -> Result<usize> {
            let padded = len + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::Shape {
                    op: OP,
                    axis,
                    expected: k,
                    actual: padded,
                });
            }
            Ok((padded - k) / stride + 1)
        };
        let oh = out_extent(h, kh, "height")?;
        let ow = out_extent(w, kw, "width")?;
        let geom = ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input)?.data(),
            self.value(kernel)?.data(),
            self.value(bias)?.data(),
        );
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            value,
            &[input, kernel, bias],
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input)?.map(|v| v.max(T::zero()));
        Ok(self.push(Op::Relu { input }, value, &[input]))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input)?;
        let [n, c, h, w] = x.dims4("maxpool2")?;
        for (axis, len) in [("height", h), ("width", w)] {
            if len % 2 != 0 {
                return Err(Error::Shape {
                    op: "maxpool2",
                    axis,
                    expected: len + 1,
                    actual: len,
                });
            }
        }
        let (out, argmax) = kernels::maxpool2_forward(x.data(), n * c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, value, &[input]))
    }

    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input)?;
        let [n, c, h, w] = x.dims4("upsample2")?;
        let value = Tensor::new(
            &[n, c, 2 * h, 2 * w],
            kernels::upsample2_forward(x.data(), n * c, h, w),
        )?;
        Ok(self.push(Op::Upsample2 { input }, value, &[input]))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        const OP: &str = "concat_channels";
        let [na, ca, ha, wa] = self.value(a)?.dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b)?.dims4(OP)?;
        for (axis, x, y) in [("batch", na, nb), ("height", ha, hb), ("width", wa, wb)] {
            if x != y {
                return Err(Error::Shape {
                    op: OP,
                    axis,
                    expected: x,
                    actual: y,
                });
            }
        }
        let (da, db) = (self.value(a)?.data(), self.value(b)?.data());
        let (pa, pb) = (ca * ha * wa, cb * ha * wa);
        let mut out = Vec::with_capacity(na * (pa + pb));
        for i in 0..na {
            out.extend_from_slice(&da[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&db[i * pb..(i + 1) * pb]);
        }
        let value = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        Ok(self.push(Op::Concat { a, b }, value, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a)?, self.value(b)?);
        same_dims("add", x.dims(), y.dims())?;
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.dims(), out)?;
        Ok(self.push(Op::Add { a, b }, value, &[a, b]))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> Result<NodeId> {
        let value = self.value(input)?.scale(factor);
        Ok(self.push(Op::Scale { input, factor }, value, &[input]))
    }

    pub fn reshape(&mut self, input: NodeId, dims: &[usize]) -> Result<NodeId> {
        let value = self.value(input)?.reshape(dims)?;
        Ok(self.push(Op::Reshape { input }, value, &[input]))
    }

    /// `scale * Σ_{p ∈ indices} input[0, channel, p]` with `p` a flat `i*W + j`
    /// index into the spatial plane. Requires batch size 1.
    pub fn pixel_sum(
        &mut self,
        input: NodeId,
        channel: usize,
        indices: Arc<[usize]>,
        scale: T,
    ) -> Result<NodeId> {
        const OP: &str = "pixel_sum";
        let x = self.value(input)?;
        let [n, c, h, w] = x.dims4(OP)?;
        if n != 1 {
            return Err(Error::Shape {
                op: OP,
                axis: "batch",
                expected: 1,
                actual: n,
            });
        }
        if channel >= c {
            return Err(Error::BadClass {
                class: channel,
                num_classes: c,
            });
        }
        if indices.is_empty() {
            return Err(Error::EmptyPixelSet);
        }
        let plane = &x.data()[channel * h * w..(channel + 1) * h * w];
        let mut total = T::zero();
        for &p in indices.iter() {
            if p >= h * w {
                return Err(Error::PixelOutOfBounds {
                    i: p / w,
                    j: p % w,
                    height: h,
                    width: w,
                });
            }
            total += plane[p];
        }
        let value = Tensor::scalar(scale * total);
        Ok(self.push(
            Op::PixelSum {
                input,
                channel,
                indices,
                scale,
            },
            value,
            &[input],
        ))
    }

    /// Mean per-pixel softmax cross-entropy of `logits` against class ids.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<[u32]>) -> Result<NodeId> {
        const OP: &str = "cross_entropy";
        let x = self.value(logits)?;
        let [n, c, h, w] = x.dims4(OP)?;
        if targets.len() != n * h * w {
            return Err(Error::Shape {
                op: OP,
                axis: "pixels",
                expected: n * h * w,
                actual: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::BadClass {
                class: bad as usize,
                num_classes: c,
            });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(x.data(), &targets, n, c, h * w);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Names `id` as a tap and returns the node downstream computation should
    /// consume (differs from `id` only under a [`TapPerturbation`]).
    pub fn tap(&mut self, name: &str, id: NodeId) -> Result<NodeId> {
        self.node(id)?;
        if self.taps.iter().any(|(n, _)| n == name) {
            return Err(Error::DuplicateTap(name.to_string()));
        }
        self.taps.push((name.to_string(), id));
        // taps always receive gradients, even when no parameter does
        self.nodes[id.0].requires_grad = true;
        match self.perturbation.clone() {
            Some(p) if p.tap == name => {
                let dims = self.value(id)?.dims().to_vec();
                let mut delta = vec![T::zero(); self.value(id)?.len()];
                let slot = delta.get_mut(p.index).ok_or_else(|| {
                    Error::InvalidShape(format!("perturbation index {} outside tap {name}", p.index))
                })?;
                *slot = p.delta;
                let d = self.leaf(Tensor::new(&dims, delta)?, false);
                self.add(id, d)
            }
            _ => Ok(id),
        }
    }

    pub fn tap_node(&self, name: &str) -> Result<NodeId> {
        self.taps
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::UnknownTap {
                name: name.to_string(),
                valid: self.tap_names(),
            })
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.taps.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Piecewise-linear region the forward pass landed in: ReLU gates and
    /// max-pool winners, in recording order. Two evaluations with equal
    /// patterns lie on the same smooth piece of the function.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => pattern.extend(
                    self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| u32::from(v > T::zero())),
                ),
                Op::MaxPool2 { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    /// Reverse sweep from `seed`, whose incoming gradient is `seed_grad`.
    ///
    /// Gradients of nodes with several consumers are summed over consumers.
    /// Only nodes that require a gradient and are reachable backward from the
    /// seed get an entry.
    pub fn backward(&self, seed: NodeId, seed_grad: &Tensor<T>) -> Result<GradientStore<T>> {
        let seed_node = self.node(seed)?;
        same_dims("backward", seed_node.value.dims(), seed_grad.dims())?;
        let mut pending: Vec<Option<Vec<T>>> = (0..=seed.0).map(|_| None).collect();
        pending[seed.0] = Some(seed_grad.to_vec());
        let mut grads: Vec<Option<Tensor<T>>> = (0..=seed.0).map(|_| None).collect();

        for idx in (0..=seed.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut pending)?;
            grads[idx] = Some(Tensor::new(node.value.dims(), g)?);
        }
        Ok(GradientStore { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], pending: &mut [Option<Vec<T>>]) -> Result<()> {
        let zeros_like = |id: NodeId| vec![T::zero(); self.nodes[id.0].value.len()];
        let mut accumulate = |id: NodeId, contrib: Vec<T>| match &mut pending[id.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut gi = self.wants(*input).then(|| zeros_like(*input));
                let mut gk = self.wants(*kernel).then(|| zeros_like(*kernel));
                let mut gb = self.wants(*bias).then(|| zeros_like(*bias));
                kernels::conv2d_backward(
                    geom,
                    self.nodes[input.0].value.data(),
                    self.nodes[kernel.0].value.data(),
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (id, grad) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                    if let Some(grad) = grad {
                        accumulate(id, grad);
                    }
                }
            }
            Op::Relu { input } => {
                if self.wants(*input) {
                    let x = self.nodes[input.0].value.data();
                    let contrib = if self.fault == Some(BackwardFault::ReluPassThrough) {
                        g.to_vec()
                    } else {
                        g.iter()
                            .zip(x)
                            .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                            .collect()
                    };
                    accumulate(*input, contrib);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.wants(*input) {
                    let mut gi = zeros_like(*input);
                    for (&d, &a) in g.iter().zip(argmax) {
                        gi[a as usize] += d;
                    }
                    accumulate(*input, gi);
                }
            }
            Op::Upsample2 { input } => {
                if self.wants(*input) {
                    let [n, c, h, w] = self.nodes[input.0].value.dims4("upsample2")?;
                    accumulate(*input, kernels::upsample2_backward(g, n * c, h, w));
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].value.dims4("concat_channels")?;
                let cb = self.nodes[b.0].value.dims()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                if self.wants(*a) {
                    let ga = (0..n).flat_map(|i| {
                        g[i * (pa + pb)..i * (pa + pb) + pa].iter().copied()
                    });
                    accumulate(*a, ga.collect());
                }
                if self.wants(*b) {
                    let gb = (0..n).flat_map(|i| {
                        g[i * (pa + pb) + pa..(i + 1) * (pa + pb)].iter().copied()
                    });
                    accumulate(*b, gb.collect());
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        accumulate(id, g.to_vec());
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.wants(*input) {
                    accumulate(*input, g.iter().map(|&d| d * *factor).collect());
                }
            }
            Op::Reshape { input } => {
                if self.wants(*input) {
                    accumulate(*input, g.to_vec());
                }
            }
            Op::PixelSum {
                input,
                channel,
                indices,
                scale,
            } => {
                if self.wants(*input) {
                    let [_, _, h, w] = self.nodes[input.0].value.dims4("pixel_sum")?;
                    let mut gi = zeros_like(*input);
                    let d = g[0] * *scale;
                    let plane = &mut gi[channel * h * w..(channel + 1) * h * w];
                    for &p in indices.iter() {
                        plane[p] += d;
                    }
                    accumulate(*input, gi);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let [n, c, h, w] = self.nodes[logits.0].value.dims4("cross_entropy")?;
                    let plane = h * w;
                    let d = g[0] / T::of((n * plane) as f64);
                    let mut gi: Vec<T> = probs.iter().map(|&p| p * d).collect();
                    for b in 0..n {
                        for p in 0..plane {
                            let t = targets[b * plane + p] as usize;
                            gi[(b * c + t) * plane + p] -= d;
                        }
                    }
                    accumulate(*logits, gi);
                }
            }
        }
        Ok(())
    }
}
