//! Central finite differences against reverse-mode gradients, in `f64`.
//!
//! The networks here are piecewise linear (ReLU, max pool). A difference
//! stencil that straddles a kink measures a blend of two slopes, so the suite
//! compares the activation pattern at `x ± h` with the one at `x` and redraws
//! any coordinate whose stencil leaves the current linear piece.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BackwardFault, Graph, NodeId, TapPerturbation};
use crate::model::{ForwardOptions, Model, UNetConfig};
use crate::rng::{self, Generator, Purpose};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn central<F>(f: &mut F, point: &Tensor<f64>, index: usize, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut shifted = point.to_vec();
    shifted[index] = point.data()[index] + h;
    let plus = f(&Tensor::new(point.dims(), shifted.clone())?)?;
    shifted[index] = point.data()[index] - h;
    let minus = f(&Tensor::new(point.dims(), shifted)?)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective evaluated to {plus} / {minus} at element {index}"
        )));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Max relative error between `analytic` and central differences of `f` at
/// `point`, over every element.
pub fn finite_diff_check<F>(mut f: F, point: &Tensor<f64>, analytic: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if point.dims() != analytic.dims() {
        return Err(Error::InvalidShape(format!(
            "analytic gradient {:?} does not match point {:?}",
            analytic.dims(),
            point.dims()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let numeric = central(&mut f, point, i, h)?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of one stencil that also reports the activation pattern.
struct Eval {
    value: f64,
    pattern: Vec<u32>,
}

#[derive(Clone, Debug, Default)]
struct Tally {
    max_rel_error: f64,
    checks: usize,
    skipped: usize,
}

impl Tally {
    fn merge(&mut self, other: &Tally) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checks += other.checks;
        self.skipped += other.skipped;
    }
}

/// Checks coordinates from `coords` until `target` stencils stayed on the
/// base linear piece; stencils that cross a kink are counted and skipped.
/// `eval(index, delta)` evaluates the objective with element `index` shifted.
fn kink_aware<F>(
    eval: &mut F,
    base_pattern: &[u32],
    analytic: &[f64],
    h: f64,
    coords: impl IntoIterator<Item = usize>,
    target: usize,
) -> Result<Tally>
where
    F: FnMut(usize, f64) -> Result<Eval>,
{
    let mut tally = Tally::default();
    for index in coords {
        if tally.checks >= target {
            break;
        }
        let plus = eval(index, h)?;
        let minus = eval(index, -h)?;
        if plus.pattern != base_pattern || minus.pattern != base_pattern {
            tally.skipped += 1;
            continue;
        }
        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(Error::NonFinite(format!("objective at element {index}")));
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        tally.max_rel_error = tally.max_rel_error.max(relative_error(analytic[index], numeric));
        tally.checks += 1;
    }
    Ok(tally)
}

fn shifted(base: &Tensor<f64>, index: usize, delta: f64) -> Result<Tensor<f64>> {
    let mut data = base.to_vec();
    data[index] += delta;
    Tensor::new(base.dims(), data)
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub seeds: usize,
    pub size: usize,
    pub model: UNetConfig,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor / tap / input, per seed.
    pub samples_per_tensor: usize,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 20,
            size: 16,
            model: UNetConfig::default(),
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            samples_per_tensor: 3,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CategoryReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checks: usize,
    /// Coordinates redrawn because the stencil crossed a ReLU/max-pool switch.
    pub skipped_kinks: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub categories: Vec<CategoryReport>,
    pub tolerance: f64,
    pub seeds: usize,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.categories.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.categories
            .iter()
            .all(|c| c.checks > 0 && c.max_rel_error < self.tolerance)
    }
}

fn random_tensor(rng: &mut Generator, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// `Σ weights ⊙ node` as a scalar, built from existing ops so every op test
/// reduces to a scalar objective without a dedicated reduction op.
fn weighted_sum(g: &mut Graph<f64>, node: NodeId, weights: &Tensor<f64>) -> Result<NodeId> {
    let dims = g.value(node)?.dims().to_vec();
    let flat = dims.iter().product::<usize>();
    // viewed as [1, flat, 1, 1], a 1x1 conv with a [1, flat, 1, 1] kernel is the weighted sum
    let w = g.leaf(weights.reshape(&[1, flat, 1, 1])?, false);
    let b = g.leaf(Tensor::zeros(&[1])?, false);
    let reshaped = g.reshape(node, &[1, flat, 1, 1])?;
    g.conv2d(reshaped, w, b, 1, 0)
}

/// One op-level check: `build` records the op on a fresh graph given the leaf.
fn check_op(
    rng: &mut Generator,
    h: f64,
    fault: Option<BackwardFault>,
    dims: &[usize],
    build: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
) -> Result<Tally> {
    let point = random_tensor(rng, dims, -1.0, 1.0)?;
    let eval = |x: &Tensor<f64>, backward: bool| -> Result<(Eval, Option<Tensor<f64>>)> {
        let mut g = Graph::new();
        g.inject_fault(fault);
        let leaf = g.leaf(x.clone(), true);
        let out = build(&mut g, leaf)?;
        let out_dims = g.value(out)?.dims().to_vec();
        // weights must be fixed across evaluations: derive from a fixed stream
        let mut wr = crate::rng::generator(0xC0FFEE, Purpose::GradCheck, out_dims.iter().product::<usize>() as u64);
        let weights = random_tensor(&mut wr, &out_dims, -1.0, 1.0)?;
        let obj = weighted_sum(&mut g, out, &weights)?;
        let value = g.value(obj)?.data()[0];
        let grad = if backward {
            let grads = g.backward(obj, &Tensor::new(&[1, 1, 1, 1], vec![1.0])?)?;
            Some(grads.get(leaf).cloned().unwrap_or(Tensor::zeros(x.dims())?))
        } else {
            None
        };
        Ok((
            Eval {
                value,
                pattern: g.activation_pattern(),
            },
            grad,
        ))
    };
    let (base, grad) = eval(&point, true)?;
    let analytic = grad.expect("backward requested");
    let mut f = |index: usize, delta: f64| eval(&shifted(&point, index, delta)?, false).map(|(e, _)| e);
    kink_aware(&mut f, &base.pattern, analytic.data(), h, 0..point.len(), point.len())
}

fn op_suite(rng: &mut Generator, cfg: &GradCheckConfig) -> Result<Tally> {
    let h = cfg.step;
    let fault = cfg.fault;
    let mut tally = Tally::default();
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    let kernel = random_tensor(rng, &[cout, cin, 3, 3], -1.0, 1.0)?;
    let bias = random_tensor(rng, &[cout], -0.5, 0.5)?;

    for (stride, pad, hw) in [(1, 1, 5), (1, 0, 5), (2, 1, 5)] {
        // gradient w.r.t. the input
        let (k, b) = (kernel.clone(), bias.clone());
        tally.merge(&check_op(rng, h, fault, &[2, cin, hw, hw], move |g, x| {
            let k = g.leaf(k.clone(), false);
            let b = g.leaf(b.clone(), false);
            g.conv2d(x, k, b, stride, pad)
        })?);
        // gradient w.r.t. the kernel
        let input = random_tensor(rng, &[2, cin, hw, hw], -1.0, 1.0)?;
        let b = bias.clone();
        let inp = input.clone();
        tally.merge(&check_op(rng, h, fault, &[cout, cin, 3, 3], move |g, k| {
            let x = g.leaf(inp.clone(), false);
            let b = g.leaf(b.clone(), false);
            g.conv2d(x, k, b, stride, pad)
        })?);
        // gradient w.r.t. the bias
        let k = kernel.clone();
        tally.merge(&check_op(rng, h, fault, &[cout], move |g, b| {
            let x = g.leaf(input.clone(), false);
            let k = g.leaf(k.clone(), false);
            g.conv2d(x, k, b, stride, pad)
        })?);
    }
    tally.merge(&check_op(rng, h, fault, &[1, 2, 4, 4], |g, x| g.relu(x))?);
    tally.merge(&check_op(rng, h, fault, &[2, 2, 4, 6], |g, x| g.maxpool2(x))?);
    tally.merge(&check_op(rng, h, fault, &[1, 2, 3, 2], |g, x| g.upsample2(x))?);
    let other = random_tensor(rng, &[1, 2, 3, 3], -1.0, 1.0)?;
    tally.merge(&check_op(rng, h, fault, &[1, 1, 3, 3], move |g, x| {
        let o = g.leaf(other.clone(), false);
        let c = g.concat_channels(o, x)?;
        g.concat_channels(c, x)
    })?);
    tally.merge(&check_op(rng, h, fault, &[1, 2, 2, 2], |g, x| {
        let r = g.relu(x)?;
        let s = g.scale(x, -2.5)?;
        g.add(r, s)
    })?);
    tally.merge(&check_op(rng, h, fault, &[1, 3, 4, 4], |g, x| {
        g.pixel_sum(x, 1, Arc::from(vec![0, 5, 6, 15]), 1.7)
    })?);
    Ok(tally)
}

fn loss_suite(rng: &mut Generator, cfg: &GradCheckConfig) -> Result<Tally> {
    let (n, c, hh, ww) = (2, rng.random_range(2..5), 3, 4);
    let targets: Arc<[u32]> = (0..n * hh * ww)
        .map(|_| rng.random_range(0..c as u32))
        .collect::<Vec<_>>()
        .into();
    check_op(rng, cfg.step, cfg.fault, &[n, c, hh, ww], move |g, x| {
        let x = g.scale(x, 3.0)?;
        g.cross_entropy(x, Arc::clone(&targets))
    })
}

struct NetworkTallies {
    params: Tally,
    taps: Tally,
    input: Tally,
}

fn network_suite(rng: &mut Generator, cfg: &GradCheckConfig, seed: u64) -> Result<NetworkTallies> {
    let model = Model::<f64>::init(cfg.model.clone(), seed)?;
    let image = random_tensor(rng, &[1, cfg.model.in_channels, cfg.size, cfg.size], 0.0, 1.0)?;
    let class = rng.random_range(0..cfg.model.num_classes);
    let (i0, j0) = (rng.random_range(0..cfg.size), rng.random_range(0..cfg.size));
    let (i1, j1) = (rng.random_range(i0..cfg.size), rng.random_range(j0..cfg.size));
    let indices: Arc<[usize]> = (i0..=i1)
        .flat_map(|i| (j0..=j1).map(move |j| i * cfg.size + j))
        .collect::<Vec<_>>()
        .into();

    let objective = |m: &Model<f64>, img: &Tensor<f64>, opts: &ForwardOptions<f64>| -> Result<(Graph<f64>, NodeId, crate::model::ForwardPass<f64>)> {
        let mut pass = m.forward_batch(img, opts)?;
        let mut g = std::mem::take(&mut pass.graph);
        let obj = g.pixel_sum(pass.logits, class, Arc::clone(&indices), 1.0)?;
        Ok((g, obj, pass))
    };

    let opts = ForwardOptions {
        input_requires_grad: true,
        params_require_grad: true,
        perturbation: None,
    };
    let (mut g, obj, pass) = objective(&model, &image, &opts)?;
    g.inject_fault(cfg.fault);
    let grads = g.backward(obj, &Tensor::scalar(1.0))?;
    let base_pattern = g.activation_pattern();
    let plain = ForwardOptions::default();

    let target = cfg.samples_per_tensor;
    // redraws replace kink-crossing coordinates, within a bounded budget
    let sample = |rng: &mut Generator, len: usize| -> Vec<usize> {
        (0..8 * target).map(|_| rng.random_range(0..len)).collect()
    };
    let eval_graph = |(g, obj, _): (Graph<f64>, NodeId, _)| -> Result<Eval> {
        Ok(Eval {
            value: g.value(obj)?.data()[0],
            pattern: g.activation_pattern(),
        })
    };

    let mut params = Tally::default();
    for (p_idx, param) in model.params().iter().enumerate() {
        let analytic = grads
            .get(pass.params[p_idx])
            .ok_or_else(|| Error::NonFinite(format!("missing gradient for {}", param.name)))?;
        let mut f = |index: usize, delta: f64| -> Result<Eval> {
            let mut m = model.clone();
            m.set_param(p_idx, shifted(&param.value, index, delta)?)?;
            eval_graph(objective(&m, &image, &plain)?)
        };
        let coords = sample(rng, param.value.len());
        params.merge(&kink_aware(&mut f, &base_pattern, analytic.data(), cfg.step, coords, target)?);
    }

    let mut taps = Tally::default();
    for tap in cfg.model.tap_names() {
        let node = g.tap_node(&tap)?;
        let len = g.value(node)?.len();
        let analytic = grads
            .get(node)
            .ok_or_else(|| Error::NonFinite(format!("missing gradient for tap {tap}")))?;
        let mut f = |index: usize, delta: f64| -> Result<Eval> {
            let o = ForwardOptions {
                perturbation: Some(TapPerturbation {
                    tap: tap.clone(),
                    index,
                    delta,
                }),
                ..ForwardOptions::default()
            };
            eval_graph(objective(&model, &image, &o)?)
        };
        let coords = sample(rng, len);
        taps.merge(&kink_aware(&mut f, &base_pattern, analytic.data(), cfg.step, coords, target)?);
    }

    let analytic = grads
        .get(pass.input)
        .ok_or_else(|| Error::NonFinite("missing input gradient".into()))?;
    let mut f = |index: usize, delta: f64| -> Result<Eval> {
        eval_graph(objective(&model, &shifted(&image, index, delta)?, &plain)?)
    };
    let coords = sample(rng, image.len());
    let input = kink_aware(&mut f, &base_pattern, analytic.data(), cfg.step, coords, target)?;

    Ok(NetworkTallies { params, taps, input })
}

/// The full suite: single ops, the loss, and parameter / tap / input
/// gradients of a summed-logit objective on a random U-Net, over
/// `cfg.seeds` consecutive seeds starting at `cfg.seed`.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut ops = Tally::default();
    let mut loss = Tally::default();
    let mut params = Tally::default();
    let mut taps = Tally::default();
    let mut input = Tally::default();
    for s in 0..cfg.seeds as u64 {
        let seed = cfg.seed.wrapping_add(s);
        let mut rng = rng::generator(seed, Purpose::GradCheck, 0);
        ops.merge(&op_suite(&mut rng, cfg)?);
        loss.merge(&loss_suite(&mut rng, cfg)?);
        let net = network_suite(&mut rng, cfg, seed)?;
        params.merge(&net.params);
        taps.merge(&net.taps);
        input.merge(&net.input);
    }
    let categories = [
        ("ops", ops),
        ("loss", loss),
        ("params", params),
        ("taps", taps),
        ("input", input),
    ]
    .into_iter()
    .map(|(name, t)| CategoryReport {
        name,
        max_rel_error: t.max_rel_error,
        checks: t.checks,
        skipped_kinks: t.skipped,
    })
    .collect();
    Ok(GradCheckReport {
        categories,
        tolerance: cfg.tolerance,
        seeds: cfg.seeds,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let point = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let analytic = Tensor::new(&[3], vec![2.0, 4.0, 6.0]).unwrap();
        let err = finite_diff_check(
            |x| Ok(x.data().iter().map(|v| v * v).sum()),
            &point,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let err = finite_diff_check(|_| Ok(4.2), &point, &Tensor::zeros(&[2]).unwrap(), DEFAULT_STEP)
            .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_fails() {
        let point = Tensor::new(&[1], vec![0.0]).unwrap();
        let res = finite_diff_check(|_| Ok(f64::NAN), &point, &Tensor::zeros(&[1]).unwrap(), 1e-3);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let point = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let analytic = Tensor::new(&[2], vec![2.0, 5.0]).unwrap();
        let err = finite_diff_check(
            |x| Ok(x.data().iter().map(|v| v * v).sum()),
            &point,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn small_suite_passes_and_fault_fails() {
        let cfg = GradCheckConfig {
            seeds: 2,
            model: UNetConfig {
                base_channels: 2,
                ..UNetConfig::default()
            },
            size: 8,
            ..GradCheckConfig::default()
        };
        let report = run_suite(&cfg).unwrap();
        assert!(report.passed(), "{report:?}");

        let broken = run_suite(&GradCheckConfig {
            fault: Some(BackwardFault::ReluPassThrough),
            ..cfg
        })
        .unwrap();
        assert!(!broken.passed(), "{broken:?}");
    }
}
