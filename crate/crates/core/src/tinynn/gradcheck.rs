//! Central finite-difference checks of the reverse passes, run in `f64`.
//!
//! A coordinate whose perturbation flips a relu sign or a maxpool winner is
//! skipped: the loss is not differentiable across that kink.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{mse_loss, LayerSpec, NetSpec, Network, NnError, Saved, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    Dense,
    ConcatSkip,
    MseLoss,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] =
        [LayerKind::Conv, LayerKind::Relu, LayerKind::Maxpool, LayerKind::Dense, LayerKind::ConcatSkip, LayerKind::MseLoss];
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub instances: usize,
    /// Coordinates compared (parameters and inputs).
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), instances: 0, checked: 0, skipped: 0, max_rel_error: 0.0 }
    }

    fn absorb(&mut self, other: &GradCheckReport) {
        self.instances += other.instances;
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }
}

/// Gradients this small are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn kink_pattern(saved: &[Saved<f64>], out: &mut Vec<u32>) {
    for s in saved {
        match s {
            Saved::Output(y) => out.extend(y.iter().map(|&v| u32::from(v > 0.0))),
            Saved::Argmax(a) => out.extend_from_slice(a),
            Saved::Block(inner) => kink_pattern(inner, out),
            Saved::Input(_) => {}
        }
    }
}

/// Loss is `sum(probe * output)` when `target` is `None`, else the MSE against it.
struct Problem<'a> {
    net: &'a Network,
    batch: usize,
    probe: Vec<f64>,
    target: Option<Vec<f64>>,
}

impl Problem<'_> {
    fn eval(&self, params: &[f64], x: &[f64]) -> (f64, Vec<f64>, Vec<u32>, Vec<Saved<f64>>) {
        let input = Tensor { batch: self.batch, shape: self.net.input_shape(), values: x.to_vec() };
        let (y, saved) = self.net.forward(params, &input).expect("shapes fixed by construction");
        let (loss, grad) = match &self.target {
            Some(t) => mse_loss(&y.values, t, &[1.0; 5]),
            None => (y.values.iter().zip(&self.probe).map(|(a, b)| a * b).sum(), self.probe.clone()),
        };
        let mut pattern = Vec::new();
        kink_pattern(&saved, &mut pattern);
        (loss, grad, pattern, saved)
    }

    fn check(&self, params: &[f64], x: &[f64], eps: f64, name: &str, coords: Option<usize>, rng: &mut ChaCha8Rng) -> GradCheckReport {
        let (_, grad, pattern, saved) = self.eval(params, x);
        let mut grads = vec![0.0; params.len()];
        let g = Tensor { batch: self.batch, shape: self.net.output_shape(), values: grad };
        let dx = self.net.backward(params, &saved, &g, &mut grads).expect("cache from the same network");
        let mut report = GradCheckReport::new(name);
        report.instances = 1;
        let mut idx: Vec<(bool, usize)> =
            (0..params.len()).map(|i| (true, i)).chain((0..x.len()).map(|i| (false, i))).collect();
        if let Some(n) = coords {
            idx.shuffle(rng);
            idx.truncate(n);
        }
        let (mut p, mut xv) = (params.to_vec(), x.to_vec());
        for (is_param, i) in idx {
            let slot = if is_param { &mut p[i] } else { &mut xv[i] };
            let orig = *slot;
            *slot = orig + eps;
            let (lp, _, pp, _) = self.eval(&p, &xv);
            let slot = if is_param { &mut p[i] } else { &mut xv[i] };
            *slot = orig - eps;
            let (lm, _, pm, _) = self.eval(&p, &xv);
            let slot = if is_param { &mut p[i] } else { &mut xv[i] };
            *slot = orig;
            if pp != pattern || pm != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = if is_param { grads[i] } else { dx.values[i] };
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        }
        report
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-half..half)).collect()
}

/// Values bounded away from zero, so small perturbations never cross the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Distinct values at least 0.01 apart, so every pooling window has a clear winner.
fn well_separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    v.shuffle(rng);
    v
}

fn instance(kind: LayerKind, rng: &mut ChaCha8Rng) -> (NetSpec, usize, Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let batch = rng.random_range(1..=2);
    let (input, layers) = match kind {
        LayerKind::Conv => {
            let k = [1, 2, 3][rng.random_range(0..3)];
            let c = rng.random_range(1..=3);
            let shape = Shape::new(c, rng.random_range(k.max(3)..=6), rng.random_range(k.max(3)..=6));
            let conv = LayerSpec::Conv {
                kernel: k,
                in_ch: c,
                out_ch: rng.random_range(1..=4),
                stride: rng.random_range(1..=2),
                pad: rng.random_range(0..=1),
            };
            (shape, vec![conv])
        }
        LayerKind::Relu => (Shape::new(rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5)), vec![LayerSpec::Relu]),
        LayerKind::Maxpool => (
            Shape::new(rng.random_range(1..=3), rng.random_range(2..=7), rng.random_range(2..=7)),
            vec![LayerSpec::Maxpool],
        ),
        LayerKind::Dense => {
            let shape = Shape::new(rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
            (shape, vec![LayerSpec::Dense { inputs: shape.len(), outputs: rng.random_range(1..=6) }])
        }
        LayerKind::ConcatSkip => {
            let c = rng.random_range(1..=3);
            let shape = Shape::new(c, rng.random_range(3..=5), rng.random_range(3..=5));
            let conv = LayerSpec::Conv { kernel: 3, in_ch: c, out_ch: rng.random_range(1..=3), stride: 1, pad: 1 };
            let block = if rng.random_bool(0.5) { vec![conv] } else { vec![conv, LayerSpec::Relu] };
            (shape, vec![LayerSpec::ConcatSkip { block }])
        }
        LayerKind::MseLoss => {
            let shape = Shape::flat(rng.random_range(2..=4));
            (shape, vec![LayerSpec::Dense { inputs: shape.len(), outputs: 5 }])
        }
    };
    let spec = NetSpec { input, layers };
    let out_len = spec.output_shape().expect("valid by construction").len();
    let n_params = spec.param_count();
    let params = uniform(rng, n_params, 1.0);
    let x = match kind {
        LayerKind::Relu => away_from_zero(rng, batch * input.len()),
        LayerKind::Maxpool => well_separated(rng, batch * input.len()),
        _ => uniform(rng, batch * input.len(), 1.0),
    };
    let target = (kind == LayerKind::MseLoss).then(|| uniform(rng, batch * out_len, 1.0));
    (spec, batch, params, x, target)
}

/// Checks every coordinate of `instances` random small networks per layer kind.
pub fn check_layer_kinds(kinds: &[LayerKind], instances: usize, eps: f64, seed: u64) -> Vec<GradCheckReport> {
    kinds
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32));
            let name = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let mut total = GradCheckReport::new(&name);
            for _ in 0..instances {
                let (spec, batch, params, x, target) = instance(kind, &mut rng);
                let net = Network::new(&spec).expect("valid by construction");
                let out_len = net.output_shape().len() * batch;
                let probe = uniform(&mut rng, out_len, 1.0);
                let problem = Problem { net: &net, batch, probe, target };
                total.absorb(&problem.check(&params, &x, eps, &name, None, &mut rng));
            }
            total
        })
        .collect()
}

/// Checks a whole network under the MSE loss on random inputs and targets;
/// `coords` limits the number of sampled coordinates.
pub fn check_network(spec: &NetSpec, eps: f64, seed: u64, coords: Option<usize>) -> Result<GradCheckReport, NnError> {
    let net = Network::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 2;
    let params: Vec<f64> = super::init_params(&net, seed);
    let x = uniform(&mut rng, batch * spec.input.len(), 1.0).into_iter().map(|v| v.abs()).collect::<Vec<_>>();
    let out_len = net.output_shape().len();
    let target = if out_len == 5 { Some(uniform(&mut rng, batch * 5, 1.0)) } else { None };
    let probe = uniform(&mut rng, batch * out_len, 1.0);
    let problem = Problem { net: &net, batch, probe, target };
    Ok(problem.check(&params, &x, eps, "network", coords, &mut rng))
}
