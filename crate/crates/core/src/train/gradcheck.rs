//! Central finite-difference verification of analytic gradients, in `f64`.
//!
//! A graph is checked through the scalar objective `L = Σ r ⊙ output` with a
//! fixed random `r`, so every output element contributes. Each perturbed
//! evaluation can optionally keep the ReLU and max-pool switching of the
//! unperturbed pass (see [`Gating`]).

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{combined_loss, combined_loss_grad};
use crate::nn::exec::{forward_cached, forward_gated, Gates};
use crate::nn::{
    backward, build_network, forward, init_parameters, GraphBuilder, Mode, NetworkConfig,
    NetworkGraph, ParamRole, ParameterStore,
};
use crate::resize::ScaleFactor;
use crate::tensor::Tensor4;

pub const FD_EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Tensors longer than this are checked on a random subsample of this many coordinates.
pub const MAX_COORDS: usize = 200;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// How perturbed forwards treat piecewise-linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Plain forward: ReLU and max-pool re-decide at every perturbed point.
    Free,
    /// ReLU masks and pool routing frozen at the unperturbed point. This removes
    /// kink crossings, which in a deep ReLU network almost every ±ε step of an
    /// early weight causes somewhere.
    Frozen,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinate with the largest error, as `tensor[index]`.
    pub worst: String,
    /// Largest error within each checked tensor, in check order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

impl fmt::Display for GradCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} max_rel_err {:.3e} over {:>5} coords (worst {})  {}",
            self.component,
            self.max_rel_error,
            self.coords_checked,
            self.worst,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

#[derive(Default)]
struct Worst {
    err: f64,
    at: String,
    count: usize,
    per_tensor: Vec<(String, f64)>,
}

impl Worst {
    fn record(&mut self, tensor: &str, i: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.count += 1;
        match self.per_tensor.last_mut() {
            Some((name, m)) if name == tensor => *m = m.max(e),
            _ => self.per_tensor.push((tensor.to_string(), e)),
        }
        if e > self.err || self.at.is_empty() {
            self.err = e;
            self.at = format!("{tensor}[{i}]");
        }
    }

    fn finish(self, component: &str) -> GradCheck {
        GradCheck {
            component: component.into(),
            max_rel_error: self.err,
            coords_checked: self.count,
            worst: self.at,
            per_tensor: self.per_tensor,
        }
    }
}

fn coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, MAX_COORDS).into_vec();
        v.sort_unstable();
        v
    }
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `Σ r ⊙ (up − down) / 2ε`, differencing before summing to avoid cancellation.
fn central_difference(up: &Tensor4<f64>, down: &Tensor4<f64>, r: &[f64], eps: f64) -> f64 {
    let s: f64 = up
        .data()
        .iter()
        .zip(down.data())
        .zip(r)
        .map(|((u, d), w)| (u - d) * w)
        .sum();
    s / (2.0 * eps)
}

/// Checks every trainable parameter and the input of `graph` at (`params`, `input`).
pub fn check_graph(
    component: &str,
    graph: &NetworkGraph,
    params: &ParameterStore<f64>,
    input: &Tensor4<f64>,
    mode: Mode,
    gating: Gating,
    seed: u64,
) -> Result<GradCheck> {
    check_graph_with_eps(component, graph, params, input, mode, gating, seed, FD_EPS)
}

/// [`check_graph`] with a custom step.
#[allow(clippy::too_many_arguments)]
pub fn check_graph_with_eps(
    component: &str,
    graph: &NetworkGraph,
    params: &ParameterStore<f64>,
    input: &Tensor4<f64>,
    mode: Mode,
    gating: Gating,
    seed: u64,
    eps: f64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pass = forward_cached(graph, params, input, mode)?;
    let r = normal_vec(pass.output().len(), &mut rng);
    let upstream = Tensor4::from_vec(pass.output().dims(), r.clone())?;
    let grads = backward(graph, params, &pass, &upstream)?;
    let gates = Gates::from_pass(graph, &pass);

    let objective = |p: &ParameterStore<f64>, x: &Tensor4<f64>| -> Result<Tensor4<f64>> {
        match gating {
            Gating::Free => Ok(forward(graph, p, x, mode)?.into_output()),
            Gating::Frozen => forward_gated(graph, p, x, mode, &gates),
        }
    };

    let mut worst = Worst::default();
    let mut p = params.clone();
    for (name, g) in grads.params.iter() {
        for i in coords(g.data.len(), &mut rng) {
            let orig = p.get(name).expect("gradient has a parameter").data[i];
            p.get_mut(name).expect("parameter").data[i] = orig + eps;
            let up = objective(&p, input)?;
            p.get_mut(name).expect("parameter").data[i] = orig - eps;
            let down = objective(&p, input)?;
            p.get_mut(name).expect("parameter").data[i] = orig;
            worst.record(name, i, g.data[i], central_difference(&up, &down, &r, eps));
        }
    }
    let mut x = input.clone();
    for i in coords(x.len(), &mut rng) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = objective(params, &x)?;
        x.data_mut()[i] = orig - eps;
        let down = objective(params, &x)?;
        x.data_mut()[i] = orig;
        worst.record("input", i, grads.input.data()[i], central_difference(&up, &down, &r, eps));
    }
    Ok(worst.finish(component))
}

/// Checks [`combined_loss_grad`] against finite differences of [`combined_loss`].
pub fn check_loss(dims: [usize; 4], use_dice: bool, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let p = Tensor4::from_vec(dims, (0..n).map(|_| rng.random_range(0.1..0.9)).collect())?;
    let g = Tensor4::from_vec(dims, (0..n).map(|_| f64::from(rng.random_bool(0.3))).collect())?;
    let analytic = combined_loss_grad(&p, &g, use_dice)?.grad;
    let mut worst = Worst::default();
    let mut q = p.clone();
    for i in coords(n, &mut rng) {
        let orig = q.data()[i];
        q.data_mut()[i] = orig + FD_EPS;
        let up = combined_loss(&q, &g, use_dice)?;
        q.data_mut()[i] = orig - FD_EPS;
        let down = combined_loss(&q, &g, use_dice)?;
        q.data_mut()[i] = orig;
        worst.record("p", i, analytic.data()[i], (up - down) / (2.0 * FD_EPS));
    }
    Ok(worst.finish(if use_dice { "loss" } else { "loss_bce" }))
}

/// Named things the checker knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Identity,
    Conv,
    TransposedConv,
    BatchNorm,
    Relu,
    Sigmoid,
    MaxPool,
    Add,
    Concat,
    BilinearResize,
    ResBlock,
    DecodeBlock,
    Network,
    Loss,
}

impl Component {
    pub const ALL: [Component; 14] = [
        Component::Identity,
        Component::Conv,
        Component::TransposedConv,
        Component::BatchNorm,
        Component::Relu,
        Component::Sigmoid,
        Component::MaxPool,
        Component::Add,
        Component::Concat,
        Component::BilinearResize,
        Component::ResBlock,
        Component::DecodeBlock,
        Component::Network,
        Component::Loss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Identity => "identity",
            Component::Conv => "conv",
            Component::TransposedConv => "transposed_conv",
            Component::BatchNorm => "batch_norm",
            Component::Relu => "relu",
            Component::Sigmoid => "sigmoid",
            Component::MaxPool => "max_pool",
            Component::Add => "add",
            Component::Concat => "concat",
            Component::BilinearResize => "bilinear_resize",
            Component::ResBlock => "res_block",
            Component::DecodeBlock => "decode_block",
            Component::Network => "network",
            Component::Loss => "loss",
        }
    }

    pub fn default_dims(self) -> [usize; 4] {
        match self {
            Component::DecodeBlock => [2, 8, 8, 8],
            Component::Network => [2, 1, 32, 32],
            _ => [2, 3, 8, 8],
        }
    }

    /// Composites contain many ReLUs, so they are checked with frozen gating.
    pub fn gating(self) -> Gating {
        match self {
            Component::ResBlock | Component::DecodeBlock | Component::Network => Gating::Frozen,
            _ => Gating::Free,
        }
    }

    /// The graph checked for this component at `dims`.
    pub fn graph(self, dims: [usize; 4]) -> Result<NetworkGraph> {
        let [_, c, h, w] = dims;
        if self == Component::Network {
            let config = NetworkConfig {
                in_channels: c,
                ..NetworkConfig::dual_scale((h, w)).with_channels(8, [8, 16, 32, 64])
            };
            return build_network(&config);
        }
        let mut g = GraphBuilder::new(c, h, w);
        let x = g.input();
        let y = match self {
            Component::Identity => x,
            Component::Conv => g.conv("conv", x, 4, 3, 2, 1, true)?,
            Component::TransposedConv => g.transposed_conv("tconv", x, 4, 3, 2, 1, 1, true)?,
            Component::BatchNorm => g.batch_norm("bn", x)?,
            Component::Relu => g.relu("relu", x)?,
            Component::Sigmoid => g.sigmoid("sigmoid", x)?,
            Component::MaxPool => g.max_pool("pool", x, 3, 2, 1)?,
            Component::Add => {
                let b = g.conv("branch", x, c, 1, 1, 0, true)?;
                g.add("add", x, b)?
            }
            Component::Concat => {
                let b = g.conv("branch", x, 2, 1, 1, 0, true)?;
                g.concat("concat", &[b, x, b])?
            }
            Component::BilinearResize => g.resize("resize", x, ScaleFactor::Half)?,
            Component::ResBlock => g.res_block("block", x, 2 * c, 2)?,
            Component::DecodeBlock => g.decode_block("block", x, c / 2)?,
            Component::Network | Component::Loss => {
                unreachable!("handled above or not a graph")
            }
        };
        Ok(g.finish(y))
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Component::ALL.iter().map(|c| c.as_str()).collect();
                Error::Config(format!("unknown component {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// He-initialized parameters in `f64`, with biases and batch-norm affine terms
/// and running statistics moved off their trivial initial values.
pub fn random_params(graph: &NetworkGraph, seed: u64) -> ParameterStore<f64> {
    let mut store = init_parameters(graph, seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for spec in graph.params() {
        let t = store.get_mut(&spec.name).expect("initialized");
        match spec.role {
            ParamRole::Gamma => t.data.iter_mut().for_each(|v| *v = 1.0 + 0.2 * rng.random::<f64>()),
            ParamRole::Beta | ParamRole::Bias | ParamRole::RunningMean => {
                t.data.iter_mut().for_each(|v| *v = 0.2 * (rng.random::<f64>() - 0.5))
            }
            ParamRole::RunningVar => t.data.iter_mut().for_each(|v| *v = 0.8 + 0.4 * rng.random::<f64>()),
            _ => {}
        }
    }
    store
}

/// What to check and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckCase {
    pub component: Component,
    pub dims: [usize; 4],
    pub mode: Mode,
    pub seed: u64,
}

impl CheckCase {
    pub fn new(component: Component, mode: Mode, seed: u64) -> Self {
        CheckCase {
            component,
            dims: component.default_dims(),
            mode,
            seed,
        }
    }

    pub fn label(&self) -> String {
        match self.mode {
            Mode::Train => self.component.as_str().to_string(),
            Mode::Eval => format!("{}[eval]", self.component.as_str()),
        }
    }

    pub fn run(&self) -> Result<GradCheck> {
        self.run_with_eps(FD_EPS)
    }

    pub fn run_with_eps(&self, eps: f64) -> Result<GradCheck> {
        let dims = self.dims;
        if dims.contains(&0) {
            return Err(Error::Config(format!("grad-check dims must be positive, got {dims:?}")));
        }
        if self.component == Component::Loss {
            return check_loss(dims, true, self.seed);
        }
        let graph = self.component.graph(dims)?;
        let params = random_params(&graph, self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let n = dims.iter().product();
        let values = if self.component == Component::MaxPool {
            // distinct values 0.01 apart, so no ±ε step reorders a window
            let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            v.shuffle(&mut rng);
            v
        } else {
            normal_vec(n, &mut rng)
        };
        let input = Tensor4::from_vec(dims, values)?;
        check_graph_with_eps(
            &self.label(),
            &graph,
            &params,
            &input,
            self.mode,
            self.component.gating(),
            self.seed,
            eps,
        )
    }
}

/// The standard suite: every primitive in train mode, batch norm also in eval
/// mode, the composites in eval mode, and the loss.
pub fn suite(seed: u64) -> Vec<CheckCase> {
    let mut cases: Vec<CheckCase> = Component::ALL
        .into_iter()
        .map(|c| {
            let mode = match c {
                Component::ResBlock | Component::DecodeBlock | Component::Network => Mode::Eval,
                _ => Mode::Train,
            };
            CheckCase::new(c, mode, seed)
        })
        .collect();
    cases.insert(4, CheckCase::new(Component::BatchNorm, Mode::Eval, seed));
    cases
}

/// Train-mode composites, whose ε = 1e-3 error depends on the sample point.
pub fn train_mode_composites(seed: u64) -> Vec<CheckCase> {
    [Component::ResBlock, Component::DecodeBlock]
        .into_iter()
        .map(|c| CheckCase::new(c, Mode::Train, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 0.1);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn identity_is_exact() {
        let r = CheckCase::new(Component::Identity, Mode::Train, 5).run().unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r}");
        assert_eq!(r.coords_checked, MAX_COORDS);
    }

    #[test]
    fn conv_and_loss_pass() {
        for r in [
            CheckCase::new(Component::Conv, Mode::Train, 1).run().unwrap(),
            check_loss([2, 1, 4, 4], true, 1).unwrap(),
            check_loss([2, 1, 4, 4], false, 1).unwrap(),
        ] {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn train_mode_blocks_converge_quadratically() {
        // a wrong gradient leaves an error floor; truncation falls ~100× per decade of ε
        for case in train_mode_composites(0) {
            let coarse = case.run_with_eps(1e-3).unwrap().max_rel_error;
            let fine = case.run_with_eps(1e-4).unwrap().max_rel_error;
            assert!(fine < 1e-5 || coarse / fine > 30.0, "{}: {coarse:e} → {fine:e}", case.label());
        }
    }

    #[test]
    fn eval_blocks_are_tight() {
        for c in [Component::ResBlock, Component::DecodeBlock] {
            let r = CheckCase::new(c, Mode::Eval, 3).run().unwrap();
            assert!(r.max_rel_error < 1e-8, "{r}");
        }
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(c.as_str().parse::<Component>().unwrap(), c);
        }
        assert!("softmax".parse::<Component>().is_err());
    }

    #[test]
    fn zero_dims_rejected() {
        let mut case = CheckCase::new(Component::Conv, Mode::Train, 0);
        case.dims = [0, 3, 8, 8];
        assert!(case.run().is_err());
    }
}
