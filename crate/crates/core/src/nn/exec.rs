//! Graph execution: forward with activation caching, reverse-mode backward.

use crate::error::{Error, Result};
use crate::nn::graph::{LayerKind, NetworkGraph, NodeId};
use crate::nn::layers::{self, BatchStats, ResizePlan, BN_MOMENTUM};
use crate::nn::params::{ParamTensor, ParameterStore};
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, activations cached for [`backward`].
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

enum NodeCache<T> {
    None,
    BatchNorm(BatchStats<T>),
    /// Running statistics an eval-mode pass normalized with.
    BatchNormEval { mean: Vec<T>, inv_std: Vec<T> },
    MaxPool(Vec<u32>),
}

/// Result of a forward pass. In train mode it holds everything [`backward`] needs.
pub struct ForwardPass<T> {
    mode: Mode,
    /// Whether every activation and cache was kept, so [`backward`] can run.
    cached: bool,
    output: NodeId,
    activations: Vec<Option<Tensor4<T>>>,
    caches: Vec<NodeCache<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn output(&self) -> &Tensor4<T> {
        self.activations[self.output]
            .as_ref()
            .expect("output activation is always kept")
    }

    pub fn into_output(mut self) -> Tensor4<T> {
        self.activations[self.output]
            .take()
            .expect("output activation is always kept")
    }

    /// Activation of a named layer (train mode keeps all of them).
    pub fn activation(&self, graph: &NetworkGraph, name: &str) -> Option<&Tensor4<T>> {
        let id = graph.nodes().iter().position(|n| n.name() == name)?;
        self.activations[id].as_ref()
    }
}

/// Gradients of a scalar objective w.r.t. every trainable parameter and the input.
pub struct Gradients<T> {
    pub params: ParameterStore<T>,
    pub input: Tensor4<T>,
}

fn bn_params<'a, T: Real>(store: &'a ParameterStore<T>, name: &str) -> Result<(&'a [T], &'a [T])> {
    Ok((
        store.data(&format!("{name}.gamma"))?,
        store.data(&format!("{name}.beta"))?,
    ))
}

fn conv_params<'a, T: Real>(
    store: &'a ParameterStore<T>,
    name: &str,
    bias: bool,
) -> Result<(&'a [T], Option<&'a [T]>)> {
    let w = store.data(&format!("{name}.weight"))?;
    let b = if bias {
        Some(store.data(&format!("{name}.bias"))?)
    } else {
        None
    };
    Ok((w, b))
}

/// Runs the network on `(n, c, h, w)` input.
///
/// Fails if the input does not match the graph, if train mode is asked to
/// normalize a single-element batch, or if the output is not finite.
pub fn forward<T: Real>(
    graph: &NetworkGraph,
    store: &ParameterStore<T>,
    input: &Tensor4<T>,
    mode: Mode,
) -> Result<ForwardPass<T>> {
    forward_impl(graph, store, input, mode, None, mode == Mode::Train)
}

/// Forward that keeps everything [`backward`] needs, in either mode.
pub(crate) fn forward_cached<T: Real>(
    graph: &NetworkGraph,
    store: &ParameterStore<T>,
    input: &Tensor4<T>,
    mode: Mode,
) -> Result<ForwardPass<T>> {
    forward_impl(graph, store, input, mode, None, true)
}

/// ReLU on/off pattern and max-pool routing recorded from a train-mode pass.
pub(crate) struct Gates {
    relu: Vec<Option<Vec<bool>>>,
    pool: Vec<Option<Vec<u32>>>,
}

impl Gates {
    pub(crate) fn from_pass<T: Real>(graph: &NetworkGraph, pass: &ForwardPass<T>) -> Self {
        let mut relu = Vec::with_capacity(graph.nodes().len());
        let mut pool = Vec::with_capacity(graph.nodes().len());
        for (id, node) in graph.nodes().iter().enumerate() {
            relu.push(match (&node.spec.kind, &pass.activations[id]) {
                (LayerKind::Relu, Some(y)) => Some(y.data().iter().map(|v| *v > T::zero()).collect()),
                _ => None,
            });
            pool.push(match &pass.caches[id] {
                NodeCache::MaxPool(a) => Some(a.clone()),
                _ => None,
            });
        }
        Gates { relu, pool }
    }
}

/// Forward with every ReLU and max-pool switched as in `gates`.
///
/// Within a neighbourhood of the recording point that crosses no kink this is
/// the same function as [`forward`]; unlike it, it stays smooth across kinks.
pub(crate) fn forward_gated<T: Real>(
    graph: &NetworkGraph,
    store: &ParameterStore<T>,
    input: &Tensor4<T>,
    mode: Mode,
    gates: &Gates,
) -> Result<Tensor4<T>> {
    Ok(forward_impl(graph, store, input, mode, Some(gates), false)?.into_output())
}

fn forward_impl<T: Real>(
    graph: &NetworkGraph,
    store: &ParameterStore<T>,
    input: &Tensor4<T>,
    mode: Mode,
    gates: Option<&Gates>,
    keep: bool,
) -> Result<ForwardPass<T>> {
    let [n, c, h, w] = input.dims();
    if [c, h, w] != graph.input_shape() || n == 0 {
        return Err(Error::Shape(format!(
            "input {:?} does not match network input {:?}",
            input.dims(),
            graph.input_shape()
        )));
    }
    let nodes = graph.nodes();
    let has_bn = nodes.iter().any(|n| n.spec.kind == LayerKind::BatchNorm);
    if mode == Mode::Train && has_bn && n < 2 {
        return Err(Error::Shape(
            "train-mode batch norm needs a batch of at least 2".into(),
        ));
    }

    // eval mode frees each activation after its last consumer
    let mut last_use = vec![0usize; nodes.len()];
    for (id, node) in nodes.iter().enumerate() {
        for &i in &node.inputs {
            last_use[i] = id;
        }
    }
    last_use[graph.output()] = usize::MAX;

    let mut acts: Vec<Option<Tensor4<T>>> = Vec::with_capacity(nodes.len());
    let mut caches = Vec::with_capacity(nodes.len());
    acts.push(Some(input.clone()));
    caches.push(NodeCache::None);

    for id in 1..nodes.len() {
        let node = &nodes[id];
        let arg = |k: usize| -> &Tensor4<T> {
            acts[node.inputs[k]]
                .as_ref()
                .expect("producer activation still alive")
        };
        let name = node.name();
        let mut cache = NodeCache::None;
        let y = match node.spec.kind {
            LayerKind::Input => unreachable!("only node 0 is an input"),
            LayerKind::Conv {
                out_channels, bias, ..
            } => {
                let (wt, b) = conv_params(store, name, bias)?;
                let g = graph.window(id).expect("conv window");
                layers::conv2d_forward(arg(0), wt, b, out_channels, &g)
            }
            LayerKind::TransposedConv { bias, .. } => {
                let (wt, b) = conv_params(store, name, bias)?;
                let g = graph.window(id).expect("tconv window");
                layers::conv_transpose2d_forward(arg(0), wt, b, &g)
            }
            LayerKind::BatchNorm => {
                let (gamma, beta) = bn_params(store, name)?;
                match mode {
                    Mode::Train => {
                        let (y, stats) = layers::batch_norm_train(arg(0), gamma, beta);
                        cache = NodeCache::BatchNorm(stats);
                        y
                    }
                    Mode::Eval => {
                        let mean = store.data(&format!("{name}.running_mean"))?;
                        let var = store.data(&format!("{name}.running_var"))?;
                        if keep {
                            cache = NodeCache::BatchNormEval {
                                mean: mean.to_vec(),
                                inv_std: var
                                    .iter()
                                    .map(|v| T::one() / (*v + T::lit(layers::BN_EPS)).sqrt())
                                    .collect(),
                            };
                        }
                        layers::batch_norm_eval(arg(0), gamma, beta, mean, var)
                    }
                }
            }
            LayerKind::Relu => match gates.and_then(|g| g.relu[id].as_ref()) {
                Some(on) => {
                    let mut y = arg(0).clone();
                    for (v, &keep) in y.data_mut().iter_mut().zip(on) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                    y
                }
                None => layers::relu_forward(arg(0)),
            },
            LayerKind::Sigmoid => layers::sigmoid_forward(arg(0)),
            LayerKind::MaxPool { .. } => {
                let g = graph.window(id).expect("pool window");
                let (mut y, argmax) = layers::max_pool_forward(arg(0), &g);
                if let Some(route) = gates.and_then(|g| g.pool[id].as_ref()) {
                    let x = arg(0).data();
                    for (v, &i) in y.data_mut().iter_mut().zip(route) {
                        *v = x[i as usize];
                    }
                }
                if keep {
                    cache = NodeCache::MaxPool(argmax);
                }
                y
            }
            LayerKind::Add => layers::add_forward(arg(0), arg(1)),
            LayerKind::Concat => {
                let parts: Vec<&Tensor4<T>> = (0..node.inputs.len()).map(arg).collect();
                layers::concat_forward(&parts)
            }
            LayerKind::BilinearResize { .. } => {
                let [_, ih, iw] = nodes[node.inputs[0]].shape;
                let [_, oh, ow] = node.shape;
                layers::resize_forward(arg(0), &ResizePlan::new(ih, iw, oh, ow))
            }
        };
        let [_, yc, yh, yw] = y.dims();
        debug_assert_eq!([yc, yh, yw], node.shape, "{name}: runtime shape differs from inferred");
        if cfg!(debug_assertions) && !y.all_finite() {
            return Err(Error::Numeric(format!("layer {name} produced a non-finite value")));
        }
        acts.push(Some(y));
        caches.push(cache);
        if !keep {
            for &i in &node.inputs {
                if last_use[i] == id {
                    acts[i] = None;
                }
            }
        }
    }

    let pass = ForwardPass {
        mode,
        cached: keep,
        output: graph.output(),
        activations: acts,
        caches,
    };
    if !pass.output().all_finite() {
        return Err(Error::Numeric("network output contains NaN or Inf".into()));
    }
    Ok(pass)
}

/// Convenience: eval-mode forward returning only the output.
pub fn predict<T: Real>(
    graph: &NetworkGraph,
    store: &ParameterStore<T>,
    input: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    Ok(forward(graph, store, input, Mode::Eval)?.into_output())
}

fn accumulate<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a = *a + *b),
    }
}

/// Backpropagates `upstream` (∂objective/∂output) through a train-mode pass.
///
/// Eval-mode passes from [`forward`] keep nothing and are rejected.
pub fn backward<T: Real>(
    graph: &NetworkGraph,
    store: &ParameterStore<T>,
    pass: &ForwardPass<T>,
    upstream: &Tensor4<T>,
) -> Result<Gradients<T>> {
    if !pass.cached {
        return Err(Error::NoCachedForward);
    }
    if upstream.dims() != pass.output().dims() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            upstream.dims(),
            pass.output().dims()
        )));
    }
    let nodes = graph.nodes();
    let act = |i: NodeId| pass.activations[i].as_ref().expect("train pass keeps activations");

    let mut grads: Vec<Option<Tensor4<T>>> = (0..nodes.len()).map(|_| None).collect();
    grads[graph.output()] = Some(upstream.clone());

    let mut param_grads = ParameterStore::new();
    for spec in graph.params().iter().filter(|p| p.role.trainable()) {
        param_grads.insert(spec.name.clone(), ParamTensor::zeros(spec.dims.clone()))?;
    }
    let mut set_grad = |name: String, g: Vec<T>| {
        param_grads
            .get_mut(&name)
            .expect("trainable parameter registered")
            .data = g;
    };

    for id in (1..nodes.len()).rev() {
        let Some(dy) = grads[id].take() else {
            continue;
        };
        let node = &nodes[id];
        let name = node.name();
        let x = act(node.inputs[0]);
        match node.spec.kind {
            LayerKind::Input => unreachable!(),
            LayerKind::Conv { bias, .. } => {
                let (wt, _) = conv_params(store, name, bias)?;
                let g = graph.window(id).expect("conv window");
                let pg = layers::conv2d_backward(x, wt, bias, &dy, &g);
                set_grad(format!("{name}.weight"), pg.weight);
                if let Some(db) = pg.bias {
                    set_grad(format!("{name}.bias"), db);
                }
                accumulate(&mut grads[node.inputs[0]], pg.input);
            }
            LayerKind::TransposedConv { bias, .. } => {
                let (wt, _) = conv_params(store, name, bias)?;
                let g = graph.window(id).expect("tconv window");
                let pg = layers::conv_transpose2d_backward(x, wt, bias, &dy, &g);
                set_grad(format!("{name}.weight"), pg.weight);
                if let Some(db) = pg.bias {
                    set_grad(format!("{name}.bias"), db);
                }
                accumulate(&mut grads[node.inputs[0]], pg.input);
            }
            LayerKind::BatchNorm => {
                let (gamma, _) = bn_params(store, name)?;
                let (dx, dgamma, dbeta) = match &pass.caches[id] {
                    NodeCache::BatchNorm(stats) => layers::batch_norm_backward(x, gamma, stats, &dy),
                    NodeCache::BatchNormEval { mean, inv_std } => {
                        layers::batch_norm_eval_backward(x, gamma, mean, inv_std, &dy)
                    }
                    _ => return Err(Error::NoCachedForward),
                };
                set_grad(format!("{name}.gamma"), dgamma);
                set_grad(format!("{name}.beta"), dbeta);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            LayerKind::Relu => {
                accumulate(&mut grads[node.inputs[0]], layers::relu_backward(act(id), &dy));
            }
            LayerKind::Sigmoid => {
                accumulate(&mut grads[node.inputs[0]], layers::sigmoid_backward(act(id), &dy));
            }
            LayerKind::MaxPool { .. } => {
                let NodeCache::MaxPool(argmax) = &pass.caches[id] else {
                    return Err(Error::NoCachedForward);
                };
                accumulate(
                    &mut grads[node.inputs[0]],
                    layers::max_pool_backward(x.dims(), argmax, &dy),
                );
            }
            LayerKind::Add => {
                accumulate(&mut grads[node.inputs[0]], dy.clone());
                accumulate(&mut grads[node.inputs[1]], dy);
            }
            LayerKind::Concat => {
                let channels: Vec<usize> = node.inputs.iter().map(|&i| nodes[i].shape[0]).collect();
                for (&i, g) in node.inputs.iter().zip(layers::concat_backward(&channels, &dy)) {
                    accumulate(&mut grads[i], g);
                }
            }
            LayerKind::BilinearResize { .. } => {
                let [_, ih, iw] = nodes[node.inputs[0]].shape;
                let [_, oh, ow] = node.shape;
                let dx = layers::resize_backward(x.dims(), &ResizePlan::new(ih, iw, oh, ow), &dy);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
        }
    }

    let input = grads[0]
        .take()
        .unwrap_or_else(|| Tensor4::zeros(act(0).dims()));
    Ok(Gradients {
        params: param_grads,
        input,
    })
}

/// Folds a train-mode pass's batch statistics into the running estimates.
pub fn update_running_stats<T: Real>(
    graph: &NetworkGraph,
    store: &mut ParameterStore<T>,
    pass: &ForwardPass<T>,
) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    for (id, node) in graph.nodes().iter().enumerate() {
        let NodeCache::BatchNorm(stats) = &pass.caches[id] else {
            continue;
        };
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
            let key = format!("{}.{suffix}", node.name());
            let t = store
                .get_mut(&key)
                .ok_or_else(|| Error::Shape(format!("missing parameter {key}")))?;
            for (r, b) in t.data.iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
    }
    Ok(())
}
