//! Stand-alone residual encoder and decoder blocks.
//!
//! These build the same sub-graphs [`build_network`](super::build_network)
//! uses, so testing them in isolation exercises the production code path.

use crate::error::Result;
use crate::nn::exec::{forward, Mode};
use crate::nn::graph::{GraphBuilder, NetworkGraph};
use crate::nn::params::ParameterStore;
use crate::tensor::{Real, Tensor4};

/// Graph of a single residual block over `(channels, h, w)` inputs; parameters are prefixed `block.`.
pub fn res_block_graph(in_shape: [usize; 3], out_channels: usize, stride: usize) -> Result<NetworkGraph> {
    let [c, h, w] = in_shape;
    let mut g = GraphBuilder::new(c, h, w);
    let y = g.res_block("block", g.input(), out_channels, stride)?;
    Ok(g.finish(y))
}

/// Graph of a single decoder block; parameters are prefixed `block.`.
pub fn decode_block_graph(in_shape: [usize; 3], out_channels: usize) -> Result<NetworkGraph> {
    let [c, h, w] = in_shape;
    let mut g = GraphBuilder::new(c, h, w);
    let y = g.decode_block("block", g.input(), out_channels)?;
    Ok(g.finish(y))
}

fn item_shape<T>(x: &Tensor4<T>) -> [usize; 3] {
    let [_, c, h, w] = x.dims();
    [c, h, w]
}

pub fn res_block_forward<T: Real>(
    x: &Tensor4<T>,
    params: &ParameterStore<T>,
    out_channels: usize,
    stride: usize,
    mode: Mode,
) -> Result<Tensor4<T>> {
    let graph = res_block_graph(item_shape(x), out_channels, stride)?;
    params.check_against(&graph)?;
    Ok(forward(&graph, params, x, mode)?.into_output())
}

pub fn decode_block_forward<T: Real>(
    x: &Tensor4<T>,
    params: &ParameterStore<T>,
    out_channels: usize,
    mode: Mode,
) -> Result<Tensor4<T>> {
    let graph = decode_block_graph(item_shape(x), out_channels)?;
    params.check_against(&graph)?;
    Ok(forward(&graph, params, x, mode)?.into_output())
}
