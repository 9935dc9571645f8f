use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::{NodeWeights, Tensor, TensorError, WeightSet};
use crate::netgraph::{NetGraph, NodeOp};

fn check_input(net: &NetGraph, weights: &WeightSet, x: &Tensor) -> Result<(), TensorError> {
    if weights.nodes().len() != net.nodes().len() {
        return Err(TensorError::WeightsMismatch);
    }
    let input = net.input_shape();
    let [n, c, h, w] = x.shape();
    if (c, h, w) != (input.c, input.h, input.w) || n == 0 {
        return Err(TensorError::Shape {
            op: "forward",
            detail: alloc::format!("input {:?} does not match network input {input:?}", x.shape()),
        });
    }
    Ok(())
}

/// Runs the backbone on a batch and returns the pooled features
/// `(n, feature_dim, 1, 1)`.
///
/// Normalization is the only operation that couples images, so the graph is
/// cut into stages at every normalization node. Within a stage each image is
/// pushed through all nodes while its activations are still in cache; only
/// values read by a later stage are kept for the whole batch. The result is
/// bit-identical to [`forward_layerwise`].
pub fn forward(net: &NetGraph, weights: &WeightSet, x: &Tensor) -> Result<Tensor, TensorError> {
    check_input(net, weights, x)?;
    let nodes = net.nodes();
    let len = nodes.len();
    let batch = x.batch();

    let mut stage = vec![0usize; len];
    for (i, node) in nodes.iter().enumerate() {
        let base = node.inputs.iter().map(|&s| stage[s]).max().unwrap_or(0);
        stage[i] = base + usize::from(matches!(node.op, NodeOp::BatchNorm));
    }
    // a value read by a later stage is kept per image in `store`, otherwise
    // it lives in `scratch` for the current image only
    let mut stored = vec![false; len];
    stored[net.output()] = true;
    // consumer that runs last, ordered by (stage, index)
    let mut last_consumer: Vec<Option<usize>> = vec![None; len];
    for (i, node) in nodes.iter().enumerate() {
        for &src in &node.inputs {
            if stage[src] != stage[i] {
                stored[src] = true;
            }
            if last_consumer[src].is_none_or(|c| (stage[c], c) < (stage[i], i)) {
                last_consumer[src] = Some(i);
            }
        }
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by_key(|&i| (stage[i], i));

    let mut store: Vec<Vec<Option<Tensor>>> = vec![Vec::new(); len];
    let mut scratch: Vec<Option<Tensor>> = vec![None; len];
    let max_stage = stage.iter().copied().max().unwrap_or(0);
    for s in 0..=max_stage {
        let members: Vec<usize> = order.iter().copied().filter(|&i| stage[i] == s).collect();
        let mut affine: Vec<Option<(Vec<f32>, Vec<f32>)>> = vec![None; len];
        for &i in &members {
            if let (NodeOp::BatchNorm, NodeWeights::BatchNorm { gamma, beta }) = (&nodes[i].op, &weights.nodes()[i]) {
                let parts: Vec<&Tensor> =
                    store[nodes[i].inputs[0]].iter().map(|t| t.as_ref().expect("normalization input stored")).collect();
                affine[i] = Some(kernels::batch_norm_affine_refs(&parts, gamma, beta)?);
            }
        }
        for b in 0..batch {
            for &i in &members {
                let node = &nodes[i];
                let sole = |src: usize| node.inputs.iter().filter(|&&s| s == src).count() == 1;
                let mut take = |src: usize| -> Tensor {
                    let slot = if stored[src] { &mut store[src][b] } else { &mut scratch[src] };
                    if last_consumer[src] == Some(i) && sole(src) {
                        slot.take().expect("value available")
                    } else {
                        slot.clone().expect("value available")
                    }
                };
                let result = match (&node.op, &weights.nodes()[i]) {
                    (NodeOp::Input, _) => image(x, b),
                    (NodeOp::BatchNorm, NodeWeights::BatchNorm { .. }) => {
                        let (scale, shift) = affine[i].as_ref().expect("statistics computed");
                        let mut t = take(node.inputs[0]);
                        kernels::apply_channel_affine(&mut t, scale, shift);
                        t
                    }
                    (NodeOp::Relu, _) => {
                        let mut t = take(node.inputs[0]);
                        kernels::relu_inplace(&mut t);
                        t
                    }
                    (NodeOp::Add, _) => {
                        let mut acc = take(node.inputs[0]);
                        for &src in &node.inputs[1..] {
                            kernels::add_assign(&mut acc, value(&store, &scratch, &stored, src, b))?;
                        }
                        acc
                    }
                    (op, w) => {
                        let get = |src: usize| value(&store, &scratch, &stored, src, b);
                        match (op, w) {
                            (NodeOp::Conv(spec), NodeWeights::Conv(k)) => kernels::conv2d(get(node.inputs[0]), k, spec)?,
                            (NodeOp::MaxPool3x3 { stride }, _) => kernels::max_pool3x3(get(node.inputs[0]), *stride)?,
                            (NodeOp::AvgPool3x3 { stride }, _) => kernels::avg_pool3x3(get(node.inputs[0]), *stride)?,
                            (NodeOp::FactorizedReduce { c_out, .. }, NodeWeights::FactorizedReduce { even, odd }) => {
                                kernels::factorized_reduce(get(node.inputs[0]), even, odd, *c_out)?
                            }
                            (NodeOp::Concat, _) => {
                                let parts: Vec<&Tensor> = node.inputs.iter().map(|&s| get(s)).collect();
                                kernels::concat(&parts)?
                            }
                            (NodeOp::Zero { stride }, _) => kernels::zero_like(get(node.inputs[0]), *stride),
                            (NodeOp::GlobalAvgPool, _) => kernels::global_avg_pool(get(node.inputs[0])),
                            _ => return Err(TensorError::WeightsMismatch),
                        }
                    }
                };
                if !result.is_finite() {
                    return Err(TensorError::NonFinite { node: i });
                }
                for &src in &node.inputs {
                    if last_consumer[src] == Some(i) {
                        if stored[src] {
                            store[src][b] = None;
                        } else {
                            scratch[src] = None;
                        }
                    }
                }
                if stored[i] {
                    if store[i].is_empty() {
                        store[i] = vec![None; batch];
                    }
                    store[i][b] = Some(result);
                } else if last_consumer[i].is_some() {
                    scratch[i] = Some(result);
                }
            }
        }
    }
    let parts: Vec<&Tensor> = store[net.output()].iter().map(|t| t.as_ref().expect("output computed")).collect();
    let [_, c, h, w] = parts[0].shape();
    let mut data = Vec::with_capacity(batch * c * h * w);
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([batch, c, h, w], data)
}

fn value<'a>(store: &'a [Vec<Option<Tensor>>], scratch: &'a [Option<Tensor>], stored: &[bool], src: usize, b: usize) -> &'a Tensor {
    let slot = if stored[src] { &store[src][b] } else { &scratch[src] };
    slot.as_ref().expect("value available")
}

fn image(t: &Tensor, b: usize) -> Tensor {
    let [_, c, h, w] = t.shape();
    let size = c * h * w;
    Tensor { shape: [1, c, h, w], data: t.data[b * size..(b + 1) * size].to_vec() }
}

/// Reference forward pass: every node runs over the whole batch before the
/// next one starts. Intermediate activations are dropped as soon as their
/// last consumer has run.
pub fn forward_layerwise(net: &NetGraph, weights: &WeightSet, x: &Tensor) -> Result<Tensor, TensorError> {
    check_input(net, weights, x)?;
    let nodes = net.nodes();
    let last_use = net.last_uses();
    let mut values: Vec<Option<Tensor>> = vec![None; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        // an input consumed for the last time here may be reused in place
        let owned = |values: &mut Vec<Option<Tensor>>, src: usize| -> Tensor {
            if last_use[src] == i && node.inputs.iter().filter(|&&s| s == src).count() == 1 {
                values[src].take().expect("value computed")
            } else {
                values[src].clone().expect("value computed")
            }
        };
        let result = match (&node.op, &weights.nodes()[i]) {
            (NodeOp::Input, _) => x.clone(),
            (NodeOp::Conv(spec), NodeWeights::Conv(k)) => {
                kernels::conv2d(values[node.inputs[0]].as_ref().expect("value computed"), k, spec)?
            }
            (NodeOp::BatchNorm, NodeWeights::BatchNorm { gamma, beta }) => {
                let mut t = owned(&mut values, node.inputs[0]);
                kernels::batch_norm_inplace(&mut t, gamma, beta)?;
                t
            }
            (NodeOp::Relu, _) => {
                let mut t = owned(&mut values, node.inputs[0]);
                kernels::relu_inplace(&mut t);
                t
            }
            (NodeOp::MaxPool3x3 { stride }, _) => {
                kernels::max_pool3x3(values[node.inputs[0]].as_ref().expect("value computed"), *stride)?
            }
            (NodeOp::AvgPool3x3 { stride }, _) => {
                kernels::avg_pool3x3(values[node.inputs[0]].as_ref().expect("value computed"), *stride)?
            }
            (NodeOp::FactorizedReduce { c_out, .. }, NodeWeights::FactorizedReduce { even, odd }) => {
                let src = values[node.inputs[0]].as_ref().expect("value computed");
                kernels::factorized_reduce(src, even, odd, *c_out)?
            }
            (NodeOp::Add, _) => {
                let mut acc = owned(&mut values, node.inputs[0]);
                for &src in &node.inputs[1..] {
                    kernels::add_assign(&mut acc, values[src].as_ref().expect("value computed"))?;
                }
                acc
            }
            (NodeOp::Concat, _) => {
                let parts: Vec<&Tensor> =
                    node.inputs.iter().map(|&s| values[s].as_ref().expect("value computed")).collect();
                kernels::concat(&parts)?
            }
            (NodeOp::Zero { stride }, _) => {
                kernels::zero_like(values[node.inputs[0]].as_ref().expect("value computed"), *stride)
            }
            (NodeOp::GlobalAvgPool, _) => {
                kernels::global_avg_pool(values[node.inputs[0]].as_ref().expect("value computed"))
            }
            _ => return Err(TensorError::WeightsMismatch),
        };
        if !result.is_finite() {
            return Err(TensorError::NonFinite { node: i });
        }
        values[i] = Some(result);
        for &src in &node.inputs {
            if last_use[src] == i {
                values[src] = None;
            }
        }
    }
    Ok(values[net.output()].take().expect("output computed"))
}
