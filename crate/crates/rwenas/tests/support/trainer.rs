//! End-to-end training of a decoded network and a linear head with
//! backpropagation. Forward passes use the library kernels; gradients are
//! hand-written nested loops.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwenas_core::data::ImageDataset;
use rwenas_core::netgraph::{ConvSpec, NetGraph, NodeOp};
use rwenas_core::tensor::{init_weights, kernels, NodeWeights, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 8, batch: 64, lr: 0.05, momentum: 0.9, weight_decay: 3e-4, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub nodes: Vec<NodeWeights>,
    /// `(classes, dim)` row-major.
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
}

impl Model {
    pub fn init(net: &NetGraph, seed: u64) -> Self {
        let nodes = init_weights(net, seed).nodes().to_vec();
        let dim = net.feature_dim();
        let bound = 1.0 / (dim as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        let head_w = (0..net.classes() * dim).map(|_| rng.random_range(-bound..bound)).collect();
        Model { nodes, head_w, head_b: vec![0.0; net.classes()] }
    }

    /// Parameter vectors in a fixed order, with whether weight decay applies.
    fn params_mut(&mut self) -> Vec<(&mut Vec<f32>, bool)> {
        let mut out = Vec::new();
        for w in &mut self.nodes {
            match w {
                NodeWeights::Conv(k) => out.push((k, true)),
                NodeWeights::FactorizedReduce { even, odd } => {
                    out.push((even, true));
                    out.push((odd, true));
                }
                NodeWeights::BatchNorm { gamma, beta } => {
                    out.push((gamma, false));
                    out.push((beta, false));
                }
                NodeWeights::None => {}
            }
        }
        out.push((&mut self.head_w, true));
        out.push((&mut self.head_b, false));
        out
    }

    fn zeros_like(&self) -> Model {
        let nodes = self
            .nodes
            .iter()
            .map(|w| match w {
                NodeWeights::Conv(k) => NodeWeights::Conv(vec![0.0; k.len()]),
                NodeWeights::FactorizedReduce { even, odd } => {
                    NodeWeights::FactorizedReduce { even: vec![0.0; even.len()], odd: vec![0.0; odd.len()] }
                }
                NodeWeights::BatchNorm { gamma, beta } => {
                    NodeWeights::BatchNorm { gamma: vec![0.0; gamma.len()], beta: vec![0.0; beta.len()] }
                }
                NodeWeights::None => NodeWeights::None,
            })
            .collect();
        Model { nodes, head_w: vec![0.0; self.head_w.len()], head_b: vec![0.0; self.head_b.len()] }
    }
}

/// Every node's activation for one batch.
pub fn activations(net: &NetGraph, model: &Model, x: &Tensor) -> Vec<Tensor> {
    let mut acts: Vec<Tensor> = Vec::with_capacity(net.nodes().len());
    for (i, node) in net.nodes().iter().enumerate() {
        let input = |k: usize| &acts[node.inputs[k]];
        let y = match (&node.op, &model.nodes[i]) {
            (NodeOp::Input, _) => x.clone(),
            (NodeOp::Conv(spec), NodeWeights::Conv(k)) => kernels::conv2d(input(0), k, spec).unwrap(),
            (NodeOp::BatchNorm, NodeWeights::BatchNorm { gamma, beta }) => kernels::batch_norm(input(0), gamma, beta).unwrap(),
            (NodeOp::Relu, _) => kernels::relu(input(0)),
            (NodeOp::MaxPool3x3 { stride }, _) => kernels::max_pool3x3(input(0), *stride).unwrap(),
            (NodeOp::AvgPool3x3 { stride }, _) => kernels::avg_pool3x3(input(0), *stride).unwrap(),
            (NodeOp::FactorizedReduce { c_out, .. }, NodeWeights::FactorizedReduce { even, odd }) => {
                kernels::factorized_reduce(input(0), even, odd, *c_out).unwrap()
            }
            (NodeOp::Add, _) => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&s| &acts[s]).collect();
                kernels::add(&parts).unwrap()
            }
            (NodeOp::Concat, _) => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&s| &acts[s]).collect();
                kernels::concat(&parts).unwrap()
            }
            (NodeOp::Zero { stride }, _) => kernels::zero_like(input(0), *stride),
            (NodeOp::GlobalAvgPool, _) => kernels::global_avg_pool(input(0)),
            (op, _) => panic!("weights do not match {op:?}"),
        };
        acts.push(y);
    }
    acts
}

pub fn logits(net: &NetGraph, model: &Model, features: &[f32]) -> Vec<f32> {
    let dim = net.feature_dim();
    let classes = net.classes();
    let n = features.len() / dim;
    let mut out = vec![0.0f32; n * classes];
    for b in 0..n {
        let f = &features[b * dim..(b + 1) * dim];
        for k in 0..classes {
            let w = &model.head_w[k * dim..(k + 1) * dim];
            out[b * classes + k] = model.head_b[k] + w.iter().zip(f).map(|(a, x)| a * x).sum::<f32>();
        }
    }
    out
}

fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f64> = row.iter().map(|&z| f64::from(z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        p.extend(e.iter().map(|v| v / s));
    }
    p
}

/// Mean cross-entropy of a batch.
pub fn loss(net: &NetGraph, model: &Model, x: &Tensor, labels: &[u8]) -> f64 {
    let acts = activations(net, model, x);
    let z = logits(net, model, acts[net.output()].data());
    let p = softmax_rows(&z, net.classes());
    let classes = net.classes();
    labels.iter().enumerate().map(|(b, &y)| -p[b * classes + usize::from(y)].ln()).sum::<f64>() / labels.len() as f64
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f32>>], acts: &[Tensor], i: usize) -> &'a mut Vec<f32> {
    grads[i].get_or_insert_with(|| vec![0.0; acts[i].data().len()])
}

/// Gradient of the mean cross-entropy with respect to every parameter.
pub fn gradients(net: &NetGraph, model: &Model, x: &Tensor, labels: &[u8]) -> Model {
    let acts = activations(net, model, x);
    let nodes = net.nodes();
    let classes = net.classes();
    let dim = net.feature_dim();
    let n = labels.len();
    let mut g = model.zeros_like();

    let features = acts[net.output()].data();
    let p = softmax_rows(&logits(net, model, features), classes);
    let mut df = vec![0.0f32; n * dim];
    for b in 0..n {
        for k in 0..classes {
            let mut dz = p[b * classes + k];
            if usize::from(labels[b]) == k {
                dz -= 1.0;
            }
            let dz = (dz / n as f64) as f32;
            g.head_b[k] += dz;
            for j in 0..dim {
                g.head_w[k * dim + j] += dz * features[b * dim + j];
                df[b * dim + j] += dz * model.head_w[k * dim + j];
            }
        }
    }

    let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
    grads[net.output()] = Some(df);
    for i in (0..nodes.len()).rev() {
        let Some(dy) = grads[i].take() else { continue };
        let node = &nodes[i];
        match (&node.op, &model.nodes[i]) {
            (NodeOp::Input, _) | (NodeOp::Zero { .. }, _) => {}
            (NodeOp::Conv(spec), NodeWeights::Conv(k)) => {
                let src = node.inputs[0];
                let NodeWeights::Conv(dk) = &mut g.nodes[i] else { unreachable!() };
                let dx = grad_slot(&mut grads, &acts, src);
                conv_backward(&acts[src], k, spec, acts[i].shape(), &dy, dx, dk);
            }
            (NodeOp::BatchNorm, NodeWeights::BatchNorm { gamma, .. }) => {
                let src = node.inputs[0];
                let NodeWeights::BatchNorm { gamma: dg, beta: db } = &mut g.nodes[i] else { unreachable!() };
                let dx = grad_slot(&mut grads, &acts, src);
                batch_norm_backward(&acts[src], gamma, &dy, dx, dg, db);
            }
            (NodeOp::Relu, _) => {
                let dx = grad_slot(&mut grads, &acts, node.inputs[0]);
                for ((d, &y), &g) in dx.iter_mut().zip(acts[i].data()).zip(&dy) {
                    if y > 0.0 {
                        *d += g;
                    }
                }
            }
            (NodeOp::MaxPool3x3 { stride }, _) | (NodeOp::AvgPool3x3 { stride }, _) => {
                let src = node.inputs[0];
                let max = matches!(node.op, NodeOp::MaxPool3x3 { .. });
                let dx = grad_slot(&mut grads, &acts, src);
                pool_backward(&acts[src], *stride, max, acts[i].shape(), &dy, dx);
            }
            (NodeOp::FactorizedReduce { c_out, .. }, NodeWeights::FactorizedReduce { even, odd }) => {
                let src = node.inputs[0];
                let NodeWeights::FactorizedReduce { even: de, odd: dodd } = &mut g.nodes[i] else { unreachable!() };
                let dx = grad_slot(&mut grads, &acts, src);
                fr_backward(&acts[src], even, odd, *c_out, &dy, dx, de, dodd);
            }
            (NodeOp::Add, _) => {
                for &src in &node.inputs {
                    let dx = grad_slot(&mut grads, &acts, src);
                    dx.iter_mut().zip(&dy).for_each(|(d, g)| *d += g);
                }
            }
            (NodeOp::Concat, _) => {
                let [nb, c, h, w] = acts[i].shape();
                let plane = h * w;
                let mut offset = 0;
                for &src in &node.inputs {
                    let cs = acts[src].shape()[1];
                    let dx = grad_slot(&mut grads, &acts, src);
                    for b in 0..nb {
                        let from = &dy[(b * c + offset) * plane..(b * c + offset + cs) * plane];
                        dx[b * cs * plane..(b + 1) * cs * plane].iter_mut().zip(from).for_each(|(d, g)| *d += g);
                    }
                    offset += cs;
                }
            }
            (NodeOp::GlobalAvgPool, _) => {
                let src = node.inputs[0];
                let plane = acts[src].plane();
                let dx = grad_slot(&mut grads, &acts, src);
                for (chunk, &g) in dx.chunks_exact_mut(plane).zip(&dy) {
                    let v = g / plane as f32;
                    chunk.iter_mut().for_each(|d| *d += v);
                }
            }
            (op, _) => panic!("weights do not match {op:?}"),
        }
    }
    g
}

fn conv_backward(x: &Tensor, w: &[f32], s: &ConvSpec, out: [usize; 4], dy: &[f32], dx: &mut [f32], dw: &mut [f32]) {
    let [n, c, h, wd] = x.shape();
    let [_, co_n, ho, wo] = out;
    let xs = x.data();
    let cin_g = c / s.groups;
    let cout_g = s.c_out / s.groups;
    if s.kernel == 1 && s.stride == 1 && s.padding == 0 && s.groups == 1 {
        let plane = h * wd;
        for b in 0..n {
            for co in 0..co_n {
                let g_row = &dy[(b * co_n + co) * plane..(b * co_n + co + 1) * plane];
                for ci in 0..c {
                    let x_row = &xs[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                    let wv = w[co * c + ci];
                    let mut acc = 0.0f32;
                    let d_row = &mut dx[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                    for ((d, &xv), &gv) in d_row.iter_mut().zip(x_row).zip(g_row) {
                        acc += gv * xv;
                        *d += gv * wv;
                    }
                    dw[co * c + ci] += acc;
                }
            }
        }
        return;
    }
    let p = s.padding as isize;
    for b in 0..n {
        for co in 0..co_n {
            let grp = co / cout_g;
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let x_plane = &xs[(b * c + ci) * h * wd..(b * c + ci + 1) * h * wd];
                let dx_plane = &mut dx[(b * c + ci) * h * wd..(b * c + ci + 1) * h * wd];
                for ky in 0..s.kernel {
                    for kx in 0..s.kernel {
                        let widx = ((co * cin_g + cig) * s.kernel + ky) * s.kernel + kx;
                        let wv = w[widx];
                        let mut acc = 0.0f32;
                        let shift = (kx * s.dilation) as isize - p;
                        // output columns whose input column lies inside the image
                        let lo = if shift < 0 { (-shift as usize).div_ceil(s.stride) } else { 0 };
                        let hi = if (wd as isize - 1 - shift) < 0 {
                            0
                        } else {
                            (((wd as isize - 1 - shift) as usize) / s.stride + 1).min(wo)
                        };
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s.stride + ky * s.dilation) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let g_base = ((b * co_n + co) * ho + oy) * wo;
                            let g_row = &dy[g_base + lo..g_base + hi];
                            let x_start = (iy as usize * wd) as isize + (lo * s.stride) as isize + shift;
                            let x_start = x_start as usize;
                            if s.stride == 1 {
                                let len = hi - lo;
                                let xr = &x_plane[x_start..x_start + len];
                                let dr = &mut dx_plane[x_start..x_start + len];
                                for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(g_row) {
                                    acc += gv * xv;
                                    *d += gv * wv;
                                }
                            } else {
                                for (j, &gv) in g_row.iter().enumerate() {
                                    let at = x_start + j * s.stride;
                                    acc += gv * x_plane[at];
                                    dx_plane[at] += gv * wv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

fn batch_norm_backward(x: &Tensor, gamma: &[f32], dy: &[f32], dx: &mut [f32], dgamma: &mut [f32], dbeta: &mut [f32]) {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let count = (n * plane) as f64;
    let xs = x.data();
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * plane..(b * c + ch + 1) * plane;
        let mean = (0..n).flat_map(|b| xs[idx(b)].iter()).map(|&v| f64::from(v)).sum::<f64>() / count;
        let var = (0..n).flat_map(|b| xs[idx(b)].iter()).map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / count;
        let inv_std = 1.0 / (var + 1e-5).sqrt();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            for (&xv, &g) in xs[idx(b)].iter().zip(&dy[idx(b)]) {
                let xhat = (f64::from(xv) - mean) * inv_std;
                sum_dy += f64::from(g);
                sum_dy_xhat += f64::from(g) * xhat;
            }
        }
        dgamma[ch] += sum_dy_xhat as f32;
        dbeta[ch] += sum_dy as f32;
        let k = f64::from(gamma[ch]) * inv_std / count;
        for b in 0..n {
            for ((d, &xv), &g) in dx[idx(b)].iter_mut().zip(&xs[idx(b)]).zip(&dy[idx(b)]) {
                let xhat = (f64::from(xv) - mean) * inv_std;
                *d += (k * (count * f64::from(g) - sum_dy - xhat * sum_dy_xhat)) as f32;
            }
        }
    }
}

fn pool_backward(x: &Tensor, stride: usize, max: bool, out: [usize; 4], dy: &[f32], dx: &mut [f32]) {
    let [n, c, h, w] = x.shape();
    let [_, _, ho, wo] = out;
    let xs = x.data();
    for bc in 0..n * c {
        let xp = &xs[bc * h * w..(bc + 1) * h * w];
        let dp = &mut dx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(bc * ho + oy) * wo + ox];
                let ys = (oy * stride).saturating_sub(1)..(oy * stride + 2).min(h);
                let xs_range = (ox * stride).saturating_sub(1)..(ox * stride + 2).min(w);
                if max {
                    let mut best = (f32::NEG_INFINITY, 0);
                    for iy in ys {
                        for ix in xs_range.clone() {
                            if xp[iy * w + ix] > best.0 {
                                best = (xp[iy * w + ix], iy * w + ix);
                            }
                        }
                    }
                    dp[best.1] += g;
                } else {
                    let count = (ys.len() * xs_range.len()) as f32;
                    for iy in ys {
                        for ix in xs_range.clone() {
                            dp[iy * w + ix] += g / count;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fr_backward(x: &Tensor, even: &[f32], odd: &[f32], c_out: usize, dy: &[f32], dx: &mut [f32], de: &mut [f32], dodd: &mut [f32]) {
    let [n, c, h, w] = x.shape();
    let half = c_out / 2;
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    for b in 0..n {
        for (offset, weight, dweight, base) in [(0, even, &mut *de, 0), (1, odd, &mut *dodd, half)] {
            for co in 0..half {
                for ci in 0..c {
                    let wv = weight[co * c + ci];
                    let mut acc = 0.0f32;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = dy[((b * c_out + base + co) * ho + oy) * wo + ox];
                            let at = ((b * c + ci) * h + 2 * oy + offset) * w + 2 * ox + offset;
                            acc += g * xs[at];
                            dx[at] += g * wv;
                        }
                    }
                    dweight[co * c + ci] += acc;
                }
            }
        }
    }
}

/// Trains on the training split and returns validation accuracy.
pub fn train_and_validate(net: &NetGraph, data: &ImageDataset, cfg: &TrainConfig) -> f64 {
    let mut model = Model::init(net, cfg.seed);
    let mut velocity = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = data.train_indices().to_vec();
    let steps_per_epoch = order.len().div_ceil(cfg.batch);
    let total = (steps_per_epoch * cfg.epochs) as f64;
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            step += 1;
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<u8> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let mut grad = gradients(net, &model, &data.batch(chunk), &labels);
            for (((p, decay), (g, _)), (v, _)) in
                model.params_mut().into_iter().zip(grad.params_mut()).zip(velocity.params_mut())
            {
                for ((pw, &gw), vw) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    let gw = if decay { gw + cfg.weight_decay as f32 * *pw } else { gw };
                    *vw = cfg.momentum as f32 * *vw + gw;
                    *pw -= lr as f32 * *vw;
                }
            }
        }
    }
    accuracy(net, &model, data, data.valid_indices())
}

pub fn accuracy(net: &NetGraph, model: &Model, data: &ImageDataset, indices: &[usize]) -> f64 {
    let classes = net.classes();
    let mut correct = 0usize;
    for chunk in indices.chunks(200) {
        let acts = activations(net, model, &data.batch(chunk));
        let z = logits(net, model, acts[net.output()].data());
        for (row, &i) in z.chunks_exact(classes).zip(chunk) {
            let pred = row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
            correct += usize::from(pred == usize::from(data.labels()[i]));
        }
    }
    correct as f64 / indices.len() as f64
}
