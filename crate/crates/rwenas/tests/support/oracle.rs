//! Slow, obviously-correct references used to check the library.

#![allow(dead_code)]

use rwenas_core::netgraph::{ConvSpec, NetGraph, NodeOp};
use rwenas_core::tensor::Tensor;

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn conv(x: &Tensor, w: &[f32], s: &ConvSpec) -> Vec<f32> {
    let [n, c, h, wd] = x.shape();
    let reach = s.dilation * (s.kernel - 1) + 1;
    let ho = (h + 2 * s.padding - reach) / s.stride + 1;
    let wo = (wd + 2 * s.padding - reach) / s.stride + 1;
    let cin_g = c / s.groups;
    let cout_g = s.c_out / s.groups;
    let mut out = vec![0.0f32; n * s.c_out * ho * wo];
    for b in 0..n {
        for co in 0..s.c_out {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for cig in 0..cin_g {
                        let ci = g * cin_g + cig;
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wv = w[((co * cin_g + cig) * s.kernel + ky) * s.kernel + kx];
                                acc += f64::from(wv) * f64::from(x.at(b, ci, iy as usize, ix as usize));
                            }
                        }
                    }
                    out[((b * s.c_out + co) * ho + oy) * wo + ox] = acc as f32;
                }
            }
        }
    }
    out
}

/// 3x3 window, padding 1. Average pooling divides by in-bounds taps.
pub fn pool(x: &Tensor, stride: usize, max: bool) -> Vec<f32> {
    let [n, c, h, w] = x.shape();
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut sum = 0.0f64;
                    let mut count = 0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let iy = (oy * stride + dy) as isize - 1;
                            let ix = (ox * stride + dx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = x.at(b, ch, iy as usize, ix as usize);
                            best = best.max(v);
                            sum += f64::from(v);
                            count += 1;
                        }
                    }
                    out.push(if max { best } else { (sum / f64::from(count)) as f32 });
                }
            }
        }
    }
    out
}

pub fn factorized_reduce(x: &Tensor, even: &[f32], odd: &[f32], c_out: usize) -> Vec<f32> {
    let [n, c, h, w] = x.shape();
    let half = c_out / 2;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c_out * ho * wo];
    for b in 0..n {
        for (offset, weight, base) in [(0, even, 0), (1, odd, half)] {
            for co in 0..half {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            acc += f64::from(weight[co * c + ci]) * f64::from(x.at(b, ci, 2 * oy + offset, 2 * ox + offset));
                        }
                        out[((b * c_out + base + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
    }
    out
}

pub fn batch_norm(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let mut out = x.data().to_vec();
    for ch in 0..c {
        let mut values = Vec::new();
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    values.push(f64::from(x.at(b, ch, y, xx)));
                }
            }
        }
        let mean = values.iter().sum::<f64>() / count;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let i = ((b * c + ch) * h + y) * w + xx;
                    out[i] = ((f64::from(out[i]) - mean) / (var + 1e-5).sqrt() * f64::from(gamma[ch]) + f64::from(beta[ch])) as f32;
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let [n, c, h, w] = x.shape();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0f64;
            for y in 0..h {
                for xx in 0..w {
                    s += f64::from(x.at(b, ch, y, xx));
                }
            }
            out.push((s / (h * w) as f64) as f32);
        }
    }
    out
}

pub fn concat(parts: &[&Tensor]) -> Vec<f32> {
    let [n, _, h, w] = parts[0].shape();
    let mut out = Vec::new();
    for b in 0..n {
        for t in parts {
            for ch in 0..t.shape()[1] {
                for y in 0..h {
                    for xx in 0..w {
                        out.push(t.at(b, ch, y, xx));
                    }
                }
            }
        }
    }
    out
}

/// Multiply-accumulates of one node, counted by walking the loops a direct
/// implementation would execute.
pub fn counted_node_macs(net: &NetGraph, index: usize) -> u64 {
    let node = &net.nodes()[index];
    let out = node.shape;
    let mut count = 0u64;
    match node.op {
        NodeOp::Conv(s) => {
            let cin_g = s.c_in / s.groups;
            for _co in 0..s.c_out {
                for _oy in 0..out.h {
                    for _ox in 0..out.w {
                        for _ci in 0..cin_g {
                            for _ky in 0..s.kernel {
                                for _kx in 0..s.kernel {
                                    count += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        NodeOp::FactorizedReduce { c_in, c_out } => {
            for _branch in 0..2 {
                for _co in 0..c_out / 2 {
                    for _oy in 0..out.h {
                        for _ox in 0..out.w {
                            for _ci in 0..c_in {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        _ => {}
    }
    count
}

pub fn counted_macs(net: &NetGraph) -> u64 {
    let mut total: u64 = (0..net.nodes().len()).map(|i| counted_node_macs(net, i)).sum();
    for _class in 0..net.classes() {
        for _feature in 0..net.feature_dim() {
            total += 1;
        }
    }
    total
}

fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Fronts by repeatedly peeling off the members no remaining member dominates.
pub fn peel_fronts(points: &[[f64; 2]]) -> Vec<Vec<usize>> {
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !remaining.is_empty() {
        let front: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| !remaining.iter().any(|&j| dominates(&points[j], &points[i])))
            .collect();
        remaining.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

/// Rank of each value: 1 + number of smaller values + half the number of
/// other equal values.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let less = values.iter().filter(|&&u| u < v).count() as f64;
            let equal = values.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}
