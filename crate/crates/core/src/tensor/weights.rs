use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::netgraph::{NetGraph, NodeOp};

/// Parameters owned by one graph node.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeWeights {
    None,
    Conv(Vec<f32>),
    FactorizedReduce { even: Vec<f32>, odd: Vec<f32> },
    BatchNorm { gamma: Vec<f32>, beta: Vec<f32> },
}

/// Frozen backbone parameters, reproducible from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    seed: u64,
    nodes: Vec<NodeWeights>,
}

impl WeightSet {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nodes(&self) -> &[NodeWeights] {
        &self.nodes
    }

    /// FNV-1a over every parameter's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |values: &[f32]| {
            for v in values {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        for w in &self.nodes {
            match w {
                NodeWeights::None => {}
                NodeWeights::Conv(k) => feed(k),
                NodeWeights::FactorizedReduce { even, odd } => {
                    feed(even);
                    feed(odd);
                }
                NodeWeights::BatchNorm { gamma, beta } => {
                    feed(gamma);
                    feed(beta);
                }
            }
        }
        hash
    }
}

fn uniform_kernel(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f32> {
    // Kaiming-uniform with a = sqrt(5): bound = sqrt(6 / ((1 + a^2) fan_in)) = 1 / sqrt(fan_in)
    let bound = (1.0 / libm::sqrt(fan_in as f64)) as f32;
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Draws every convolution kernel from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// with `fan_in = k * k * c_in / groups`; normalization scale 1, shift 0.
/// Nodes are visited in graph order from one seeded stream.
pub fn init_weights(net: &NetGraph, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = net
        .nodes()
        .iter()
        .map(|node| match node.op {
            NodeOp::Conv(spec) => NodeWeights::Conv(uniform_kernel(&mut rng, spec.weight_len(), spec.fan_in())),
            NodeOp::FactorizedReduce { c_in, c_out } => {
                let len = c_in * (c_out / 2);
                let even = uniform_kernel(&mut rng, len, c_in);
                let odd = uniform_kernel(&mut rng, len, c_in);
                NodeWeights::FactorizedReduce { even, odd }
            }
            NodeOp::BatchNorm => NodeWeights::BatchNorm {
                gamma: vec![1.0; node.shape.c],
                beta: vec![0.0; node.shape.c],
            },
            _ => NodeWeights::None,
        })
        .collect();
    WeightSet { seed, nodes }
}
