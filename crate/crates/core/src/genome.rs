//! Architecture encodings and the variation operators that act on them.
//!
//! Every genome is a flat vector of small integers. The search space decides
//! how many genes there are and the inclusive `[lo, hi]` range of each one:
//!
//! * micro: two cells (normal, then reduction) of [`NODES_PER_CELL`] nodes,
//!   each node stored as `input1, op1, input2, op2`. Node `i` may read from
//!   the two cell inputs or any earlier node, so its input genes range over
//!   `[0, i + 1]`. Operation ids index [`MicroOp`].
//! * macro: [`MACRO_PHASES`] phases, each a lower-triangular adjacency of
//!   [`MACRO_NODES`] nodes stored row-major as bits `b_ij` with `i < j`.
//! * vector: explicit bounds, used for synthetic test problems.
//!
//! The canonical text form is one line: a `micro:`, `macro:` or `vec:` prefix
//! followed by comma-separated gene values.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Intermediate nodes per micro cell.
pub const NODES_PER_CELL: usize = 4;
/// Genes per micro node: `input1, op1, input2, op2`.
pub const GENES_PER_NODE: usize = 4;
/// Number of candidate operations on a micro edge.
pub const NUM_MICRO_OPS: usize = 8;
/// Phases in the macro space.
pub const MACRO_PHASES: usize = 3;
/// Operation nodes per macro phase.
pub const MACRO_NODES: usize = 6;
/// Adjacency bits per macro phase.
pub const MACRO_BITS_PER_PHASE: usize = MACRO_NODES * (MACRO_NODES - 1) / 2;

const MICRO_LEN: usize = 2 * NODES_PER_CELL * GENES_PER_NODE;
const MACRO_LEN: usize = MACRO_PHASES * MACRO_BITS_PER_PHASE;

/// Operation applied on one edge of a micro cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MicroOp {
    Identity,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Zero,
}

impl MicroOp {
    pub const ALL: [MicroOp; NUM_MICRO_OPS] = [
        MicroOp::Identity,
        MicroOp::SepConv3x3,
        MicroOp::SepConv5x5,
        MicroOp::DilConv3x3,
        MicroOp::DilConv5x5,
        MicroOp::MaxPool3x3,
        MicroOp::AvgPool3x3,
        MicroOp::Zero,
    ];

    pub fn from_id(id: u16) -> Option<MicroOp> {
        Self::ALL.get(usize::from(id)).copied()
    }

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn name(self) -> &'static str {
        match self {
            MicroOp::Identity => "identity",
            MicroOp::SepConv3x3 => "sep_conv_3x3",
            MicroOp::SepConv5x5 => "sep_conv_5x5",
            MicroOp::DilConv3x3 => "dil_conv_3x3",
            MicroOp::DilConv5x5 => "dil_conv_5x5",
            MicroOp::MaxPool3x3 => "max_pool_3x3",
            MicroOp::AvgPool3x3 => "avg_pool_3x3",
            MicroOp::Zero => "zero",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GenomeError {
    /// Canonical string could not be parsed.
    Parse(String),
    /// Genome length does not match the space.
    Length { expected: usize, found: usize },
    /// A gene lies outside its bounds.
    OutOfBounds { position: usize, value: u16, lo: u16, hi: u16 },
    /// Two genomes (or a genome and a space) come from different spaces.
    SpaceMismatch,
    /// Node reads the same input twice while duplicates are disallowed.
    DuplicateInput { cell: usize, node: usize },
}

impl fmt::Display for GenomeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenomeError::Parse(msg) => write!(f, "malformed genome: {msg}"),
            GenomeError::Length { expected, found } => {
                write!(f, "genome has {found} genes, expected {expected}")
            }
            GenomeError::OutOfBounds { position, value, lo, hi } => {
                write!(f, "gene {position} = {value} outside [{lo}, {hi}]")
            }
            GenomeError::SpaceMismatch => f.write_str("genomes belong to different search spaces"),
            GenomeError::DuplicateInput { cell, node } => {
                write!(f, "cell {cell} node {node} reads the same input twice")
            }
        }
    }
}

impl core::error::Error for GenomeError {}

/// Which encoding a genome uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Micro,
    Macro,
    Vector,
}

impl SpaceKind {
    fn prefix(self) -> &'static str {
        match self {
            SpaceKind::Micro => "micro",
            SpaceKind::Macro => "macro",
            SpaceKind::Vector => "vec",
        }
    }
}

/// Inclusive bounds of one gene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneBounds {
    pub lo: u16,
    pub hi: u16,
}

/// A search space: encoding kind, per-position bounds, and whether the
/// benchmark-compatible duplicate-input repair is active.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    kind: SpaceKind,
    bounds: Vec<GeneBounds>,
    compat_mode: bool,
}

impl SearchSpace {
    pub fn micro(compat_mode: bool) -> Self {
        let mut bounds = Vec::with_capacity(MICRO_LEN);
        for _cell in 0..2 {
            for node in 0..NODES_PER_CELL {
                let input = GeneBounds { lo: 0, hi: node as u16 + 1 };
                let op = GeneBounds { lo: 0, hi: NUM_MICRO_OPS as u16 - 1 };
                bounds.extend_from_slice(&[input, op, input, op]);
            }
        }
        SearchSpace { kind: SpaceKind::Micro, bounds, compat_mode }
    }

    pub fn macro_space() -> Self {
        SearchSpace {
            kind: SpaceKind::Macro,
            bounds: alloc::vec![GeneBounds { lo: 0, hi: 1 }; MACRO_LEN],
            compat_mode: false,
        }
    }

    /// Integer vector space with explicit bounds.
    pub fn vector(bounds: Vec<GeneBounds>) -> Self {
        assert!(bounds.iter().all(|b| b.lo <= b.hi), "empty gene range");
        SearchSpace { kind: SpaceKind::Vector, bounds, compat_mode: false }
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn bounds(&self) -> &[GeneBounds] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn compat_mode(&self) -> bool {
        self.compat_mode
    }

    /// Checks length, bounds and, in compat mode, the no-duplicate-input rule.
    pub fn validate(&self, genome: &Genome) -> Result<(), GenomeError> {
        if genome.kind != self.kind {
            return Err(GenomeError::SpaceMismatch);
        }
        if genome.genes.len() != self.bounds.len() {
            return Err(GenomeError::Length { expected: self.bounds.len(), found: genome.genes.len() });
        }
        for (position, (&value, b)) in genome.genes.iter().zip(&self.bounds).enumerate() {
            if value < b.lo || value > b.hi {
                return Err(GenomeError::OutOfBounds { position, value, lo: b.lo, hi: b.hi });
            }
        }
        if self.compat_mode && self.kind == SpaceKind::Micro {
            if let Some((cell, node)) = first_duplicate_input(&genome.genes) {
                return Err(GenomeError::DuplicateInput { cell, node });
            }
        }
        Ok(())
    }

    /// Uniform sample over each gene's range, repaired in compat mode.
    pub fn sample_random<R: Rng + ?Sized>(&self, rng: &mut R) -> Genome {
        let genes = self.bounds.iter().map(|b| rng.random_range(b.lo..=b.hi)).collect();
        let genome = Genome { kind: self.kind, genes };
        self.repair(genome, rng)
    }

    /// Resamples `input2` of every node whose two inputs coincide, uniformly
    /// over the legal inputs other than `input1`. Only active for the micro
    /// space in compat mode; otherwise the genome is returned untouched.
    pub fn repair<R: Rng + ?Sized>(&self, mut genome: Genome, rng: &mut R) -> Genome {
        if !(self.compat_mode && self.kind == SpaceKind::Micro) {
            return genome;
        }
        for node_start in (0..genome.genes.len()).step_by(GENES_PER_NODE) {
            let in1 = genome.genes[node_start];
            let in2 = genome.genes[node_start + 2];
            if in1 != in2 {
                continue;
            }
            let hi = self.bounds[node_start + 2].hi;
            // draw from [0, hi] minus `in1`
            let mut pick = rng.random_range(0..hi);
            if pick >= in1 {
                pick += 1;
            }
            genome.genes[node_start + 2] = pick;
        }
        genome
    }

    /// Two-point crossover with cut points drawn uniformly from `0..=len`.
    pub fn two_point_crossover<R: Rng + ?Sized>(
        &self,
        a: &Genome,
        b: &Genome,
        rng: &mut R,
    ) -> Result<(Genome, Genome), GenomeError> {
        let len = self.len();
        let x = rng.random_range(0..=len);
        let y = rng.random_range(0..=len);
        let (start, end) = if x <= y { (x, y) } else { (y, x) };
        let (c1, c2) = self.crossover_at(a, b, start, end)?;
        Ok((self.repair(c1, rng), self.repair(c2, rng)))
    }

    /// Swaps genes in `start..end` between the two parents. No repair.
    pub fn crossover_at(
        &self,
        a: &Genome,
        b: &Genome,
        start: usize,
        end: usize,
    ) -> Result<(Genome, Genome), GenomeError> {
        if a.kind != self.kind || b.kind != self.kind {
            return Err(GenomeError::SpaceMismatch);
        }
        for g in [a, b] {
            if g.genes.len() != self.len() {
                return Err(GenomeError::Length { expected: self.len(), found: g.genes.len() });
            }
        }
        assert!(start <= end && end <= self.len(), "cut points out of range");
        let mut c1 = a.clone();
        let mut c2 = b.clone();
        c1.genes[start..end].copy_from_slice(&b.genes[start..end]);
        c2.genes[start..end].copy_from_slice(&a.genes[start..end]);
        Ok((c1, c2))
    }

    /// Polynomial mutation adapted to integer genes: each gene mutates with
    /// probability `prob`; the real-valued perturbation `delta * (hi - lo)` is
    /// added, rounded to the nearest integer and clamped into bounds.
    pub fn polynomial_mutation<R: Rng + ?Sized>(
        &self,
        genome: &Genome,
        eta: f64,
        prob: f64,
        rng: &mut R,
    ) -> Genome {
        assert!(eta > 0.0, "distribution index must be positive");
        assert!((0.0..=1.0).contains(&prob), "mutation probability outside [0, 1]");
        let mut out = genome.clone();
        for (gene, b) in out.genes.iter_mut().zip(&self.bounds) {
            if rng.random::<f64>() >= prob {
                continue;
            }
            let u: f64 = rng.random();
            *gene = mutate_gene(*gene, *b, polynomial_delta(u, eta));
        }
        self.repair(out, rng)
    }
}

/// Inverse-CDF draw of the polynomial perturbation in `[-1, 1]`.
pub fn polynomial_delta(u: f64, eta: f64) -> f64 {
    let exponent = 1.0 / (eta + 1.0);
    if u < 0.5 {
        libm::pow(2.0 * u, exponent) - 1.0
    } else {
        1.0 - libm::pow(2.0 * (1.0 - u), exponent)
    }
}

/// Applies a perturbation `delta` (fraction of the range) to one gene.
pub fn mutate_gene(value: u16, bounds: GeneBounds, delta: f64) -> u16 {
    let span = f64::from(bounds.hi - bounds.lo);
    let moved = libm::round(f64::from(value) + delta * span);
    moved.clamp(f64::from(bounds.lo), f64::from(bounds.hi)) as u16
}

fn first_duplicate_input(genes: &[u16]) -> Option<(usize, usize)> {
    genes.chunks_exact(GENES_PER_NODE).enumerate().find_map(|(i, node)| {
        (node[0] == node[2]).then_some((i / NODES_PER_CELL, i % NODES_PER_CELL))
    })
}

/// Flat integer genome tagged with its encoding kind.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Genome {
    kind: SpaceKind,
    genes: Vec<u16>,
}

impl Genome {
    /// Builds a genome without validating it against any space.
    pub fn new(kind: SpaceKind, genes: Vec<u16>) -> Self {
        Genome { kind, genes }
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn genes(&self) -> &[u16] {
        &self.genes
    }

    pub fn into_genes(self) -> Vec<u16> {
        self.genes
    }

    /// Typed view of a micro genome.
    pub fn as_micro(&self) -> Result<MicroGenome, GenomeError> {
        if self.kind != SpaceKind::Micro {
            return Err(GenomeError::SpaceMismatch);
        }
        SearchSpace::micro(false).validate(self)?;
        let node = |offset: usize| {
            let g = &self.genes[offset..offset + GENES_PER_NODE];
            NodeSpec {
                input1: usize::from(g[0]),
                op1: MicroOp::from_id(g[1]).expect("validated op id"),
                input2: usize::from(g[2]),
                op2: MicroOp::from_id(g[3]).expect("validated op id"),
            }
        };
        let cell = |c: usize| {
            core::array::from_fn(|i| node((c * NODES_PER_CELL + i) * GENES_PER_NODE))
        };
        Ok(MicroGenome { normal: cell(0), reduction: cell(1) })
    }

    /// Typed view of a macro genome.
    pub fn as_macro(&self) -> Result<MacroGenome, GenomeError> {
        if self.kind != SpaceKind::Macro {
            return Err(GenomeError::SpaceMismatch);
        }
        SearchSpace::macro_space().validate(self)?;
        let phases = self
            .genes
            .chunks_exact(MACRO_BITS_PER_PHASE)
            .map(|bits| PhaseAdjacency { bits: bits.iter().map(|&b| b == 1).collect() })
            .collect();
        Ok(MacroGenome { phases })
    }

    /// 64-bit FNV-1a over the canonical string, mixed with `salt`.
    pub fn stable_hash(&self, salt: u64) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut feed = |byte: u8| {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for byte in self.kind.prefix().bytes() {
            feed(byte);
        }
        for &g in &self.genes {
            feed(b',');
            for byte in g.to_le_bytes() {
                feed(byte);
            }
        }
        hash
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.prefix())?;
        f.write_char(':')?;
        for (i, g) in self.genes.iter().enumerate() {
            if i > 0 {
                f.write_char(',')?;
            }
            write!(f, "{g}")?;
        }
        Ok(())
    }
}

impl FromStr for Genome {
    type Err = GenomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (prefix, body) = s
            .split_once(':')
            .ok_or_else(|| GenomeError::Parse(String::from("missing `kind:` prefix")))?;
        let kind = match prefix {
            "micro" => SpaceKind::Micro,
            "macro" => SpaceKind::Macro,
            "vec" => SpaceKind::Vector,
            other => {
                let mut msg = String::from("unknown space `");
                msg.push_str(other);
                msg.push('`');
                return Err(GenomeError::Parse(msg));
            }
        };
        let genes = if body.is_empty() {
            Vec::new()
        } else {
            body.split(',')
                .map(|tok| {
                    tok.trim().parse::<u16>().map_err(|_| {
                        let mut msg = String::from("bad gene `");
                        msg.push_str(tok);
                        msg.push('`');
                        GenomeError::Parse(msg)
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        Ok(Genome { kind, genes })
    }
}

impl Serialize for Genome {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Genome {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One intermediate node of a micro cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeSpec {
    pub input1: usize,
    pub op1: MicroOp,
    pub input2: usize,
    pub op2: MicroOp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MicroGenome {
    pub normal: [NodeSpec; NODES_PER_CELL],
    pub reduction: [NodeSpec; NODES_PER_CELL],
}

/// Lower-triangular adjacency bits of one macro phase, row-major over `i < j`
/// ordered by `j` then `i` (`b_01, b_02, b_12, b_03, ...`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseAdjacency {
    bits: Vec<bool>,
}

impl PhaseAdjacency {
    /// Whether node `from` feeds node `to` (`from < to`).
    pub fn edge(&self, from: usize, to: usize) -> bool {
        debug_assert!(from < to && to < MACRO_NODES);
        self.bits[to * (to - 1) / 2 + from]
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacroGenome {
    pub phases: Vec<PhaseAdjacency>,
}
