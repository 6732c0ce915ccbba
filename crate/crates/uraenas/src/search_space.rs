//! Cell DAG, continuous relaxation of the operation choice, and the
//! three-stage macro skeleton the supernet runs in.
//!
//! Mixing weights theta live on the probability simplex, one vector per
//! edge position, shared by every normal cell. Candidate convolutions are
//! ReLU->Conv without normalization; reduction blocks are fixed
//! (non-searched) residual-style downsamplers.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Candidate operations, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Zeroize,
    SkipConnect,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
}

pub const OP_KINDS: [OpKind; 5] = [
    OpKind::Zeroize,
    OpKind::SkipConnect,
    OpKind::Conv1x1,
    OpKind::Conv3x3,
    OpKind::AvgPool3x3,
];

pub const NUM_OPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    LastNode,
    ConcatIntermediate,
}

/// DAG of the searched cell. Edges are `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTopology {
    pub num_nodes: usize,
    pub input_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub output_mode: OutputMode,
}

impl CellTopology {
    /// 4 nodes, one input, all 6 edges, last-node output.
    pub fn nb201() -> Self {
        let mut edges = Vec::new();
        for j in 1..4 {
            for i in 0..j {
                edges.push((i, j));
            }
        }
        CellTopology { num_nodes: 4, input_nodes: 1, edges, output_mode: OutputMode::LastNode }
    }

    /// Two input nodes, concatenated intermediate outputs.
    pub fn darts_style(num_nodes: usize) -> Self {
        let mut edges = Vec::new();
        for j in 2..num_nodes {
            for i in 0..j {
                edges.push((i, j));
            }
        }
        CellTopology {
            num_nodes,
            input_nodes: 2,
            edges,
            output_mode: OutputMode::ConcatIntermediate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_nodes == 0 || self.input_nodes > 2 {
            return Err(Error::Config(format!("input_nodes must be 1 or 2, got {}", self.input_nodes)));
        }
        for &(i, j) in &self.edges {
            if i >= j || j >= self.num_nodes {
                return Err(Error::Config(format!("edge ({i},{j}) violates the DAG ordering")));
            }
        }
        Ok(())
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Verify a theta vector sits on the probability simplex.
pub fn check_simplex<S: Scalar>(theta: &[S], tol: f64) -> Result<()> {
    let mut sum = S::zero();
    for &t in theta {
        if t < S::zero() {
            return Err(Error::Invariant(format!("negative mixing weight {t}")));
        }
        sum += t;
    }
    if (sum.to_f64() - 1.0).abs() > tol {
        return Err(Error::Invariant(format!("mixing weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Learnable per-edge operation parameters (the conv kernels).
pub struct MixedEdge<S: Scalar = f64> {
    pub channels: usize,
    pub conv1x1: Tensor<S>,
    pub conv3x3: Tensor<S>,
}

impl<S: Scalar> MixedEdge<S> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        MixedEdge {
            channels,
            conv1x1: he_kernel(channels, channels, 1, rng),
            conv3x3: he_kernel(channels, channels, 3, rng),
        }
    }
}

fn he_kernel<S: Scalar>(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> Tensor<S> {
    let fan_in = in_c * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let data: Vec<S> = (0..out_c * in_c * k * k)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64(z * std)
        })
        .collect();
    Tensor::param(&[out_c, in_c, k, k], data).unwrap()
}

/// Weighted average of the candidate operations: sum_o theta_o * o(x).
///
/// `theta` is a 5-element tape leaf; gradients flow into it through the
/// per-op scaling, including a zero gradient for Zeroize.
pub fn mixed_op_forward<S: Scalar>(
    tape: &Tape<S>,
    edge: &MixedEdge<S>,
    theta: &Tensor<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    if theta.numel() != NUM_OPS {
        return Err(Error::Config(format!(
            "theta vector has {} entries, expected {NUM_OPS}",
            theta.numel()
        )));
    }
    check_simplex(&theta.data(), 1e-6)?;
    let mut acc: Option<Tensor<S>> = None;
    for (idx, kind) in OP_KINDS.iter().enumerate() {
        let applied = apply_op(tape, edge, *kind, x)?;
        let weighted = tape.scale_by_index(&applied, theta, idx)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => tape.add(&a, &weighted)?,
        });
    }
    Ok(acc.unwrap())
}

fn apply_op<S: Scalar>(
    tape: &Tape<S>,
    edge: &MixedEdge<S>,
    kind: OpKind,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    match kind {
        OpKind::Zeroize => Ok(Tensor::zeros(&x.shape())),
        OpKind::SkipConnect => Ok(x.clone()),
        OpKind::Conv1x1 => {
            let r = tape.relu(x);
            tape.conv2d(&r, &edge.conv1x1, 1, 0)
        }
        OpKind::Conv3x3 => {
            let r = tape.relu(x);
            tape.conv2d(&r, &edge.conv3x3, 1, 1)
        }
        OpKind::AvgPool3x3 => tape.avg_pool3x3(x, 1),
    }
}

/// One cell's worth of edge parameters, keyed by edge position.
pub struct CellParams<S: Scalar = f64> {
    pub edges: BTreeMap<(usize, usize), MixedEdge<S>>,
}

impl<S: Scalar> CellParams<S> {
    pub fn new(topology: &CellTopology, channels: usize, rng: &mut impl Rng) -> Self {
        let mut edges = BTreeMap::new();
        for &e in &topology.edges {
            edges.insert(e, MixedEdge::new(channels, rng));
        }
        CellParams { edges }
    }
}

/// Node-wise cell evaluation: node j = sum over incoming edges of the
/// mixed op applied to node i.
pub fn cell_forward<S: Scalar>(
    tape: &Tape<S>,
    topology: &CellTopology,
    params: &CellParams<S>,
    thetas: &BTreeMap<(usize, usize), Tensor<S>>,
    inputs: &[Tensor<S>],
) -> Result<Tensor<S>> {
    if inputs.len() != topology.input_nodes {
        return Err(Error::Config(format!(
            "cell expects {} inputs, got {}",
            topology.input_nodes,
            inputs.len()
        )));
    }
    let mut nodes: Vec<Tensor<S>> = inputs.to_vec();
    for j in topology.input_nodes..topology.num_nodes {
        let mut acc: Option<Tensor<S>> = None;
        for &(i, jj) in &topology.edges {
            if jj != j {
                continue;
            }
            let edge = params
                .edges
                .get(&(i, j))
                .ok_or_else(|| Error::Config(format!("missing parameters for edge ({i},{j})")))?;
            let theta = thetas
                .get(&(i, j))
                .ok_or_else(|| Error::Config(format!("missing theta for edge ({i},{j})")))?;
            let contrib = mixed_op_forward(tape, edge, theta, &nodes[i])?;
            acc = Some(match acc {
                None => contrib,
                Some(a) => tape.add(&a, &contrib)?,
            });
        }
        nodes.push(acc.unwrap_or_else(|| Tensor::zeros(&nodes[0].shape())));
    }
    match topology.output_mode {
        OutputMode::LastNode => Ok(nodes[topology.num_nodes - 1].clone()),
        OutputMode::ConcatIntermediate => {
            tape.concat_channels(&nodes[topology.input_nodes.max(2)..])
        }
    }
}

/// Fixed downsampling block: ReLU->conv3x3 stride 2 doubling channels,
/// plus an avg-pool + 1x1 conv shortcut.
pub struct ReductionParams<S: Scalar = f64> {
    pub conv: Tensor<S>,
    pub shortcut: Tensor<S>,
}

impl<S: Scalar> ReductionParams<S> {
    pub fn new(in_c: usize, rng: &mut impl Rng) -> Self {
        ReductionParams {
            conv: he_kernel(2 * in_c, in_c, 3, rng),
            shortcut: he_kernel(2 * in_c, in_c, 1, rng),
        }
    }
}

/// Macro-skeleton configuration; defaults are the desk-scale profile.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    pub c0: usize,
    pub n_cells: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for MacroConfig {
    fn default() -> Self {
        MacroConfig { c0: 8, n_cells: 1, in_channels: 3, num_classes: 10 }
    }
}

/// The full weight-sharing supernet: stem, three cell stages with two
/// reduction blocks, global average pool and a linear head.
pub struct Supernet<S: Scalar = f64> {
    pub cfg: MacroConfig,
    pub topology: CellTopology,
    pub stem: Tensor<S>,
    pub stages: Vec<Vec<CellParams<S>>>,
    pub reductions: Vec<ReductionParams<S>>,
    pub head_weight: Tensor<S>,
    pub head_bias: Tensor<S>,
}

impl<S: Scalar> Supernet<S> {
    pub fn new(cfg: MacroConfig, topology: CellTopology, master_seed: u64, init_id: u64) -> Result<Self> {
        topology.validate()?;
        let mut r = rng::stream(master_seed, &[rng::tag::WEIGHT_INIT, init_id]);
        let stem = he_kernel(cfg.c0, cfg.in_channels, 3, &mut r);
        let mut stages = Vec::new();
        let mut reductions = Vec::new();
        let mut c = cfg.c0;
        for stage in 0..3 {
            let cells: Vec<CellParams<S>> =
                (0..cfg.n_cells).map(|_| CellParams::new(&topology, c, &mut r)).collect();
            stages.push(cells);
            if stage < 2 {
                reductions.push(ReductionParams::new(c, &mut r));
                c *= 2;
            }
        }
        let feat = c;
        let head_weight = {
            // deliberately small: the unnormalized cell sums can reach
            // O(in_degree^depth), and a small head keeps initial logits
            // moderate for any sampled mixing weights
            let std = 0.01 * (2.0 / feat as f64).sqrt();
            let data: Vec<S> = (0..feat * cfg.num_classes)
                .map(|_| {
                    let z: f64 = r.sample(StandardNormal);
                    S::from_f64(z * std)
                })
                .collect();
            Tensor::param(&[feat, cfg.num_classes], data).unwrap()
        };
        let head_bias = {
            let t: Tensor<S> = Tensor::zeros(&[cfg.num_classes]);
            t.set_requires_grad(true);
            t
        };
        Ok(Supernet { cfg, topology, stem, stages, reductions, head_weight, head_bias })
    }

    /// Every learnable tensor, in a fixed, documented order. Snapshot and
    /// finite-difference code index into this list.
    pub fn params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![("stem".to_string(), self.stem.clone())];
        for (si, stage) in self.stages.iter().enumerate() {
            for (ci, cell) in stage.iter().enumerate() {
                for (&(i, j), edge) in &cell.edges {
                    out.push((format!("s{si}.c{ci}.e{i}_{j}.conv1x1"), edge.conv1x1.clone()));
                    out.push((format!("s{si}.c{ci}.e{i}_{j}.conv3x3"), edge.conv3x3.clone()));
                }
            }
        }
        for (ri, red) in self.reductions.iter().enumerate() {
            out.push((format!("r{ri}.conv"), red.conv.clone()));
            out.push((format!("r{ri}.shortcut"), red.shortcut.clone()));
        }
        out.push(("head.weight".to_string(), self.head_weight.clone()));
        out.push(("head.bias".to_string(), self.head_bias.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.params() {
            out.extend_from_slice(&t.data());
        }
        out
    }

    pub fn load_flat(&self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Config(format!(
                "flat weight vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for (_, t) in self.params() {
            let n = t.numel();
            t.set_data(flat[off..off + n].to_vec());
            off += n;
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.params() {
            t.zero_grad();
        }
    }

    /// Full forward pass to logits. `thetas` holds one 5-vector per edge
    /// position, shared across every normal cell.
    pub fn forward(
        &self,
        tape: &Tape<S>,
        x: &Tensor<S>,
        thetas: &BTreeMap<(usize, usize), Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.cfg.in_channels {
            return Err(Error::Input(format!(
                "input shape {:?} does not match {} channels",
                xs, self.cfg.in_channels
            )));
        }
        if xs[2] % 4 != 0 || xs[3] % 4 != 0 {
            return Err(Error::Input(format!(
                "spatial dims {}x{} must be divisible by 4",
                xs[2], xs[3]
            )));
        }
        let mut cur = tape.conv2d(x, &self.stem, 1, 1)?;
        for (stage_idx, stage) in self.stages.iter().enumerate() {
            for cell in stage {
                let inputs: Vec<Tensor<S>> =
                    vec![cur.clone(); self.topology.input_nodes];
                cur = cell_forward(tape, &self.topology, cell, thetas, &inputs)?;
            }
            if stage_idx < 2 {
                let red = &self.reductions[stage_idx];
                let r = tape.relu(&cur);
                let main = tape.conv2d(&r, &red.conv, 2, 1)?;
                let pooled = tape.avg_pool3x3(&cur, 2)?;
                let short = tape.conv2d(&pooled, &red.shortcut, 1, 0)?;
                cur = tape.add(&main, &short)?;
            }
        }
        let feat = tape.global_avg_pool(&cur)?;
        tape.linear(&feat, &self.head_weight, &self.head_bias)
    }
}

/// One chosen operation per edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteArch {
    pub edges: Vec<((usize, usize), OpKind)>,
}

/// Per-edge argmax of the mean mixing weights; ties break toward the
/// lowest op index in canonical order.
pub fn discretize(mean_theta: &BTreeMap<(usize, usize), Vec<f64>>) -> DiscreteArch {
    let mut edges = Vec::new();
    for (&e, theta) in mean_theta {
        let mut best = 0;
        for (i, &v) in theta.iter().enumerate() {
            if v > theta[best] {
                best = i;
            }
        }
        edges.push((e, OP_KINDS[best]));
    }
    DiscreteArch { edges }
}

/// Serializable architecture description (external JSON interface).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchDescription {
    pub profile: String,
    pub candidate_ops: Vec<OpKind>,
    pub edges: Vec<(usize, usize)>,
    pub theta: Option<Vec<Vec<f64>>>,
    pub discrete: Option<Vec<OpKind>>,
    pub channel_plan: [usize; 3],
}

impl ArchDescription {
    pub fn from_theta(
        topology: &CellTopology,
        thetas: &BTreeMap<(usize, usize), Vec<f64>>,
        c0: usize,
    ) -> Self {
        ArchDescription {
            profile: if topology == &CellTopology::nb201() { "nb201".into() } else { "darts".into() },
            candidate_ops: OP_KINDS.to_vec(),
            edges: topology.edges.clone(),
            theta: Some(topology.edges.iter().map(|e| thetas[e].clone()).collect()),
            discrete: None,
            channel_plan: [c0, 2 * c0, 4 * c0],
        }
    }
}
