//! Orchestration of the bi-level search phase and the ensemble-generating
//! evaluation phase, for all four variants.
//!
//! Search alternates one architecture step (pathwise Dirichlet gradient
//! on a validation minibatch) with one cSGLD epoch over the training
//! split. Evaluation retrains fresh networks for twice the configured
//! epoch budget and keeps the tail sampling-phase weights of each cycle
//! as ensemble members.

use crate::arch_dist::{arch_objective_grad, ArchSample, ConcentrationParams};
use crate::data::{load_dataset, synth_dataset, ImageDataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::rng::{self, tag};
use crate::samplers::{
    arch_step, lr_schedule, phase_of, posterior_grad, snapshot_epochs, step_explore, step_sample,
    CsgldConfig, Phase,
};
use crate::search_space::{CellTopology, MacroConfig, Supernet, NUM_OPS};
use crate::tensor::{Tape, Tensor};
use rand::seq::index::sample as index_sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "drnas")]
    DrNas,
    #[serde(rename = "uraenas_w")]
    UraeNasW,
    #[serde(rename = "uraenas_a")]
    UraeNasA,
    #[serde(rename = "uraenas")]
    UraeNas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ContinuousTheta,
    Discretized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSource {
    Mean,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyProfile {
    Nb201,
    Darts { num_nodes: usize },
}

impl TopologyProfile {
    pub fn topology(self) -> CellTopology {
        match self {
            TopologyProfile::Nb201 => CellTopology::nb201(),
            TopologyProfile::Darts { num_nodes } => CellTopology::darts_style(num_nodes),
        }
    }
}

/// Where the run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        spec: SynthSpec,
        n_train: usize,
        n_val: usize,
        n_test: usize,
        seed: u64,
    },
    /// Directory holding train.bin / val.bin / test.bin in the internal
    /// dataset format.
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Architecture step size.
    pub eta: f64,
    /// Weight of the pull of beta toward 1.
    pub lambda: f64,
    pub csgld: CsgldConfig,
    pub m_theta: usize,
    pub m_w: usize,
    /// Ensemble cap; members are chosen round-robin across architectures.
    pub ensemble_size: usize,
    pub master_seed: u64,
    pub data: DataConfig,
    pub profile: TopologyProfile,
    pub c0: usize,
    pub n_cells: usize,
    pub evaluation: EvalMode,
    /// Validation batch size for architecture steps; defaults to the
    /// training batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_batch: Option<usize>,
    /// Override the variant's default theta source in the eval phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_source: Option<ThetaSource>,
    /// Start eval-phase branches from the search weights instead of a
    /// fresh init.
    #[serde(default)]
    pub inherit_search_weights: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.csgld.validate()?;
        if self.m_theta < 1 {
            return Err(Error::Config("m_theta must be at least 1".into()));
        }
        if self.m_w < self.csgld.cycles {
            return Err(Error::Config(format!(
                "m_w = {} below the cycle count {}; no snapshots per cycle",
                self.m_w, self.csgld.cycles
            )));
        }
        if self.ensemble_size == 0 || self.ensemble_size > self.m_w * self.m_theta {
            return Err(Error::Config(format!(
                "ensemble_size = {} outside 1..={} (m_w * m_theta)",
                self.ensemble_size,
                self.m_w * self.m_theta
            )));
        }
        if self.eta < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("eta and lambda must be non-negative".into()));
        }
        if self.c0 == 0 {
            return Err(Error::Config("c0 must be positive".into()));
        }
        if self.arch_batch == Some(0) {
            return Err(Error::Config("arch_batch must be positive when set".into()));
        }
        self.profile.topology().validate()?;
        Ok(())
    }

    /// Variant-resolved settings for the eval phase.
    fn effective(&self) -> Effective {
        let (theta_default, langevin, branches) = match self.variant {
            Variant::DrNas => (ThetaSource::Mean, false, 1),
            Variant::UraeNasW => (ThetaSource::Mean, true, 1),
            Variant::UraeNasA => (ThetaSource::Sampled, false, self.m_theta),
            Variant::UraeNas => (ThetaSource::Sampled, true, self.m_theta),
        };
        Effective {
            theta_source: self.theta_source.unwrap_or(theta_default),
            langevin,
            branches,
        }
    }

    fn macro_cfg(&self, in_channels: usize, num_classes: usize) -> MacroConfig {
        MacroConfig { c0: self.c0, n_cells: self.n_cells, in_channels, num_classes }
    }
}

#[derive(Debug, Clone, Copy)]
struct Effective {
    theta_source: ThetaSource,
    langevin: bool,
    branches: usize,
}

/// Train/val/test splits with shared train-split normalization stats.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: ImageDataset,
    pub val: ImageDataset,
    pub test: ImageDataset,
}

impl DataBundle {
    pub fn load(spec: &DataConfig) -> Result<Self> {
        let (mut train, mut val, mut test) = match spec {
            DataConfig::Synthetic { spec, n_train, n_val, n_test, seed } => (
                synth_dataset(spec, *n_train, *seed, Split::Train)?,
                synth_dataset(spec, *n_val, *seed, Split::Val)?,
                synth_dataset(spec, *n_test, *seed, Split::Test)?,
            ),
            DataConfig::Directory { path } => (
                load_dataset(&path.join("train.bin"))?,
                load_dataset(&path.join("val.bin"))?,
                load_dataset(&path.join("test.bin"))?,
            ),
        };
        if train.split != Split::Train || val.split != Split::Val || test.split != Split::Test {
            return Err(Error::Input("dataset split tags do not match their roles".into()));
        }
        let stats = train.compute_stats()?;
        train.stats = Some(stats.clone());
        val.stats = Some(stats.clone());
        test.stats = Some(stats);
        Ok(DataBundle { train, val, test })
    }
}

/// Per-epoch loss record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub alpha: f64,
    pub sampling: bool,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub params: ConcentrationParams,
    pub final_weights: Vec<f64>,
    pub loss_curve: Vec<EpochLoss>,
    pub wall_clock: f64,
    pub seed: u64,
}

/// One ensemble member: architecture sample m2 paired with weight
/// snapshot m1, both reproducible from the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub m1: usize,
    pub m2: usize,
    pub epoch: usize,
    pub cycle: usize,
    pub thetas: BTreeMap<(usize, usize), Vec<f64>>,
    pub weights: Vec<f64>,
}

// ---------------------------------------------------------------------------
// batch assembly

/// Normalized input tensor + labels for gradient work. Refuses test or
/// corrupted data so it can never leak into training.
fn grad_batch(ds: &ImageDataset, idxs: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    if ds.split == Split::Test || ds.corrupted {
        return Err(Error::Invariant(
            "gradient batch assembled from test or corrupted data".into(),
        ));
    }
    batch(ds, idxs)
}

fn batch(ds: &ImageDataset, idxs: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(idxs.len() * ds.example_len());
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        data.extend(ds.normalized_image(i)?);
        labels.push(ds.labels[i]);
    }
    let x = Tensor::new(&[idxs.len(), ds.channels, ds.height, ds.width], data)?;
    Ok((x, labels))
}

fn theta_tensors(
    thetas: &BTreeMap<(usize, usize), Vec<f64>>,
    requires_grad: bool,
) -> Result<BTreeMap<(usize, usize), Tensor>> {
    let mut out = BTreeMap::new();
    for (&e, v) in thetas {
        let t = Tensor::new(&[NUM_OPS], v.clone())?;
        t.set_requires_grad(requires_grad);
        out.insert(e, t);
    }
    Ok(out)
}

fn flat_grads(net: &Supernet) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in net.params() {
        match t.grad() {
            Some(g) => out.extend(g),
            None => out.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }
    out
}

fn shuffled_indices(n: usize, master: u64, path: &[u64]) -> Vec<usize> {
    let mut idxs: Vec<usize> = (0..n).collect();
    idxs.shuffle(&mut rng::stream(master, path));
    idxs
}

// ---------------------------------------------------------------------------
// weight training

/// One epoch of minibatch updates at schedule position k. Returns the
/// mean minibatch loss. `theta_for(batch)` supplies the mixing weights.
fn weight_epoch(
    net: &Supernet,
    train: &ImageDataset,
    csgld: &CsgldConfig,
    k: usize,
    branch_master: u64,
    langevin: bool,
    mut theta_for: impl FnMut(usize) -> Result<BTreeMap<(usize, usize), Vec<f64>>>,
) -> Result<f64> {
    let alpha = lr_schedule(k, csgld);
    let phase = phase_of(k, csgld);
    let idxs = shuffled_indices(train.n, branch_master, &[tag::SHUFFLE, k as u64]);
    let mut total = 0.0;
    let mut batches = 0usize;
    for (bi, chunk) in idxs.chunks(csgld.batch_size).enumerate() {
        let (x, labels) = grad_batch(train, chunk)?;
        let tt = theta_tensors(&theta_for(bi)?, false)?;
        let tape = Tape::new();
        net.zero_grads();
        let logits = net.forward(&tape, &x, &tt)?;
        let (loss, _) = tape.softmax_cross_entropy(&logits, &labels)?;
        tape.backward(&loss)?;
        total += loss.item();
        batches += 1;
        let mut w = net.flatten();
        let mut g = flat_grads(net);
        if let Some(cap) = csgld.grad_clip {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > cap {
                let scale = cap / norm;
                for x in &mut g {
                    *x *= scale;
                }
            }
        }
        let (grad_u, n_eff) = if csgld.paper_literal_update {
            (g, 1usize)
        } else {
            (posterior_grad(&w, &g, csgld)?, csgld.dataset_size)
        };
        if langevin && phase == Phase::Sampling {
            let mut nr = rng::stream(branch_master, &[tag::SGLD_NOISE, k as u64, bi as u64]);
            step_sample(&mut w, &grad_u, alpha, n_eff, &mut nr);
        } else {
            step_explore(&mut w, &grad_u, alpha, n_eff);
        }
        net.load_flat(&w)?;
    }
    Ok(total / batches.max(1) as f64)
}

// ---------------------------------------------------------------------------
// search phase

pub fn search_phase(cfg: &RunConfig, bundle: &DataBundle) -> Result<SearchResult> {
    cfg.validate()?;
    let started = Instant::now();
    let topology = cfg.profile.topology();
    let mut params =
        ConcentrationParams::symmetric(&topology.edges, NUM_OPS, cfg.lambda);
    let mut curve = Vec::new();
    let mcfg = cfg.macro_cfg(bundle.train.channels, bundle.train.classes);
    let net = Supernet::new(mcfg, topology.clone(), cfg.master_seed, 0)?;
    let mut csgld = cfg.csgld.clone();
    if csgld.dataset_size == 0 {
        csgld.dataset_size = bundle.train.n;
    }
    if csgld.epochs == 0 {
        return Ok(SearchResult {
            params,
            final_weights: net.flatten(),
            loss_curve: curve,
            wall_clock: started.elapsed().as_secs_f64(),
            seed: cfg.master_seed,
        });
    }
    let mut initial_loss = None;
    let mut high_epochs = 0usize;
    for k in 1..=csgld.epochs {
        // Eq. 3: pathwise architecture gradient on one validation batch,
        // averaged over the M_theta Dirichlet draws
        let val_loss = if cfg.eta > 0.0 {
            let mut vr = rng::stream(cfg.master_seed, &[tag::SHUFFLE, k as u64, 1]);
            let take = cfg.arch_batch.unwrap_or(csgld.batch_size).min(bundle.val.n);
            let vidx = index_sample(&mut vr, bundle.val.n, take).into_vec();
            let (x, labels) = grad_batch(&bundle.val, &vidx)?;
            let mut mean_loss = 0.0;
            let mut acc: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
            for s in 0..cfg.m_theta {
                let sample = ArchSample::draw(
                    &params,
                    cfg.master_seed,
                    &[tag::THETA_SAMPLE, k as u64, 0, s as u64],
                )?;
                let tt = theta_tensors(&sample.thetas(), true)?;
                let tape = Tape::new();
                net.zero_grads();
                let logits = net.forward(&tape, &x, &tt)?;
                let (loss, _) = tape.softmax_cross_entropy(&logits, &labels)?;
                tape.backward(&loss)?;
                mean_loss += loss.item();
                for (&e, draw) in &sample.edges {
                    let dl = tt[&e].grad().unwrap_or_else(|| vec![0.0; NUM_OPS]);
                    let grad = arch_objective_grad(&params.b[&e], &dl, draw, cfg.lambda)?;
                    let slot = acc.entry(e).or_insert_with(|| vec![0.0; NUM_OPS]);
                    for (a, g) in slot.iter_mut().zip(&grad) {
                        *a += g / cfg.m_theta as f64;
                    }
                }
            }
            for (e, grad) in &acc {
                arch_step(params.b.get_mut(e).expect("edge present"), grad, cfg.eta);
            }
            params.clamp();
            Some(mean_loss / cfg.m_theta as f64)
        } else {
            None
        };
        // Eq. 4: one cSGLD epoch at alpha_k with fresh theta per batch
        let train_loss = weight_epoch(
            &net,
            &bundle.train,
            &csgld,
            k,
            cfg.master_seed,
            true,
            |bi| {
                Ok(ArchSample::draw(
                    &params,
                    cfg.master_seed,
                    &[tag::THETA_SAMPLE, k as u64, bi as u64 + 1],
                )?
                .thetas())
            },
        )?;
        curve.push(EpochLoss {
            epoch: k,
            train_loss,
            val_loss,
            alpha: lr_schedule(k, &csgld),
            sampling: phase_of(k, &csgld) == Phase::Sampling,
        });
        let init = *initial_loss.get_or_insert(train_loss);
        if train_loss > 10.0 * init {
            high_epochs += 1;
            if high_epochs >= 3 {
                return Err(Error::Training(format!(
                    "search diverged: loss {train_loss:.4} above 10x initial {init:.4} \
                     for 3 consecutive epochs (epoch {k}); curve tail {:?}",
                    &curve[curve.len().saturating_sub(3)..]
                )));
            }
        } else {
            high_epochs = 0;
        }
        if !train_loss.is_finite() {
            return Err(Error::Training(format!("non-finite training loss at epoch {k}")));
        }
    }
    for v in params.b.values() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training("non-finite concentration parameters".into()));
        }
    }
    Ok(SearchResult {
        params,
        final_weights: net.flatten(),
        loss_curve: curve,
        wall_clock: started.elapsed().as_secs_f64(),
        seed: cfg.master_seed,
    })
}

// ---------------------------------------------------------------------------
// evaluation phase

fn one_hot_thetas(
    thetas: &BTreeMap<(usize, usize), Vec<f64>>,
) -> BTreeMap<(usize, usize), Vec<f64>> {
    thetas
        .iter()
        .map(|(&e, v)| {
            let mut best = 0;
            for (i, &x) in v.iter().enumerate() {
                if x > v[best] {
                    best = i;
                }
            }
            let mut one = vec![0.0; v.len()];
            one[best] = 1.0;
            (e, one)
        })
        .collect()
}

/// Retrain fresh networks for 2K epochs per architecture branch and
/// collect ensemble members. Deterministic variants keep only the final
/// weights of each branch.
pub fn eval_phase(
    cfg: &RunConfig,
    search: &SearchResult,
    bundle: &DataBundle,
) -> Result<Vec<EnsembleMember>> {
    cfg.validate()?;
    let eff = cfg.effective();
    let mut csgld = cfg.csgld.doubled();
    if csgld.dataset_size == 0 {
        csgld.dataset_size = bundle.train.n;
    }
    // fail on snapshot shortfall before any training starts
    let snaps = if eff.langevin {
        snapshot_epochs(&csgld, cfg.m_w)?
    } else {
        vec![csgld.epochs]
    };
    let topology = cfg.profile.topology();
    let cycle_len = csgld.cycle_len();
    let mut branches: Vec<Vec<EnsembleMember>> = Vec::with_capacity(eff.branches);
    for m2 in 0..eff.branches {
        let branch_master = rng::derive(cfg.master_seed, &[tag::EVAL_BRANCH, m2 as u64]);
        let mut thetas = match eff.theta_source {
            ThetaSource::Mean => search.params.mean_theta(),
            ThetaSource::Sampled => ArchSample::draw(
                &search.params,
                cfg.master_seed,
                &[tag::EVAL_BRANCH, tag::THETA_SAMPLE, m2 as u64],
            )?
            .thetas(),
        };
        if cfg.evaluation == EvalMode::Discretized {
            thetas = one_hot_thetas(&thetas);
        }
        let mcfg = cfg.macro_cfg(bundle.train.channels, bundle.train.classes);
        let net = Supernet::new(mcfg, topology.clone(), branch_master, 1)?;
        if cfg.inherit_search_weights {
            net.load_flat(&search.final_weights)?;
        }
        let mut members = Vec::new();
        for k in 1..=csgld.epochs {
            weight_epoch(&net, &bundle.train, &csgld, k, branch_master, eff.langevin, |_| {
                Ok(thetas.clone())
            })?;
            if snaps.contains(&k) {
                members.push(EnsembleMember {
                    m1: members.len(),
                    m2,
                    epoch: k,
                    cycle: (k - 1) / cycle_len + 1,
                    thetas: thetas.clone(),
                    weights: net.flatten(),
                });
            }
        }
        branches.push(members);
    }
    Ok(select_members(branches, member_cap(cfg, eff.langevin, eff.branches)))
}

/// min(configured ensemble size, M_theta * C * floor(M_w / C)) for the
/// cSGLD variants; min(ensemble size, branches) for deterministic ones.
fn member_cap(cfg: &RunConfig, langevin: bool, branches: usize) -> usize {
    if langevin {
        cfg.ensemble_size
            .min(branches * cfg.csgld.cycles * (cfg.m_w / cfg.csgld.cycles))
    } else {
        cfg.ensemble_size.min(branches)
    }
}

/// Round-robin across architecture branches (one snapshot per branch
/// before seconds), then fixed (m2, m1) output order.
fn select_members(branches: Vec<Vec<EnsembleMember>>, cap: usize) -> Vec<EnsembleMember> {
    let mut picked = Vec::new();
    let deepest = branches.iter().map(|b| b.len()).max().unwrap_or(0);
    'outer: for s in 0..deepest {
        for b in &branches {
            if let Some(m) = b.get(s) {
                picked.push(m.clone());
                if picked.len() == cap {
                    break 'outer;
                }
            }
        }
    }
    picked.sort_by_key(|m| (m.m2, m.m1));
    picked
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub search: SearchResult,
    pub members: Vec<EnsembleMember>,
}

pub fn run_variant(cfg: &RunConfig, bundle: &DataBundle) -> Result<VariantRun> {
    let search = search_phase(cfg, bundle)?;
    let members = eval_phase(cfg, &search, bundle)?;
    Ok(VariantRun { search, members })
}

// ---------------------------------------------------------------------------
// prediction

/// Class probabilities of one member over a dataset, row-major
/// [examples][classes].
pub fn member_probs(
    cfg: &RunConfig,
    member: &EnsembleMember,
    ds: &ImageDataset,
) -> Result<Vec<f64>> {
    let topology = cfg.profile.topology();
    let mcfg = cfg.macro_cfg(ds.channels, ds.classes);
    let net = Supernet::new(mcfg, topology, 0, 0)?;
    net.load_flat(&member.weights)?;
    let tt = theta_tensors(&member.thetas, false)?;
    let mut out = Vec::with_capacity(ds.n * ds.classes);
    let bs = 64usize;
    let idxs: Vec<usize> = (0..ds.n).collect();
    for chunk in idxs.chunks(bs) {
        let (x, _) = batch(ds, chunk)?;
        let tape = Tape::new();
        let logits = net.forward(&tape, &x, &tt)?;
        let rows = logits.to_vec();
        for row in rows.chunks(ds.classes) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|&e| e / s));
        }
    }
    Ok(out)
}

/// Stack all members' probabilities into a prediction set.
pub fn prediction_set(
    cfg: &RunConfig,
    members: &[EnsembleMember],
    ds: &ImageDataset,
) -> Result<PredictionSet> {
    let mut probs = Vec::with_capacity(members.len() * ds.n * ds.classes);
    for m in members {
        probs.extend(member_probs(cfg, m, ds)?);
    }
    PredictionSet::new(probs, members.len(), ds.n, ds.classes)
}
