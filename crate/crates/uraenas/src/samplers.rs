//! Cyclical SGLD for network weights and plain gradient descent for the
//! architecture parameters.
//!
//! One epoch is one full pass over the training split; the schedule index
//! k advances per epoch while updates happen per minibatch at the epoch's
//! step size. The sampler works in posterior scale: the negative
//! log-posterior gradient is N * (mean minibatch loss grad) + w, with the
//! step size folded by 1/N so the drift matches loss-scale SGD. Setting
//! `paper_literal_update` reproduces the plain update (no N scaling, no
//! prior term) instead.

use crate::arch_dist::B_CLAMP;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Cyclical SGLD configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CsgldConfig {
    /// Initial step size (loss scale).
    pub alpha0: f64,
    /// Total training epochs K.
    pub epochs: usize,
    /// Number of cycles C.
    pub cycles: usize,
    /// Exploration fraction r in [0, 1).
    pub explore_fraction: f64,
    pub dataset_size: usize,
    pub batch_size: usize,
    /// Plain update without N scaling or prior term.
    #[serde(default)]
    pub paper_literal_update: bool,
    /// Clip the minibatch gradient to this global L2 norm before the
    /// update; None disables clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Alias for `cycles` kept for auditability against configs that
    /// spell the phase divisor with M; must match `cycles` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

impl Default for CsgldConfig {
    fn default() -> Self {
        CsgldConfig {
            alpha0: 0.1,
            epochs: 30,
            cycles: 4,
            explore_fraction: 0.7,
            dataset_size: 0,
            batch_size: 64,
            paper_literal_update: false,
            grad_clip: None,
            m: None,
        }
    }
}

impl CsgldConfig {
    pub fn validate(&self) -> Result<()> {
        // epochs == 0 is the degenerate "no training" configuration
        if self.cycles < 1 || (self.epochs != 0 && self.epochs < self.cycles) {
            return Err(Error::Config(format!(
                "need epochs >= cycles >= 1, got epochs {} cycles {}",
                self.epochs, self.cycles
            )));
        }
        if !(0.0..1.0).contains(&self.explore_fraction) {
            return Err(Error::Config(format!(
                "exploration fraction {} outside [0, 1)",
                self.explore_fraction
            )));
        }
        if self.alpha0 <= 0.0 {
            return Err(Error::Config(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if let Some(m) = self.m {
            if m != self.cycles {
                return Err(Error::Config(format!(
                    "m = {m} conflicts with cycles = {}; the phase divisor is the cycle length",
                    self.cycles
                )));
            }
        }
        Ok(())
    }

    /// ceil(K / C).
    pub fn cycle_len(&self) -> usize {
        self.epochs.div_ceil(self.cycles)
    }

    /// Doubled-epoch copy used by the ensemble-generating phase.
    pub fn doubled(&self) -> CsgldConfig {
        CsgldConfig { epochs: 2 * self.epochs, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Exploration,
    Sampling,
}

/// Schedule state at epoch k.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseState {
    pub epoch: usize,
    pub alpha: f64,
    pub phase: Phase,
}

impl PhaseState {
    pub fn at(k: usize, cfg: &CsgldConfig) -> Self {
        PhaseState { epoch: k, alpha: lr_schedule(k, cfg), phase: phase_of(k, cfg) }
    }
}

/// alpha_k = (alpha0 / 2) [cos(pi * mod(k-1, ceil(K/C)) / ceil(K/C)) + 1].
pub fn lr_schedule(k: usize, cfg: &CsgldConfig) -> f64 {
    let len = cfg.cycle_len();
    let pos = (k - 1) % len;
    cfg.alpha0 / 2.0 * ((std::f64::consts::PI * pos as f64 / len as f64).cos() + 1.0)
}

/// Exploration iff mod(k-1, ceil(K/C)) / ceil(K/C) < r.
pub fn phase_of(k: usize, cfg: &CsgldConfig) -> Phase {
    let len = cfg.cycle_len();
    let pos = (k - 1) % len;
    if (pos as f64 / len as f64) < cfg.explore_fraction {
        Phase::Exploration
    } else {
        Phase::Sampling
    }
}

/// Epochs (1-based, within `cfg.epochs`) at which weight snapshots are
/// taken: the last floor(m_w / C) sampling epochs of each cycle.
pub fn snapshot_epochs(cfg: &CsgldConfig, m_w: usize) -> Result<Vec<usize>> {
    let per_cycle = m_w / cfg.cycles;
    if per_cycle == 0 {
        return Err(Error::Config(format!(
            "m_w = {m_w} with {} cycles keeps no snapshots per cycle",
            cfg.cycles
        )));
    }
    let len = cfg.cycle_len();
    let mut out = Vec::new();
    let mut cycle_start = 1;
    while cycle_start <= cfg.epochs {
        let cycle_end = (cycle_start + len - 1).min(cfg.epochs);
        let sampling: Vec<usize> = (cycle_start..=cycle_end)
            .filter(|&k| phase_of(k, cfg) == Phase::Sampling)
            .collect();
        if sampling.len() < per_cycle {
            return Err(Error::Config(format!(
                "cycle starting at epoch {cycle_start} has only {} sampling epochs, \
                 need {per_cycle}; lower the exploration fraction or m_w",
                sampling.len()
            )));
        }
        out.extend_from_slice(&sampling[sampling.len() - per_cycle..]);
        cycle_start += len;
    }
    Ok(out)
}

/// Negative log-posterior gradient in posterior scale:
/// N * (mean minibatch loss grad) + w, for a standard normal prior.
pub fn posterior_grad(w: &[f64], minibatch_grad: &[f64], cfg: &CsgldConfig) -> Result<Vec<f64>> {
    let n = cfg.dataset_size as f64;
    let out: Vec<f64> =
        w.iter().zip(minibatch_grad).map(|(&wi, &gi)| n * gi + wi).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite posterior gradient".into()));
    }
    Ok(out)
}

/// Deterministic exploration step: w' = w - (alpha / N) * grad_U.
pub fn step_explore(w: &mut [f64], grad_u: &[f64], alpha: f64, n_data: usize) {
    let s = alpha / n_data as f64;
    for (wi, &gi) in w.iter_mut().zip(grad_u) {
        *wi -= s * gi;
    }
}

/// Langevin step: w' = w - (alpha / N) grad_U + sqrt(2 alpha / N) * eps,
/// with the noise vector supplied by the caller.
pub fn step_sample_with_noise(
    w: &mut [f64],
    grad_u: &[f64],
    alpha: f64,
    n_data: usize,
    noise: &[f64],
) {
    let s = alpha / n_data as f64;
    let amp = (2.0 * s).sqrt();
    for ((wi, &gi), &ei) in w.iter_mut().zip(grad_u).zip(noise) {
        *wi = *wi - s * gi + amp * ei;
    }
}

/// Langevin step drawing fresh standard-normal noise from `rng`.
pub fn step_sample(w: &mut [f64], grad_u: &[f64], alpha: f64, n_data: usize, rng: &mut impl Rng) {
    let noise: Vec<f64> = (0..w.len()).map(|_| rng.sample(StandardNormal)).collect();
    step_sample_with_noise(w, grad_u, alpha, n_data, &noise);
}

/// Architecture step: b' = clamp(b - eta * grad, -10, 10).
pub fn arch_step(b: &mut [f64], grad: &[f64], eta: f64) {
    for (bi, &gi) in b.iter_mut().zip(grad) {
        *bi = (*bi - eta * gi).clamp(-B_CLAMP, B_CLAMP);
    }
}

/// A stored copy of all network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub weights: Vec<f64>,
    pub epoch: usize,
    pub cycle: usize,
    pub stream_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    shapes: Vec<(String, Vec<usize>)>,
    epoch: usize,
    cycle: usize,
    seed: u64,
    count: usize,
}

/// Directory of weight blobs: a little-endian u64 header length, a JSON
/// header with shapes/epoch/cycle/seed, then little-endian float64 data.
pub struct SnapshotStore {
    dir: PathBuf,
}

impl SnapshotStore {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(SnapshotStore { dir: dir.to_path_buf() })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("snapshot store {} not found", dir.display()),
            )));
        }
        Ok(SnapshotStore { dir: dir.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn save(
        &self,
        name: &str,
        snap: &WeightSnapshot,
        shapes: &[(String, Vec<usize>)],
    ) -> Result<()> {
        let header = SnapshotHeader {
            shapes: shapes.to_vec(),
            epoch: snap.epoch,
            cycle: snap.cycle,
            seed: snap.stream_id,
            count: snap.weights.len(),
        };
        let hjson = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("snapshot header: {e}")))?;
        let mut f = fs::File::create(self.dir.join(format!("{name}.bin")))?;
        f.write_all(&(hjson.len() as u64).to_le_bytes())?;
        f.write_all(&hjson)?;
        for v in &snap.weights {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(&self, name: &str) -> Result<WeightSnapshot> {
        let mut f = fs::File::open(self.dir.join(format!("{name}.bin")))?;
        let mut len_buf = [0u8; 8];
        f.read_exact(&mut len_buf)?;
        let hlen = u64::from_le_bytes(len_buf) as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)?;
        let header: SnapshotHeader = serde_json::from_slice(&hbuf)
            .map_err(|e| Error::Format(format!("snapshot header: {e}")))?;
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        if data.len() != header.count * 8 {
            return Err(Error::Format(format!(
                "snapshot {} holds {} bytes, header promises {} values",
                name,
                data.len(),
                header.count
            )));
        }
        let weights: Vec<f64> =
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(WeightSnapshot {
            weights,
            epoch: header.epoch,
            cycle: header.cycle,
            stream_id: header.seed,
        })
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".bin").map(str::to_string)
            })
            .collect();
        names.sort();
        Ok(names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alpha0: f64, epochs: usize, cycles: usize, r: f64) -> CsgldConfig {
        CsgldConfig {
            alpha0,
            epochs,
            cycles,
            explore_fraction: r,
            dataset_size: 100,
            batch_size: 10,
            ..Default::default()
        }
    }

    #[test]
    fn lr_starts_each_cycle_at_alpha0() {
        let c = cfg(0.3, 100, 2, 0.7);
        assert_eq!(lr_schedule(1, &c), 0.3);
        assert_eq!(lr_schedule(51, &c), 0.3);
    }

    #[test]
    fn lr_midpoint_is_half_alpha0() {
        let c = cfg(1.0, 100, 2, 0.7);
        // k = 26: mod(25, 50)/50 = 0.5, cos(pi/2) = 0
        assert!((lr_schedule(26, &c) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lr_end_of_cycle_matches_closed_form() {
        let c = cfg(1.0, 100, 2, 0.7);
        let expect = 0.5 * ((std::f64::consts::PI * 49.0 / 50.0).cos() + 1.0);
        assert_eq!(lr_schedule(50, &c), expect);
        assert!((expect - 0.000986635).abs() < 1e-6);
    }

    #[test]
    fn lr_is_cycle_periodic_and_decreasing_within_cycle() {
        let c = cfg(0.2, 60, 3, 0.5);
        let len = c.cycle_len();
        for k in 1..=c.epochs {
            if k > len {
                assert_eq!(lr_schedule(k, &c), lr_schedule(k - len, &c));
            }
        }
        for k in 1..len {
            assert!(lr_schedule(k + 1, &c) < lr_schedule(k, &c));
        }
    }

    #[test]
    fn r_zero_means_all_sampling() {
        let c = cfg(0.1, 20, 2, 0.0);
        for k in 1..=20 {
            assert_eq!(phase_of(k, &c), Phase::Sampling);
        }
    }

    #[test]
    fn first_epoch_explores_when_r_positive() {
        let c = cfg(0.1, 20, 2, 0.1);
        assert_eq!(phase_of(1, &c), Phase::Exploration);
    }

    #[test]
    fn phase_split_matches_enumeration_for_r_08() {
        // 50-epoch cycles: mod values 0..39 explore (ratio < 0.8), 40..49 sample
        let c = cfg(0.1, 100, 2, 0.8);
        for k in 1..=100usize {
            let pos = (k - 1) % 50;
            let expect = if (pos as f64) < 0.8 * 50.0 { Phase::Exploration } else { Phase::Sampling };
            assert_eq!(phase_of(k, &c), expect, "epoch {k}");
        }
    }

    #[test]
    fn sampling_epoch_count_per_cycle() {
        for (epochs, cycles, r) in [(100, 2, 0.8), (30, 3, 0.7), (40, 4, 0.5), (17, 2, 0.6)] {
            let c = cfg(0.1, epochs, cycles, r);
            let len = c.cycle_len();
            let expect = len - (r * len as f64).ceil() as usize;
            let in_first_cycle =
                (1..=len.min(epochs)).filter(|&k| phase_of(k, &c) == Phase::Sampling).count();
            assert_eq!(in_first_cycle, expect, "K={epochs} C={cycles} r={r}");
        }
    }

    #[test]
    fn snapshot_epochs_for_the_reference_config() {
        // eval phase over 2K = 40 epochs, C = 2, r = 0.7, M_w = 4
        let c = cfg(0.1, 40, 2, 0.7);
        assert_eq!(snapshot_epochs(&c, 4).unwrap(), vec![19, 20, 39, 40]);
    }

    #[test]
    fn snapshot_shortfall_is_config_error() {
        let c = cfg(0.1, 40, 2, 0.7);
        assert!(matches!(snapshot_epochs(&c, 1), Err(Error::Config(_))));
    }

    #[test]
    fn posterior_grad_trivials() {
        let c = cfg(0.1, 10, 1, 0.0);
        assert_eq!(posterior_grad(&[0.0], &[0.0], &c).unwrap(), vec![0.0]);
        // zero loss grad: pure prior pull returns w
        assert_eq!(posterior_grad(&[2.5, -1.0], &[0.0, 0.0], &c).unwrap(), vec![2.5, -1.0]);
    }

    #[test]
    fn posterior_grad_matches_conjugate_gaussian() {
        // loss_i(w) = (w - x_i)^2 / 2; posterior gradient of
        // sum_i (w - x_i)^2/2 + w^2/2 is N w - sum x_i + w
        let xs = [0.4, -1.2, 2.0, 0.7];
        let mut c = cfg(0.1, 10, 1, 0.0);
        c.dataset_size = xs.len();
        let w = 0.9;
        let mean_grad = xs.iter().map(|x| w - x).sum::<f64>() / xs.len() as f64;
        let got = posterior_grad(&[w], &[mean_grad], &c).unwrap()[0];
        let analytic = xs.iter().map(|x| w - x).sum::<f64>() + w;
        assert!((got - analytic).abs() < 1e-12);
    }

    #[test]
    fn step_explore_arithmetic() {
        let mut w = vec![0.0];
        step_explore(&mut w, &[0.0], 0.1, 1);
        assert_eq!(w, vec![0.0]);
        // grad_U / N = 0.5 at alpha 0.1
        let mut w = vec![1.0];
        step_explore(&mut w, &[0.5], 0.1, 1);
        assert!((w[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn step_explore_contracts_convex_quadratic() {
        // U(w) = (w - 3)^2 / 2 in posterior scale with N = 1
        let mut w = vec![10.0];
        let mut prev_gap = (w[0] - 3.0f64).abs();
        for _ in 0..100 {
            let g = vec![w[0] - 3.0];
            step_explore(&mut w, &g, 0.5, 1);
            let gap = (w[0] - 3.0f64).abs();
            assert!(gap <= prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-10);
    }

    #[test]
    fn zero_alpha_leaves_weights_unchanged() {
        let mut w = vec![1.0, -2.0];
        let mut r = crate::rng::stream(1, &[1]);
        step_sample(&mut w, &[0.3, 0.4], 0.0, 1, &mut r);
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn noise_free_sample_step_equals_explore_bitwise() {
        let mut w1 = vec![0.7, -0.3, 1.9];
        let mut w2 = w1.clone();
        let g = vec![0.11, -0.5, 2.0];
        step_explore(&mut w1, &g, 0.07, 13);
        step_sample_with_noise(&mut w2, &g, 0.07, 13, &[0.0; 3]);
        assert_eq!(w1, w2);
    }

    #[test]
    fn langevin_matches_1d_gaussian_moments() {
        // target N(2, 0.5^2): U(w) = (w-2)^2 / (2 * 0.25)
        let mut w = vec![0.0];
        let mut r = crate::rng::stream(21, &[2]);
        let alpha = 2e-3;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        let burn = 5_000;
        let keep = 400_000;
        for t in 0..burn + keep {
            let g = vec![(w[0] - 2.0) / 0.25];
            step_sample(&mut w, &g, alpha, 1, &mut r);
            if t >= burn {
                acc += w[0];
                acc2 += w[0] * w[0];
            }
        }
        let mean = acc / keep as f64;
        let var = acc2 / keep as f64 - mean * mean;
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
        assert!((var - 0.25).abs() < 0.05, "var {var}");
    }

    #[test]
    fn arch_step_trivials_and_clamp() {
        let mut b = vec![0.0, 5.0];
        arch_step(&mut b, &[0.0, 0.0], 0.1);
        assert_eq!(b, vec![0.0, 5.0]);
        arch_step(&mut b, &[1.0, -100.0], 0.1);
        assert!((b[0] + 0.1).abs() < 1e-15);
        assert_eq!(b[1], B_CLAMP);
    }

    #[test]
    fn regularizer_descent_drives_beta_to_one() {
        // descending lambda * sum (exp(b) - 1)^2 alone: fixed point b = 0
        let lambda = 0.1;
        let mut b: Vec<f64> = vec![1.5, -2.0];
        for _ in 0..5_000 {
            let grad: Vec<f64> =
                b.iter().map(|&bi| 2.0 * lambda * (bi.exp() - 1.0) * bi.exp()).collect();
            arch_step(&mut b, &grad, 0.5);
        }
        for bi in &b {
            assert!(bi.abs() < 1e-6, "b = {bi}");
        }
    }

    #[test]
    fn snapshot_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::create(dir.path()).unwrap();
        let snap = WeightSnapshot {
            weights: vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE],
            epoch: 19,
            cycle: 1,
            stream_id: 0xdeadbeef,
        };
        store.save("w_0001", &snap, &[("stem".into(), vec![2, 2])]).unwrap();
        let back = store.load("w_0001").unwrap();
        assert_eq!(back, snap);
        assert_eq!(store.list().unwrap(), vec!["w_0001".to_string()]);
    }

    #[test]
    fn m_alias_must_match_cycles() {
        let mut c = cfg(0.1, 10, 2, 0.5);
        c.m = Some(3);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.m = Some(2);
        assert!(c.validate().is_ok());
    }
}
