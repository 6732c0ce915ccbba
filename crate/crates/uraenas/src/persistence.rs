//! Run manifests, checkpoint round-trips, and report emission.
//!
//! Everything written here is either JSON (configs, manifests, reports)
//! or CSV (metric tables, loss curves, reliability diagrams). Float
//! fields use the shortest round-trip decimal representation, so a
//! re-run that reproduces the same numbers reproduces the same bytes.

use crate::arch_dist::BetaCheckpoint;
use crate::error::{Error, Result};
use crate::metrics::BinStat;
use crate::samplers::{SnapshotStore, WeightSnapshot};
use crate::trainer::{EnsembleMember, EpochLoss, RunConfig, SearchResult, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Everything needed to re-run a command bit-exactly: the full config
/// snapshot, the master seed, and content hashes of every input it read.
/// `wall_clock_seconds` is informational and never enters any report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub master_seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub wall_clock_seconds: f64,
}

impl Manifest {
    pub fn new(command: &str, master_seed: u64, threads: usize, config: serde_json::Value) -> Self {
        Manifest {
            version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            master_seed,
            threads,
            config,
            input_hashes: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        fs::write(path, body + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// search-phase artifacts

/// Write the search outcome into `dir`: `beta.json` (concentration
/// checkpoint), `weights.bin` (final weights), `loss.csv`.
pub fn save_search(dir: &Path, cfg: &RunConfig, res: &SearchResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ckpt = BetaCheckpoint::from_params(&res.params, cfg.master_seed);
    let body = serde_json::to_string_pretty(&ckpt)
        .map_err(|e| Error::Format(format!("beta checkpoint: {e}")))?;
    fs::write(dir.join("beta.json"), body + "\n")?;
    let store = SnapshotStore::create(dir)?;
    let last_epoch = res.loss_curve.last().map(|r| r.epoch).unwrap_or(0);
    store.save(
        "weights",
        &WeightSnapshot {
            weights: res.final_weights.clone(),
            epoch: last_epoch,
            cycle: 0,
            stream_id: res.seed,
        },
        &[],
    )?;
    fs::write(dir.join("loss.csv"), loss_csv(&res.loss_curve))?;
    Ok(())
}

pub fn load_search(dir: &Path) -> Result<SearchResult> {
    let ckpt: BetaCheckpoint = serde_json::from_slice(&fs::read(dir.join("beta.json"))?)
        .map_err(|e| Error::Format(format!("beta checkpoint: {e}")))?;
    let store = SnapshotStore::open(dir)?;
    let snap = store.load("weights")?;
    Ok(SearchResult {
        params: ckpt.to_params()?,
        final_weights: snap.weights,
        loss_curve: parse_loss_csv(&fs::read_to_string(dir.join("loss.csv"))?)?,
        wall_clock: 0.0,
        seed: snap.stream_id,
    })
}

pub fn loss_csv(rows: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,alpha,sampling\n");
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, val, r.alpha, r.sampling as u8
        ));
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<EpochLoss>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("loss csv line {}: expected 5 columns", i + 1)));
        }
        let bad = |c: &str| Error::Format(format!("loss csv line {}: bad value {c:?}", i + 1));
        rows.push(EpochLoss {
            epoch: cols[0].parse().map_err(|_| bad(cols[0]))?,
            train_loss: cols[1].parse().map_err(|_| bad(cols[1]))?,
            val_loss: if cols[2].is_empty() {
                None
            } else {
                Some(cols[2].parse().map_err(|_| bad(cols[2]))?)
            },
            alpha: cols[3].parse().map_err(|_| bad(cols[3]))?,
            sampling: cols[4] == "1",
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// eval-phase artifacts

#[derive(Debug, Serialize, Deserialize)]
struct MemberMeta {
    m1: usize,
    m2: usize,
    epoch: usize,
    cycle: usize,
    /// edge "i-j" -> theta values
    thetas: BTreeMap<String, Vec<f64>>,
}

/// Write ensemble members into `dir`: `members.json` with per-member
/// metadata and one weight blob per member.
pub fn save_members(dir: &Path, members: &[EnsembleMember]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let store = SnapshotStore::create(dir)?;
    let mut metas = Vec::with_capacity(members.len());
    for m in members {
        metas.push(MemberMeta {
            m1: m.m1,
            m2: m.m2,
            epoch: m.epoch,
            cycle: m.cycle,
            thetas: m.thetas.iter().map(|(&(i, j), v)| (format!("{i}-{j}"), v.clone())).collect(),
        });
        store.save(
            &format!("member_{}_{}", m.m2, m.m1),
            &WeightSnapshot {
                weights: m.weights.clone(),
                epoch: m.epoch,
                cycle: m.cycle,
                stream_id: 0,
            },
            &[],
        )?;
    }
    let body = serde_json::to_string_pretty(&metas)
        .map_err(|e| Error::Format(format!("members: {e}")))?;
    fs::write(dir.join("members.json"), body + "\n")?;
    Ok(())
}

pub fn load_members(dir: &Path) -> Result<Vec<EnsembleMember>> {
    let metas: Vec<MemberMeta> = serde_json::from_slice(&fs::read(dir.join("members.json"))?)
        .map_err(|e| Error::Format(format!("members: {e}")))?;
    let store = SnapshotStore::open(dir)?;
    let mut members = Vec::with_capacity(metas.len());
    for meta in metas {
        let mut thetas = BTreeMap::new();
        for (k, v) in &meta.thetas {
            let (i, j) = k
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| Error::Format(format!("bad edge id {k:?} in members.json")))?;
            thetas.insert((i, j), v.clone());
        }
        let snap = store.load(&format!("member_{}_{}", meta.m2, meta.m1))?;
        members.push(EnsembleMember {
            m1: meta.m1,
            m2: meta.m2,
            epoch: meta.epoch,
            cycle: meta.cycle,
            thetas,
            weights: snap.weights,
        });
    }
    members.sort_by_key(|m| (m.m2, m.m1));
    Ok(members)
}

// ---------------------------------------------------------------------------
// reports

/// One evaluated (variant, dataset, ensemble size) cell. `dataset` is
/// `"clean"` or a corruption kind name; severity 0 means clean.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub dataset: String,
    pub severity: u8,
    pub ensemble_size: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report: {e}")))?;
        fs::write(path, body + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Format(format!("report {}: {e}", path.display())))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,dataset,severity,ensemble_size,accuracy,ece,nll\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                variant_name(r.variant),
                r.dataset,
                r.severity,
                r.ensemble_size,
                r.accuracy,
                r.ece,
                r.nll
            ));
        }
        out
    }

    /// Collapse to one summary row per variant at its largest ensemble
    /// size: clean Acc/ECE/NLL plus the unweighted mean over all
    /// corrupted cells (cAcc/cECE/cNLL).
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        let mut out = Vec::new();
        for v in variants {
            let size = self
                .rows
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| r.ensemble_size)
                .max()
                .unwrap_or(0);
            let at = |clean: bool| -> Vec<&ReportRow> {
                self.rows
                    .iter()
                    .filter(|r| {
                        r.variant == v && r.ensemble_size == size && (r.dataset == "clean") == clean
                    })
                    .collect()
            };
            let clean = at(true);
            let corrupted = at(false);
            let mean = |rows: &[&ReportRow], f: fn(&ReportRow) -> f64| -> Option<f64> {
                if rows.is_empty() {
                    None
                } else {
                    Some(rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64)
                }
            };
            out.push(SummaryRow {
                variant: v,
                ensembles: size,
                accuracy: mean(&clean, |r| r.accuracy),
                ece: mean(&clean, |r| r.ece),
                nll: mean(&clean, |r| r.nll),
                c_accuracy: mean(&corrupted, |r| r.accuracy),
                c_ece: mean(&corrupted, |r| r.ece),
                c_nll: mean(&corrupted, |r| r.nll),
            });
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,ensembles,accuracy,ece,nll,c_accuracy,c_ece,c_nll\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in self.summary() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                variant_name(r.variant),
                r.ensembles,
                opt(r.accuracy),
                opt(r.ece),
                opt(r.nll),
                opt(r.c_accuracy),
                opt(r.c_ece),
                opt(r.c_nll)
            ));
        }
        out
    }
}

/// One summary line per variant, mirroring the columns of a
/// clean-vs-corrupted comparison table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub ensembles: usize,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub nll: Option<f64>,
    pub c_accuracy: Option<f64>,
    pub c_ece: Option<f64>,
    pub c_nll: Option<f64>,
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::DrNas => "drnas",
        Variant::UraeNasW => "uraenas_w",
        Variant::UraeNasA => "uraenas_a",
        Variant::UraeNas => "uraenas",
    }
}

/// Reliability-diagram data for external plotting: one row per
/// confidence bin.
pub fn reliability_csv(bins: &[BinStat]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,mean_confidence,mean_accuracy\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo, b.hi, b.count, b.mean_confidence, b.mean_accuracy
        ));
    }
    out
}
