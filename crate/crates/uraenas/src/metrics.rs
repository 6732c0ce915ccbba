//! Ensemble evaluation metrics: accuracy, negative log-likelihood, and
//! expected calibration error, plus the ensemble-size sweep.
//!
//! Ensembling averages member probabilities (not logits). Accumulation is
//! done in f64 regardless of the storage scalar.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use rand::seq::index::sample as index_sample;
use serde::{Deserialize, Serialize};

/// Floor applied to predicted probabilities inside the log.
pub const NLL_CLIP: f64 = 1e-12;
/// Number of equal-width confidence bins for calibration error.
pub const ECE_BINS: usize = 15;

/// Member probability predictions, laid out [members][examples][classes].
#[derive(Debug, Clone)]
pub struct PredictionSet<S: Scalar = f64> {
    probs: Vec<S>,
    members: usize,
    examples: usize,
    classes: usize,
}

impl<S: Scalar> PredictionSet<S> {
    pub fn new(probs: Vec<S>, members: usize, examples: usize, classes: usize) -> Result<Self> {
        if probs.len() != members * examples * classes {
            return Err(Error::Dimension(format!(
                "prediction buffer holds {} values, expected {} x {} x {}",
                probs.len(),
                members,
                examples,
                classes
            )));
        }
        Ok(PredictionSet { probs, members, examples, classes })
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// One member's [examples][classes] block.
    pub fn member(&self, m: usize) -> &[S] {
        let stride = self.examples * self.classes;
        &self.probs[m * stride..(m + 1) * stride]
    }

    /// Average the probabilities of the listed members.
    pub fn ensemble_average(&self, subset: &[usize]) -> Result<Vec<f64>> {
        if subset.is_empty() {
            return Err(Error::Input("ensemble average over an empty member subset".into()));
        }
        for &m in subset {
            if m >= self.members {
                return Err(Error::Input(format!(
                    "member index {m} out of range for {} members",
                    self.members
                )));
            }
        }
        let stride = self.examples * self.classes;
        let mut out = vec![0.0f64; stride];
        for &m in subset {
            for (o, &p) in out.iter_mut().zip(&self.probs[m * stride..(m + 1) * stride]) {
                *o += p.to_f64();
            }
        }
        let inv = 1.0 / subset.len() as f64;
        for o in &mut out {
            *o *= inv;
        }
        Ok(out)
    }
}

fn check_labels(probs_len: usize, classes: usize, labels: &[usize]) -> Result<usize> {
    if classes == 0 || probs_len % classes != 0 {
        return Err(Error::Dimension(format!(
            "probability buffer of {probs_len} values does not tile into rows of {classes}"
        )));
    }
    let n = probs_len / classes;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} prediction rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(n)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of a flat [examples][classes] probability table.
pub fn accuracy(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    let n = check_labels(probs.len(), classes, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&probs[i * classes..(i + 1) * classes]) == l)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean negative log-likelihood with probabilities floored at 1e-12.
pub fn nll(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    let n = check_labels(probs.len(), classes, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs[i * classes + l].max(NLL_CLIP).ln())
        .sum();
    Ok(total / n as f64)
}

/// Per-bin calibration statistics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BinStat {
    /// Lower edge, exclusive (except for the first bin).
    pub lo: f64,
    /// Upper edge, inclusive.
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

/// Expected calibration error over 15 equal-width bins of top-1
/// confidence, right-closed: bin i covers (i/15, (i+1)/15], with the
/// first bin also taking confidence 0.
pub fn ece(probs: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<BinStat>)> {
    let n = check_labels(probs.len(), classes, labels)?;
    let mut count = [0usize; ECE_BINS];
    let mut conf_sum = [0.0f64; ECE_BINS];
    let mut acc_sum = [0.0f64; ECE_BINS];
    for (i, &l) in labels.iter().enumerate() {
        let row = &probs[i * classes..(i + 1) * classes];
        let pred = argmax(row);
        let conf = row[pred];
        // right-closed bins: ceil(conf * 15) - 1, clamped into range
        let bin = (conf * ECE_BINS as f64).ceil() as isize - 1;
        let bin = bin.clamp(0, ECE_BINS as isize - 1) as usize;
        count[bin] += 1;
        conf_sum[bin] += conf;
        acc_sum[bin] += if pred == l { 1.0 } else { 0.0 };
    }
    let mut stats = Vec::with_capacity(ECE_BINS);
    let mut err = 0.0;
    for b in 0..ECE_BINS {
        let (mc, ma) = if count[b] > 0 {
            (conf_sum[b] / count[b] as f64, acc_sum[b] / count[b] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            err += count[b] as f64 / n as f64 * (ma - mc).abs();
        }
        stats.push(BinStat {
            lo: b as f64 / ECE_BINS as f64,
            hi: (b + 1) as f64 / ECE_BINS as f64,
            count: count[b],
            mean_confidence: mc,
            mean_accuracy: ma,
        });
    }
    Ok((err, stats))
}

/// Accuracy / NLL / ECE of one probability table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricTriple {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

pub fn metric_triple(probs: &[f64], classes: usize, labels: &[usize]) -> Result<MetricTriple> {
    Ok(MetricTriple {
        accuracy: accuracy(probs, classes, labels)?,
        nll: nll(probs, classes, labels)?,
        ece: ece(probs, classes, labels)?.0,
    })
}

/// One row of the ensemble-size sweep: metrics averaged over the random
/// subsets drawn at that size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub subsets: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

/// Evaluate ensembles of each requested size. Sizes below the member
/// count use 10 random member subsets (drawn without replacement within
/// a subset); the full size uses the single complete subset.
pub fn ensemble_size_sweep<S: Scalar>(
    preds: &PredictionSet<S>,
    labels: &[usize],
    sizes: &[usize],
    master_seed: u64,
) -> Result<Vec<SweepRow>> {
    let m = preds.members();
    let mut rows = Vec::with_capacity(sizes.len());
    for (si, &size) in sizes.iter().enumerate() {
        if size == 0 || size > m {
            return Err(Error::Input(format!(
                "sweep size {size} invalid for an ensemble of {m} members"
            )));
        }
        let reps = if size == m { 1 } else { 10 };
        let mut acc = 0.0;
        let mut nl = 0.0;
        let mut ec = 0.0;
        for rep in 0..reps {
            let subset: Vec<usize> = if size == m {
                (0..m).collect()
            } else {
                let mut r = rng::stream(master_seed, &[rng::tag::SWEEP, si as u64, rep as u64]);
                let mut idx = index_sample(&mut r, m, size).into_vec();
                idx.sort_unstable();
                idx
            };
            let avg = preds.ensemble_average(&subset)?;
            let t = metric_triple(&avg, preds.classes(), labels)?;
            acc += t.accuracy;
            nl += t.nll;
            ec += t.ece;
        }
        let inv = 1.0 / reps as f64;
        rows.push(SweepRow {
            size,
            subsets: reps,
            accuracy: acc * inv,
            nll: nl * inv,
            ece: ec * inv,
        });
    }
    Ok(rows)
}

/// CSV rendering of a sweep, one row per ensemble size.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("size,subsets,accuracy,nll,ece\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.17},{:.17},{:.17}\n",
            r.size, r.subsets, r.accuracy, r.nll, r.ece
        ));
    }
    out
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Input(format!(
            "spearman needs two equal-length series of at least 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite rank input"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Input("constant series has no rank correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
