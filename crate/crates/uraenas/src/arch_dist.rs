//! Dirichlet distribution over per-edge mixing weights.
//!
//! Concentrations are parameterized as beta = exp(b) with unconstrained b
//! (clamped to [-10, 10]); the anchor beta_hat is all-ones. Sampling uses
//! Marsaglia-Tsang for the gamma draws; pathwise derivatives come from
//! implicit reparameterization, dz/dalpha = -(dF/dalpha)/(dF/dz) through
//! the regularized lower incomplete gamma CDF F. dF/dalpha is a central
//! finite difference on F with step 1e-5 * max(1, alpha); dF/dz is the
//! gamma pdf.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};
use std::collections::BTreeMap;

/// Clamp bound for the unconstrained concentration parameters.
pub const B_CLAMP: f64 = 10.0;

const ALPHA_MIN: f64 = 4.539992976248485e-5; // exp(-10)
const ALPHA_MAX: f64 = 22026.465794806718; // exp(10)

/// Unconstrained concentration parameters, one vector per edge position.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConcentrationParams {
    /// b values; beta = exp(b).
    pub b: BTreeMap<(usize, usize), Vec<f64>>,
    /// Weight of the l2 pull toward the all-ones anchor.
    pub reg_weight: f64,
}

impl ConcentrationParams {
    /// Symmetric start: b = 0, beta = 1 on every edge.
    pub fn symmetric(edges: &[(usize, usize)], num_ops: usize, reg_weight: f64) -> Self {
        let b = edges.iter().map(|&e| (e, vec![0.0; num_ops])).collect();
        ConcentrationParams { b, reg_weight }
    }

    pub fn beta(&self, edge: (usize, usize)) -> Vec<f64> {
        self.b[&edge].iter().map(|x| x.exp()).collect()
    }

    pub fn clamp(&mut self) {
        for v in self.b.values_mut() {
            for x in v.iter_mut() {
                *x = x.clamp(-B_CLAMP, B_CLAMP);
            }
        }
    }

    /// Per-edge Dirichlet mean beta / sum(beta).
    pub fn mean_theta(&self) -> BTreeMap<(usize, usize), Vec<f64>> {
        self.b.keys().map(|&e| (e, dirichlet_mean(&self.beta(e)))).collect()
    }
}

/// One gamma draw with its pathwise derivative and implied CDF level.
#[derive(Debug, Clone, Copy)]
pub struct GammaDraw {
    pub z: f64,
    pub dz_dalpha: f64,
    /// F(z; alpha): the uniform this draw corresponds to under the
    /// inverse-CDF map; lets oracles rebuild the path.
    pub cdf_u: f64,
}

fn gamma_pdf(alpha: f64, z: f64) -> f64 {
    ((alpha - 1.0) * z.ln() - z - ln_gamma(alpha)).exp()
}

fn implicit_grad(alpha: f64, z: f64) -> f64 {
    let h = 1e-5 * alpha.max(1.0);
    let df_dalpha = (gamma_lr(alpha + h, z) - gamma_lr(alpha - h, z)) / (2.0 * h);
    let df_dz = gamma_pdf(alpha, z);
    -df_dalpha / df_dz
}

/// Marsaglia-Tsang Gamma(alpha, 1), alpha >= 1.
fn mt_sample(alpha: f64, rng: &mut impl Rng) -> f64 {
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.gen();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Sample z ~ Gamma(alpha, 1) with a pathwise derivative dz/dalpha.
///
/// alpha < 1 uses the boost z = z' * u^(1/alpha) with z' ~ Gamma(alpha+1).
pub fn sample_gamma(alpha: f64, rng: &mut impl Rng) -> Result<GammaDraw> {
    if !(ALPHA_MIN..=ALPHA_MAX).contains(&alpha) || !alpha.is_finite() {
        return Err(Error::Input(format!(
            "gamma shape {alpha} outside the supported range [e^-10, e^10]"
        )));
    }
    let z = if alpha < 1.0 {
        let zp = mt_sample(alpha + 1.0, rng);
        let u: f64 = rng.gen();
        zp * u.powf(1.0 / alpha)
    } else {
        mt_sample(alpha, rng)
    };
    // the u^(1/alpha) boost underflows for very small shapes; pin such
    // draws to the bottom of the lower tail with a dead path derivative
    if z < 1e-290 {
        return Ok(GammaDraw { z: 1e-290, dz_dalpha: 0.0, cdf_u: 0.0 });
    }
    Ok(GammaDraw { z, dz_dalpha: implicit_grad(alpha, z), cdf_u: gamma_lr(alpha, z) })
}

/// One Dirichlet draw over an edge, with everything gradients need.
#[derive(Debug, Clone)]
pub struct DirichletDraw {
    pub theta: Vec<f64>,
    pub z: Vec<f64>,
    pub dz_dbeta: Vec<f64>,
    pub cdf_u: Vec<f64>,
}

/// theta_o = z_o / sum(z), z_o ~ Gamma(beta_o, 1).
pub fn sample_dirichlet(beta: &[f64], rng: &mut impl Rng) -> Result<DirichletDraw> {
    for &b in beta {
        if b <= 0.0 {
            return Err(Error::Input(format!("non-positive concentration {b}")));
        }
    }
    const MAX_RETRIES: usize = 16;
    for _ in 0..MAX_RETRIES {
        let draws: Vec<GammaDraw> =
            beta.iter().map(|&b| sample_gamma(b, rng)).collect::<Result<_>>()?;
        let total: f64 = draws.iter().map(|d| d.z).sum();
        if total > 0.0 && total.is_finite() {
            return Ok(DirichletDraw {
                theta: draws.iter().map(|d| d.z / total).collect(),
                z: draws.iter().map(|d| d.z).collect(),
                dz_dbeta: draws.iter().map(|d| d.dz_dalpha).collect(),
                cdf_u: draws.iter().map(|d| d.cdf_u).collect(),
            });
        }
    }
    Err(Error::Training("dirichlet sampling underflowed to a zero total repeatedly".into()))
}

/// beta / sum(beta).
pub fn dirichlet_mean(beta: &[f64]) -> Vec<f64> {
    let s: f64 = beta.iter().sum();
    beta.iter().map(|&b| b / s).collect()
}

/// Jacobian-vector product dtheta/dbeta applied to a loss gradient:
/// dtheta_o/dbeta_p = delta_op dz_o/dbeta_o / S - z_o dz_p/dbeta_p / S^2.
fn theta_beta_vjp(draw: &DirichletDraw, dl_dtheta: &[f64]) -> Vec<f64> {
    let s: f64 = draw.z.iter().sum();
    let dot: f64 = dl_dtheta.iter().zip(&draw.z).map(|(g, z)| g * z).sum();
    draw.dz_dbeta
        .iter()
        .enumerate()
        .map(|(p, &dz)| dz * (dl_dtheta[p] / s - dot / (s * s)))
        .collect()
}

/// Gradient of the per-edge architecture objective with respect to b:
/// pathwise validation term chained through beta = exp(b), plus the
/// regularizer term 2*lambda*(beta - 1)*beta.
pub fn arch_objective_grad(
    b: &[f64],
    dl_dtheta: &[f64],
    draw: &DirichletDraw,
    reg_weight: f64,
) -> Result<Vec<f64>> {
    let dbeta = theta_beta_vjp(draw, dl_dtheta);
    let grad: Vec<f64> = b
        .iter()
        .zip(&dbeta)
        .map(|(&bi, &gi)| {
            let beta = bi.exp();
            gi * beta + 2.0 * reg_weight * (beta - 1.0) * beta
        })
        .collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training(format!("non-finite architecture gradient: {grad:?}")));
    }
    Ok(grad)
}

/// Per-edge theta vectors plus sampling provenance.
#[derive(Debug, Clone)]
pub struct ArchSample {
    pub edges: BTreeMap<(usize, usize), DirichletDraw>,
    pub stream_id: u64,
}

impl ArchSample {
    /// Draw theta for every edge from its own substream of
    /// `(master, path..., edge_index)`.
    pub fn draw(params: &ConcentrationParams, master: u64, path: &[u64]) -> Result<Self> {
        let mut edges = BTreeMap::new();
        for (idx, (&e, _)) in params.b.iter().enumerate() {
            let mut r = rng::stream(master, &[&path[..], &[idx as u64]].concat());
            edges.insert(e, sample_dirichlet(&params.beta(e), &mut r)?);
        }
        Ok(ArchSample { edges, stream_id: rng::derive(master, path) })
    }

    pub fn thetas(&self) -> BTreeMap<(usize, usize), Vec<f64>> {
        self.edges.iter().map(|(&e, d)| (e, d.theta.clone())).collect()
    }
}

/// Serialized beta checkpoint (external JSON interface).
#[derive(Debug, Serialize, Deserialize)]
pub struct BetaCheckpoint {
    pub lambda: f64,
    pub master_seed: u64,
    /// edge "i-j" -> b values
    pub edges: BTreeMap<String, Vec<f64>>,
}

impl BetaCheckpoint {
    pub fn from_params(params: &ConcentrationParams, master_seed: u64) -> Self {
        BetaCheckpoint {
            lambda: params.reg_weight,
            master_seed,
            edges: params.b.iter().map(|(&(i, j), v)| (format!("{i}-{j}"), v.clone())).collect(),
        }
    }

    pub fn to_params(&self) -> Result<ConcentrationParams> {
        let mut b = BTreeMap::new();
        for (k, v) in &self.edges {
            let (i, j) = k
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| Error::Format(format!("bad edge id {k:?} in beta checkpoint")))?;
            b.insert((i, j), v.clone());
        }
        Ok(ConcentrationParams { b, reg_weight: self.lambda })
    }
}
