//! Log-density kernels and their analytic gradients for the likelihood and
//! every prior family, plus the simulation generator's building blocks.
//!
//! Constant terms that do not depend on any sampled parameter are dropped
//! consistently. Gradients are hand-derived and checked against central
//! finite differences in the tests.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::graphs::Adjacency;

/// Negative binomial parameters in the NB2 form: variance = mu + mu^2/phi,
/// so the Poisson limit is phi -> infinity.
#[derive(Debug, Clone, Copy)]
pub struct NegBinParams {
    pub mu: f64,
    pub phi: f64,
}

/// Log pmf of NB2 at a (possibly continuous) non-negative response, plus
/// partial derivatives with respect to log(mu) and log(phi). Continuous
/// responses arise when pre-smoothed counts are modeled.
pub fn negbin_log_pmf(y: f64, p: NegBinParams) -> (f64, f64, f64) {
    let NegBinParams { mu, phi } = p;
    debug_assert!(mu > 0.0 && phi > 0.0 && y >= 0.0);
    let log_density = ln_gamma(y + phi) - ln_gamma(phi) - ln_gamma(y + 1.0)
        + phi * (phi.ln() - (phi + mu).ln())
        + y * (mu.ln() - (phi + mu).ln());
    let d_log_mu = y - mu * (y + phi) / (mu + phi);
    let d_phi = digamma(y + phi) - digamma(phi) + (phi / (phi + mu)).ln() + (mu - y) / (phi + mu);
    (log_density, d_log_mu, phi * d_phi)
}

/// ICAR (pairwise difference) log density over a graph:
/// `(rank/2) log(tau) - (tau/2) sum_edges (u_i - u_j)^2`,
/// rank = size - number of components. Improper: invariant to constant
/// shifts within each component.
pub struct IcarGrad {
    pub log_density: f64,
    pub d_u: Vec<f64>,
    pub d_log_tau: f64,
}

pub fn icar_log_density(u: &[f64], adj: &Adjacency, tau: f64) -> IcarGrad {
    debug_assert_eq!(u.len(), adj.size());
    debug_assert!(tau > 0.0);
    let rank = adj.laplacian_rank() as f64;
    let mut pair_sum = 0.0;
    let mut d_u = vec![0.0; u.len()];
    for &(i, j) in adj.edges() {
        let diff = u[i] - u[j];
        pair_sum += diff * diff;
        d_u[i] -= tau * diff;
        d_u[j] += tau * diff;
    }
    IcarGrad {
        log_density: 0.5 * rank * tau.ln() - 0.5 * tau * pair_sum,
        d_u,
        d_log_tau: 0.5 * rank - 0.5 * tau * pair_sum,
    }
}

/// AR(1) log density with innovation sd `sigma`:
/// the first element gets a diffuse N(0, sd=10) anchor, later elements are
/// N(a + b * v_{t-1}, sigma).
pub struct Ar1Grad {
    pub log_density: f64,
    pub d_v: Vec<f64>,
    pub d_a: f64,
    pub d_b: f64,
    pub d_log_sigma: f64,
}

pub const AR1_ANCHOR_SD: f64 = 10.0;

pub fn ar1_log_density(v: &[f64], a: f64, b: f64, sigma: f64) -> Ar1Grad {
    debug_assert!(v.len() >= 2);
    debug_assert!(sigma > 0.0);
    let mut d_v = vec![0.0; v.len()];
    let (anchor, d_anchor) = normal_log_density(v[0], 0.0, AR1_ANCHOR_SD);
    let mut log_density = anchor;
    d_v[0] += d_anchor;
    let mut d_a = 0.0;
    let mut d_b = 0.0;
    let mut d_log_sigma = 0.0;
    let var = sigma * sigma;
    for t in 1..v.len() {
        let e = v[t] - a - b * v[t - 1];
        log_density += -0.5 * LN_2PI - sigma.ln() - 0.5 * e * e / var;
        d_v[t] -= e / var;
        d_v[t - 1] += b * e / var;
        d_a += e / var;
        d_b += e * v[t - 1] / var;
        d_log_sigma += -1.0 + e * e / var;
    }
    Ar1Grad {
        log_density,
        d_v,
        d_a,
        d_b,
        d_log_sigma,
    }
}

/// Fused Laplace kernel: `-l_fuse * sum_edges |x_i - x_j| - l_sparse * sum |x_i|`.
/// Normalizing terms in the rate parameters are dropped; the model layer
/// adds per-term counts when the rates are sampled. Subgradient convention:
/// sign(0) = 0.
pub struct FusedLaplaceGrad {
    pub log_density: f64,
    pub d_x: Vec<f64>,
}

pub fn fused_laplace_log_density(
    x: &[f64],
    adj: &Adjacency,
    lambda_fuse: f64,
    lambda_sparse: f64,
) -> FusedLaplaceGrad {
    debug_assert_eq!(x.len(), adj.size());
    let mut log_density = 0.0;
    let mut d_x = vec![0.0; x.len()];
    for &(i, j) in adj.edges() {
        let diff = x[i] - x[j];
        log_density -= lambda_fuse * diff.abs();
        let s = sign(diff);
        d_x[i] -= lambda_fuse * s;
        d_x[j] += lambda_fuse * s;
    }
    for (i, &xi) in x.iter().enumerate() {
        log_density -= lambda_sparse * xi.abs();
        d_x[i] -= lambda_sparse * sign(xi);
    }
    FusedLaplaceGrad { log_density, d_x }
}

/// Sum of the two penalty magnitudes of the fused Laplace kernel,
/// `(sum_edges |x_i - x_j|, sum_i |x_i|)`, used for rate gradients.
pub fn fused_laplace_penalties(x: &[f64], adj: &Adjacency) -> (f64, f64) {
    let fuse: f64 = adj.edges().iter().map(|&(i, j)| (x[i] - x[j]).abs()).sum();
    let sparse: f64 = x.iter().map(|v| v.abs()).sum();
    (fuse, sparse)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Shrinkage state for the AR(1)-shrinkage prior: local precisions
/// `phi[k][t]`, column-shrinkage increments `delta[l]`, and hyperparameters.
/// `eta_k = prod_{l<=k} delta_l`; `a2 > 1` makes the eta stochastically
/// increasing in k.
#[derive(Debug, Clone)]
pub struct ShrinkageState {
    pub phi_local: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    pub nu: f64,
    pub a1: f64,
    pub a2: f64,
}

impl ShrinkageState {
    pub fn eta(&self) -> Vec<f64> {
        let mut eta = Vec::with_capacity(self.delta.len());
        let mut acc = 1.0;
        for &d in &self.delta {
            acc *= d;
            eta.push(acc);
        }
        eta
    }
}

/// AR(1) density per factor row with innovation variance
/// `1 / (phi[k][t] * eta_k)`, plus the Ga(nu/2, nu/2) terms for each local
/// precision and Ga(a1, 1) / Ga(a2, 1) terms for the delta increments.
/// Gradients for phi and delta are with respect to their logs (Jacobians of
/// the log transform included).
pub struct ShrinkageGrad {
    pub log_density: f64,
    pub d_v: Vec<Vec<f64>>,
    pub d_a: f64,
    pub d_b: f64,
    pub d_log_phi: Vec<Vec<f64>>,
    pub d_log_delta: Vec<f64>,
}

pub fn shrinkage_ar1_log_density(v_rows: &[Vec<f64>], a: f64, b: f64, state: &ShrinkageState) -> ShrinkageGrad {
    let k_rows = v_rows.len();
    debug_assert_eq!(state.phi_local.len(), k_rows);
    debug_assert_eq!(state.delta.len(), k_rows);
    let eta = state.eta();
    let mut log_density = 0.0;
    let mut d_v = vec![Vec::new(); k_rows];
    let mut d_log_phi = vec![Vec::new(); k_rows];
    let mut d_log_delta = vec![0.0; k_rows];
    let mut d_a = 0.0;
    let mut d_b = 0.0;
    for (k, v) in v_rows.iter().enumerate() {
        let t_len = v.len();
        debug_assert_eq!(state.phi_local[k].len(), t_len);
        let mut dv = vec![0.0; t_len];
        let mut dphi = vec![0.0; t_len];
        let (anchor, d_anchor) = normal_log_density(v[0], 0.0, AR1_ANCHOR_SD);
        log_density += anchor;
        dv[0] += d_anchor;
        for t in 1..t_len {
            let prec = state.phi_local[k][t] * eta[k];
            let e = v[t] - a - b * v[t - 1];
            log_density += 0.5 * prec.ln() - 0.5 * LN_2PI - 0.5 * prec * e * e;
            dv[t] -= prec * e;
            dv[t - 1] += b * prec * e;
            d_a += prec * e;
            d_b += prec * e * v[t - 1];
            let d_log_prec = 0.5 - 0.5 * prec * e * e;
            dphi[t] += d_log_prec;
            for l in 0..=k {
                d_log_delta[l] += d_log_prec;
            }
        }
        // Ga(nu/2, nu/2) prior on each local precision, sampled on log scale.
        for t in 0..t_len {
            let (lp, dlp) = gamma_log_density_on_log_scale(state.phi_local[k][t], 0.5 * state.nu, 0.5 * state.nu);
            log_density += lp;
            dphi[t] += dlp;
        }
        d_v[k] = dv;
        d_log_phi[k] = dphi;
    }
    for (l, &d) in state.delta.iter().enumerate() {
        let shape = if l == 0 { state.a1 } else { state.a2 };
        let (lp, dlp) = gamma_log_density_on_log_scale(d, shape, 1.0);
        log_density += lp;
        d_log_delta[l] += dlp;
    }
    ShrinkageGrad {
        log_density,
        d_v,
        d_a,
        d_b,
        d_log_phi,
        d_log_delta,
    }
}

pub const LN_2PI: f64 = 1.8378770664093453;

/// Normal log density and its derivative in x.
pub fn normal_log_density(x: f64, mean: f64, sd: f64) -> (f64, f64) {
    let z = (x - mean) / sd;
    (-0.5 * LN_2PI - sd.ln() - 0.5 * z * z, -z / sd)
}

/// Gamma (shape-rate) log density and its derivative in x.
pub fn gamma_log_density(x: f64, shape: f64, rate: f64) -> (f64, f64) {
    debug_assert!(x > 0.0 && shape > 0.0 && rate > 0.0);
    let log_density = shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x;
    (log_density, (shape - 1.0) / x - rate)
}

/// Gamma (shape-rate) prior evaluated for a positive scalar sampled on the
/// log scale: returns the log density plus the log-Jacobian, and the
/// derivative with respect to log(x), which is `shape - rate * x`.
pub fn gamma_log_density_on_log_scale(x: f64, shape: f64, rate: f64) -> (f64, f64) {
    let (lp, _) = gamma_log_density(x, shape, rate);
    (lp + x.ln(), shape - rate * x)
}

#[cfg(test)]
pub(crate) mod fd {
    /// Central finite difference of a scalar function, used as the gradient
    /// oracle throughout the test suites.
    pub fn grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    pub fn assert_close(analytic: &[f64], numeric: &[f64], rel_tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() <= rel_tol * scale,
                "component {i}: analytic {a} vs numeric {n}"
            );
        }
    }
}
