//! Joint log posterior and analytic gradient over a masked panel.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::dist::{
    self, fused_laplace_log_density, fused_laplace_penalties, gamma_log_density_on_log_scale,
    icar_log_density, normal_log_density, ShrinkageState,
};
use crate::error::{Error, Result};
use crate::graphs::{path_adjacency, Adjacency};
use crate::model::{
    parameter_names, state_dim, Dims, Family, FamilyParams, ModelSpec, ParameterState,
};
use crate::panel::MaskedPanel;

/// Assembled posterior for one model specification over one masked panel.
/// Evaluation is pure; one instance can serve many chains concurrently.
pub struct Posterior<'a> {
    spec: &'a ModelSpec,
    masked: &'a MaskedPanel,
    dims: Dims,
    temporal_adj: Option<Adjacency>,
    obs_cells: Vec<(u32, u32)>,
    log_theta: Vec<f64>,
    names: Vec<String>,
}

/// Offsets of each block in the packed vector.
struct Layout {
    gamma: usize,
    psi: usize,
    u: usize,
    v: usize,
    beta: usize,
    log_sigma: usize,
    extra: usize,
}

impl Layout {
    fn of(dims: Dims) -> Self {
        let gamma = 1;
        let psi = gamma + dims.n;
        let u = psi + dims.t;
        let v = u + dims.k * dims.n;
        let beta = v + dims.k * dims.t;
        let log_sigma = beta + dims.p;
        Self {
            gamma,
            psi,
            u,
            v,
            beta,
            log_sigma,
            extra: log_sigma + 1,
        }
    }
}

/// Negative binomial log pmf in terms of the linear predictor, stable for
/// large `eta`. Returns (log pmf, d/d eta, d/d log phi).
fn negbin_eta_terms(y: f64, eta: f64, phi: f64) -> (f64, f64, f64) {
    let log_phi = phi.ln();
    let log_phi_mu = logaddexp(eta, log_phi);
    let lp = ln_gamma(y + phi) - ln_gamma(phi) - ln_gamma(y + 1.0)
        + phi * (log_phi - log_phi_mu)
        + y * (eta - log_phi_mu);
    // mu / (mu + phi) and 1 / (mu + phi), both overflow-safe.
    let frac_mu = (eta - log_phi_mu).exp();
    let inv_sum = (-log_phi_mu).exp();
    let d_eta = y - (y + phi) * frac_mu;
    let d_log_phi =
        phi * (digamma(y + phi) - digamma(phi) + log_phi - log_phi_mu + frac_mu - y * inv_sum);
    (lp, d_eta, d_log_phi)
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl<'a> Posterior<'a> {
    pub fn new(spec: &'a ModelSpec, masked: &'a MaskedPanel) -> Result<Self> {
        let dims = Dims::of(spec, masked);
        spec.validate(dims.n, dims.t)?;
        let needs_temporal = matches!(
            spec.family,
            Family::SpaceTimeIcar | Family::SpaceTimeLasso
        );
        let temporal_adj = if needs_temporal {
            Some(path_adjacency(dims.t)?)
        } else {
            None
        };
        let p = masked.panel();
        let mut obs_cells = Vec::with_capacity(masked.n_observed());
        let mut log_theta = Vec::with_capacity(dims.n * dims.t);
        for i in 0..dims.n {
            for t in 0..dims.t {
                log_theta.push(p.population(i, t).ln());
                if masked.observed(i, t) {
                    obs_cells.push((i as u32, t as u32));
                }
            }
        }
        Ok(Self {
            spec,
            masked,
            dims,
            temporal_adj,
            obs_cells,
            log_theta,
            names: parameter_names(spec, dims),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dim(&self) -> usize {
        state_dim(self.spec, self.dims)
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn masked(&self) -> &MaskedPanel {
        self.masked
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    /// Named log-density blocks at `state`. The sum is the log posterior.
    pub fn terms(&self, state: &ParameterState) -> Vec<(&'static str, f64)> {
        self.eval(state, None)
    }

    /// Likelihood block alone (used by the factor-rescaling invariance
    /// check and the predictive layer).
    pub fn log_likelihood(&self, state: &ParameterState) -> f64 {
        let phi = state.log_sigma_nb.exp();
        let p = self.masked.panel();
        let t_len = self.dims.t;
        let mut total = 0.0;
        for &(iu, tu) in &self.obs_cells {
            let (i, t) = (iu as usize, tu as usize);
            let eta = self.linear_predictor(state, i, t, t_len);
            total += negbin_eta_terms(p.count(i, t), eta, phi).0;
        }
        total
    }

    #[inline]
    fn linear_predictor(&self, state: &ParameterState, i: usize, t: usize, t_len: usize) -> f64 {
        let mut eta = state.alpha + state.gamma[i] + state.psi[t] + self.log_theta[i * t_len + t];
        for k in 0..self.dims.k {
            eta += state.u[k][i] * state.v[k][t];
        }
        if !state.beta.is_empty() {
            let p = self.masked.panel();
            for (q, b) in state.beta.iter().enumerate() {
                eta += p.covariate(i, t, q) * b;
            }
        }
        eta
    }

    /// Log posterior; a non-finite result is reported with the offending
    /// block named.
    pub fn log_posterior(&self, state: &ParameterState) -> Result<f64> {
        let mut total = 0.0;
        for (name, value) in self.terms(state) {
            if !value.is_finite() {
                return Err(Error::NonFiniteLogPosterior { term: name.into() });
            }
            total += value;
        }
        Ok(total)
    }

    /// Packed-order analytic gradient; a non-finite component is reported
    /// by parameter name.
    pub fn grad(&self, state: &ParameterState) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.dim()];
        self.eval(state, Some(&mut grad));
        if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: self.names[idx].clone(),
            });
        }
        Ok(grad)
    }

    /// Sampler-facing fast path: evaluates the log posterior and writes the
    /// gradient in packed order. Non-finite values are mapped to negative
    /// infinity with a zeroed gradient so the sampler rejects the state.
    pub fn value_and_grad(&self, packed: &[f64], grad: &mut [f64]) -> f64 {
        let state = match ParameterState::unpack(self.spec, self.dims, packed) {
            Ok(s) => s,
            Err(_) => {
                grad.fill(0.0);
                return f64::NEG_INFINITY;
            }
        };
        grad.fill(0.0);
        let terms = self.eval(&state, Some(grad));
        let total: f64 = terms.iter().map(|(_, v)| v).sum();
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            grad.fill(0.0);
            return f64::NEG_INFINITY;
        }
        total
    }

    /// Core evaluation: every log-density block, optionally accumulating
    /// the packed gradient.
    fn eval(&self, state: &ParameterState, mut grad: Option<&mut [f64]>) -> Vec<(&'static str, f64)> {
        let dims = self.dims;
        let layout = Layout::of(dims);
        let p = self.masked.panel();
        let phi = state.log_sigma_nb.exp();
        let mut terms: Vec<(&'static str, f64)> = Vec::with_capacity(8);

        // Likelihood over observed cells.
        let mut lik = 0.0;
        {
            let t_len = dims.t;
            for &(iu, tu) in &self.obs_cells {
                let (i, t) = (iu as usize, tu as usize);
                let eta = self.linear_predictor(state, i, t, t_len);
                let (lp, d_eta, d_log_phi) = negbin_eta_terms(p.count(i, t), eta, phi);
                lik += lp;
                if let Some(g) = grad.as_deref_mut() {
                    g[0] += d_eta;
                    g[layout.gamma + i] += d_eta;
                    g[layout.psi + t] += d_eta;
                    for k in 0..dims.k {
                        g[layout.u + k * dims.n + i] += d_eta * state.v[k][t];
                        g[layout.v + k * dims.t + t] += d_eta * state.u[k][i];
                    }
                    for q in 0..dims.p {
                        g[layout.beta + q] += d_eta * p.covariate(i, t, q);
                    }
                    g[layout.log_sigma] += d_log_phi;
                }
            }
        }
        terms.push(("likelihood", lik));

        // Dispersion prior: standard normal on log(Sigma).
        {
            let (lp, d) = normal_log_density(state.log_sigma_nb, 0.0, 1.0);
            terms.push(("dispersion_prior", lp));
            if let Some(g) = grad.as_deref_mut() {
                g[layout.log_sigma] += d;
            }
        }

        // Factor priors and the family's scale priors.
        match (&self.spec.family, &state.extra) {
            (Family::Vanilla, FamilyParams::Vanilla) => {
                let mut lp = 0.0;
                for k in 0..dims.k {
                    for i in 0..dims.n {
                        let (l, d) = normal_log_density(state.u[k][i], 0.0, 1.0);
                        lp += l;
                        if let Some(g) = grad.as_deref_mut() {
                            g[layout.u + k * dims.n + i] += d;
                        }
                    }
                    for t in 0..dims.t {
                        let (l, d) = normal_log_density(state.v[k][t], 0.0, 1.0);
                        lp += l;
                        if let Some(g) = grad.as_deref_mut() {
                            g[layout.v + k * dims.t + t] += d;
                        }
                    }
                }
                terms.push(("factor_priors", lp));
            }
            (Family::Space, FamilyParams::Space { log_tau_s }) => {
                let adj = self.spec.spatial_adjacency.as_ref().expect("validated");
                let tau = log_tau_s.exp();
                let mut lp = 0.0;
                for k in 0..dims.k {
                    let g_u = icar_log_density(&state.u[k], adj, tau);
                    lp += g_u.log_density;
                    if let Some(g) = grad.as_deref_mut() {
                        for i in 0..dims.n {
                            g[layout.u + k * dims.n + i] += g_u.d_u[i];
                        }
                        g[layout.extra] += g_u.d_log_tau;
                    }
                    for t in 0..dims.t {
                        let (l, d) = normal_log_density(state.v[k][t], 0.0, 1.0);
                        lp += l;
                        if let Some(g) = grad.as_deref_mut() {
                            g[layout.v + k * dims.t + t] += d;
                        }
                    }
                }
                terms.push(("factor_priors", lp));
                let (prior, d) =
                    gamma_log_density_on_log_scale(tau, self.spec.gamma_shape, self.spec.gamma_rate);
                terms.push(("scale_priors", prior));
                if let Some(g) = grad.as_deref_mut() {
                    g[layout.extra] += d;
                }
            }
            (Family::SpaceTimeIcar, FamilyParams::SpaceTimeIcar { log_tau_s, log_tau_t }) => {
                let adj = self.spec.spatial_adjacency.as_ref().expect("validated");
                let temporal = self.temporal_adj.as_ref().expect("built in new");
                let tau_s = log_tau_s.exp();
                let tau_t = log_tau_t.exp();
                let mut lp = 0.0;
                for k in 0..dims.k {
                    let g_u = icar_log_density(&state.u[k], adj, tau_s);
                    let g_v = icar_log_density(&state.v[k], temporal, tau_t);
                    lp += g_u.log_density + g_v.log_density;
                    if let Some(g) = grad.as_deref_mut() {
                        for i in 0..dims.n {
                            g[layout.u + k * dims.n + i] += g_u.d_u[i];
                        }
                        for t in 0..dims.t {
                            g[layout.v + k * dims.t + t] += g_v.d_u[t];
                        }
                        g[layout.extra] += g_u.d_log_tau;
                        g[layout.extra + 1] += g_v.d_log_tau;
                    }
                }
                terms.push(("factor_priors", lp));
                let (p_s, d_s) =
                    gamma_log_density_on_log_scale(tau_s, self.spec.gamma_shape, self.spec.gamma_rate);
                let (p_t, d_t) =
                    gamma_log_density_on_log_scale(tau_t, self.spec.gamma_shape, self.spec.gamma_rate);
                terms.push(("scale_priors", p_s + p_t));
                if let Some(g) = grad.as_deref_mut() {
                    g[layout.extra] += d_s;
                    g[layout.extra + 1] += d_t;
                }
            }
            (
                Family::SpaceTimeAr,
                FamilyParams::SpaceTimeAr {
                    log_tau_s,
                    a,
                    b,
                    log_sigma_ar,
                },
            ) => {
                let adj = self.spec.spatial_adjacency.as_ref().expect("validated");
                let tau = log_tau_s.exp();
                let sigma = log_sigma_ar.exp();
                let mut lp = 0.0;
                for k in 0..dims.k {
                    let g_u = icar_log_density(&state.u[k], adj, tau);
                    let g_v = dist::ar1_log_density(&state.v[k], *a, *b, sigma);
                    lp += g_u.log_density + g_v.log_density;
                    if let Some(g) = grad.as_deref_mut() {
                        for i in 0..dims.n {
                            g[layout.u + k * dims.n + i] += g_u.d_u[i];
                        }
                        for t in 0..dims.t {
                            g[layout.v + k * dims.t + t] += g_v.d_v[t];
                        }
                        g[layout.extra] += g_u.d_log_tau;
                        g[layout.extra + 1] += g_v.d_a;
                        g[layout.extra + 2] += g_v.d_b;
                        g[layout.extra + 3] += g_v.d_log_sigma;
                    }
                }
                terms.push(("factor_priors", lp));
                // Gamma prior on tau; flat prior on sigma kept flat on the
                // original scale, so only the log-transform Jacobian enters.
                let (p_tau, d_tau) =
                    gamma_log_density_on_log_scale(tau, self.spec.gamma_shape, self.spec.gamma_rate);
                terms.push(("scale_priors", p_tau + log_sigma_ar));
                if let Some(g) = grad.as_deref_mut() {
                    g[layout.extra] += d_tau;
                    g[layout.extra + 3] += 1.0;
                }
            }
            (Family::SpaceTimeLasso, FamilyParams::SpaceTimeLasso { log_lambda }) => {
                let adj = self.spec.spatial_adjacency.as_ref().expect("validated");
                let temporal = self.temporal_adj.as_ref().expect("built in new");
                let lam: Vec<f64> = log_lambda.iter().map(|z| z.exp()).collect();
                let mut lp = 0.0;
                let mut pen = [0.0f64; 4];
                for k in 0..dims.k {
                    let g_u = fused_laplace_log_density(&state.u[k], adj, lam[0], lam[1]);
                    let g_v = fused_laplace_log_density(&state.v[k], temporal, lam[2], lam[3]);
                    lp += g_u.log_density + g_v.log_density;
                    let (fu, su) = fused_laplace_penalties(&state.u[k], adj);
                    let (fv, sv) = fused_laplace_penalties(&state.v[k], temporal);
                    pen[0] += fu;
                    pen[1] += su;
                    pen[2] += fv;
                    pen[3] += sv;
                    if let Some(g) = grad.as_deref_mut() {
                        for i in 0..dims.n {
                            g[layout.u + k * dims.n + i] += g_u.d_x[i];
                        }
                        for t in 0..dims.t {
                            g[layout.v + k * dims.t + t] += g_v.d_x[t];
                        }
                    }
                }
                // Per-term normalization counts make the lambda posterior
                // match the conjugate Gibbs treatment.
                let counts = [
                    (dims.k * adj.edges().len()) as f64,
                    (dims.k * dims.n) as f64,
                    (dims.k * temporal.edges().len()) as f64,
                    (dims.k * dims.t) as f64,
                ];
                let mut scale_lp = 0.0;
                for j in 0..4 {
                    lp += counts[j] * log_lambda[j];
                    let (pl, dl) = gamma_log_density_on_log_scale(
                        lam[j],
                        self.spec.gamma_shape,
                        self.spec.gamma_rate,
                    );
                    scale_lp += pl;
                    if let Some(g) = grad.as_deref_mut() {
                        g[layout.extra + j] += counts[j] - lam[j] * pen[j] + dl;
                    }
                }
                terms.push(("factor_priors", lp));
                terms.push(("scale_priors", scale_lp));
            }
            (
                Family::SpaceTimeShrinkage,
                FamilyParams::SpaceTimeShrinkage {
                    log_tau_s,
                    a,
                    b,
                    log_phi,
                    log_delta,
                },
            ) => {
                let adj = self.spec.spatial_adjacency.as_ref().expect("validated");
                let tau = log_tau_s.exp();
                let mut lp = 0.0;
                for k in 0..dims.k {
                    let g_u = icar_log_density(&state.u[k], adj, tau);
                    lp += g_u.log_density;
                    if let Some(g) = grad.as_deref_mut() {
                        for i in 0..dims.n {
                            g[layout.u + k * dims.n + i] += g_u.d_u[i];
                        }
                        g[layout.extra] += g_u.d_log_tau;
                    }
                }
                let shrink = ShrinkageState {
                    phi_local: log_phi
                        .iter()
                        .map(|row| row.iter().map(|z| z.exp()).collect())
                        .collect(),
                    delta: log_delta.iter().map(|z| z.exp()).collect(),
                    nu: self.spec.nu,
                    a1: self.spec.a1,
                    a2: self.spec.a2,
                };
                let g_v = dist::shrinkage_ar1_log_density(&state.v, *a, *b, &shrink);
                lp += g_v.log_density;
                if let Some(g) = grad.as_deref_mut() {
                    for k in 0..dims.k {
                        for t in 0..dims.t {
                            g[layout.v + k * dims.t + t] += g_v.d_v[k][t];
                            g[layout.extra + 3 + k * dims.t + t] += g_v.d_log_phi[k][t];
                        }
                        g[layout.extra + 3 + dims.k * dims.t + k] += g_v.d_log_delta[k];
                    }
                    g[layout.extra + 1] += g_v.d_a;
                    g[layout.extra + 2] += g_v.d_b;
                }
                terms.push(("factor_priors", lp));
                let (p_tau, d_tau) =
                    gamma_log_density_on_log_scale(tau, self.spec.gamma_shape, self.spec.gamma_rate);
                terms.push(("scale_priors", p_tau));
                if let Some(g) = grad.as_deref_mut() {
                    g[layout.extra] += d_tau;
                }
            }
            _ => unreachable!("state family block does not match spec family"),
        }

        // Soft sum-to-zero on factor-row means, all families but Vanilla.
        if self.spec.family != Family::Vanilla {
            let sd = self.spec.soft_constraint_sd;
            let mut lp = 0.0;
            for k in 0..dims.k {
                let mean_u: f64 = state.u[k].iter().sum::<f64>() / dims.n as f64;
                let mean_v: f64 = state.v[k].iter().sum::<f64>() / dims.t as f64;
                let (lu, du) = normal_log_density(mean_u, 0.0, sd);
                let (lv, dv) = normal_log_density(mean_v, 0.0, sd);
                lp += lu + lv;
                if let Some(g) = grad.as_deref_mut() {
                    for i in 0..dims.n {
                        g[layout.u + k * dims.n + i] += du / dims.n as f64;
                    }
                    for t in 0..dims.t {
                        g[layout.v + k * dims.t + t] += dv / dims.t as f64;
                    }
                }
            }
            terms.push(("soft_constraint", lp));
        }

        // Optional weak normal replacing the improper flat priors.
        if let Some(sd) = self.spec.weak_prior_sd {
            let mut lp = 0.0;
            let mut add = |value: f64, idx: usize, g: &mut Option<&mut [f64]>| {
                let (l, d) = normal_log_density(value, 0.0, sd);
                lp += l;
                if let Some(g) = g.as_deref_mut() {
                    g[idx] += d;
                }
            };
            add(state.alpha, 0, &mut grad);
            for i in 0..dims.n {
                add(state.gamma[i], layout.gamma + i, &mut grad);
            }
            for t in 0..dims.t {
                add(state.psi[t], layout.psi + t, &mut grad);
            }
            for q in 0..dims.p {
                add(state.beta[q], layout.beta + q, &mut grad);
            }
            terms.push(("weak_prior", lp));
        }

        terms
    }
}
