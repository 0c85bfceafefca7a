//! Model specification, parameter state, packing, and initialization for
//! the six prior families.

mod posterior;

pub use posterior::Posterior;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Gamma as GammaDist};

use crate::error::{Error, Result};
use crate::graphs::Adjacency;
use crate::panel::MaskedPanel;

/// The six prior families, ordered as in the model taxonomy: independent
/// normals; spatial ICAR on loadings; ICAR on both; ICAR plus temporal
/// AR(1); fused Laplace on both; ICAR plus AR(1) with multiplicative gamma
/// shrinkage across factor rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Vanilla,
    Space,
    SpaceTimeIcar,
    SpaceTimeAr,
    SpaceTimeLasso,
    SpaceTimeShrinkage,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Vanilla,
        Family::Space,
        Family::SpaceTimeIcar,
        Family::SpaceTimeAr,
        Family::SpaceTimeLasso,
        Family::SpaceTimeShrinkage,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Vanilla => "vanilla",
            Family::Space => "space",
            Family::SpaceTimeIcar => "space-time-icar",
            Family::SpaceTimeAr => "space-time-ar",
            Family::SpaceTimeLasso => "space-time-lasso",
            Family::SpaceTimeShrinkage => "space-time-shrinkage",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        let canon = s.trim().to_ascii_lowercase().replace('_', "-");
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == canon)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model family `{s}`")))
    }

    pub fn needs_spatial_adjacency(&self) -> bool {
        !matches!(self, Family::Vanilla)
    }
}

/// Full specification of one Bayesian matrix-completion model: the prior
/// family, the rank (an upper bound for the shrinkage family), the spatial
/// adjacency, and all hyperparameters.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: Family,
    pub k: usize,
    pub spatial_adjacency: Option<Adjacency>,
    /// Shrinkage local-precision prior Ga(nu/2, nu/2).
    pub nu: f64,
    /// Shrinkage delta_1 ~ Ga(a1, 1).
    pub a1: f64,
    /// Shrinkage delta_l ~ Ga(a2, 1), l >= 2; must exceed 1.
    pub a2: f64,
    /// Shape of the gamma prior shared by all precision and rate scalars.
    pub gamma_shape: f64,
    /// Rate of that gamma prior.
    pub gamma_rate: f64,
    /// Soft sum-to-zero sd applied to factor-row means (all families except
    /// the vanilla one).
    pub soft_constraint_sd: f64,
    /// Optional weak normal sd on the otherwise-flat intercept, unit, time,
    /// and covariate effects; `None` keeps them improper flat.
    pub weak_prior_sd: Option<f64>,
}

impl ModelSpec {
    pub fn new(family: Family, k: usize) -> Self {
        Self {
            family,
            k,
            spatial_adjacency: None,
            nu: 3.0,
            a1: 2.0,
            a2: 3.0,
            gamma_shape: 1.0,
            gamma_rate: 0.01,
            soft_constraint_sd: 0.1,
            weak_prior_sd: None,
        }
    }

    pub fn with_adjacency(mut self, adj: Adjacency) -> Self {
        self.spatial_adjacency = Some(adj);
        self
    }

    pub fn validate(&self, n_units: usize, n_times: usize) -> Result<()> {
        if self.k == 0 || self.k > n_units.min(n_times) {
            return Err(Error::InvalidArgument(format!(
                "rank k = {} must lie in 1..=min(N, T) = {}",
                self.k,
                n_units.min(n_times)
            )));
        }
        if self.family.needs_spatial_adjacency() {
            match &self.spatial_adjacency {
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "family `{}` requires a spatial adjacency",
                        self.family.name()
                    )))
                }
                Some(adj) if adj.size() != n_units => {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency has {} nodes but panel has {} units",
                        adj.size(),
                        n_units
                    )))
                }
                _ => {}
            }
        }
        if self.family == Family::SpaceTimeShrinkage && self.a2 <= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "shrinkage requires a2 > 1, got {}",
                self.a2
            )));
        }
        if self.soft_constraint_sd <= 0.0 {
            return Err(Error::InvalidArgument("soft_constraint_sd must be positive".into()));
        }
        Ok(())
    }
}

/// Family-specific scalar blocks, all on the unconstrained (log) scale.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilyParams {
    Vanilla,
    Space {
        log_tau_s: f64,
    },
    SpaceTimeIcar {
        log_tau_s: f64,
        log_tau_t: f64,
    },
    SpaceTimeAr {
        log_tau_s: f64,
        a: f64,
        b: f64,
        log_sigma_ar: f64,
    },
    SpaceTimeLasso {
        /// log of (lambda_u_fuse, lambda_u_sparse, lambda_v_fuse, lambda_v_sparse).
        log_lambda: [f64; 4],
    },
    SpaceTimeShrinkage {
        log_tau_s: f64,
        a: f64,
        b: f64,
        /// K x T local log precisions.
        log_phi: Vec<Vec<f64>>,
        /// K log shrinkage increments.
        log_delta: Vec<f64>,
    },
}

/// One MCMC state: the mean-model components plus the family block.
/// Positive scalars are carried on the log scale so the packed vector is
/// fully unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub alpha: f64,
    pub gamma: Vec<f64>,
    pub psi: Vec<f64>,
    /// K rows of N unit loadings.
    pub u: Vec<Vec<f64>>,
    /// K rows of T time factors.
    pub v: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub log_sigma_nb: f64,
    pub extra: FamilyParams,
}

/// Problem dimensions the packing depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub t: usize,
    pub p: usize,
    pub k: usize,
}

impl Dims {
    pub fn of(spec: &ModelSpec, panel: &MaskedPanel) -> Self {
        Self {
            n: panel.panel().n_units(),
            t: panel.panel().n_times(),
            p: panel.panel().n_covariates(),
            k: spec.k,
        }
    }
}

fn family_extra_len(family: Family, dims: Dims) -> usize {
    match family {
        Family::Vanilla => 0,
        Family::Space => 1,
        Family::SpaceTimeIcar => 2,
        Family::SpaceTimeAr => 4,
        Family::SpaceTimeLasso => 4,
        Family::SpaceTimeShrinkage => 3 + dims.k * dims.t + dims.k,
    }
}

/// Packed dimension as a pure function of the spec and panel shape.
pub fn state_dim(spec: &ModelSpec, dims: Dims) -> usize {
    1 + dims.n + dims.t + dims.k * dims.n + dims.k * dims.t + dims.p + 1
        + family_extra_len(spec.family, dims)
}

/// Human-readable name of each packed coordinate, in packing order.
pub fn parameter_names(spec: &ModelSpec, dims: Dims) -> Vec<String> {
    let mut names = Vec::with_capacity(state_dim(spec, dims));
    names.push("alpha".into());
    for i in 0..dims.n {
        names.push(format!("gamma[{i}]"));
    }
    for t in 0..dims.t {
        names.push(format!("psi[{t}]"));
    }
    for k in 0..dims.k {
        for i in 0..dims.n {
            names.push(format!("u[{k},{i}]"));
        }
    }
    for k in 0..dims.k {
        for t in 0..dims.t {
            names.push(format!("v[{k},{t}]"));
        }
    }
    for p in 0..dims.p {
        names.push(format!("beta[{p}]"));
    }
    names.push("log_sigma".into());
    match spec.family {
        Family::Vanilla => {}
        Family::Space => names.push("log_tau_s".into()),
        Family::SpaceTimeIcar => {
            names.push("log_tau_s".into());
            names.push("log_tau_t".into());
        }
        Family::SpaceTimeAr => {
            names.push("log_tau_s".into());
            names.push("ar_a".into());
            names.push("ar_b".into());
            names.push("log_ar_sigma".into());
        }
        Family::SpaceTimeLasso => {
            names.push("log_lambda_u_fuse".into());
            names.push("log_lambda_u_sparse".into());
            names.push("log_lambda_v_fuse".into());
            names.push("log_lambda_v_sparse".into());
        }
        Family::SpaceTimeShrinkage => {
            names.push("log_tau_s".into());
            names.push("ar_a".into());
            names.push("ar_b".into());
            for k in 0..dims.k {
                for t in 0..dims.t {
                    names.push(format!("log_phi[{k},{t}]"));
                }
            }
            for l in 0..dims.k {
                names.push(format!("log_delta[{l}]"));
            }
        }
    }
    names
}

impl ParameterState {
    /// Packs the state into an unconstrained vector; `unpack` inverts this
    /// exactly.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.push(self.alpha);
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.psi);
        for row in &self.u {
            out.extend_from_slice(row);
        }
        for row in &self.v {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.beta);
        out.push(self.log_sigma_nb);
        match &self.extra {
            FamilyParams::Vanilla => {}
            FamilyParams::Space { log_tau_s } => out.push(*log_tau_s),
            FamilyParams::SpaceTimeIcar { log_tau_s, log_tau_t } => {
                out.push(*log_tau_s);
                out.push(*log_tau_t);
            }
            FamilyParams::SpaceTimeAr {
                log_tau_s,
                a,
                b,
                log_sigma_ar,
            } => {
                out.extend_from_slice(&[*log_tau_s, *a, *b, *log_sigma_ar]);
            }
            FamilyParams::SpaceTimeLasso { log_lambda } => out.extend_from_slice(log_lambda),
            FamilyParams::SpaceTimeShrinkage {
                log_tau_s,
                a,
                b,
                log_phi,
                log_delta,
            } => {
                out.extend_from_slice(&[*log_tau_s, *a, *b]);
                for row in log_phi {
                    out.extend_from_slice(row);
                }
                out.extend_from_slice(log_delta);
            }
        }
        out
    }

    pub fn unpack(spec: &ModelSpec, dims: Dims, packed: &[f64]) -> Result<Self> {
        if packed.len() != state_dim(spec, dims) {
            return Err(Error::InvalidArgument(format!(
                "packed vector has length {}, expected {}",
                packed.len(),
                state_dim(spec, dims)
            )));
        }
        let mut pos = 0usize;
        let mut take = |len: usize| {
            let slice = &packed[pos..pos + len];
            pos += len;
            slice.to_vec()
        };
        let alpha = take(1)[0];
        let gamma = take(dims.n);
        let psi = take(dims.t);
        let u: Vec<Vec<f64>> = (0..dims.k).map(|_| take(dims.n)).collect();
        let v: Vec<Vec<f64>> = (0..dims.k).map(|_| take(dims.t)).collect();
        let beta = take(dims.p);
        let log_sigma_nb = take(1)[0];
        let extra = match spec.family {
            Family::Vanilla => FamilyParams::Vanilla,
            Family::Space => FamilyParams::Space { log_tau_s: take(1)[0] },
            Family::SpaceTimeIcar => FamilyParams::SpaceTimeIcar {
                log_tau_s: take(1)[0],
                log_tau_t: take(1)[0],
            },
            Family::SpaceTimeAr => FamilyParams::SpaceTimeAr {
                log_tau_s: take(1)[0],
                a: take(1)[0],
                b: take(1)[0],
                log_sigma_ar: take(1)[0],
            },
            Family::SpaceTimeLasso => {
                let l = take(4);
                FamilyParams::SpaceTimeLasso {
                    log_lambda: [l[0], l[1], l[2], l[3]],
                }
            }
            Family::SpaceTimeShrinkage => FamilyParams::SpaceTimeShrinkage {
                log_tau_s: take(1)[0],
                a: take(1)[0],
                b: take(1)[0],
                log_phi: (0..dims.k).map(|_| take(dims.t)).collect(),
                log_delta: take(dims.k),
            },
        };
        Ok(Self {
            alpha,
            gamma,
            psi,
            u,
            v,
            beta,
            log_sigma_nb,
            extra,
        })
    }
}

/// The linear predictor including the population offset:
/// `alpha + gamma_i + psi_t + U_i . V_t + X_it . beta + log(theta_it)`.
pub fn mean_log_rate(state: &ParameterState, panel: &MaskedPanel, i: usize, t: usize) -> f64 {
    let p = panel.panel();
    let mut eta = state.alpha + state.gamma[i] + state.psi[t];
    for k in 0..state.u.len() {
        eta += state.u[k][i] * state.v[k][t];
    }
    for (q, b) in state.beta.iter().enumerate() {
        eta += p.covariate(i, t, q) * b;
    }
    eta + p.population(i, t).ln()
}

fn gamma_median(shape: f64, rate: f64) -> f64 {
    GammaDist::new(shape, rate)
        .expect("valid gamma parameters")
        .inverse_cdf(0.5)
}

/// Draws an initial state: the intercept is moment-matched to the observed
/// aggregate rate, factors start near zero, positive scalars start at their
/// prior medians, and everything scalar receives a small per-chain jitter.
pub fn init_state<R: Rng + ?Sized>(
    spec: &ModelSpec,
    panel: &MaskedPanel,
    rng: &mut R,
) -> Result<ParameterState> {
    let dims = Dims::of(spec, panel);
    spec.validate(dims.n, dims.t)?;
    let p = panel.panel();
    let mut sum_y = 0.0;
    let mut sum_theta = 0.0;
    let mut n_obs = 0usize;
    for i in 0..dims.n {
        for t in 0..dims.t {
            if panel.observed(i, t) {
                sum_y += p.count(i, t);
                sum_theta += p.population(i, t);
                n_obs += 1;
            }
        }
    }
    if n_obs == 0 {
        return Err(Error::NoObservedCells);
    }
    // Guard the degenerate all-zero panel so the intercept stays finite.
    let alpha0 = (sum_y.max(0.5) / sum_theta).ln();
    fn draw<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    }
    let mut jitter = |scale: f64| draw(rng, scale);
    let alpha = alpha0 + jitter(0.01);
    let gamma = vec![0.0; dims.n];
    let psi = vec![0.0; dims.t];
    let u: Vec<Vec<f64>> = (0..dims.k)
        .map(|_| (0..dims.n).map(|_| jitter(0.1)).collect())
        .collect();
    let v: Vec<Vec<f64>> = (0..dims.k)
        .map(|_| (0..dims.t).map(|_| jitter(0.1)).collect())
        .collect();
    let beta = vec![0.0; dims.p];
    let log_sigma_nb = jitter(0.01);
    let log_tau0 = gamma_median(spec.gamma_shape, spec.gamma_rate).ln();
    let log_phi0 = gamma_median(0.5 * spec.nu, 0.5 * spec.nu).ln();
    let extra = match spec.family {
        Family::Vanilla => FamilyParams::Vanilla,
        Family::Space => FamilyParams::Space {
            log_tau_s: log_tau0 + jitter(0.01),
        },
        Family::SpaceTimeIcar => FamilyParams::SpaceTimeIcar {
            log_tau_s: log_tau0 + jitter(0.01),
            log_tau_t: log_tau0 + jitter(0.01),
        },
        Family::SpaceTimeAr => FamilyParams::SpaceTimeAr {
            log_tau_s: log_tau0 + jitter(0.01),
            a: jitter(0.01),
            b: jitter(0.01),
            log_sigma_ar: jitter(0.01),
        },
        Family::SpaceTimeLasso => {
            let init = log_tau0;
            FamilyParams::SpaceTimeLasso {
                log_lambda: [
                    init + jitter(0.01),
                    init + jitter(0.01),
                    init + jitter(0.01),
                    init + jitter(0.01),
                ],
            }
        }
        Family::SpaceTimeShrinkage => FamilyParams::SpaceTimeShrinkage {
            log_tau_s: log_tau0 + jitter(0.01),
            a: jitter(0.01),
            b: jitter(0.01),
            log_phi: (0..dims.k)
                .map(|_| (0..dims.t).map(|_| log_phi0 + jitter(0.01)).collect())
                .collect(),
            log_delta: (0..dims.k)
                .map(|l| {
                    let shape = if l == 0 { spec.a1 } else { spec.a2 };
                    gamma_median(shape, 1.0).ln() + jitter(0.01)
                })
                .collect(),
        },
    };
    Ok(ParameterState {
        alpha,
        gamma,
        psi,
        u,
        v,
        beta,
        log_sigma_nb,
        extra,
    })
}
