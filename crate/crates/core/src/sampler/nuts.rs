//! Dynamic-trajectory Hamiltonian Monte Carlo (no-U-turn tree doubling)
//! with dual-averaging step-size adaptation and windowed diagonal
//! mass-matrix estimation during warmup.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A differentiable unnormalized log density. Implementations must map
/// non-finite values to negative infinity with a zeroed gradient.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;
}

/// Per-chain sampling settings.
#[derive(Debug, Clone, Copy)]
pub struct NutsSettings {
    pub iterations: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub draws: Vec<Vec<f64>>,
    pub divergences: usize,
    pub mean_accept: f64,
    pub step_size: f64,
}

/// Energy-error magnitude beyond which a trajectory is rejected and counted
/// as divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept_stat: f64) {
        self.m += 1.0;
        let frac = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_stat);
        self.log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let weight = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Warmup schedule: step-size-only buffers at both ends, expanding
/// variance-estimation windows in between (shrunk proportionally when the
/// warmup is short).
struct AdaptSchedule {
    init_buffer: usize,
    term_start: usize,
    window_ends: Vec<usize>,
}

impl AdaptSchedule {
    fn new(warmup: usize) -> Self {
        let (init_buffer, term_buffer, base_window) = if warmup >= 150 {
            (75usize, 50usize, 25usize)
        } else {
            let init = (warmup as f64 * 0.15).max(1.0) as usize;
            let term = (warmup as f64 * 0.10).max(1.0) as usize;
            let window = warmup.saturating_sub(init + term).max(1);
            (init, term, window)
        };
        let term_start = warmup.saturating_sub(term_buffer);
        let mut window_ends = Vec::new();
        if term_start > init_buffer {
            let mut size = base_window;
            let mut pos = init_buffer;
            loop {
                let mut end = pos + size;
                // Absorb a final stub window into the last full one.
                if end + 2 * size > term_start {
                    end = term_start;
                }
                window_ends.push(end.min(term_start));
                if end >= term_start {
                    break;
                }
                pos = end;
                size *= 2;
            }
        }
        Self {
            init_buffer,
            term_start,
            window_ends,
        }
    }

    fn in_variance_window(&self, iter: usize) -> bool {
        iter >= self.init_buffer && iter < self.term_start
    }

    fn window_closes_at(&self, iter: usize) -> bool {
        self.window_ends.contains(&(iter + 1))
    }
}

struct Hamiltonian<'a, T: Target> {
    target: &'a T,
    inv_mass: Vec<f64>,
}

#[derive(Clone)]
struct Phase {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl<T: Target> Hamiltonian<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_mass)
            .map(|(pi, im)| pi * pi * im)
            .sum::<f64>()
    }

    fn joint(&self, phase: &Phase) -> f64 {
        phase.logp - self.kinetic(&phase.p)
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.inv_mass
            .iter()
            .map(|im| {
                let z: f64 = rng.sample(StandardNormal);
                z / im.sqrt()
            })
            .collect()
    }

    fn leapfrog(&self, phase: &Phase, direction: f64, eps: f64) -> Phase {
        let step = direction * eps;
        let dim = phase.q.len();
        let mut p: Vec<f64> = (0..dim)
            .map(|i| phase.p[i] + 0.5 * step * phase.grad[i])
            .collect();
        let q: Vec<f64> = (0..dim)
            .map(|i| phase.q[i] + step * self.inv_mass[i] * p[i])
            .collect();
        let mut grad = vec![0.0; dim];
        let logp = self.target.logp_grad(&q, &mut grad);
        for i in 0..dim {
            p[i] += 0.5 * step * grad[i];
        }
        Phase { q, p, grad, logp }
    }

    /// No-U-turn check with the metric applied to the momenta.
    fn no_u_turn(&self, minus: &Phase, plus: &Phase) -> bool {
        let dim = minus.q.len();
        let mut dot_minus = 0.0;
        let mut dot_plus = 0.0;
        for i in 0..dim {
            let dq = plus.q[i] - minus.q[i];
            dot_minus += dq * self.inv_mass[i] * minus.p[i];
            dot_plus += dq * self.inv_mass[i] * plus.p[i];
        }
        dot_minus > 0.0 && dot_plus > 0.0
    }
}

struct Subtree {
    minus: Phase,
    plus: Phase,
    proposal: Phase,
    log_sum_weight: f64,
    accept_sum: f64,
    n_leapfrog: usize,
    divergent: bool,
    turning: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target, R: Rng>(
    ham: &Hamiltonian<'_, T>,
    from: &Phase,
    direction: f64,
    depth: usize,
    eps: f64,
    joint0: f64,
    rng: &mut R,
) -> Subtree {
    if depth == 0 {
        let phase = ham.leapfrog(from, direction, eps);
        let joint = ham.joint(&phase);
        let weight = joint - joint0;
        let divergent = !(weight > -DIVERGENCE_THRESHOLD);
        let accept = weight.min(0.0).exp();
        return Subtree {
            minus: phase.clone(),
            plus: phase.clone(),
            proposal: phase,
            log_sum_weight: if divergent { f64::NEG_INFINITY } else { weight },
            accept_sum: if accept.is_finite() { accept } else { 0.0 },
            n_leapfrog: 1,
            divergent,
            turning: false,
        };
    }

    let first = build_tree(ham, from, direction, depth - 1, eps, joint0, rng);
    if first.divergent || first.turning {
        return first;
    }
    let grow_from = if direction > 0.0 {
        first.plus.clone()
    } else {
        first.minus.clone()
    };
    let second = build_tree(ham, &grow_from, direction, depth - 1, eps, joint0, rng);

    let mut out = Subtree {
        minus: if direction > 0.0 {
            first.minus.clone()
        } else {
            second.minus.clone()
        },
        plus: if direction > 0.0 {
            second.plus.clone()
        } else {
            first.plus.clone()
        },
        proposal: first.proposal.clone(),
        log_sum_weight: log_sum_exp(first.log_sum_weight, second.log_sum_weight),
        accept_sum: first.accept_sum + second.accept_sum,
        n_leapfrog: first.n_leapfrog + second.n_leapfrog,
        divergent: second.divergent,
        turning: second.turning,
    };
    if out.divergent || out.turning {
        return out;
    }
    // Multinomial sampling between the two halves.
    let prob_second = (second.log_sum_weight - out.log_sum_weight).exp();
    if rng.gen::<f64>() < prob_second {
        out.proposal = second.proposal;
    }
    out.turning = !ham.no_u_turn(&out.minus, &out.plus);
    out
}

fn find_reasonable_epsilon<T: Target, R: Rng>(ham: &Hamiltonian<'_, T>, phase: &Phase, rng: &mut R) -> f64 {
    let mut eps = 1.0f64;
    let p = ham.sample_momentum(rng);
    let start = Phase {
        p,
        ..phase.clone()
    };
    let joint0 = ham.joint(&start);
    let probe = |eps: f64| -> f64 {
        let next = ham.leapfrog(&start, 1.0, eps);
        let delta = ham.joint(&next) - joint0;
        if delta.is_nan() {
            f64::NEG_INFINITY
        } else {
            delta
        }
    };
    let mut delta = probe(eps);
    // Shrink first if the initial step is unstable.
    while !delta.is_finite() && eps > 1e-10 {
        eps *= 0.5;
        delta = probe(eps);
    }
    let dir: f64 = if delta > (0.5f64).ln() { 1.0 } else { -1.0 };
    for _ in 0..60 {
        delta = probe(eps);
        if dir > 0.0 && !(delta > (0.5f64).ln()) {
            break;
        }
        if dir < 0.0 && !(delta < (0.5f64).ln()) {
            break;
        }
        eps *= (2.0f64).powf(dir);
        if !(1e-10..=1e7).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-10, 1e7)
}

/// Deterministic per-chain RNG stream derived from the run seed.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    // SplitMix64 finalizer over (seed, chain) keeps the streams decorrelated.
    let mut z = seed ^ (chain as u64).wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Runs one chain from `init`, adapting during warmup and retaining the
/// post-warmup draws. Deterministic given the RNG state.
pub fn sample_chain<T: Target, R: Rng>(
    target: &T,
    init: &[f64],
    settings: &NutsSettings,
    rng: &mut R,
    chain_index: usize,
) -> Result<ChainRun> {
    let dim = target.dim();
    assert_eq!(init.len(), dim);
    let mut grad = vec![0.0; dim];
    let logp = target.logp_grad(init, &mut grad);
    if !logp.is_finite() {
        return Err(Error::ChainFailure {
            chain: chain_index,
            msg: "non-finite log posterior at the initial state".into(),
        });
    }
    let mut ham = Hamiltonian {
        target,
        inv_mass: vec![1.0; dim],
    };
    let mut current = Phase {
        q: init.to_vec(),
        p: vec![0.0; dim],
        grad,
        logp,
    };
    let eps0 = find_reasonable_epsilon(&ham, &current, rng);
    let mut adapt = DualAveraging::new(eps0, settings.target_accept);
    let schedule = AdaptSchedule::new(settings.warmup);
    let kept = settings.iterations.saturating_sub(settings.warmup);
    let mut draws = Vec::with_capacity(kept);
    let mut divergences = 0usize;
    let mut accept_sum = 0.0;
    let mut accept_n = 0usize;
    let mut window_sums = vec![0.0; dim];
    let mut window_sq = vec![0.0; dim];
    let mut window_n = 0usize;
    let mut eps = eps0;

    for iter in 0..settings.iterations {
        let warming = iter < settings.warmup;
        current.p = ham.sample_momentum(rng);
        let joint0 = ham.joint(&current);
        let mut minus = current.clone();
        let mut plus = current.clone();
        let mut proposal = current.clone();
        let mut log_sum_weight = 0.0f64;
        let mut trajectory_accept = 0.0;
        let mut trajectory_n = 0usize;
        let mut divergent = false;

        for depth in 0..settings.max_tree_depth {
            let direction: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let start = if direction > 0.0 { plus.clone() } else { minus.clone() };
            let subtree = build_tree(&ham, &start, direction, depth, eps, joint0, rng);
            trajectory_accept += subtree.accept_sum;
            trajectory_n += subtree.n_leapfrog;
            if direction > 0.0 {
                plus = subtree.plus.clone();
            } else {
                minus = subtree.minus.clone();
            }
            if subtree.divergent {
                divergent = true;
                break;
            }
            if subtree.turning {
                break;
            }
            // Biased progressive sampling toward the new subtree.
            let total = log_sum_exp(log_sum_weight, subtree.log_sum_weight);
            let take_prob = (subtree.log_sum_weight - log_sum_weight).exp().min(1.0);
            if rng.gen::<f64>() < take_prob {
                proposal = subtree.proposal;
            }
            log_sum_weight = total;
            if !ham.no_u_turn(&minus, &plus) {
                break;
            }
        }

        if divergent {
            divergences += usize::from(!warming);
        } else {
            current = proposal;
        }
        let accept_stat = if trajectory_n > 0 {
            trajectory_accept / trajectory_n as f64
        } else {
            0.0
        };

        if warming {
            adapt.update(accept_stat);
            eps = adapt.current();
            if eps < 1e-12 {
                return Err(Error::ChainFailure {
                    chain: chain_index,
                    msg: "step size underflow during warmup (all-divergent trajectories)".into(),
                });
            }
            if schedule.in_variance_window(iter) {
                for i in 0..dim {
                    window_sums[i] += current.q[i];
                    window_sq[i] += current.q[i] * current.q[i];
                }
                window_n += 1;
                if schedule.window_closes_at(iter) && window_n >= 4 {
                    let n = window_n as f64;
                    for i in 0..dim {
                        let mean = window_sums[i] / n;
                        let var = (window_sq[i] / n - mean * mean).max(0.0);
                        // Regularize toward unit scale as Stan does.
                        ham.inv_mass[i] = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
                        ham.inv_mass[i] = ham.inv_mass[i].max(1e-10);
                    }
                    window_sums.fill(0.0);
                    window_sq.fill(0.0);
                    window_n = 0;
                    // Restart step-size search around the current value.
                    let fresh = find_reasonable_epsilon(&ham, &current, rng);
                    adapt = DualAveraging::new(fresh, settings.target_accept);
                    eps = fresh;
                }
            }
            if iter + 1 == settings.warmup {
                eps = adapt.adapted();
            }
        } else {
            accept_sum += accept_stat;
            accept_n += 1;
            draws.push(current.q.clone());
        }
    }

    Ok(ChainRun {
        draws,
        divergences,
        mean_accept: if accept_n > 0 {
            accept_sum / accept_n as f64
        } else {
            0.0
        },
        step_size: eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal2;

    impl Target for StdNormal2 {
        fn dim(&self) -> usize {
            2
        }
        fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for i in 0..2 {
                lp -= 0.5 * position[i] * position[i];
                grad[i] = -position[i];
            }
            lp
        }
    }

    /// Gamma(3, 2) sampled on the log scale (Jacobian included).
    struct LogGamma32;

    impl Target for LogGamma32 {
        fn dim(&self) -> usize {
            1
        }
        fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
            let z = position[0];
            let x = z.exp();
            if !x.is_finite() {
                grad[0] = 0.0;
                return f64::NEG_INFINITY;
            }
            grad[0] = 3.0 - 2.0 * x;
            3.0 * z - 2.0 * x
        }
    }

    fn run_chains_on<T: Target>(
        target: &T,
        n_chains: usize,
        settings: &NutsSettings,
        seed: u64,
    ) -> Vec<ChainRun> {
        (0..n_chains)
            .map(|c| {
                let mut rng = chain_rng(seed, c);
                let init: Vec<f64> = (0..target.dim())
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        0.2 * z
                    })
                    .collect();
                sample_chain(target, &init, settings, &mut rng, c).unwrap()
            })
            .collect()
    }

    #[test]
    fn standard_normal_moments() {
        let settings = NutsSettings {
            iterations: 2000,
            warmup: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
        };
        let runs = run_chains_on(&StdNormal2, 4, &settings, 42);
        for d in 0..2 {
            let all: Vec<f64> = runs
                .iter()
                .flat_map(|r| r.draws.iter().map(move |q| q[d]))
                .collect();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.05, "dim {d} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 0.05, "dim {d} sd {}", var.sqrt());
        }
    }

    #[test]
    fn gamma_target_mean() {
        let settings = NutsSettings {
            iterations: 2000,
            warmup: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
        };
        let runs = run_chains_on(&LogGamma32, 4, &settings, 7);
        let all: Vec<f64> = runs
            .iter()
            .flat_map(|r| r.draws.iter().map(|q| q[0].exp()))
            .collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((mean - 1.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn deterministic_given_seed() {
        let settings = NutsSettings {
            iterations: 60,
            warmup: 30,
            target_accept: 0.8,
            max_tree_depth: 10,
        };
        let a = run_chains_on(&StdNormal2, 2, &settings, 11);
        let b = run_chains_on(&StdNormal2, 2, &settings, 11);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.draws, rb.draws);
        }
    }

    #[test]
    fn iterations_prefix_extend() {
        let short = NutsSettings {
            iterations: 80,
            warmup: 50,
            target_accept: 0.8,
            max_tree_depth: 10,
        };
        let long = NutsSettings {
            iterations: 120,
            warmup: 50,
            target_accept: 0.8,
            max_tree_depth: 10,
        };
        let a = run_chains_on(&StdNormal2, 1, &short, 13);
        let b = run_chains_on(&StdNormal2, 1, &long, 13);
        assert_eq!(a[0].draws.len(), 30);
        assert_eq!(b[0].draws.len(), 70);
        assert_eq!(&a[0].draws[..], &b[0].draws[..30]);
    }

    #[test]
    fn kolmogorov_smirnov_on_1d_normal() {
        struct StdNormal1;
        impl Target for StdNormal1 {
            fn dim(&self) -> usize {
                1
            }
            fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
                grad[0] = -position[0];
                -0.5 * position[0] * position[0]
            }
        }
        let settings = NutsSettings {
            iterations: 11_000,
            warmup: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
        };
        let runs = run_chains_on(&StdNormal1, 1, &settings, 3);
        let mut draws: Vec<f64> = runs[0].draws.iter().map(|q| q[0]).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let mut ks = 0.0f64;
        for (i, x) in draws.iter().enumerate() {
            let cdf = normal.cdf(*x);
            let hi = (i as f64 + 1.0) / n - cdf;
            let lo = cdf - i as f64 / n;
            ks = ks.max(hi).max(lo);
        }
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn initial_non_finite_logp_is_reported() {
        struct Broken;
        impl Target for Broken {
            fn dim(&self) -> usize {
                1
            }
            fn logp_grad(&self, _p: &[f64], grad: &mut [f64]) -> f64 {
                grad[0] = 0.0;
                f64::NEG_INFINITY
            }
        }
        let settings = NutsSettings {
            iterations: 10,
            warmup: 5,
            target_accept: 0.8,
            max_tree_depth: 5,
        };
        let mut rng = chain_rng(0, 0);
        let err = sample_chain(&Broken, &[0.0], &settings, &mut rng, 3).unwrap_err();
        assert!(matches!(err, Error::ChainFailure { chain: 3, .. }));
    }
}
