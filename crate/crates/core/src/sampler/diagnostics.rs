//! Convergence diagnostics: rank-normalized split potential-scale-reduction
//! (R-hat) and bulk effective sample size with Geyer's initial monotone
//! sequence truncation.

use statrs::distribution::{ContinuousCDF, Normal};

/// Diagnostic value plus a degeneracy flag (constant input).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostic {
    pub value: f64,
    pub degenerate: bool,
}

fn split_in_half(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        // Drop the middle draw of odd-length chains.
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains
        .iter()
        .flat_map(|c| c.iter())
        .copied()
        .next()
        .unwrap_or(0.0);
    chains
        .iter()
        .flat_map(|c| c.iter())
        .all(|&v| (v - first).abs() < 1e-300 || v == first)
}

/// Average-rank normal scores across all chains jointly:
/// `z = Phi^{-1}((rank - 3/8) / (S + 1/4))`.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut indexed: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (ci, chain) in chains.iter().enumerate() {
        for (di, &v) in chain.iter().enumerate() {
            indexed.push((v, ci, di));
        }
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0f64; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j < total && indexed[j].0 == indexed[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j).skip(i) {
            *r = avg;
        }
        i = j;
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let s = total as f64;
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    for (pos, &(_, ci, di)) in indexed.iter().enumerate() {
        let p = (ranks[pos] - 0.375) / (s + 0.25);
        out[ci][di] = normal.inverse_cdf(p);
    }
    out
}

/// Classic potential scale reduction on already-split chains.
fn psrf(split: &[Vec<f64>]) -> f64 {
    let m = split.len() as f64;
    let n = split[0].len() as f64;
    if n < 2.0 || m < 2.0 {
        return f64::NAN;
    }
    let means: Vec<f64> = split.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = split
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return f64::NAN;
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Rank-normalized split R-hat. A constant parameter is reported as 1 by
/// convention with the degenerate flag set.
pub fn rhat(chains: &[Vec<f64>]) -> Diagnostic {
    if is_constant(chains) {
        return Diagnostic {
            value: 1.0,
            degenerate: true,
        };
    }
    let normalized = rank_normalize(chains);
    Diagnostic {
        value: psrf(&split_in_half(&normalized)),
        degenerate: false,
    }
}

/// Plain split R-hat without rank normalization (cross-check variant).
pub fn rhat_plain(chains: &[Vec<f64>]) -> Diagnostic {
    if is_constant(chains) {
        return Diagnostic {
            value: 1.0,
            degenerate: true,
        };
    }
    Diagnostic {
        value: psrf(&split_in_half(chains)),
        degenerate: false,
    }
}

/// Bulk effective sample size: rank-normalized split chains, combined
/// autocorrelations, Geyer initial monotone sequence truncation.
pub fn ess(chains: &[Vec<f64>]) -> Diagnostic {
    if is_constant(chains) {
        return Diagnostic {
            value: f64::NAN,
            degenerate: true,
        };
    }
    let split = split_in_half(&rank_normalize(chains));
    let m = split.len();
    let n = split[0].len();
    if n < 4 {
        return Diagnostic {
            value: f64::NAN,
            degenerate: true,
        };
    }
    let means: Vec<f64> = split.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    // Per-chain autocovariances (biased, divisor n, matching the variogram
    // estimator).
    let acov = |c: &[f64], mean: f64, lag: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..n - lag {
            s += (c[t] - mean) * (c[t + lag] - mean);
        }
        s / n as f64
    };
    let var_within: f64 = split
        .iter()
        .zip(&means)
        .map(|(c, &mu)| acov(c, mu, 0) * n as f64 / (n as f64 - 1.0))
        .sum::<f64>()
        / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let var_plus = var_within * (n as f64 - 1.0) / n as f64 + b_over_n;
    if var_plus <= 0.0 {
        return Diagnostic {
            value: f64::NAN,
            degenerate: true,
        };
    }

    let mean_acov = |lag: usize| -> f64 {
        split
            .iter()
            .zip(&means)
            .map(|(c, &mu)| acov(c, mu, lag))
            .sum::<f64>()
            / m as f64
    };

    let rho = |lag: usize| 1.0 - (var_within - mean_acov(lag)) / var_plus;

    // Geyer pairs: accumulate while the paired sums stay positive, then
    // enforce monotone non-increase.
    let max_lag = n - 4;
    let mut pair_sums = Vec::new();
    let mut lag = 1usize;
    while lag + 1 <= max_lag {
        let pair = rho(lag) + rho(lag + 1);
        if !(pair > 0.0) {
            break;
        }
        pair_sums.push(pair);
        lag += 2;
    }
    let mut running_min = f64::INFINITY;
    let mut tau = 1.0;
    for p in pair_sums {
        running_min = running_min.min(p);
        tau += 2.0 * running_min;
    }
    let total = (m * n) as f64;
    Diagnostic {
        value: (total / tau).min(total * total.log10()),
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid_chains(n_chains: usize, n: usize, seed: u64, shift: f64) -> Vec<Vec<f64>> {
        (0..n_chains)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
                (0..n)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z + shift * c as f64
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn rhat_near_one_for_iid_chains() {
        // Repeated seeds guard against a lucky draw.
        for seed in [1u64, 2, 3] {
            let chains = iid_chains(4, 1000, seed, 0.0);
            let d = rhat(&chains);
            assert!(!d.degenerate);
            assert!(d.value < 1.01, "seed {seed}: rhat {}", d.value);
        }
    }

    #[test]
    fn rhat_detects_separated_chains() {
        let chains = iid_chains(2, 1000, 9, 5.0);
        let d = rhat(&chains);
        assert!(d.value > 1.5, "rhat {}", d.value);
        // Verified against the direct formula: between-chain variance of
        // means 0 and 5 dominates within-chain variance 1.
        let plain = rhat_plain(&chains);
        assert!(plain.value > 1.5);
    }

    #[test]
    fn rhat_duplicated_chain_still_mixes() {
        let one = iid_chains(1, 1000, 4, 0.0).pop().unwrap();
        let chains = vec![one.clone(), one];
        let d = rhat(&chains);
        assert!((d.value - 1.0).abs() < 0.01, "rhat {}", d.value);
    }

    #[test]
    fn rhat_constant_parameter_flagged() {
        let chains = vec![vec![2.0; 100], vec![2.0; 100]];
        let d = rhat(&chains);
        assert_eq!(d.value, 1.0);
        assert!(d.degenerate);
    }

    #[test]
    fn ess_iid_in_expected_band() {
        let chains = iid_chains(4, 1000, 21, 0.0);
        let d = ess(&chains);
        assert!(
            d.value > 3000.0 && d.value < 5000.0,
            "iid ESS {} outside [3000, 5000]",
            d.value
        );
    }

    #[test]
    fn ess_ar1_matches_analytic_rate() {
        let rho = 0.9f64;
        let n = 4000usize;
        let n_chains = 4;
        let mut chains = Vec::new();
        for c in 0..n_chains {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + c);
            let mut x = 0.0f64;
            let innov_sd = (1.0 - rho * rho).sqrt();
            let mut chain = Vec::with_capacity(n);
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                x = rho * x + innov_sd * z;
                chain.push(x);
            }
            chains.push(chain);
        }
        let expected = (n_chains * n) as f64 * (1.0 - rho) / (1.0 + rho);
        let d = ess(&chains);
        assert!(
            d.value > expected / 1.5 && d.value < expected * 1.5,
            "ESS {} vs analytic {expected}",
            d.value
        );
    }

    #[test]
    fn ess_constant_chain_flagged() {
        let d = ess(&[vec![1.0; 50], vec![1.0; 50]]);
        assert!(d.degenerate);
    }
}
