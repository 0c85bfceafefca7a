//! Spatial and temporal adjacency structures and the precision matrices
//! used by the ICAR priors and the Leroux simulation generator.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Undirected adjacency on `size` nodes, stored as unordered index pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    size: usize,
    edges: Vec<(usize, usize)>,
}

impl Adjacency {
    /// Builds an adjacency from an edge list. Pairs are normalized to
    /// `(min, max)`, deduplicated, and validated against self-loops and
    /// out-of-range indices.
    pub fn from_edges(size: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut normalized: Vec<(usize, usize)> = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop at node {a}")));
            }
            if a >= size || b >= size {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) out of range for {size} nodes"
                )));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        normalized.dedup();
        Ok(Self {
            size,
            edges: normalized,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Node degrees (number of incident edges).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.size];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Neighbor lists indexed by node.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut nbrs = vec![Vec::new(); self.size];
        for &(a, b) in &self.edges {
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
        nbrs
    }

    /// Number of connected components (isolated nodes count as components).
    pub fn n_components(&self) -> usize {
        let nbrs = self.neighbor_lists();
        let mut seen = vec![false; self.size];
        let mut components = 0;
        let mut stack = Vec::new();
        for start in 0..self.size {
            if seen[start] {
                continue;
            }
            components += 1;
            stack.push(start);
            seen[start] = true;
            while let Some(node) = stack.pop() {
                for &next in &nbrs[node] {
                    if !seen[next] {
                        seen[next] = true;
                        stack.push(next);
                    }
                }
            }
        }
        components
    }

    /// Rank of the graph Laplacian: `size - n_components`.
    pub fn laplacian_rank(&self) -> usize {
        self.size - self.n_components()
    }
}

/// Dense symmetric precision matrix, tagged with whether it is positive
/// definite (ICAR structure matrices are rank deficient and never are).
#[derive(Debug, Clone)]
pub struct PrecisionMatrix {
    matrix: DMatrix<f64>,
    positive_definite: bool,
}

impl PrecisionMatrix {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn is_positive_definite(&self) -> bool {
        self.positive_definite
    }
}

/// Path graph on `t` nodes: consecutive indices are neighbors.
pub fn path_adjacency(t: usize) -> Result<Adjacency> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "path adjacency needs at least 2 nodes, got {t}"
        )));
    }
    Adjacency::from_edges(t, (0..t - 1).map(|i| (i, i + 1)))
}

/// ICAR structure matrix `D - W`: degree matrix minus adjacency. Rank
/// deficient (row sums are zero), so the positive-definite flag is false.
pub fn icar_structure(adj: &Adjacency) -> PrecisionMatrix {
    let n = adj.size();
    let mut m = DMatrix::zeros(n, n);
    for &(a, b) in adj.edges() {
        m[(a, a)] += 1.0;
        m[(b, b)] += 1.0;
        m[(a, b)] -= 1.0;
        m[(b, a)] -= 1.0;
    }
    PrecisionMatrix {
        matrix: m,
        positive_definite: false,
    }
}

/// Leroux precision `rho * (D - W) + (1 - rho) * I`, positive definite for
/// `rho` in `[0, 1)`.
pub fn leroux_precision(adj: &Adjacency, rho: f64) -> Result<PrecisionMatrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "leroux rho must lie in [0, 1), got {rho}"
        )));
    }
    let n = adj.size();
    let mut m = icar_structure(adj).matrix * rho;
    for i in 0..n {
        m[(i, i)] += 1.0 - rho;
    }
    Ok(PrecisionMatrix {
        matrix: m,
        positive_definite: true,
    })
}

/// One draw from `N(0, tau2 * Q^{-1})` obtained by solving against the
/// Cholesky factor of `Q`. Bit-reproducible for a fixed RNG stream.
pub fn sample_gmrf<R: Rng + ?Sized>(
    precision: &PrecisionMatrix,
    tau2: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !precision.is_positive_definite() {
        return Err(Error::LinearAlgebra(
            "sample_gmrf requires a positive-definite precision".into(),
        ));
    }
    if tau2 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tau2 must be positive, got {tau2}"
        )));
    }
    let n = precision.size();
    let chol = precision
        .matrix
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra("Cholesky factorization failed".into()))?;
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    // Q = L L^T, so solving L^T x = z gives cov(x) = Q^{-1}.
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&nalgebra::DVector::from_vec(z))
        .ok_or_else(|| Error::LinearAlgebra("triangular solve failed".into()))?;
    let scale = tau2.sqrt();
    Ok(x.iter().map(|v| v * scale).collect())
}

/// Synthetic fallback adjacency: nodes placed on a square lattice, each
/// connected to its horizontal and vertical neighbors (4-neighbor rule).
pub fn lattice_adjacency(n: usize) -> Result<Adjacency> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "lattice adjacency needs at least 2 nodes, got {n}"
        )));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let mut edges = Vec::new();
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        if c + 1 < cols && i + 1 < n {
            edges.push((i, i + 1));
        }
        let below = (r + 1) * cols + c;
        if below < n {
            edges.push((i, below));
        }
    }
    Adjacency::from_edges(n, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn path_of_two_has_one_edge() {
        let adj = path_adjacency(2).unwrap();
        assert_eq!(adj.edges(), &[(0, 1)]);
    }

    #[test]
    fn path_of_three_edges_and_degrees() {
        let adj = path_adjacency(3).unwrap();
        assert_eq!(adj.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(adj.degrees(), vec![1, 2, 1]);
    }

    #[test]
    fn path_of_fifteen_has_fourteen_edges() {
        let adj = path_adjacency(15).unwrap();
        assert_eq!(adj.edges().len(), 14);
    }

    #[test]
    fn path_rejects_short_inputs() {
        assert!(path_adjacency(1).is_err());
    }

    #[test]
    fn icar_structure_of_path_three() {
        let adj = path_adjacency(3).unwrap();
        let q = icar_structure(&adj);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(q.matrix(), &expected);
        assert!(!q.is_positive_definite());
    }

    #[test]
    fn icar_row_sums_are_zero() {
        let adj = fixtures::nm_adjacency();
        let q = icar_structure(&adj);
        for i in 0..q.size() {
            let row_sum: f64 = q.matrix().row(i).iter().sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn icar_rank_counts_components() {
        // Two components of sizes 2 and 3: rank should be 5 - 2 = 3.
        let adj = Adjacency::from_edges(5, [(0, 1), (2, 3), (3, 4)]).unwrap();
        assert_eq!(adj.laplacian_rank(), 3);
        // Oracle: count nonzero eigenvalues of D - W.
        let q = icar_structure(&adj);
        let nonzero = sym_eigenvalues(q.matrix())
            .iter()
            .filter(|v| v.abs() > 1e-10)
            .count();
        assert_eq!(nonzero, 3);
    }

    #[test]
    fn icar_null_space_contains_constants() {
        let adj = fixtures::nm_adjacency();
        let q = icar_structure(&adj);
        let ones = DVector::from_element(q.size(), 1.0);
        let quad = (ones.transpose() * q.matrix() * &ones)[(0, 0)];
        assert!(quad.abs() < 1e-12);
    }

    #[test]
    fn leroux_rho_zero_is_identity() {
        let adj = path_adjacency(4).unwrap();
        let q = leroux_precision(&adj, 0.0).unwrap();
        assert_eq!(q.matrix(), &DMatrix::identity(4, 4));
        assert!(q.is_positive_definite());
    }

    #[test]
    fn leroux_path_three_high_rho() {
        let adj = path_adjacency(3).unwrap();
        let q = leroux_precision(&adj, 0.99).unwrap();
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[1.00, -0.99, 0.0, -0.99, 1.99, -0.99, 0.0, -0.99, 1.00],
        );
        assert!((q.matrix() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn leroux_rejects_improper_rho() {
        let adj = path_adjacency(3).unwrap();
        assert!(leroux_precision(&adj, 1.0).is_err());
    }

    #[test]
    fn leroux_nm_fixture_is_positive_definite() {
        let adj = fixtures::nm_adjacency();
        let q = leroux_precision(&adj, 0.99).unwrap();
        let eigs = sym_eigenvalues(q.matrix());
        assert!(eigs[0] > 0.0, "smallest eigenvalue {} not positive", eigs[0]);
    }

    #[test]
    fn leroux_trace_grows_with_rho_on_nm_fixture() {
        let adj = fixtures::nm_adjacency();
        let lo = leroux_precision(&adj, 0.0).unwrap();
        let hi = leroux_precision(&adj, 0.99).unwrap();
        assert!(hi.matrix().trace() > lo.matrix().trace());
    }

    #[test]
    fn gmrf_identity_matches_standard_normal() {
        let adj = path_adjacency(2).unwrap();
        let q = leroux_precision(&adj, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n_draws = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_draws {
            let draw = sample_gmrf(&q, 1.0, &mut rng).unwrap();
            for v in draw {
                sum += v;
                sum_sq += v * v;
            }
        }
        let n = (2 * n_draws) as f64;
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn gmrf_empirical_covariance_matches_inverse() {
        let adj = path_adjacency(4).unwrap();
        let q = leroux_precision(&adj, 0.9).unwrap();
        let tau2 = 0.5;
        let target = q.matrix().clone().try_inverse().unwrap() * tau2;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_draws = 100_000usize;
        let n = q.size();
        let mut acc = DMatrix::<f64>::zeros(n, n);
        let mut means = DVector::<f64>::zeros(n);
        for _ in 0..n_draws {
            let d = DVector::from_vec(sample_gmrf(&q, tau2, &mut rng).unwrap());
            acc += &d * d.transpose();
            means += d;
        }
        means /= n_draws as f64;
        let emp = acc / n_draws as f64 - &means * means.transpose();
        // Entrywise Monte Carlo standard error for covariance of Gaussians is
        // roughly sqrt((q_ii q_jj + q_ij^2) / n).
        for i in 0..n {
            for j in 0..n {
                let se = ((target[(i, i)] * target[(j, j)] + target[(i, j)].powi(2))
                    / n_draws as f64)
                    .sqrt();
                let diff = (emp[(i, j)] - target[(i, j)]).abs();
                assert!(
                    diff < 3.0 * se + 1e-12,
                    "cov[{i},{j}] off by {diff} (3se = {})",
                    3.0 * se
                );
            }
        }
    }

    #[test]
    fn gmrf_scale_equivariance() {
        let adj = fixtures::nm_adjacency();
        let q = leroux_precision(&adj, 0.99).unwrap();
        let a = sample_gmrf(&q, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_gmrf(&q, 0.4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn gmrf_is_bit_reproducible() {
        let adj = fixtures::nm_adjacency();
        let q = leroux_precision(&adj, 0.99).unwrap();
        let a = sample_gmrf(&q, 0.1, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = sample_gmrf(&q, 0.1, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gmrf_rejects_icar_structure() {
        let adj = path_adjacency(3).unwrap();
        let q = icar_structure(&adj);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_gmrf(&q, 1.0, &mut rng).is_err());
    }

    #[test]
    fn lattice_is_connected_and_symmetric() {
        let adj = lattice_adjacency(29).unwrap();
        assert_eq!(adj.size(), 29);
        assert_eq!(adj.n_components(), 1);
        let deg = adj.degrees();
        assert!(deg.iter().all(|&d| d >= 1 && d <= 4));
    }
}
