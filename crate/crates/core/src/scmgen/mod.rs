//! Ground-truth linear-Gaussian SCMs and weakly-supervised pair datasets.
//!
//! A dataset is a pure function of its [`DatasetConfig`]: the graph, the edge
//! weights, the observation projection and every pair are drawn from one
//! ChaCha stream seeded with `config.seed`.

mod io;

pub use io::{load_dataset, recorded_checksum, save_dataset, DatasetMeta, SCHEMA_VERSION};

use std::ops::Range;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance of the additive exogenous noise at every node.
pub const NOISE_VAR: f64 = 0.1;
/// Dimension of the observation vectors.
pub const OBS_DIM: usize = 16;
/// Default lower bound on |edge weight|.
pub const DEFAULT_W_MIN: f64 = 0.1;
/// Largest accepted condition number of the observation projection.
pub const MAX_PROJECTION_CONDITION: f64 = 1e3;

/// A DAG over `d` nodes. `adjacency[i][j] == 1` iff `i -> j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub d: usize,
    pub adjacency: Vec<Vec<u8>>,
    pub topo_order: Vec<usize>,
}

impl CausalGraph {
    pub fn empty(d: usize) -> Self {
        CausalGraph {
            d,
            adjacency: vec![vec![0; d]; d],
            topo_order: (0..d).collect(),
        }
    }

    /// Builds a graph from an edge list; the topological order is recomputed.
    pub fn from_edges(d: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![vec![0u8; d]; d];
        for &(i, j) in edges {
            if i >= d || j >= d || i == j {
                return Err(Error::invalid(format!("bad edge {i}->{j} for d={d}")));
            }
            adjacency[i][j] = 1;
        }
        let topo_order = topological_sort(&adjacency)
            .ok_or_else(|| Error::invalid("edge list contains a cycle"))?;
        Ok(CausalGraph {
            d,
            adjacency,
            topo_order,
        })
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j] != 0
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|row| row.iter().filter(|&&a| a != 0).count())
            .sum()
    }

    pub fn parents(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(move |&i| self.adjacency[i][j] != 0)
    }

    /// All nodes reachable from `node` along directed edges, excluding `node`.
    pub fn descendants(&self, node: usize) -> Vec<usize> {
        let mut seen = vec![false; self.d];
        let mut stack = vec![node];
        while let Some(u) = stack.pop() {
            for v in 0..self.d {
                if self.adjacency[u][v] != 0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        (0..self.d).filter(|&v| seen[v] && v != node).collect()
    }

    pub fn is_acyclic(&self) -> bool {
        topological_sort(&self.adjacency).is_some()
    }

    pub fn adjacency_f64(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.d, self.d), |(i, j)| self.adjacency[i][j] as f64)
    }
}

/// Kahn's algorithm; `None` when the adjacency has a cycle or a self-loop.
pub fn topological_sort(adjacency: &[Vec<u8>]) -> Option<Vec<usize>> {
    let d = adjacency.len();
    let mut indegree: Vec<usize> = (0..d)
        .map(|j| (0..d).filter(|&i| adjacency[i][j] != 0).count())
        .collect();
    let mut ready: Vec<usize> = (0..d).rev().filter(|&j| indegree[j] == 0).collect();
    let mut order = Vec::with_capacity(d);
    while let Some(u) = ready.pop() {
        order.push(u);
        for v in 0..d {
            if adjacency[u][v] != 0 {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    ready.push(v);
                }
            }
        }
    }
    (order.len() == d).then_some(order)
}

/// Linear-Gaussian SCM: `z_j = sum_i weights[i][j] * z_i + eps_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianScm {
    pub graph: CausalGraph,
    pub weights: Vec<Vec<f64>>,
    pub noise_var: Vec<f64>,
}

impl LinearGaussianScm {
    pub fn d(&self) -> usize {
        self.graph.d
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let d = self.d();
        DMatrix::from_fn(d, d, |i, j| self.weights[i][j])
    }

    /// Closed-form covariance `(I - W^T)^{-1} diag(noise_var) (I - W)^{-1}`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.d();
        let w = self.weight_matrix();
        let a = (DMatrix::identity(d, d) - w.transpose())
            .try_inverse()
            .expect("I - W^T is unit triangular up to permutation");
        let noise = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.noise_var.clone()));
        &a * noise * a.transpose()
    }

    fn structural_value(&self, j: usize, z: &[f64], eps_j: f64) -> f64 {
        let mut acc = 0.0;
        for i in self.graph.parents(j) {
            acc += self.weights[i][j] * z[i];
        }
        acc + eps_j
    }

    /// Evaluates the structural equations for one noise vector.
    pub fn solve(&self, eps: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.d()];
        for &j in &self.graph.topo_order {
            z[j] = self.structural_value(j, &z, eps[j]);
        }
        z
    }
}

/// One observation pair with the hidden quantities used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WeaklySupervisedPair {
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub z: Vec<f64>,
    pub z_tilde: Vec<f64>,
    pub eps: Vec<f64>,
    pub eps_tilde: Vec<f64>,
    pub target: usize,
}

/// Samples a DAG: a random topological order, then every forward pair
/// carries an edge independently with probability `edge_prob`.
pub fn sample_graph<R: Rng + ?Sized>(d: usize, edge_prob: f64, rng: &mut R) -> Result<CausalGraph> {
    if d < 1 {
        return Err(Error::invalid("d must be at least 1"));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::invalid(format!(
            "edge_prob {edge_prob} outside [0, 1]"
        )));
    }
    let mut topo_order: Vec<usize> = (0..d).collect();
    topo_order.shuffle(rng);
    let mut adjacency = vec![vec![0u8; d]; d];
    for a in 0..d {
        for b in (a + 1)..d {
            if rng.random::<f64>() < edge_prob {
                adjacency[topo_order[a]][topo_order[b]] = 1;
            }
        }
    }
    Ok(CausalGraph {
        d,
        adjacency,
        topo_order,
    })
}

/// Draws N(0, 1) edge weights, redrawing any with `|w| < w_min`.
pub fn sample_scm<R: Rng + ?Sized>(
    graph: &CausalGraph,
    w_min: f64,
    rng: &mut R,
) -> Result<LinearGaussianScm> {
    if !(w_min > 0.0) {
        return Err(Error::invalid(format!(
            "w_min must be positive, got {w_min}"
        )));
    }
    let d = graph.d;
    let mut weights = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            if graph.has_edge(i, j) {
                weights[i][j] = loop {
                    let w: f64 = rng.sample(StandardNormal);
                    if w.abs() >= w_min {
                        break w;
                    }
                };
            }
        }
    }
    Ok(LinearGaussianScm {
        graph: graph.clone(),
        weights,
        noise_var: vec![NOISE_VAR; d],
    })
}

/// Ancestral sampling. Returns `(z, eps)`, both `n x d`.
pub fn ancestral_sample<R: Rng + ?Sized>(
    scm: &LinearGaussianScm,
    n: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if n < 1 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let d = scm.d();
    let scales: Vec<f64> = scm.noise_var.iter().map(|v| v.sqrt()).collect();
    let mut eps = Array2::zeros((n, d));
    let mut z = Array2::zeros((n, d));
    for r in 0..n {
        for j in 0..d {
            let u: f64 = rng.sample(StandardNormal);
            eps[[r, j]] = scales[j] * u;
        }
        let row = scm.solve(eps.row(r).as_slice().expect("standard layout"));
        z.row_mut(r).assign(&ArrayView1::from(&row));
    }
    Ok((z, eps))
}

/// Perfect stochastic intervention on `target`, sharing every other noise
/// coordinate with the observational state. The target's new value is drawn
/// from N(0, 1) and stored as its exogenous value in `eps_tilde`.
pub fn intervene_pair<R: Rng + ?Sized>(
    scm: &LinearGaussianScm,
    z: &[f64],
    eps: &[f64],
    target: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = scm.d();
    if target >= d {
        return Err(Error::invalid(format!(
            "target {target} out of range for d={d}"
        )));
    }
    if z.len() != d || eps.len() != d {
        return Err(Error::ShapeMismatch {
            name: "z/eps".into(),
            expected: vec![d],
            found: vec![z.len(), eps.len()],
        });
    }
    let value: f64 = rng.sample(StandardNormal);
    let mut eps_tilde = eps.to_vec();
    eps_tilde[target] = value;
    let mut z_tilde = vec![0.0; d];
    for &j in &scm.graph.topo_order {
        z_tilde[j] = if j == target {
            value
        } else {
            scm.structural_value(j, &z_tilde, eps_tilde[j])
        };
    }
    Ok((z_tilde, eps_tilde))
}

/// `x = projection . z` for a single latent vector.
pub fn project_to_observations(
    z: ArrayView1<f64>,
    projection: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    if projection.ncols() != z.len() {
        return Err(Error::ShapeMismatch {
            name: "projection".into(),
            expected: vec![OBS_DIM, z.len()],
            found: projection.shape().to_vec(),
        });
    }
    Ok(projection.dot(&z))
}

/// Row-wise projection of an `n x d` latent matrix to `n x 16` observations.
pub fn project_rows(z: ArrayView2<f64>, projection: ArrayView2<f64>) -> Result<Array2<f64>> {
    if projection.ncols() != z.ncols() {
        return Err(Error::ShapeMismatch {
            name: "projection".into(),
            expected: vec![projection.nrows(), z.ncols()],
            found: projection.shape().to_vec(),
        });
    }
    Ok(z.dot(&projection.t()))
}

pub fn condition_number(m: ArrayView2<f64>) -> f64 {
    let mat = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]]);
    let sv = mat.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Gaussian `obs_dim x d` projection, redrawn until its condition number is
/// at most [`MAX_PROJECTION_CONDITION`].
pub fn sample_projection<R: Rng + ?Sized>(
    obs_dim: usize,
    d: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if d > obs_dim {
        return Err(Error::invalid(format!(
            "latent dimension {d} exceeds observation dimension {obs_dim}"
        )));
    }
    loop {
        let p = Array2::from_shape_simple_fn((obs_dim, d), || rng.sample::<f64, _>(StandardNormal));
        if condition_number(p.view()) <= MAX_PROJECTION_CONDITION {
            return Ok(p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub d: usize,
    #[serde(default = "default_edge_prob")]
    pub edge_prob: f64,
    #[serde(default = "default_w_min")]
    pub w_min: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

fn default_edge_prob() -> f64 {
    0.5
}

fn default_w_min() -> f64 {
    DEFAULT_W_MIN
}

impl DatasetConfig {
    /// Full-size configuration: 10^5 / 10^4 / 10^4 pairs.
    pub fn paper(d: usize, seed: u64) -> Self {
        DatasetConfig {
            d,
            edge_prob: 0.5,
            w_min: DEFAULT_W_MIN,
            n_train: 100_000,
            n_val: 10_000,
            n_test: 10_000,
            seed,
        }
    }

    /// Desk-scale configuration: 2 x 10^4 pairs in total.
    pub fn desk(d: usize, seed: u64) -> Self {
        DatasetConfig {
            n_train: 16_000,
            n_val: 2_000,
            n_test: 2_000,
            ..Self::paper(d, seed)
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::invalid("d must be at least 1"));
        }
        if self.d > OBS_DIM {
            return Err(Error::invalid(format!("d must be at most {OBS_DIM}")));
        }
        if self.n_train < 1 || self.n_val < 1 || self.n_test < 1 {
            return Err(Error::invalid("all split sizes must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::invalid("edge_prob must lie in [0, 1]"));
        }
        if !(self.w_min > 0.0) {
            return Err(Error::invalid("w_min must be positive"));
        }
        Ok(())
    }
}

/// Columnar store of weakly-supervised pairs plus the generating process.
///
/// Everything except `x` and `x_tilde` is ground truth and must only be read
/// by evaluation code.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub config: DatasetConfig,
    pub scm: LinearGaussianScm,
    pub projection: Array2<f64>,
    pub x: Array2<f64>,
    pub x_tilde: Array2<f64>,
    pub z: Array2<f64>,
    pub z_tilde: Array2<f64>,
    pub eps: Array2<f64>,
    pub eps_tilde: Array2<f64>,
    pub targets: Vec<usize>,
}

impl PairDataset {
    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn rows(&self, split: Split) -> Range<usize> {
        let c = &self.config;
        match split {
            Split::Train => 0..c.n_train,
            Split::Val => c.n_train..c.n_train + c.n_val,
            Split::Test => c.n_train + c.n_val..c.total(),
        }
    }

    pub fn pair(&self, i: usize) -> WeaklySupervisedPair {
        let row = |a: &Array2<f64>| a.row(i).to_vec();
        WeaklySupervisedPair {
            x: row(&self.x),
            x_tilde: row(&self.x_tilde),
            z: row(&self.z),
            z_tilde: row(&self.z_tilde),
            eps: row(&self.eps),
            eps_tilde: row(&self.eps_tilde),
            target: self.targets[i],
        }
    }

    /// Copies the given rows of an `n x k` array.
    pub fn select(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        a.select(Axis(0), rows)
    }

    pub fn target_histogram(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.d()];
        for &t in &self.targets[self.rows(split)] {
            counts[t] += 1;
        }
        counts
    }
}

/// Generates a full dataset. Targets are uniform over nodes.
pub fn build_dataset(config: &DatasetConfig) -> Result<PairDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d;
    let graph = sample_graph(d, config.edge_prob, &mut rng)?;
    let scm = sample_scm(&graph, config.w_min, &mut rng)?;
    let projection = sample_projection(OBS_DIM, d, &mut rng)?;
    let n = config.total();
    let (z, eps) = ancestral_sample(&scm, n, &mut rng)?;

    let mut z_tilde = Array2::zeros((n, d));
    let mut eps_tilde = Array2::zeros((n, d));
    let mut targets = Vec::with_capacity(n);
    for r in 0..n {
        let target = rng.random_range(0..d);
        let zr = z.row(r).to_vec();
        let er = eps.row(r).to_vec();
        let (zt, et) = intervene_pair(&scm, &zr, &er, target, &mut rng)?;
        z_tilde.row_mut(r).assign(&ArrayView1::from(&zt));
        eps_tilde.row_mut(r).assign(&ArrayView1::from(&et));
        targets.push(target);
    }
    let x = project_rows(z.view(), projection.view())?;
    let x_tilde = project_rows(z_tilde.view(), projection.view())?;
    Ok(PairDataset {
        config: config.clone(),
        scm,
        projection,
        x,
        x_tilde,
        z,
        z_tilde,
        eps,
        eps_tilde,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn graph_rejects_zero_nodes() {
        assert!(matches!(
            sample_graph(0, 0.5, &mut rng(0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn degenerate_edge_probabilities() {
        let g = sample_graph(5, 0.0, &mut rng(1)).unwrap();
        assert_eq!(g.edge_count(), 0);
        let g = sample_graph(5, 1.0, &mut rng(1)).unwrap();
        assert_eq!(g.edge_count(), 10);
        assert!(g.is_acyclic());
    }

    #[test]
    fn expected_edge_count_at_half() {
        let mut r = rng(2);
        let trials = 4000;
        let total: usize = (0..trials)
            .map(|_| sample_graph(5, 0.5, &mut r).unwrap().edge_count())
            .sum();
        let mean = total as f64 / trials as f64;
        // Binomial(10, 0.5): sd of the mean is sqrt(2.5 / 4000) ~ 0.025.
        assert!((mean - 5.0).abs() < 0.1, "mean edge count {mean}");
    }

    #[test]
    fn sampled_graphs_respect_topo_order() {
        let mut r = rng(3);
        for _ in 0..200 {
            let g = sample_graph(8, 0.5, &mut r).unwrap();
            let pos: Vec<usize> = {
                let mut p = vec![0; g.d];
                for (k, &v) in g.topo_order.iter().enumerate() {
                    p[v] = k;
                }
                p
            };
            for i in 0..g.d {
                assert_eq!(g.adjacency[i][i], 0);
                for j in 0..g.d {
                    if g.has_edge(i, j) {
                        assert!(pos[i] < pos[j]);
                    }
                }
            }
            assert!(g.is_acyclic());
        }
    }

    #[test]
    fn empty_graph_scm() {
        let scm = sample_scm(&CausalGraph::empty(4), 0.1, &mut rng(0)).unwrap();
        assert!(scm.weights.iter().flatten().all(|&w| w == 0.0));
        assert_eq!(scm.noise_var, vec![0.1; 4]);
    }

    #[test]
    fn weights_clear_faithfulness_guard() {
        let mut r = rng(4);
        for _ in 0..10_000 {
            let g = sample_graph(5, 0.5, &mut r).unwrap();
            let scm = sample_scm(&g, 0.1, &mut r).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let w = scm.weights[i][j];
                    if g.has_edge(i, j) {
                        assert!(w.abs() >= 0.1);
                    } else {
                        assert_eq!(w, 0.0);
                    }
                }
            }
            assert!(scm.noise_var.iter().all(|&v| v == 0.1));
        }
    }

    #[test]
    fn sample_scm_rejects_nonpositive_guard() {
        assert!(sample_scm(&CausalGraph::empty(2), 0.0, &mut rng(0)).is_err());
    }

    #[test]
    fn empty_graph_marginals_equal_noise_law() {
        let scm = sample_scm(&CausalGraph::empty(3), 0.1, &mut rng(0)).unwrap();
        let (z, _) = ancestral_sample(&scm, 100_000, &mut rng(5)).unwrap();
        for j in 0..3 {
            let var = z.column(j).var(0.0);
            assert!((var / 0.1 - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn chain_variance_matches_closed_form() {
        let g = CausalGraph::from_edges(2, &[(0, 1)]).unwrap();
        let w = 1.7;
        let scm = LinearGaussianScm {
            graph: g,
            weights: vec![vec![0.0, w], vec![0.0, 0.0]],
            noise_var: vec![0.1, 0.1],
        };
        let (z, _) = ancestral_sample(&scm, 100_000, &mut rng(6)).unwrap();
        let expected = 0.1 * (w * w + 1.0);
        let var = z.column(1).var(0.0);
        assert!((var / expected - 1.0).abs() < 0.03, "{var} vs {expected}");
    }

    #[test]
    fn ancestral_sampling_is_deterministic() {
        let g = sample_graph(5, 0.5, &mut rng(7)).unwrap();
        let scm = sample_scm(&g, 0.1, &mut rng(7)).unwrap();
        let a = ancestral_sample(&scm, 50, &mut rng(8)).unwrap();
        let b = ancestral_sample(&scm, 50, &mut rng(8)).unwrap();
        assert_eq!(a, b);
        assert!(ancestral_sample(&scm, 0, &mut rng(8)).is_err());
    }

    #[test]
    fn intervention_on_isolated_node() {
        let scm = sample_scm(&CausalGraph::empty(4), 0.1, &mut rng(0)).unwrap();
        let eps = vec![0.1, -0.2, 0.3, 0.05];
        let z = scm.solve(&eps);
        let (zt, et) = intervene_pair(&scm, &z, &eps, 0, &mut rng(9)).unwrap();
        assert_ne!(zt[0], z[0]);
        assert_eq!(&zt[1..], &z[1..]);
        assert_eq!(&et[1..], &eps[1..]);
    }

    #[test]
    fn intervention_on_chain_root_matches_recomputation() {
        let g = CausalGraph::from_edges(2, &[(0, 1)]).unwrap();
        let scm = LinearGaussianScm {
            graph: g,
            weights: vec![vec![0.0, -0.8], vec![0.0, 0.0]],
            noise_var: vec![0.1, 0.1],
        };
        let eps = vec![0.25, -0.1];
        let z = scm.solve(&eps);
        let (zt, et) = intervene_pair(&scm, &z, &eps, 0, &mut rng(10)).unwrap();
        // brute force: the root has no parents, so its new value is its noise
        let v = et[0];
        assert_eq!(zt[0], v);
        assert_eq!(zt[1], -0.8 * v + eps[1]);
        assert_ne!(zt[0], z[0]);
        assert_ne!(zt[1], z[1]);
        assert_eq!(et[1], eps[1]);
        let again = intervene_pair(&scm, &z, &eps, 0, &mut rng(10)).unwrap();
        assert_eq!(again, (zt, et));
    }

    #[test]
    fn intervention_on_child_cuts_parent_mechanism() {
        let g = CausalGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let scm = sample_scm(&g, 0.1, &mut rng(11)).unwrap();
        let eps = vec![0.3, 0.2, -0.1];
        let z = scm.solve(&eps);
        let (zt, _) = intervene_pair(&scm, &z, &eps, 1, &mut rng(12)).unwrap();
        assert_eq!(zt[0], z[0]);
        assert_eq!(zt[2], scm.weights[1][2] * zt[1] + eps[2]);
    }

    #[test]
    fn intervention_target_out_of_range() {
        let scm = sample_scm(&CausalGraph::empty(2), 0.1, &mut rng(0)).unwrap();
        assert!(matches!(
            intervene_pair(&scm, &[0.0, 0.0], &[0.0, 0.0], 2, &mut rng(0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn projection_basics() {
        let p = sample_projection(OBS_DIM, 5, &mut rng(13)).unwrap();
        let zero = Array1::zeros(5);
        assert!(project_to_observations(zero.view(), p.view())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let mut eye = Array2::zeros((OBS_DIM, 5));
        for i in 0..5 {
            eye[[i, i]] = 1.0;
        }
        let z = Array1::from(vec![1.0, -2.0, 3.0, 0.5, 0.25]);
        let x = project_to_observations(z.view(), eye.view()).unwrap();
        assert_eq!(x.slice(ndarray::s![..5]), z);
        assert!(x.slice(ndarray::s![5..]).iter().all(|&v| v == 0.0));

        let bad = Array2::zeros((OBS_DIM, 4));
        assert!(project_to_observations(z.view(), bad.view()).is_err());
    }

    #[test]
    fn pseudo_inverse_recovers_latents() {
        let p = sample_projection(OBS_DIM, 5, &mut rng(14)).unwrap();
        let pm = DMatrix::from_fn(OBS_DIM, 5, |i, j| p[[i, j]]);
        let pinv = pm.clone().pseudo_inverse(1e-12).unwrap();
        let z = Array1::from(vec![0.3, -1.2, 0.7, 2.0, -0.4]);
        let x = project_to_observations(z.view(), p.view()).unwrap();
        let rec = &pinv * nalgebra::DVector::from_vec(x.to_vec());
        for i in 0..5 {
            assert_relative_eq!(rec[i], z[i], epsilon = 1e-12);
        }
        assert!(condition_number(p.view()) <= MAX_PROJECTION_CONDITION);
    }

    #[test]
    fn dataset_sizes_and_invariants() {
        let cfg = DatasetConfig {
            n_train: 300,
            n_val: 50,
            n_test: 50,
            ..DatasetConfig::paper(5, 3)
        };
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.x.dim(), (400, OBS_DIM));
        assert_eq!(ds.rows(Split::Test), 350..400);
        for i in 0..ds.len() {
            let p = ds.pair(i);
            let desc = ds.scm.graph.descendants(p.target);
            for j in 0..5 {
                if j != p.target {
                    assert_eq!(p.eps[j].to_bits(), p.eps_tilde[j].to_bits());
                    if !desc.contains(&j) {
                        assert_eq!(p.z[j].to_bits(), p.z_tilde[j].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn paper_configuration_sizes() {
        let cfg = DatasetConfig::paper(5, 0);
        assert_eq!(cfg.total(), 120_000);
        assert_eq!(
            (cfg.n_train, cfg.n_val, cfg.n_test),
            (100_000, 10_000, 10_000)
        );
    }

    #[test]
    fn dataset_build_is_pure() {
        let cfg = DatasetConfig {
            n_train: 100,
            n_val: 10,
            n_test: 10,
            ..DatasetConfig::paper(4, 21)
        };
        assert_eq!(build_dataset(&cfg).unwrap(), build_dataset(&cfg).unwrap());
    }

    #[test]
    fn target_histogram_is_uniform() {
        let cfg = DatasetConfig {
            n_train: 10_000,
            n_val: 10,
            n_test: 10,
            ..DatasetConfig::paper(5, 17)
        };
        let ds = build_dataset(&cfg).unwrap();
        let counts = ds.target_histogram(Split::Train);
        let expected = 10_000.0 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-squared, 4 dof, 99.9% quantile is 18.47
        assert!(chi2 < 18.47, "chi2 {chi2}, counts {counts:?}");
    }

    /// Covariance by the recursion `C[j][k] = sum_i w_ij C[i][k]` over a
    /// topological order, independent of any matrix inverse.
    fn recursive_covariance(scm: &LinearGaussianScm) -> Vec<Vec<f64>> {
        let d = scm.d();
        let mut c = vec![vec![0.0; d]; d];
        let order = &scm.graph.topo_order;
        for (a, &j) in order.iter().enumerate() {
            for &k in &order[..a] {
                let v: f64 = (0..d).map(|i| scm.weights[i][j] * c[i][k]).sum();
                c[j][k] = v;
                c[k][j] = v;
            }
            c[j][j] = (0..d).map(|i| scm.weights[i][j] * c[i][j]).sum::<f64>() + scm.noise_var[j];
        }
        c
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn covariance_matches_recursion_and_samples(d in 1usize..7, seed in 0u64..1000) {
            let g = sample_graph(d, 0.5, &mut rng(seed)).unwrap();
            let scm = sample_scm(&g, DEFAULT_W_MIN, &mut rng(seed + 1)).unwrap();
            let closed = scm.covariance();
            let oracle = recursive_covariance(&scm);
            let (z, _) = ancestral_sample(&scm, 40_000, &mut rng(seed + 2)).unwrap();
            let n = z.nrows() as f64;
            let centred = &z - &z.mean_axis(Axis(0)).unwrap();
            let emp = centred.t().dot(&centred) / n;
            for i in 0..d {
                for j in 0..d {
                    let scale = (closed[(i, i)] * closed[(j, j)]).sqrt();
                    proptest::prop_assert!((closed[(i, j)] - oracle[i][j]).abs() <= 1e-9 * scale.max(1.0));
                    // sampling error of a covariance entry is about scale * sqrt(2 / n)
                    proptest::prop_assert!((emp[[i, j]] - closed[(i, j)]).abs() < 0.05 * scale);
                }
            }
        }

        #[test]
        fn interventions_preserve_non_descendants(d in 1usize..8, seed in 0u64..1000, t in 0usize..8) {
            let target = t % d;
            let g = sample_graph(d, 0.5, &mut rng(seed)).unwrap();
            let scm = sample_scm(&g, DEFAULT_W_MIN, &mut rng(seed)).unwrap();
            let (z, eps) = ancestral_sample(&scm, 1, &mut rng(seed + 3)).unwrap();
            let (z, eps) = (z.row(0).to_vec(), eps.row(0).to_vec());
            let (zt, et) = intervene_pair(&scm, &z, &eps, target, &mut rng(seed + 4)).unwrap();
            let desc = g.descendants(target);
            for j in 0..d {
                if j != target {
                    proptest::prop_assert_eq!(eps[j].to_bits(), et[j].to_bits());
                    if !desc.contains(&j) {
                        proptest::prop_assert_eq!(z[j].to_bits(), zt[j].to_bits());
                    }
                }
            }
            proptest::prop_assert_eq!(zt[target], et[target]);
        }
    }
}
