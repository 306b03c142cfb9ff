//! Interventional structure learning with separate edge-existence and
//! orientation beliefs, updated from likelihood contrasts between sampled
//! graphs. Conditionals are linear-Gaussian regressions fitted in closed
//! form on the observational sample, so distribution fitting is exact and
//! cached per `(node, parent set)`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView1, ArrayView2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoConfig {
    pub alternations: usize,
    pub steps_per_alternation: usize,
    pub graph_samples: usize,
    pub batch_size: usize,
    pub sparsity: f64,
    pub lr: f64,
    /// Minimum interventional samples per node.
    pub min_count: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for EncoConfig {
    fn default() -> Self {
        EncoConfig {
            alternations: 20,
            steps_per_alternation: 100,
            graph_samples: 100,
            batch_size: 128,
            sparsity: 0.004,
            lr: 0.05,
            min_count: 20,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedGraph {
    pub adjacency: Vec<Vec<u8>>,
    /// `sigmoid(gamma_ij)`: belief that `i` and `j` are adjacent as `i -> j`.
    pub edge_scores: Vec<Vec<f64>>,
    /// `sigmoid(theta_ij)`: belief that the pair is oriented `i -> j`.
    pub orientation_scores: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Linear-Gaussian regression of one node on a parent set.
#[derive(Debug, Clone)]
struct Regression {
    parents: Vec<usize>,
    coef: Vec<f64>,
    log_var: f64,
}

/// Observational moments and a cache of fitted conditionals.
struct Conditionals {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    cache: HashMap<(usize, u64), Regression>,
}

impl Conditionals {
    fn new(obs: ArrayView2<f64>) -> Self {
        let (n, d) = obs.dim();
        let mean: Vec<f64> = (0..d).map(|j| obs.column(j).sum() / n as f64).collect();
        let mut cov = DMatrix::zeros(d, d);
        for row in obs.rows() {
            for a in 0..d {
                let da = row[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / n as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        Conditionals {
            mean,
            cov,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, node: usize, mask: u64) -> &Regression {
        let cov = &self.cov;
        self.cache.entry((node, mask)).or_insert_with(|| {
            let parents: Vec<usize> = (0..cov.nrows()).filter(|&p| mask >> p & 1 == 1).collect();
            let k = parents.len();
            let var_floor = 1e-8 * cov[(node, node)].max(1e-12);
            if k == 0 {
                return Regression {
                    parents,
                    coef: Vec::new(),
                    log_var: cov[(node, node)].max(var_floor).ln(),
                };
            }
            let sxx = DMatrix::from_fn(k, k, |a, b| cov[(parents[a], parents[b])]);
            let sxy = DVector::from_fn(k, |a, _| cov[(parents[a], node)]);
            let ridge = 1e-10 * (sxx.trace() / k as f64).max(1e-12);
            let reg = &sxx + DMatrix::identity(k, k) * ridge;
            let coef = match reg.clone().cholesky() {
                Some(ch) => ch.solve(&sxy),
                None => reg
                    .svd(true, true)
                    .solve(&sxy, 1e-12)
                    .unwrap_or_else(|_| DVector::zeros(k)),
            };
            let var = cov[(node, node)] - sxy.dot(&coef);
            Regression {
                parents,
                coef: coef.iter().copied().collect(),
                log_var: var.max(var_floor).ln(),
            }
        })
    }
}

/// Mean Gaussian NLL of `node` given parent `mask` over a batch summarized by
/// its second moments `m2` of observation-centred values.
fn batch_nll(reg: &Regression, node: usize, m2: &DMatrix<f64>) -> f64 {
    let mut r2 = m2[(node, node)];
    for (a, &pa) in reg.parents.iter().enumerate() {
        r2 -= 2.0 * reg.coef[a] * m2[(node, pa)];
        for (b, &pb) in reg.parents.iter().enumerate() {
            r2 += reg.coef[a] * reg.coef[b] * m2[(pa, pb)];
        }
    }
    0.5 * (std::f64::consts::TAU.ln() + reg.log_var) + 0.5 * r2 / reg.log_var.exp()
}

/// Adam state for a flat parameter vector.
struct AdamVec {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl AdamVec {
    fn new(n: usize, lr: f64) -> Self {
        AdamVec {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], touched: &[bool]) {
        self.t += 1;
        // short second-moment memory: early contrasts are orders of magnitude
        // larger than the sparsity pull that later prunes shortcut edges
        let (b1, b2) = (0.9f64, 0.9f64);
        for k in 0..params.len() {
            if !touched[k] {
                continue;
            }
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * grads[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * grads[k] * grads[k];
            let mh = self.m[k] / (1.0 - b1.powi(self.t));
            let vh = self.v[k] / (1.0 - b2.powi(self.t));
            params[k] -= self.lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

fn check_coverage(targets: &[usize], d: usize, min_count: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_node = vec![Vec::new(); d];
    for (r, &t) in targets.iter().enumerate() {
        if t >= d {
            return Err(Error::invalid(format!("target {t} out of range for d={d}")));
        }
        by_node[t].push(r);
    }
    let short: Vec<usize> = (0..d).filter(|&k| by_node[k].len() < min_count).collect();
    if !short.is_empty() {
        return Err(Error::InsufficientCoverage {
            nodes: short,
            min_count,
        });
    }
    Ok(by_node)
}

/// Learns a DAG over `d` variables from pre-intervention samples `z_pre`,
/// post-intervention samples `z_post` and the intervened node of each pair.
pub fn enco_learn(
    z_pre: ArrayView2<f64>,
    z_post: ArrayView2<f64>,
    targets: &[usize],
    config: &EncoConfig,
) -> Result<LearnedGraph> {
    let (n, d) = z_pre.dim();
    if z_post.dim() != (n, d) || targets.len() != n {
        return Err(Error::invalid(
            "z_pre, z_post and targets must have matching rows",
        ));
    }
    if d == 0 || d > 63 {
        return Err(Error::invalid(format!("unsupported dimension {d}")));
    }
    if z_pre.iter().chain(z_post.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "structure learner inputs".into(),
        });
    }
    if config.graph_samples == 0 || config.batch_size == 0 {
        return Err(Error::invalid(
            "graph_samples and batch_size must be positive",
        ));
    }
    let by_node = check_coverage(targets, d, config.min_count.max(1))?;
    let mut conds = Conditionals::new(z_pre);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let idx = |i: usize, j: usize| i * d + j;
    let mut gamma = vec![0.0; d * d];
    // theta[i][j] = -theta[j][i]; only i < j entries are free
    let mut theta = vec![0.0; d * d];
    let mut opt_gamma = AdamVec::new(d * d, config.lr);
    let mut opt_theta = AdamVec::new(d * d, config.lr);
    let total_steps = config.alternations * config.steps_per_alternation;

    // masks[s * d + j]: parents of node j in sampled graph s
    let mut masks = vec![0u64; config.graph_samples * d];
    let mut nll = vec![0.0; config.graph_samples * d];
    let mut order: Vec<usize> = (0..d).collect();
    for step in 0..total_steps {
        if step % d == 0 {
            order.shuffle(&mut rng);
        }
        let k = order[step % d];
        let rows = &by_node[k];
        let batch: Vec<usize> = if rows.len() <= config.batch_size {
            rows.clone()
        } else {
            rows.choose_multiple(&mut rng, config.batch_size)
                .copied()
                .collect()
        };
        let m2 = second_moments(z_post, &batch, &conds.mean);

        let probs: Vec<f64> = (0..d * d)
            .map(|e| sigmoid(gamma[e]) * sigmoid(theta[e]))
            .collect();
        for s in 0..config.graph_samples {
            for j in 0..d {
                let mut mask = 0u64;
                for i in 0..d {
                    if i != j && rng.random::<f64>() < probs[idx(i, j)] {
                        mask |= 1 << i;
                    }
                }
                masks[s * d + j] = mask;
                nll[s * d + j] = if j == k {
                    0.0
                } else {
                    batch_nll(conds.get(j, mask), j, &m2)
                };
            }
        }

        let mut g_gamma = vec![0.0; d * d];
        let mut g_theta = vec![0.0; d * d];
        let mut touched_gamma = vec![false; d * d];
        let mut touched_theta = vec![false; d * d];
        for j in 0..d {
            if j == k {
                continue;
            }
            for i in 0..d {
                if i == j {
                    continue;
                }
                let (mut sp, mut np, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
                for s in 0..config.graph_samples {
                    let v = nll[s * d + j];
                    if masks[s * d + j] >> i & 1 == 1 {
                        sp += v;
                        np += 1;
                    } else {
                        sn += v;
                        nn += 1;
                    }
                }
                if np == 0 || nn == 0 {
                    continue;
                }
                let diff = sp / np as f64 - sn / nn as f64;
                let sg = sigmoid(gamma[idx(i, j)]);
                let st = sigmoid(theta[idx(i, j)]);
                g_gamma[idx(i, j)] = sg * (1.0 - sg) * st * (diff + config.sparsity);
                touched_gamma[idx(i, j)] = true;
                if i == k {
                    // orientation of the pair (k, j) from an intervention on k
                    let grad = st * (1.0 - st) * sg * diff;
                    let (a, b) = if k < j { (k, j) } else { (j, k) };
                    let sign = if k < j { 1.0 } else { -1.0 };
                    g_theta[idx(a, b)] += sign * grad;
                    touched_theta[idx(a, b)] = true;
                }
            }
        }
        opt_gamma.step(&mut gamma, &g_gamma, &touched_gamma);
        opt_theta.step(&mut theta, &g_theta, &touched_theta);
        for a in 0..d {
            for b in a + 1..d {
                theta[idx(b, a)] = -theta[idx(a, b)];
            }
        }
    }

    let mut adjacency = vec![vec![0u8; d]; d];
    let mut edge_scores = vec![vec![0.0; d]; d];
    let mut orientation_scores = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let sg = sigmoid(gamma[idx(i, j)]);
            let st = sigmoid(theta[idx(i, j)]);
            edge_scores[i][j] = sg;
            orientation_scores[i][j] = st;
            adjacency[i][j] = (sg > config.threshold && st > config.threshold) as u8;
        }
    }
    Ok(LearnedGraph {
        adjacency,
        edge_scores,
        orientation_scores,
    })
}

fn second_moments(z: ArrayView2<f64>, rows: &[usize], mean: &[f64]) -> DMatrix<f64> {
    let d = mean.len();
    let mut m2 = DMatrix::zeros(d, d);
    let mut centred = vec![0.0; d];
    for &r in rows {
        let row: ArrayView1<f64> = z.row(r);
        for a in 0..d {
            centred[a] = row[a] - mean[a];
        }
        for a in 0..d {
            for b in a..d {
                m2[(a, b)] += centred[a] * centred[b];
            }
        }
    }
    let n = rows.len().max(1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = m2[(a, b)] / n;
            m2[(a, b)] = v;
            m2[(b, a)] = v;
        }
    }
    m2
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    /// Pairs from a linear-Gaussian SCM with `w[i][j]` the weight of `i -> j`
    /// (only `i < j` is used, so index order is topological); the target is resampled from `N(0, 1)`.
    fn pairs(w: &[Vec<f64>], n: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
        let d = w.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pre = Array2::zeros((n, d));
        let mut post = Array2::zeros((n, d));
        let mut targets = Vec::with_capacity(n);
        for r in 0..n {
            let k = rng.random_range(0..d);
            targets.push(k);
            let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let fresh: f64 = StandardNormal.sample(&mut rng);
            for j in 0..d {
                let parent_sum = |z: &Array2<f64>| (0..j).map(|i| w[i][j] * z[[r, i]]).sum::<f64>();
                pre[[r, j]] = parent_sum(&pre) + eps[j];
                post[[r, j]] = if j == k {
                    fresh
                } else {
                    parent_sum(&post) + eps[j]
                };
            }
        }
        (pre, post, targets)
    }

    fn learn(w: &[Vec<f64>], n: usize) -> Vec<Vec<u8>> {
        let (pre, post, t) = pairs(w, n, 11);
        enco_learn(pre.view(), post.view(), &t, &EncoConfig::default())
            .unwrap()
            .adjacency
    }

    fn support(w: &[Vec<f64>]) -> Vec<Vec<u8>> {
        w.iter()
            .map(|r| r.iter().map(|&v| (v != 0.0) as u8).collect())
            .collect()
    }

    #[test]
    fn recovers_chain() {
        let w = vec![vec![0.0, 0.8, 0.0], vec![0.0, 0.0, -0.9], vec![0.0; 3]];
        assert_eq!(learn(&w, 10_000), support(&w));
    }

    #[test]
    fn recovers_collider_and_fork() {
        let w = vec![
            vec![0.0, 0.7, 0.0, 1.0],
            vec![0.0, 0.0, 0.9, -0.6],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.0; 4],
        ];
        assert_eq!(learn(&w, 10_000), support(&w));
    }

    #[test]
    fn independent_variables_give_empty_graph() {
        let w = vec![vec![0.0; 4]; 4];
        assert_eq!(learn(&w, 10_000), support(&w));
    }

    #[test]
    fn orients_two_nodes_either_way() {
        let w = vec![vec![0.0, 1.2], vec![0.0, 0.0]];
        let (pre, post, t) = pairs(&w, 4_000, 3);
        let g = enco_learn(pre.view(), post.view(), &t, &EncoConfig::default()).unwrap();
        assert_eq!(g.adjacency, vec![vec![0, 1], vec![0, 0]]);
        assert!(g.orientation_scores[0][1] > 0.9);
        // same data with columns swapped: the edge must flip
        let swap = |a: &Array2<f64>| a.select(ndarray::Axis(1), &[1, 0]);
        let t2: Vec<usize> = t.iter().map(|&k| 1 - k).collect();
        let g2 = enco_learn(
            swap(&pre).view(),
            swap(&post).view(),
            &t2,
            &EncoConfig::default(),
        )
        .unwrap();
        assert_eq!(g2.adjacency, vec![vec![0, 0], vec![1, 0]]);
    }

    #[test]
    fn relabeling_nodes_permutes_graph() {
        let w = vec![vec![0.0, 0.8, 0.0], vec![0.0, 0.0, -0.9], vec![0.0; 3]];
        let (pre, post, t) = pairs(&w, 10_000, 5);
        let perm = [2usize, 0, 1];
        let inv = [1usize, 2, 0];
        let pp = pre.select(ndarray::Axis(1), &perm);
        let qp = post.select(ndarray::Axis(1), &perm);
        let tp: Vec<usize> = t.iter().map(|&k| inv[k]).collect();
        let a = enco_learn(pre.view(), post.view(), &t, &EncoConfig::default())
            .unwrap()
            .adjacency;
        let b = enco_learn(pp.view(), qp.view(), &tp, &EncoConfig::default())
            .unwrap()
            .adjacency;
        assert_eq!(crate::evalx::permute_adjacency(&a, &perm), b);
    }

    #[test]
    fn input_errors() {
        let w = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let (pre, post, mut t) = pairs(&w, 200, 0);
        for k in t.iter_mut() {
            *k = 0;
        }
        let err = enco_learn(pre.view(), post.view(), &t, &EncoConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientCoverage { ref nodes, .. } if nodes == &vec![1]));
        assert!(enco_learn(pre.view(), post.view(), &t[..10], &EncoConfig::default()).is_err());
        t[0] = 5;
        assert!(enco_learn(pre.view(), post.view(), &t, &EncoConfig::default()).is_err());
        let mut bad = pre.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(enco_learn(bad.view(), post.view(), &t, &EncoConfig::default()).is_err());
    }
}

