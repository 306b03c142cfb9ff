use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings of the regression-tree ensemble behind the importance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DciConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Fraction of rows each tree sees, drawn without replacement so that
    /// continuous latents never carry duplicate split values.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for DciConfig {
    fn default() -> Self {
        DciConfig {
            n_trees: 10,
            max_depth: 5,
            min_samples_leaf: 50,
            subsample: 0.8,
            seed: 0,
        }
    }
}

/// Importance matrix `R` (latents x factors) with the derived scores.
#[derive(Debug, Clone, PartialEq)]
pub struct DciResult {
    pub disentanglement: f64,
    pub completeness: f64,
    pub importance: Array2<f64>,
    pub per_latent: Vec<f64>,
    pub per_factor: Vec<f64>,
    pub warnings: Vec<String>,
}

fn sse(sum: f64, sum_sq: f64, n: f64) -> f64 {
    sum_sq - sum * sum / n
}

struct TreeBuilder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    importance: Vec<f64>,
}

impl TreeBuilder<'_> {
    /// Greedy CART growth; only the impurity decrease per feature is kept.
    fn grow(&mut self, rows: &mut [usize], depth: usize) {
        let n = rows.len();
        if depth >= self.max_depth || n < 2 * self.min_leaf {
            return;
        }
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let total_sq: f64 = rows.iter().map(|&r| self.y[r] * self.y[r]).sum();
        let parent = sse(total, total_sq, n as f64);
        if parent <= 0.0 {
            return;
        }
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for f in 0..self.x.ncols() {
            let col = self.x.column(f);
            sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            let (mut ls, mut lq) = (0.0, 0.0);
            for k in 0..n - 1 {
                let yv = self.y[sorted[k]];
                ls += yv;
                lq += yv * yv;
                let nl = k + 1;
                if nl < self.min_leaf || n - nl < self.min_leaf {
                    continue;
                }
                let (a, b) = (col[sorted[k]], col[sorted[k + 1]]);
                if a == b {
                    continue;
                }
                let child =
                    sse(ls, lq, nl as f64) + sse(total - ls, total_sq - lq, (n - nl) as f64);
                let gain = parent - child;
                if best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((gain, f, threshold)) = best else {
            return;
        };
        if gain <= 0.0 {
            return;
        }
        self.importance[f] += gain;
        let col = self.x.column(f);
        let split = partition(rows, |r| col[r] <= threshold);
        let (left, right) = rows.split_at_mut(split);
        self.grow(left, depth + 1);
        self.grow(right, depth + 1);
    }
}

fn partition(rows: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut k = 0;
    for i in 0..rows.len() {
        if pred(rows[i]) {
            rows.swap(i, k);
            k += 1;
        }
    }
    k
}

fn standardize(v: ArrayView1<f64>) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let m = v.sum() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    (s > 0.0).then(|| v.iter().map(|x| (x - m) / s).collect())
}

/// Impurity-decrease importances of a bagged regression-tree ensemble
/// predicting each factor from all latents; each non-degenerate column is
/// normalized to sum to one.
pub fn importance_matrix(
    latents: ArrayView2<f64>,
    factors: ArrayView2<f64>,
    config: &DciConfig,
) -> Result<Array2<f64>> {
    let (n, dl) = latents.dim();
    let (nf, df) = factors.dim();
    if n != nf {
        return Err(Error::invalid(format!(
            "{n} latent rows vs {nf} factor rows"
        )));
    }
    if dl == 0 || df == 0 {
        return Err(Error::invalid("empty latent or factor set"));
    }
    if n < 10 * dl.max(df) {
        return Err(Error::invalid(format!(
            "need at least {} samples, got {n}",
            10 * dl.max(df)
        )));
    }
    if config.n_trees == 0 || config.min_samples_leaf == 0 {
        return Err(Error::invalid(
            "n_trees and min_samples_leaf must be positive",
        ));
    }
    if !(config.subsample > 0.0 && config.subsample <= 1.0) {
        return Err(Error::invalid(format!(
            "subsample {} outside (0, 1]",
            config.subsample
        )));
    }
    let take = ((n as f64 * config.subsample).round() as usize).max(1);
    if latents.iter().chain(factors.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "DCI inputs".into(),
        });
    }
    let mut r = Array2::zeros((dl, df));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for j in 0..df {
        let Some(y) = standardize(factors.column(j)) else {
            continue;
        };
        let mut builder = TreeBuilder {
            x: latents,
            y: &y,
            max_depth: config.max_depth,
            min_leaf: config.min_samples_leaf,
            importance: vec![0.0; dl],
        };
        for _ in 0..config.n_trees {
            let mut rows = if config.subsample < 1.0 {
                rand::seq::index::sample(&mut rng, n, take).into_vec()
            } else {
                (0..n).collect()
            };
            builder.grow(&mut rows, 0);
        }
        let total: f64 = builder.importance.iter().sum();
        if total > 0.0 {
            for i in 0..dl {
                r[[i, j]] = builder.importance[i] / total;
            }
        }
    }
    Ok(r)
}

fn entropy_base(p: impl Iterator<Item = f64>, base: usize) -> f64 {
    if base <= 1 {
        return 0.0;
    }
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / (base as f64).ln()
}

/// Disentanglement and completeness from a nonnegative importance matrix.
pub fn dci_from_importance(r: &Array2<f64>) -> Result<DciResult> {
    if r.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("importances must be finite and nonnegative"));
    }
    let (dl, df) = r.dim();
    let total = r.sum();
    let mut warnings = Vec::new();
    let mut per_latent = vec![0.0; dl];
    let mut disentanglement = 0.0;
    for i in 0..dl {
        let row = r.row(i);
        let s = row.sum();
        if s > 0.0 {
            per_latent[i] = 1.0 - entropy_base(row.iter().map(|v| v / s), df);
            disentanglement += s / total * per_latent[i];
        }
    }
    let mut per_factor = vec![0.0; df];
    let mut completeness = 0.0;
    for j in 0..df {
        let col = r.column(j);
        let s = col.sum();
        if s > 0.0 {
            per_factor[j] = 1.0 - entropy_base(col.iter().map(|v| v / s), dl);
            completeness += s / total * per_factor[j];
        } else {
            warnings.push(format!(
                "factor {j} has zero total importance; completeness set to 0"
            ));
        }
    }
    if total <= 0.0 {
        disentanglement = 0.0;
        completeness = 0.0;
    }
    Ok(DciResult {
        disentanglement: disentanglement.clamp(0.0, 1.0),
        completeness: completeness.clamp(0.0, 1.0),
        importance: r.clone(),
        per_latent,
        per_factor,
        warnings,
    })
}

pub fn dci_scores(
    latents: ArrayView2<f64>,
    factors: ArrayView2<f64>,
    config: &DciConfig,
) -> Result<DciResult> {
    let r = importance_matrix(latents, factors, config)?;
    dci_from_importance(&r)
}
