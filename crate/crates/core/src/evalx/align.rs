use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matching of learned latents to ground-truth factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `perm[j]` is the latent column matched to factor `j`.
    pub perm: Vec<usize>,
    /// Sign of the rank correlation of each matched pair.
    pub signs: Vec<f64>,
    /// `|Spearman|` of each matched pair.
    pub scores: Vec<f64>,
    /// Latent columns that are constant (zero correlation with everything).
    pub constant_latents: Vec<usize>,
}

impl Alignment {
    pub fn identity(d: usize) -> Self {
        Alignment {
            perm: (0..d).collect(),
            signs: vec![1.0; d],
            scores: vec![1.0; d],
            constant_latents: Vec::new(),
        }
    }

    pub fn mean_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }

    /// Factor matched to a latent column, if any.
    pub fn factor_of(&self, latent: usize) -> Option<usize> {
        self.perm.iter().position(|&p| p == latent)
    }

    /// Latent columns reordered (and sign-flipped) to line up with factors.
    pub fn apply(&self, latents: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((latents.nrows(), self.perm.len()));
        for (j, (&p, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
            out.column_mut(j).assign(&latents.column(p).mapv(|v| v * s));
        }
        out
    }
}

/// Average ranks (ties share their mean rank), 0-based.
pub fn ranks(v: ArrayView1<f64>) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `corr[i][j]` = Spearman correlation of latent `i` and factor `j`
/// (0 when either column is constant).
pub fn spearman_matrix(latents: ArrayView2<f64>, factors: ArrayView2<f64>) -> Array2<f64> {
    let lr: Vec<Vec<f64>> = latents.axis_iter(Axis(1)).map(ranks).collect();
    let fr: Vec<Vec<f64>> = factors.axis_iter(Axis(1)).map(ranks).collect();
    Array2::from_shape_fn((lr.len(), fr.len()), |(i, j)| {
        pearson(&lr[i], &fr[j]).unwrap_or(0.0)
    })
}

const SCALE: f64 = 1e12;

/// Assignment of latents to factors maximizing total `|Spearman|`.
pub fn align_latents(latents: ArrayView2<f64>, factors: ArrayView2<f64>) -> Result<Alignment> {
    let (n, dl) = latents.dim();
    let (nf, d) = factors.dim();
    if n != nf {
        return Err(Error::invalid(format!(
            "{n} latent rows vs {nf} factor rows"
        )));
    }
    if d == 0 || dl < d {
        return Err(Error::invalid(format!(
            "need at least {d} latent columns, got {dl}"
        )));
    }
    if n < d {
        return Err(Error::invalid(format!(
            "need at least {d} samples, got {n}"
        )));
    }
    let corr = spearman_matrix(latents, factors);
    let constant_latents: Vec<usize> = (0..dl)
        .filter(|&i| {
            let c = latents.column(i);
            c.iter().all(|&v| v == c[0])
        })
        .collect();
    // rows = factors, columns = latents (kuhn_munkres needs rows <= columns)
    let weights = Matrix::from_fn(d, dl, |(j, i)| (corr[[i, j]].abs() * SCALE).round() as i64);
    let (_, assignment) = kuhn_munkres(&weights);
    let signs = assignment
        .iter()
        .enumerate()
        .map(|(j, &i)| if corr[[i, j]] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let scores = assignment
        .iter()
        .enumerate()
        .map(|(j, &i)| corr[[i, j]].abs())
        .collect();
    Ok(Alignment {
        perm: assignment,
        signs,
        scores,
        constant_latents,
    })
}
