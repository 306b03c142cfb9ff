use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShdMode {
    /// Sum of absolute entry differences; a reversed edge costs 2.
    #[default]
    AbsoluteDifference,
    /// Additions, deletions and reversals each cost 1.
    EditCount,
}

fn check(a: &[Vec<u8>], b: &[Vec<u8>]) -> Result<usize> {
    let d = a.len();
    let square = |m: &[Vec<u8>]| m.iter().all(|r| r.len() == m.len());
    if b.len() != d || !square(a) || !square(b) {
        return Err(Error::ShapeMismatch {
            name: "adjacency".into(),
            expected: vec![d, d],
            found: vec![b.len(), b.first().map_or(0, |r| r.len())],
        });
    }
    if a.iter().chain(b).flatten().any(|&v| v > 1) {
        return Err(Error::invalid("adjacency entries must be 0 or 1"));
    }
    Ok(d)
}

/// Structural Hamming distance between two binary adjacency matrices.
pub fn shd(a: &[Vec<u8>], b: &[Vec<u8>], mode: ShdMode) -> Result<usize> {
    let d = check(a, b)?;
    let mut total = 0;
    match mode {
        ShdMode::AbsoluteDifference => {
            for i in 0..d {
                for j in 0..d {
                    total += (a[i][j] != b[i][j]) as usize;
                }
            }
        }
        ShdMode::EditCount => {
            for i in 0..d {
                if a[i][i] != b[i][i] {
                    total += 1;
                }
                for j in i + 1..d {
                    let pa = (a[i][j], a[j][i]);
                    let pb = (b[i][j], b[j][i]);
                    if pa == pb {
                        continue;
                    }
                    let reversed = pa.0 != pa.1 && pb.0 != pb.1 && pa == (pb.1, pb.0);
                    total += if reversed {
                        1
                    } else {
                        (pa.0 != pb.0) as usize + (pa.1 != pb.1) as usize
                    };
                }
            }
        }
    }
    Ok(total)
}

/// `out[i][j] = adj[perm[i]][perm[j]]`: relabels node `perm[i]` as `i`.
pub fn permute_adjacency(adj: &[Vec<u8>], perm: &[usize]) -> Vec<Vec<u8>> {
    perm.iter()
        .map(|&pi| perm.iter().map(|&pj| adj[pi][pj]).collect())
        .collect()
}
