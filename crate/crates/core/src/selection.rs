//! Rules turning influence scores or geometry into a column subset.
//!
//! Every rule breaks ties by the lower column index, so results are
//! reproducible.

use nalgebra::DVector;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::trajectory::{ColumnSubset, HankelSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionRule {
    Topk { k: usize },
    Threshold,
    Budget { budget: f64 },
    L1Nearest { k: usize },
    RandomUniform { k: usize },
}

fn check_k(k: usize, columns: usize) -> Result<()> {
    if k == 0 || k > columns {
        Err(Error::KOutOfRange { k, columns })
    } else {
        Ok(())
    }
}

/// Column order by ascending score, ties by index.
fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

fn k_smallest(scores: &[f64], k: usize) -> ColumnSubset {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    ColumnSubset::new(idx, scores.len()).expect("indices are unique and in range")
}

/// The `k` columns with the smallest influence coefficients.
pub fn select_topk(theta: &[f64], k: usize) -> Result<ColumnSubset> {
    check_k(k, theta.len())?;
    Ok(k_smallest(theta, k))
}

/// All columns with strictly negative influence. May be empty.
pub fn select_threshold(theta: &[f64]) -> ColumnSubset {
    let idx = theta.iter().enumerate().filter(|(_, &t)| t < 0.0).map(|(j, _)| j).collect();
    ColumnSubset::new(idx, theta.len()).expect("indices are increasing")
}

/// Longest prefix of the ascending-influence order whose cumulative sum stays
/// at or below `budget`.
pub fn select_budget(theta: &[f64], budget: f64) -> ColumnSubset {
    let mut total = 0.0;
    let mut chosen = Vec::new();
    for j in ascending_order(theta) {
        total += theta[j];
        if total > budget {
            break;
        }
        chosen.push(j);
    }
    ColumnSubset::from_unsorted(chosen, theta.len()).expect("indices are in range")
}

/// The `k` columns whose past window `[Up; Yp]` is closest in L1 norm to the
/// current initial trajectory.
pub fn select_l1(h: &HankelSet, u_ini: &DVector<f64>, y_ini: &DVector<f64>, k: usize) -> Result<ColumnSubset> {
    if u_ini.len() != h.up.nrows() || y_ini.len() != h.yp.nrows() {
        return Err(Error::dims("initial trajectory does not match the Hankel past block"));
    }
    check_k(k, h.columns())?;
    let dist: Vec<f64> = (0..h.columns())
        .map(|j| {
            let du: f64 = h.up.column(j).iter().zip(u_ini.iter()).map(|(a, b)| (a - b).abs()).sum();
            let dy: f64 = h.yp.column(j).iter().zip(y_ini.iter()).map(|(a, b)| (a - b).abs()).sum();
            du + dy
        })
        .collect();
    Ok(k_smallest(&dist, k))
}

/// `k` of `columns` indices drawn uniformly without replacement.
pub fn select_random(columns: usize, k: usize, seed: u64) -> Result<ColumnSubset> {
    check_k(k, columns)?;
    let mut rng = rng_from_seed(seed);
    let idx = sample(&mut rng, columns, k).into_vec();
    ColumnSubset::from_unsorted(idx, columns)
}
