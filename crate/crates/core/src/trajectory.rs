//! Input/output records, block-Hankel matrices and column subsets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative singular-value tolerance for [`excitation_rank`].
pub const RANK_TOLERANCE: f64 = 1e-9;

/// A time-indexed input/output record from one plant rollout.
///
/// Step `k` is stored as column `k` of `inputs` (m × T) and `outputs` (p × T).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    dt: f64,
}

impl Trajectory {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>, dt: f64) -> Result<Self> {
        if inputs.ncols() != outputs.ncols() {
            return Err(Error::dims(format!(
                "{} input steps vs {} output steps",
                inputs.ncols(),
                outputs.ncols()
            )));
        }
        if inputs.ncols() == 0 {
            return Err(Error::Empty("trajectory"));
        }
        if inputs.nrows() == 0 || outputs.nrows() == 0 {
            return Err(Error::dims("input and output dimensions must be at least 1"));
        }
        Ok(Self { inputs, outputs, dt })
    }

    /// Builds a trajectory from per-step vectors.
    pub fn from_steps(inputs: &[DVector<f64>], outputs: &[DVector<f64>], dt: f64) -> Result<Self> {
        let m = inputs.first().map_or(0, |v| v.len());
        let p = outputs.first().map_or(0, |v| v.len());
        if inputs.iter().any(|v| v.len() != m) || outputs.iter().any(|v| v.len() != p) {
            return Err(Error::dims("step vectors of varying dimension"));
        }
        let u = DMatrix::from_fn(m, inputs.len(), |i, k| inputs[k][i]);
        let y = DMatrix::from_fn(p, outputs.len(), |i, k| outputs[k][i]);
        Self::new(u, y, dt)
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    /// Stacked inputs `u_start, ..., u_{start+len-1}`.
    pub fn input_window(&self, start: usize, len: usize) -> DVector<f64> {
        stack_window(&self.inputs, start, len)
    }

    /// Stacked outputs `y_start, ..., y_{start+len-1}`.
    pub fn output_window(&self, start: usize, len: usize) -> DVector<f64> {
        stack_window(&self.outputs, start, len)
    }

    /// Writes the CSV body (`k,u_0..,y_0..`) to `path`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let (m, p) = (self.input_dim(), self.output_dim());
        let mut out = String::from("k");
        for i in 0..m {
            let _ = write!(out, ",u_{i}");
        }
        for i in 0..p {
            let _ = write!(out, ",y_{i}");
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{k}");
            for v in self.inputs.column(k).iter().chain(self.outputs.column(k).iter()) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses a CSV written by [`Trajectory::to_csv`]. The sampling period is
    /// not part of the CSV and must be supplied (usually from the sidecar).
    pub fn from_csv(text: &str, dt: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("trajectory csv", "missing header"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"k") {
            return Err(Error::format("trajectory csv", "header must start with `k`"));
        }
        let m = cols.iter().filter(|c| c.starts_with("u_")).count();
        let p = cols.iter().filter(|c| c.starts_with("y_")).count();
        if m + p + 1 != cols.len() {
            return Err(Error::format("trajectory csv", format!("unexpected header `{header}`")));
        }
        let mut u = Vec::new();
        let mut y = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("trajectory csv", format!("row {row}: {e}")))?;
            if vals.len() != m + p {
                return Err(Error::format("trajectory csv", format!("row {row} has {} values", vals.len())));
            }
            u.extend_from_slice(&vals[..m]);
            y.extend_from_slice(&vals[m..]);
        }
        let t = u.len() / m.max(1);
        Self::new(DMatrix::from_column_slice(m, t, &u), DMatrix::from_column_slice(p, t, &y), dt)
    }
}

fn stack_window(data: &DMatrix<f64>, start: usize, len: usize) -> DVector<f64> {
    let block = data.columns(start, len);
    DVector::from_iterator(block.len(), block.iter().copied())
}

/// Key/value sidecar stored next to each trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub m: usize,
    pub p: usize,
    pub dt: f64,
    pub seed: u64,
    /// Reset state the rollout started from, when known.
    pub x0: Option<Vec<f64>>,
}

impl TrajectoryMeta {
    pub fn to_text(&self) -> String {
        let mut out = format!("m={}\np={}\ndt={}\nseed={}\n", self.m, self.p, self.dt, self.seed);
        if let Some(x0) = &self.x0 {
            let joined: Vec<String> = x0.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "x0={}", joined.join(","));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |key: &str| {
            map.get(key)
                .copied()
                .ok_or_else(|| Error::format("trajectory metadata", format!("missing `{key}`")))
        };
        let bad = |key: &str| Error::format("trajectory metadata", format!("bad value for `{key}`"));
        let x0 = match map.get("x0") {
            Some(v) if !v.is_empty() => Some(
                v.split(',')
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("x0"))?,
            ),
            _ => None,
        };
        Ok(Self {
            m: get("m")?.parse().map_err(|_| bad("m"))?,
            p: get("p")?.parse().map_err(|_| bad("p"))?,
            dt: get("dt")?.parse().map_err(|_| bad("dt"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            x0,
        })
    }
}

/// Where a Hankel column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSource {
    pub trajectory: usize,
    pub offset: usize,
}

/// Partitioned block-Hankel data `(U_p, Y_p, U_f, Y_f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelSet {
    pub up: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub t_ini: usize,
    pub horizon: usize,
    pub sources: Vec<ColumnSource>,
}

impl HankelSet {
    pub fn columns(&self) -> usize {
        self.up.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.up.nrows() / self.t_ini
    }

    pub fn output_dim(&self) -> usize {
        self.yp.nrows() / self.t_ini
    }

    pub fn window(&self) -> usize {
        self.t_ini + self.horizon
    }

    /// `[Up; Yp; Uf; Yf]` stacked vertically.
    pub fn stacked(&self) -> DMatrix<f64> {
        let rows = self.up.nrows() + self.yp.nrows() + self.uf.nrows() + self.yf.nrows();
        let mut out = DMatrix::zeros(rows, self.columns());
        let mut r = 0;
        for block in [&self.up, &self.yp, &self.uf, &self.yf] {
            out.rows_mut(r, block.nrows()).copy_from(block);
            r += block.nrows();
        }
        out
    }

    /// The full index set `{0, .., M-1}`.
    pub fn all_columns(&self) -> ColumnSubset {
        ColumnSubset {
            indices: (0..self.columns()).collect(),
        }
    }
}

/// Strictly increasing set of column indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ColumnSubset {
    indices: Vec<usize>,
}

impl ColumnSubset {
    /// Validates that `indices` is strictly increasing and below `columns`.
    pub fn new(indices: Vec<usize>, columns: usize) -> Result<Self> {
        if let Some(&last) = indices.last() {
            if last >= columns {
                return Err(Error::IndexOutOfRange { index: last, columns });
            }
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSubset("indices must be strictly increasing".into()));
        }
        Ok(Self { indices })
    }

    /// Sorts and deduplicates arbitrary indices.
    pub fn from_unsorted(mut indices: Vec<usize>, columns: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, columns)
    }

    pub fn full(columns: usize) -> Self {
        Self {
            indices: (0..columns).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indicator bits of length `columns`.
    pub fn to_indicator(&self, columns: usize) -> Vec<bool> {
        let mut bits = vec![false; columns];
        for &j in &self.indices {
            bits[j] = true;
        }
        bits
    }

    pub fn from_indicator(bits: &[bool]) -> Self {
        Self {
            indices: bits.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect(),
        }
    }

    /// Index set `{self[t_k]}`: selecting `t` out of an already reduced set.
    pub fn compose(&self, inner: &ColumnSubset) -> Result<ColumnSubset> {
        let indices = inner
            .indices
            .iter()
            .map(|&k| {
                self.indices.get(k).copied().ok_or(Error::IndexOutOfRange {
                    index: k,
                    columns: self.indices.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnSubset { indices })
    }
}

/// Builds the column-wise concatenation of per-trajectory Hankel matrices of
/// depth `t_ini + horizon`. No column spans two trajectories.
pub fn build_hankel(trajs: &[Trajectory], t_ini: usize, horizon: usize) -> Result<HankelSet> {
    if t_ini == 0 || horizon == 0 {
        return Err(Error::param("t_ini/horizon", "must be at least 1"));
    }
    let first = trajs.first().ok_or(Error::Empty("trajectory list"))?;
    let (m, p) = (first.input_dim(), first.output_dim());
    let window = t_ini + horizon;
    let mut sources = Vec::new();
    for (index, tr) in trajs.iter().enumerate() {
        if tr.input_dim() != m || tr.output_dim() != p {
            return Err(Error::dims(format!(
                "trajectory {index} has (m, p) = ({}, {}), expected ({m}, {p})",
                tr.input_dim(),
                tr.output_dim()
            )));
        }
        if tr.len() < window {
            return Err(Error::TrajectoryTooShort {
                index,
                len: tr.len(),
                window,
            });
        }
        sources.extend((0..=tr.len() - window).map(|offset| ColumnSource { trajectory: index, offset }));
    }

    let cols = sources.len();
    let mut up = DMatrix::zeros(m * t_ini, cols);
    let mut uf = DMatrix::zeros(m * horizon, cols);
    let mut yp = DMatrix::zeros(p * t_ini, cols);
    let mut yf = DMatrix::zeros(p * horizon, cols);
    for (j, src) in sources.iter().enumerate() {
        let tr = &trajs[src.trajectory];
        let u = tr.input_window(src.offset, window);
        let y = tr.output_window(src.offset, window);
        up.column_mut(j).copy_from(&u.rows(0, m * t_ini));
        uf.column_mut(j).copy_from(&u.rows(m * t_ini, m * horizon));
        yp.column_mut(j).copy_from(&y.rows(0, p * t_ini));
        yf.column_mut(j).copy_from(&y.rows(p * t_ini, p * horizon));
    }
    Ok(HankelSet {
        up,
        yp,
        uf,
        yf,
        t_ini,
        horizon,
        sources,
    })
}

/// Reduced Hankel set holding only the columns in `subset`, in subset order.
pub fn extract_columns(h: &HankelSet, subset: &ColumnSubset) -> Result<HankelSet> {
    let cols = h.columns();
    if let Some(&bad) = subset.indices().iter().find(|&&j| j >= cols) {
        return Err(Error::IndexOutOfRange { index: bad, columns: cols });
    }
    let idx = subset.indices();
    Ok(HankelSet {
        up: h.up.select_columns(idx),
        yp: h.yp.select_columns(idx),
        uf: h.uf.select_columns(idx),
        yf: h.yf.select_columns(idx),
        t_ini: h.t_ini,
        horizon: h.horizon,
        sources: idx.iter().map(|&j| h.sources[j]).collect(),
    })
}

/// Numerical rank of `[Up; Yp; Uf; Yf]` with the default tolerance.
pub fn excitation_rank(h: &HankelSet) -> usize {
    excitation_rank_with_tol(h, RANK_TOLERANCE)
}

/// Numerical rank counting singular values above `rel_tol × σ_max`.
pub fn excitation_rank_with_tol(h: &HankelSet, rel_tol: f64) -> usize {
    numerical_rank(&h.stacked(), rel_tol)
}

pub(crate) fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_traj(u: &[f64], y: &[f64]) -> Trajectory {
        Trajectory::new(DMatrix::from_row_slice(1, u.len(), u), DMatrix::from_row_slice(1, y.len(), y), 0.1).unwrap()
    }

    #[test]
    fn unrolls_scalar_hankel() {
        let tr = scalar_traj(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]);
        let h = build_hankel(&[tr], 1, 1).unwrap();
        assert_eq!(h.columns(), 3);
        assert_eq!(h.up.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(h.uf.as_slice(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn columns_never_cross_trajectories() {
        let a = scalar_traj(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]);
        let b = scalar_traj(&[10.0, 20.0, 30.0, 40.0, 50.0], &[0.0; 5]);
        let h = build_hankel(&[a, b], 2, 2).unwrap();
        assert_eq!(h.columns(), 4);
        for j in 0..4 {
            let col: Vec<f64> = h.up.column(j).iter().chain(h.uf.column(j).iter()).copied().collect();
            let small = col.iter().all(|&v| v < 10.0);
            let large = col.iter().all(|&v| v >= 10.0);
            assert!(small ^ large, "column {j} mixes trajectories: {col:?}");
        }
    }

    #[test]
    fn shapes_follow_window_arithmetic() {
        let u = DMatrix::from_fn(2, 20, |i, k| (i * 20 + k) as f64);
        let y = DMatrix::from_fn(1, 20, |_, k| k as f64 * 0.5);
        let h = build_hankel(&[Trajectory::new(u, y, 1.0).unwrap()], 4, 10).unwrap();
        // M = T - L + 1 = 20 - 14 + 1
        assert_eq!((h.up.nrows(), h.up.ncols()), (8, 7));
        assert_eq!((h.yf.nrows(), h.yf.ncols()), (10, 7));
    }

    #[test]
    fn rejects_short_and_mismatched() {
        let short = scalar_traj(&[1.0, 2.0], &[0.0; 2]);
        assert!(matches!(build_hankel(&[short], 2, 1), Err(Error::TrajectoryTooShort { .. })));
        let a = scalar_traj(&[1.0; 6], &[0.0; 6]);
        let b = Trajectory::new(DMatrix::zeros(2, 6), DMatrix::zeros(1, 6), 0.1).unwrap();
        assert!(matches!(build_hankel(&[a, b], 2, 2), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn extract_identity_and_single() {
        let tr = scalar_traj(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 4.0, 3.0, 2.0, 1.0]);
        let h = build_hankel(&[tr], 2, 1).unwrap();
        assert_eq!(extract_columns(&h, &h.all_columns()).unwrap(), h);
        let one = extract_columns(&h, &ColumnSubset::new(vec![0], 3).unwrap()).unwrap();
        assert_eq!(one.columns(), 1);
        assert_eq!(one.yp.column(0), h.yp.column(0));
        let bad = ColumnSubset::new(vec![0, 7], 8).unwrap();
        assert!(matches!(extract_columns(&h, &bad), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn subset_validation() {
        assert!(ColumnSubset::new(vec![0, 2, 5], 6).is_ok());
        assert!(ColumnSubset::new(vec![2, 2], 6).is_err());
        assert!(ColumnSubset::new(vec![3, 1], 6).is_err());
        assert!(ColumnSubset::new(vec![6], 6).is_err());
    }

    #[test]
    fn rank_edge_cases() {
        let zero = scalar_traj(&[0.0; 10], &[0.0; 10]);
        assert_eq!(excitation_rank(&build_hankel(&[zero], 2, 2).unwrap()), 0);

        let tr = scalar_traj(
            &[0.3, -1.2, 0.8, 0.1, -0.5, 1.7, -0.9, 0.4, 1.1, -0.2],
            &[1.0, 0.2, -0.7, 0.9, 0.0, -1.3, 0.6, 0.2, -0.4, 0.8],
        );
        let h = build_hankel(&[tr], 2, 1).unwrap();
        let base = excitation_rank(&h);
        let dup = ColumnSubset::from_unsorted(vec![0, 1, 2, 3], h.columns()).unwrap();
        let reduced = extract_columns(&h, &dup).unwrap();
        let mut doubled = reduced.clone();
        for m in [&mut doubled.up, &mut doubled.yp, &mut doubled.uf, &mut doubled.yf] {
            let copy = m.clone();
            *m = DMatrix::from_fn(copy.nrows(), copy.ncols() * 2, |i, j| copy[(i, j % copy.ncols())]);
        }
        assert_eq!(excitation_rank(&doubled), excitation_rank(&reduced));
        assert!(base >= excitation_rank(&reduced));
    }

    #[test]
    fn csv_and_meta_round_trip() {
        let tr = Trajectory::new(
            DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 1.0 / 3.0, -4.0, 5e-17, 6.0]),
            DMatrix::from_row_slice(1, 3, &[std::f64::consts::PI, 0.0, -1.5]),
            0.02,
        )
        .unwrap();
        let csv = tr.to_csv();
        assert!(csv.starts_with("k,u_0,u_1,y_0\n"));
        assert_eq!(Trajectory::from_csv(&csv, 0.02).unwrap(), tr);

        let meta = TrajectoryMeta {
            m: 2,
            p: 1,
            dt: 0.02,
            seed: 42,
            x0: Some(vec![0.5, -0.25]),
        };
        assert_eq!(TrajectoryMeta::from_text(&meta.to_text()).unwrap(), meta);
    }
}
