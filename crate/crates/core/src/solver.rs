//! Reduced DeePC over a column subset.
//!
//! The planned inputs, predicted outputs and past-output slack are eliminated
//! analytically (`u_f = Uf g`, `y_f = Yf g`, `σ_y = Yp g - y_ini`), leaving an
//! equality-constrained quadratic program in the column weights `g` alone:
//!
//! ```text
//! minimize  gᵀ H g - 2 qᵀ g      subject to  C g = d
//! H = Yfᵀ Q̄ Yf + Ufᵀ R̄ Uf + λ_y Ypᵀ Yp + λ_g I
//! ```
//!
//! With slack enabled (`λ_y > 0`) only `Up g = u_ini` is a hard constraint;
//! with `λ_y = 0` the past outputs are matched exactly as well. Input boxes
//! and soft output boxes are handled by ADMM on the split `F g = z`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_diag_mul, block_diag_mul_vec, is_symmetric_psd, pinv, pinv_psd};
use crate::rng::rng_from_seed;
use crate::trajectory::HankelSet;

const PINV_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmSettings {
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iter: 5000,
            tol: 1e-7,
        }
    }
}

/// Weights, regularization and constraints of the DeePC problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepcConfig {
    /// Output error weight (p × p).
    pub q: DMatrix<f64>,
    /// Input weight (m × m).
    pub r: DMatrix<f64>,
    pub lambda_g: f64,
    /// Slack weight; zero enforces `Yp g = y_ini` exactly.
    pub lambda_y: f64,
    /// Per-channel input bounds applied at every horizon step.
    pub u_box: Option<Vec<(f64, f64)>>,
    /// Per-channel output bounds, enforced as a quadratic penalty.
    pub y_box: Option<Vec<(f64, f64)>>,
    pub y_box_weight: f64,
    pub admm: AdmmSettings,
    /// Relative tolerance on `‖C g - d‖` before a problem counts as infeasible.
    pub feasibility_tol: f64,
}

impl DeepcConfig {
    /// Diagonal weights with defaults `λ_g = 1`, `λ_y = 1e5` and no boxes.
    pub fn diagonal(q: &[f64], r: &[f64]) -> Self {
        Self {
            q: DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            r: DMatrix::from_diagonal(&DVector::from_column_slice(r)),
            lambda_g: 1.0,
            lambda_y: 1e5,
            u_box: None,
            y_box: None,
            y_box_weight: 1e3,
            admm: AdmmSettings::default(),
            feasibility_tol: 1e-6,
        }
    }

    pub fn with_regularization(mut self, lambda_g: f64, lambda_y: f64) -> Self {
        self.lambda_g = lambda_g;
        self.lambda_y = lambda_y;
        self
    }

    pub fn slack_enabled(&self) -> bool {
        self.lambda_y > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !is_symmetric_psd(&self.q) {
            return Err(Error::param("Q", "must be symmetric positive semidefinite"));
        }
        if !is_symmetric_psd(&self.r) {
            return Err(Error::param("R", "must be symmetric positive semidefinite"));
        }
        if !(self.lambda_g >= 0.0) || !(self.lambda_y >= 0.0) {
            return Err(Error::param("lambda", "regularization weights must be non-negative"));
        }
        for (name, bx) in [("u_box", &self.u_box), ("y_box", &self.y_box)] {
            if let Some(b) = bx {
                if b.iter().any(|&(lo, hi)| !(lo <= hi)) {
                    return Err(Error::param(name, "lower bound exceeds upper bound"));
                }
            }
        }
        if !(self.admm.rho > 0.0) {
            return Err(Error::param("rho", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepcSolution {
    pub g: DVector<f64>,
    /// Planned inputs, stacked by horizon step (length m·N).
    pub u_f: DVector<f64>,
    /// Predicted outputs, stacked by horizon step (length p·N).
    pub y_f: DVector<f64>,
    /// Past-output slack `Yp g - y_ini`; zero when slack is disabled.
    pub sigma_y: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

impl DeepcSolution {
    /// First planned input `u_{f,0}`.
    pub fn first_input(&self, m: usize) -> DVector<f64> {
        self.u_f.rows(0, m).into_owned()
    }
}

/// Assembled quadratic program `min gᵀHg - 2qᵀg + c0  s.t.  Cg = d`.
struct Problem {
    h: DMatrix<f64>,
    q: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
}

fn check_dims(h: &HankelSet, u_ini: &DVector<f64>, y_ini: &DVector<f64>, r: &DVector<f64>, cfg: &DeepcConfig) -> Result<()> {
    let (m, p) = (h.input_dim(), h.output_dim());
    if h.columns() == 0 {
        return Err(Error::Empty("hankel columns"));
    }
    let checks = [
        ("u_ini", u_ini.len(), h.up.nrows()),
        ("y_ini", y_ini.len(), h.yp.nrows()),
        ("r", r.len(), h.yf.nrows()),
        ("Q", cfg.q.nrows(), p),
        ("R", cfg.r.nrows(), m),
    ];
    for (name, got, want) in checks {
        if got != want {
            return Err(Error::dims(format!("{name} has size {got}, expected {want}")));
        }
    }
    if let Some(b) = &cfg.u_box {
        if b.len() != m {
            return Err(Error::dims(format!("u_box has {} channels, expected {m}", b.len())));
        }
    }
    if let Some(b) = &cfg.y_box {
        if b.len() != p {
            return Err(Error::dims(format!("y_box has {} channels, expected {p}", b.len())));
        }
    }
    Ok(())
}

fn assemble(h: &HankelSet, u_ini: &DVector<f64>, y_ini: &DVector<f64>, r: &DVector<f64>, cfg: &DeepcConfig) -> Problem {
    let cols = h.columns();
    let qyf = block_diag_mul(&cfg.q, &h.yf);
    let ruf = block_diag_mul(&cfg.r, &h.uf);
    let mut hess = h.yf.tr_mul(&qyf) + h.uf.tr_mul(&ruf);
    let mut lin = qyf.tr_mul(r);
    if cfg.slack_enabled() {
        hess += h.yp.tr_mul(&h.yp) * cfg.lambda_y;
        lin += h.yp.tr_mul(y_ini) * cfg.lambda_y;
    }
    for i in 0..cols {
        hess[(i, i)] += cfg.lambda_g;
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let (c, d) = if cfg.slack_enabled() {
        (h.up.clone(), u_ini.clone())
    } else {
        let mut c = DMatrix::zeros(h.up.nrows() + h.yp.nrows(), cols);
        c.rows_mut(0, h.up.nrows()).copy_from(&h.up);
        c.rows_mut(h.up.nrows(), h.yp.nrows()).copy_from(&h.yp);
        let mut d = DVector::zeros(u_ini.len() + y_ini.len());
        d.rows_mut(0, u_ini.len()).copy_from(u_ini);
        d.rows_mut(u_ini.len(), y_ini.len()).copy_from(y_ini);
        (c, d)
    };
    Problem { h: hess, q: lin, c, d }
}

/// Prefactored solver for `min gᵀPg - 2qᵀg  s.t.  Cg = d` with varying `q`.
enum EqualityQp {
    /// `P` positive definite: `g = P⁻¹q - X ν`, `X = P⁻¹Cᵀ`, `ν = S⁺(C P⁻¹ q - d)`.
    Schur {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        x: DMatrix<f64>,
        s_pinv: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DVector<f64>,
    },
    /// Minimum-norm solution through the null space of `C`:
    /// `g = C⁺d + (Π P Π)⁺ Π (q - P C⁺d)` with `Π = I - C⁺C`.
    Nullspace {
        particular: DVector<f64>,
        reduced_pinv: DMatrix<f64>,
        proj: DMatrix<f64>,
        p: DMatrix<f64>,
    },
}

impl EqualityQp {
    fn new(p: DMatrix<f64>, c: &DMatrix<f64>, d: &DVector<f64>, definite: bool) -> Self {
        if definite {
            if let Some(chol) = p.clone().cholesky() {
                let x = chol.solve(&c.transpose());
                let s = c * &x;
                return Self::Schur {
                    chol,
                    x,
                    s_pinv: pinv_psd(&s, PINV_TOL),
                    c: c.clone(),
                    d: d.clone(),
                };
            }
            log::debug!("cholesky failed, falling back to null-space solve");
        }
        let n = p.nrows();
        let c_pinv = pinv(c, PINV_TOL);
        let particular = &c_pinv * d;
        let proj = DMatrix::identity(n, n) - &c_pinv * c;
        let reduced = &proj * &p * &proj;
        Self::Nullspace {
            particular,
            reduced_pinv: pinv_psd(&reduced, 1e-10),
            proj,
            p,
        }
    }

    fn solve(&self, q: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Schur { chol, x, s_pinv, c, d } => {
                let y0 = chol.solve(q);
                let nu = s_pinv * (c * &y0 - d);
                y0 - x * nu
            }
            Self::Nullspace {
                particular,
                reduced_pinv,
                proj,
                p,
            } => {
                let rhs = proj * (q - p * particular);
                particular + reduced_pinv * rhs
            }
        }
    }
}

/// Split constraints `F g = z` for ADMM: rows of `Uf` (hard box) and/or `Yf`
/// (soft box).
struct Splitting {
    f: DMatrix<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Rows from this index on are soft.
    soft_from: usize,
    soft_weight: f64,
}

impl Splitting {
    fn build(h: &HankelSet, cfg: &DeepcConfig) -> Option<Self> {
        if cfg.u_box.is_none() && cfg.y_box.is_none() {
            return None;
        }
        let mut blocks: Vec<&DMatrix<f64>> = Vec::new();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        if let Some(b) = &cfg.u_box {
            blocks.push(&h.uf);
            for _ in 0..h.horizon {
                lo.extend(b.iter().map(|v| v.0));
                hi.extend(b.iter().map(|v| v.1));
            }
        }
        let soft_from = lo.len();
        if let Some(b) = &cfg.y_box {
            blocks.push(&h.yf);
            for _ in 0..h.horizon {
                lo.extend(b.iter().map(|v| v.0));
                hi.extend(b.iter().map(|v| v.1));
            }
        }
        let mut f = DMatrix::zeros(lo.len(), h.columns());
        let mut row = 0;
        for b in blocks {
            f.rows_mut(row, b.nrows()).copy_from(b);
            row += b.nrows();
        }
        Some(Self {
            f,
            lo,
            hi,
            soft_from,
            soft_weight: cfg.y_box_weight,
        })
    }

    fn prox(&self, v: &DVector<f64>, rho: f64) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter().enumerate().map(|(i, &x)| {
                let proj = x.clamp(self.lo[i], self.hi[i]);
                if i < self.soft_from || proj == x {
                    proj
                } else {
                    let w = 2.0 * self.soft_weight;
                    (rho * x + w * proj) / (rho + w)
                }
            }),
        )
    }

    fn soft_penalty(&self, fg: &DVector<f64>) -> f64 {
        (self.soft_from..fg.len())
            .map(|i| {
                let d = fg[i] - fg[i].clamp(self.lo[i], self.hi[i]);
                self.soft_weight * d * d
            })
            .sum()
    }
}

/// Reusable solver holding the ADMM warm start between calls.
#[derive(Debug, Default, Clone)]
pub struct DeepcSolver {
    warm: Option<(DVector<f64>, DVector<f64>)>,
}

impl DeepcSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn solve(
        &mut self,
        h: &HankelSet,
        u_ini: &DVector<f64>,
        y_ini: &DVector<f64>,
        r: &DVector<f64>,
        cfg: &DeepcConfig,
    ) -> Result<DeepcSolution> {
        check_dims(h, u_ini, y_ini, r, cfg)?;
        let cols = h.columns();
        let prob = assemble(h, u_ini, y_ini, r, cfg);
        if cols < prob.c.nrows() {
            return Ok(infeasible(h, cols));
        }
        let definite = cfg.lambda_g > 0.0;
        let (g, status, iterations, penalty) = match Splitting::build(h, cfg) {
            None => {
                let qp = EqualityQp::new(prob.h.clone(), &prob.c, &prob.d, definite);
                (qp.solve(&prob.q), SolveStatus::Optimal, 0, 0.0)
            }
            Some(split) => self.admm(&prob, &split, cfg, definite),
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBreakdown("non-finite column weights".into()));
        }
        let primal = (&prob.c * &g - &prob.d).norm();
        if primal > cfg.feasibility_tol * prob.d.norm().max(1.0) {
            return Ok(infeasible(h, cols));
        }
        Ok(finish(h, y_ini, r, cfg, g, status, iterations, penalty))
    }

    fn admm(&mut self, prob: &Problem, split: &Splitting, cfg: &DeepcConfig, definite: bool) -> (DVector<f64>, SolveStatus, usize, f64) {
        let rho = cfg.admm.rho;
        let ftf = split.f.tr_mul(&split.f);
        let qp = EqualityQp::new(&prob.h + ftf * (rho / 2.0), &prob.c, &prob.d, definite);
        let rows = split.f.nrows();
        let (mut z, mut w) = match self.warm.take() {
            Some((z, w)) if z.len() == rows => (z, w),
            _ => (DVector::zeros(rows), DVector::zeros(rows)),
        };
        let mut g = DVector::zeros(prob.h.nrows());
        let mut status = SolveStatus::MaxIter;
        let mut iterations = cfg.admm.max_iter;
        for it in 0..cfg.admm.max_iter {
            let rhs = &prob.q + split.f.tr_mul(&(&z - &w)) * (rho / 2.0);
            g = qp.solve(&rhs);
            let fg = &split.f * &g;
            let z_prev = z.clone();
            z = split.prox(&(&fg + &w), rho);
            let primal = &fg - &z;
            w += &primal;
            let dual = split.f.tr_mul(&(&z - &z_prev)) * rho;
            if primal.norm() < cfg.admm.tol && dual.norm() < cfg.admm.tol {
                status = SolveStatus::Optimal;
                iterations = it + 1;
                break;
            }
        }
        let penalty = split.soft_penalty(&(&split.f * &g));
        self.warm = Some((z, w));
        (g, status, iterations, penalty)
    }
}

fn infeasible(h: &HankelSet, cols: usize) -> DeepcSolution {
    DeepcSolution {
        g: DVector::zeros(cols),
        u_f: DVector::zeros(h.uf.nrows()),
        y_f: DVector::zeros(h.yf.nrows()),
        sigma_y: DVector::zeros(h.yp.nrows()),
        objective: f64::INFINITY,
        status: SolveStatus::Infeasible,
        iterations: 0,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    h: &HankelSet,
    y_ini: &DVector<f64>,
    r: &DVector<f64>,
    cfg: &DeepcConfig,
    g: DVector<f64>,
    status: SolveStatus,
    iterations: usize,
    penalty: f64,
) -> DeepcSolution {
    let u_f = &h.uf * &g;
    let y_f = &h.yf * &g;
    let sigma_y = if cfg.slack_enabled() {
        &h.yp * &g - y_ini
    } else {
        DVector::zeros(h.yp.nrows())
    };
    let err = &y_f - r;
    let objective = err.dot(&block_diag_mul_vec(&cfg.q, &err))
        + u_f.dot(&block_diag_mul_vec(&cfg.r, &u_f))
        + cfg.lambda_g * g.norm_squared()
        + cfg.lambda_y * sigma_y.norm_squared()
        + penalty;
    DeepcSolution {
        g,
        u_f,
        y_f,
        sigma_y,
        objective,
        status,
        iterations,
    }
}

/// Solves the (reduced) DeePC problem on every column of `h`.
pub fn solve_deepc(
    h: &HankelSet,
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
    r: &DVector<f64>,
    cfg: &DeepcConfig,
) -> Result<DeepcSolution> {
    DeepcSolver::new().solve(h, u_ini, y_ini, r, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖Π(Hg - q)‖ / max(1, ‖q‖)`, `Π` projecting onto the null space of `C`.
    pub stationarity: f64,
    /// `‖Cg - d‖ / max(1, ‖d‖)`.
    pub primal: f64,
}

/// KKT residuals of `g` for the problem without box constraints.
pub fn kkt_residuals(
    h: &HankelSet,
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
    r: &DVector<f64>,
    cfg: &DeepcConfig,
    g: &DVector<f64>,
) -> Result<KktResiduals> {
    check_dims(h, u_ini, y_ini, r, cfg)?;
    let prob = assemble(h, u_ini, y_ini, r, cfg);
    let proj = DMatrix::identity(g.len(), g.len()) - pinv(&prob.c, PINV_TOL) * &prob.c;
    let grad = &prob.h * g - &prob.q;
    Ok(KktResiduals {
        stationarity: (&proj * grad).norm() / prob.q.norm().max(1.0),
        primal: (&prob.c * g - &prob.d).norm() / prob.d.norm().max(1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveTiming {
    pub columns: usize,
    pub median_seconds: f64,
}

/// Median wall time of the unconstrained solve on a fixed random problem
/// family (m = p = 1, T_ini = 4, N = 10) at each requested column count.
pub fn solve_time_probe(column_counts: &[usize]) -> Result<Vec<SolveTiming>> {
    solve_time_probe_with(column_counts, 5, 17)
}

pub fn solve_time_probe_with(column_counts: &[usize], repetitions: usize, seed: u64) -> Result<Vec<SolveTiming>> {
    let Some(&max_cols) = column_counts.iter().max() else {
        return Ok(Vec::new());
    };
    let (t_ini, horizon) = (4, 10);
    let mut rng = rng_from_seed(seed);
    let mut gauss = |rows: usize| DMatrix::from_fn(rows, max_cols, |_, _| StandardNormal.sample(&mut rng));
    let full = HankelSet {
        up: gauss(t_ini),
        yp: gauss(t_ini),
        uf: gauss(horizon),
        yf: gauss(horizon),
        t_ini,
        horizon,
        sources: (0..max_cols)
            .map(|offset| crate::trajectory::ColumnSource { trajectory: 0, offset })
            .collect(),
    };
    let cfg = DeepcConfig::diagonal(&[1.0], &[0.1]);
    let mut table = Vec::with_capacity(column_counts.len());
    for &cols in column_counts {
        let h = crate::trajectory::extract_columns(&full, &crate::trajectory::ColumnSubset::full(cols))?;
        let g0 = DVector::from_element(cols, 1.0 / cols as f64);
        let (u_ini, y_ini) = (&h.up * &g0, &h.yp * &g0);
        let r = DVector::from_element(horizon, 0.5);
        let mut times = Vec::with_capacity(repetitions.max(1));
        for _ in 0..repetitions.max(1) {
            let start = Instant::now();
            let sol = solve_deepc(&h, &u_ini, &y_ini, &r, &cfg)?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(sol);
        }
        times.sort_by(f64::total_cmp);
        table.push(SolveTiming {
            columns: cols,
            median_seconds: times[times.len() / 2],
        });
    }
    Ok(table)
}
