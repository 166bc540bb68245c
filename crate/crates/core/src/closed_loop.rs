//! Receding-horizon DeePC with per-step column selection.

use std::borrow::Cow;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::datamodel::{make_context, ContextDims, ContextNet};
use crate::error::{Error, Result};
use crate::linalg::block_diag_mul_vec;
use crate::plants::{NoiseSpec, PlantModel};
use crate::rng::derive_seed;
use crate::selection::{select_budget, select_l1, select_random, select_threshold, select_topk};
use crate::solver::{DeepcConfig, DeepcSolver, SolveStatus};
use crate::trajectory::{extract_columns, ColumnSubset, HankelSet};

/// How the columns used at each step are chosen.
#[derive(Debug, Clone)]
pub enum Policy<'a> {
    /// Every column, i.e. standard DeePC.
    Full,
    /// The same subset at every step.
    Fixed(ColumnSubset),
    /// Top-`k` of the influence scores predicted by `net` for the current context.
    Datamodel { net: &'a ContextNet, k: usize },
    /// All columns the network predicts to be beneficial.
    DatamodelThreshold { net: &'a ContextNet },
    /// Cumulative-influence budget on the network's scores.
    DatamodelBudget { net: &'a ContextNet, budget: f64 },
    /// `k` columns closest to the initial trajectory in L1.
    L1 { k: usize },
    /// `k` uniform random columns, redrawn at every step.
    Random { k: usize, seed: u64 },
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::Fixed(_) => "fixed",
            Policy::Datamodel { .. } => "datamodel",
            Policy::DatamodelThreshold { .. } => "threshold",
            Policy::DatamodelBudget { .. } => "budget",
            Policy::L1 { .. } => "l1",
            Policy::Random { .. } => "random",
        }
    }
}

/// Plant state together with the measured initial trajectory leading to it.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub state: DVector<f64>,
    pub u_ini: DVector<f64>,
    pub y_ini: DVector<f64>,
}

/// Reference samples `r_0, r_1, …` (p × len), held at the last value beyond its end.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrack {
    values: DMatrix<f64>,
}

impl ReferenceTrack {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::Empty("reference track"));
        }
        Ok(Self { values })
    }

    /// Track from a stacked window `[r_0; …; r_{n-1}]` of `p`-vectors.
    pub fn from_stacked(r: &DVector<f64>, p: usize) -> Result<Self> {
        if p == 0 || !r.len().is_multiple_of(p) {
            return Err(Error::dims(format!("reference of length {} is not a multiple of p={p}", r.len())));
        }
        Self::new(DMatrix::from_column_slice(p, r.len() / p, r.as_slice()))
    }

    pub fn constant(value: &DVector<f64>) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(value.len(), 1, value.as_slice()))
    }

    pub fn output_dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn at(&self, t: usize) -> DVector<f64> {
        self.values.column(t.min(self.values.ncols() - 1)).into_owned()
    }

    /// Stacked window `[r_t; …; r_{t+n-1}]`.
    pub fn window(&self, t: usize, n: usize) -> DVector<f64> {
        let p = self.output_dim();
        let mut out = DVector::zeros(p * n);
        for k in 0..n {
            out.rows_mut(k * p, p).copy_from(&self.at(t + k));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Applied (clamped) input.
    pub u: DVector<f64>,
    /// Measured output.
    pub y: DVector<f64>,
    pub r: DVector<f64>,
    pub status: SolveStatus,
    pub selected: usize,
    /// Selection fell back to top-`K_min` because the rule chose too few columns.
    pub fallback: bool,
    pub step_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub cost: f64,
    pub iae: f64,
    pub ise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopResult {
    pub steps: Vec<StepRecord>,
    pub metrics: Metrics,
    pub infeasible_steps: usize,
    /// Step at which the state became non-finite, if the run was cut short.
    pub aborted_at: Option<usize>,
    pub final_state: DVector<f64>,
}

impl ClosedLoopResult {
    pub fn inputs(&self) -> Vec<DVector<f64>> {
        self.steps.iter().map(|s| s.u.clone()).collect()
    }

    pub fn mean_step_ms(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.step_ms).sum::<f64>() / self.steps.len() as f64
    }
}

/// `Σ ‖y_t − r_t‖²_Q + ‖u_t‖²_R`, `Σ ‖y_t − r_t‖₁` and `Σ ‖y_t − r_t‖²`.
pub fn compute_metrics(steps: &[StepRecord], q: &DMatrix<f64>, r: &DMatrix<f64>) -> Metrics {
    let mut m = Metrics::default();
    for s in steps {
        let e = &s.y - &s.r;
        m.cost += e.dot(&block_diag_mul_vec(q, &e)) + s.u.dot(&block_diag_mul_vec(r, &s.u));
        m.iae += e.lp_norm(1);
        m.ise += e.norm_squared();
    }
    m
}

/// Fixed ingredients of a closed-loop run.
#[derive(Debug, Clone)]
pub struct LoopSetup<'a> {
    pub plant: &'a PlantModel,
    pub h: &'a HankelSet,
    pub cfg: &'a DeepcConfig,
    pub noise: NoiseSpec,
    pub t_sim: usize,
}

impl LoopSetup<'_> {
    /// Smallest subset size that keeps the initial-trajectory constraints solvable.
    pub fn k_min(&self) -> usize {
        (self.h.input_dim() + self.h.output_dim()) * self.h.t_ini
    }

    fn dims(&self) -> ContextDims {
        ContextDims {
            m: self.h.input_dim(),
            p: self.h.output_dim(),
            t_ini: self.h.t_ini,
            horizon: self.h.horizon,
        }
    }
}

fn shift_in(window: &mut DVector<f64>, latest: &DVector<f64>) {
    let w = latest.len();
    let n = window.len();
    window.as_mut_slice().copy_within(w.., 0);
    window.rows_mut(n - w, w).copy_from(latest);
}

fn net_scores(net: &ContextNet, setup: &LoopSetup, u_ini: &DVector<f64>, y_ini: &DVector<f64>, r: &DVector<f64>) -> Result<Vec<f64>> {
    let ctx = make_context(u_ini, y_ini, r, setup.dims(), net.encoding)?;
    let dm = net.datamodel_at(&ctx.vector)?;
    Ok(dm.theta.as_slice().to_vec())
}

/// Columns for one step; the flag marks a top-`K_min` fallback.
fn choose(
    policy: &Policy,
    setup: &LoopSetup,
    t: usize,
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(ColumnSubset, bool)> {
    let k_fallback = setup.k_min().min(setup.h.columns());
    let with_fallback = |theta: &[f64], chosen: ColumnSubset| -> Result<(ColumnSubset, bool)> {
        if chosen.len() < k_fallback {
            log::info!("step {t}: rule chose {} columns, falling back to top-{k_fallback}", chosen.len());
            Ok((select_topk(theta, k_fallback)?, true))
        } else {
            Ok((chosen, false))
        }
    };
    match policy {
        Policy::Full => Ok((setup.h.all_columns(), false)),
        Policy::Fixed(s) => Ok((s.clone(), false)),
        Policy::Datamodel { net, k } => Ok((select_topk(&net_scores(net, setup, u_ini, y_ini, r)?, *k)?, false)),
        Policy::DatamodelThreshold { net } => {
            let theta = net_scores(net, setup, u_ini, y_ini, r)?;
            let chosen = select_threshold(&theta);
            with_fallback(&theta, chosen)
        }
        Policy::DatamodelBudget { net, budget } => {
            let theta = net_scores(net, setup, u_ini, y_ini, r)?;
            let chosen = select_budget(&theta, *budget);
            with_fallback(&theta, chosen)
        }
        Policy::L1 { k } => Ok((select_l1(setup.h, u_ini, y_ini, *k)?, false)),
        Policy::Random { k, seed } => Ok((
            select_random(setup.h.columns(), *k, derive_seed(*seed, t as u64, "random-columns"))?,
            false,
        )),
    }
}

/// Runs `setup.t_sim` steps of receding-horizon DeePC from `init`.
///
/// At step `t` the reference window is `[r_t … r_{t+N−1}]`, the first
/// optimal input is applied and the initial trajectory is shifted. An
/// infeasible step holds the previous input.
pub fn run_closed_loop(setup: &LoopSetup, init: &InitialCondition, policy: &Policy, track: &ReferenceTrack) -> Result<ClosedLoopResult> {
    let (h, plant) = (setup.h, setup.plant);
    let (m, p) = (h.input_dim(), h.output_dim());
    if plant.input_dim() != m || plant.output_dim() != p || track.output_dim() != p {
        return Err(Error::dims("plant, Hankel data and reference disagree on m or p"));
    }
    if init.u_ini.len() != m * h.t_ini || init.y_ini.len() != p * h.t_ini || init.state.len() != plant.state_dim() {
        return Err(Error::dims("initial condition does not match the plant and T_ini"));
    }
    setup.cfg.validate()?;
    let fixed: Option<Cow<HankelSet>> = match policy {
        Policy::Full => Some(Cow::Borrowed(h)),
        Policy::Fixed(s) => Some(Cow::Owned(extract_columns(h, s)?)),
        _ => None,
    };

    let mut noise = setup.noise.sampler(p)?;
    let mut solver = DeepcSolver::new();
    let mut x = init.state.clone();
    let mut u_ini = init.u_ini.clone();
    let mut y_ini = init.y_ini.clone();
    let mut u_prev = init.u_ini.rows(m * (h.t_ini - 1), m).into_owned();
    let mut steps = Vec::with_capacity(setup.t_sim);
    let mut infeasible_steps = 0;
    let mut aborted_at = None;

    for t in 0..setup.t_sim {
        let start = Instant::now();
        let r = track.window(t, h.horizon);
        let (subset, fallback) = choose(policy, setup, t, &u_ini, &y_ini, &r)?;
        let reduced: Cow<HankelSet> = match &fixed {
            Some(hk) => Cow::Borrowed(hk.as_ref()),
            None => Cow::Owned(extract_columns(h, &subset)?),
        };
        let status = match solver.solve(&reduced, &u_ini, &y_ini, &r, setup.cfg) {
            Ok(sol) if sol.status != SolveStatus::Infeasible => {
                u_prev = sol.first_input(m);
                sol.status
            }
            Ok(_) => SolveStatus::Infeasible,
            Err(Error::NumericalBreakdown(detail)) => {
                log::warn!("step {t}: solver breakdown ({detail}), holding input");
                SolveStatus::Infeasible
            }
            Err(e) => return Err(e),
        };
        if status == SolveStatus::Infeasible {
            infeasible_steps += 1;
            log::debug!("step {t}: infeasible with {} columns, holding previous input", subset.len());
        }
        let (u, _) = plant.clamp_input(&u_prev);
        let mut y = plant.observe(&x);
        noise.corrupt(&mut y);
        let x_next = plant.step(&x, &u);
        let step_ms = start.elapsed().as_secs_f64() * 1e3;
        shift_in(&mut u_ini, &u);
        shift_in(&mut y_ini, &y);
        steps.push(StepRecord {
            u: u.clone(),
            y,
            r: track.at(t),
            status,
            selected: subset.len(),
            fallback,
            step_ms,
        });
        u_prev = u;
        if x_next.iter().any(|v| !v.is_finite()) {
            log::warn!("state became non-finite after step {t}, aborting run");
            aborted_at = Some(t);
            break;
        }
        x = x_next;
    }
    let metrics = compute_metrics(&steps, &setup.cfg.q, &setup.cfg.r);
    Ok(ClosedLoopResult {
        steps,
        metrics,
        infeasible_steps,
        aborted_at,
        final_state: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{make_plant, rollout, PlantKind};
    use crate::rng::rng_from_seed;
    use crate::trajectory::build_hankel;
    use rand::Rng as _;
    use std::collections::BTreeMap;

    fn record(y: f64, r: f64, u: f64) -> StepRecord {
        StepRecord {
            u: DVector::from_element(1, u),
            y: DVector::from_element(1, y),
            r: DVector::from_element(1, r),
            status: SolveStatus::Optimal,
            selected: 1,
            fallback: false,
            step_ms: 0.0,
        }
    }

    #[test]
    fn metric_examples() {
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::from_element(1, 1, 0.5);
        assert_eq!(
            compute_metrics(&[record(1.0, 1.0, 0.0), record(-2.0, -2.0, 0.0)], &q, &r),
            Metrics::default()
        );
        let m = compute_metrics(&[record(1.0, 0.0, 0.0), record(-2.0, 0.0, 0.0)], &q, &r);
        assert_eq!((m.ise, m.iae, m.cost), (5.0, 3.0, 5.0));
        let doubled = compute_metrics(&[record(2.0, 0.0, 0.0), record(-4.0, 0.0, 0.0)], &q, &r);
        assert_eq!(doubled.ise, 4.0 * m.ise);
        assert_eq!(doubled.iae, 2.0 * m.iae);
        let with_input = compute_metrics(&[record(0.0, 0.0, 2.0)], &q, &r);
        assert_eq!(with_input.cost, 2.0);
        assert_eq!(with_input.ise, 0.0);
    }

    #[test]
    fn metrics_are_additive() {
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::from_element(1, 1, 0.1);
        let steps: Vec<StepRecord> = (0..6).map(|i| record(i as f64 * 0.3, 0.5, -0.2 * i as f64)).collect();
        let all = compute_metrics(&steps, &q, &r);
        let a = compute_metrics(&steps[..2], &q, &r);
        let b = compute_metrics(&steps[2..], &q, &r);
        assert!((all.cost - a.cost - b.cost).abs() < 1e-12);
        assert!((all.iae - a.iae - b.iae).abs() < 1e-12);
    }

    #[test]
    fn reference_window_is_a_slice() {
        let track = ReferenceTrack::new(DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(track.window(1, 2).as_slice(), &[2.0, 3.0]);
        assert_eq!(track.window(2, 4).as_slice(), &[3.0, 4.0, 4.0, 4.0]);
        let stacked = ReferenceTrack::from_stacked(&DVector::from_vec(vec![1.0, 10.0, 2.0, 20.0]), 2).unwrap();
        assert_eq!(stacked.at(1).as_slice(), &[2.0, 20.0]);
    }

    fn lti_setup() -> (PlantModel, HankelSet) {
        let plant = make_plant(PlantKind::Lti2, &BTreeMap::new()).unwrap();
        let mut rng = rng_from_seed(3);
        let u = DMatrix::from_fn(1, 80, |_, _| rng.random_range(-1.0..1.0));
        let traj = rollout(&plant, &DVector::zeros(2), &u, &NoiseSpec::noiseless()).unwrap().trajectory;
        let h = build_hankel(&[traj], 4, 10).unwrap();
        (plant, h)
    }

    fn lti_initial(plant: &PlantModel) -> InitialCondition {
        let inputs = DMatrix::from_row_slice(1, 4, &[0.2, -0.1, 0.3, 0.0]);
        let ro = rollout(plant, &DVector::from_vec(vec![0.3, -0.2]), &inputs, &NoiseSpec::noiseless()).unwrap();
        InitialCondition {
            state: ro.final_state,
            u_ini: ro.trajectory.input_window(0, 4),
            y_ini: ro.trajectory.output_window(0, 4),
        }
    }

    #[test]
    fn full_policy_tracks_setpoint_on_lti() {
        let (plant, h) = lti_setup();
        let cfg = DeepcConfig::diagonal(&[1.0], &[0.01]).with_regularization(0.0, 1e5);
        let setup = LoopSetup {
            plant: &plant,
            h: &h,
            cfg: &cfg,
            noise: NoiseSpec::noiseless(),
            t_sim: 120,
        };
        let track = ReferenceTrack::constant(&DVector::from_element(1, 0.5)).unwrap();
        let res = run_closed_loop(&setup, &lti_initial(&plant), &Policy::Full, &track).unwrap();
        assert_eq!(res.steps.len(), 120);
        assert_eq!(res.infeasible_steps, 0);
        let err = (res.steps[119].y[0] - 0.5).abs();
        assert!(err < 1e-5, "terminal error {err}");
    }

    #[test]
    fn full_columns_fixed_subset_matches_full() {
        let (plant, h) = lti_setup();
        let cfg = DeepcConfig::diagonal(&[1.0], &[0.1]);
        let setup = LoopSetup {
            plant: &plant,
            h: &h,
            cfg: &cfg,
            noise: NoiseSpec::noiseless(),
            t_sim: 15,
        };
        let track = ReferenceTrack::constant(&DVector::from_element(1, -0.3)).unwrap();
        let init = lti_initial(&plant);
        let a = run_closed_loop(&setup, &init, &Policy::Full, &track).unwrap();
        let b = run_closed_loop(&setup, &init, &Policy::Fixed(h.all_columns()), &track).unwrap();
        assert_eq!(a.inputs(), b.inputs());
    }

    #[test]
    fn too_few_columns_hold_the_input() {
        let (plant, h) = lti_setup();
        let cfg = DeepcConfig::diagonal(&[1.0], &[0.1]);
        let setup = LoopSetup {
            plant: &plant,
            h: &h,
            cfg: &cfg,
            noise: NoiseSpec::noiseless(),
            t_sim: 5,
        };
        let init = lti_initial(&plant);
        let track = ReferenceTrack::constant(&DVector::from_element(1, 1.0)).unwrap();
        let subset = ColumnSubset::new(vec![0, 1], h.columns()).unwrap();
        let res = run_closed_loop(&setup, &init, &Policy::Fixed(subset), &track).unwrap();
        assert_eq!(res.infeasible_steps, 5);
        for s in &res.steps {
            assert_eq!(s.u[0], init.u_ini[3]);
        }
    }

    #[test]
    fn random_policy_is_seeded() {
        let (plant, h) = lti_setup();
        let cfg = DeepcConfig::diagonal(&[1.0], &[0.1]);
        let setup = LoopSetup {
            plant: &plant,
            h: &h,
            cfg: &cfg,
            noise: NoiseSpec {
                output_noise_std: vec![0.01],
                seed: 4,
            },
            t_sim: 10,
        };
        let init = lti_initial(&plant);
        let track = ReferenceTrack::constant(&DVector::from_element(1, 0.2)).unwrap();
        let policy = Policy::Random { k: 30, seed: 9 };
        let a = run_closed_loop(&setup, &init, &policy, &track).unwrap();
        let b = run_closed_loop(&setup, &init, &policy, &track).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        assert_eq!(a.metrics, b.metrics);
        assert!(a.steps.iter().all(|s| s.selected == 30));
    }
}
