//! Simulated plants `x_{k+1} = f(x_k, u_k)`, `y_k = h(x_k)`.
//!
//! Three kinds are provided: a discrete second-order LTI system with known
//! matrices (used as a ground-truth oracle), a torque-driven damped pendulum
//! and a planar two-link arm. The continuous plants are discretized with one
//! or more fixed RK4 substeps per sampling period.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    Lti2,
    Pendulum,
    Reacher2link,
}

impl FromStr for PlantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lti2" => Ok(Self::Lti2),
            "pendulum" => Ok(Self::Pendulum),
            "reacher2link" => Ok(Self::Reacher2link),
            other => Err(Error::Unknown {
                what: "plant kind",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for PlantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lti2 => "lti2",
            Self::Pendulum => "pendulum",
            Self::Reacher2link => "reacher2link",
        })
    }
}

/// Discrete two-state LTI system.
#[derive(Debug, Clone, PartialEq)]
pub struct Lti2 {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: Vector2<f64>,
}

/// Damped pendulum `ml² θ̈ = -mgl sin θ - b θ̇ + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pendulum {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
    /// Observe `(sin θ, cos θ, θ̇)` instead of `θ`.
    pub trig_outputs: bool,
}

/// Planar two-link arm with uniform rods and viscous joint friction.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLinkArm {
    pub mass1: f64,
    pub mass2: f64,
    pub length1: f64,
    pub length2: f64,
    pub friction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Lti2(Lti2),
    Pendulum(Pendulum),
    TwoLink(TwoLinkArm),
}

/// A deterministic simulated plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub dynamics: Dynamics,
    pub dt: f64,
    pub substeps: usize,
    pub input_bounds: Vec<(f64, f64)>,
}

type Params = BTreeMap<String, f64>;

fn take(params: &mut Params, key: &str, default: f64) -> f64 {
    params.remove(key).unwrap_or(default)
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::param(name, format!("must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::param(name, format!("must be non-negative, got {v}")))
    }
}

/// Constructs a plant of `kind`, overriding defaults with `params`.
///
/// Unrecognized parameter names are rejected.
pub fn make_plant(kind: PlantKind, params: &BTreeMap<String, f64>) -> Result<PlantModel> {
    let mut p = params.clone();
    let plant = match kind {
        PlantKind::Lti2 => {
            let a = Matrix2::new(
                take(&mut p, "a11", 1.0),
                take(&mut p, "a12", 0.1),
                take(&mut p, "a21", 0.0),
                take(&mut p, "a22", 0.8),
            );
            let b = Vector2::new(take(&mut p, "b1", 0.005), take(&mut p, "b2", 0.1));
            let c = Vector2::new(take(&mut p, "c1", 1.0), take(&mut p, "c2", 0.0));
            let ctrb = Matrix2::from_columns(&[b, a * b]);
            if ctrb.determinant().abs() < 1e-12 {
                return Err(Error::param("lti2", "(A, B) is not controllable"));
            }
            let u_max = positive("u_max", take(&mut p, "u_max", 1.0))?;
            PlantModel {
                dynamics: Dynamics::Lti2(Lti2 { a, b, c }),
                dt: positive("dt", take(&mut p, "dt", 0.1))?,
                substeps: 1,
                input_bounds: vec![(-u_max, u_max)],
            }
        }
        PlantKind::Pendulum => {
            let outputs = take(&mut p, "outputs", 1.0);
            let trig_outputs = match outputs as i64 {
                1 if outputs == 1.0 => false,
                3 if outputs == 3.0 => true,
                _ => return Err(Error::param("outputs", "pendulum supports 1 or 3 outputs")),
            };
            let u_max = positive("u_max", take(&mut p, "u_max", 1.0))?;
            PlantModel {
                dynamics: Dynamics::Pendulum(Pendulum {
                    mass: positive("mass", take(&mut p, "mass", 1.0))?,
                    length: positive("length", take(&mut p, "length", 0.5))?,
                    damping: non_negative("damping", take(&mut p, "damping", 0.1))?,
                    gravity: non_negative("gravity", take(&mut p, "gravity", 9.81))?,
                    trig_outputs,
                }),
                dt: positive("dt", take(&mut p, "dt", 0.02))?,
                substeps: substeps(take(&mut p, "substeps", 1.0))?,
                input_bounds: vec![(-u_max, u_max)],
            }
        }
        PlantKind::Reacher2link => {
            let mass = take(&mut p, "mass", 1.0);
            let length = take(&mut p, "length", 0.5);
            let u_max = positive("u_max", take(&mut p, "u_max", 1.0))?;
            PlantModel {
                dynamics: Dynamics::TwoLink(TwoLinkArm {
                    mass1: positive("mass1", take(&mut p, "mass1", mass))?,
                    mass2: positive("mass2", take(&mut p, "mass2", mass))?,
                    length1: positive("length1", take(&mut p, "length1", length))?,
                    length2: positive("length2", take(&mut p, "length2", length))?,
                    friction: non_negative("friction", take(&mut p, "friction", 0.1))?,
                }),
                dt: positive("dt", take(&mut p, "dt", 0.02))?,
                substeps: substeps(take(&mut p, "substeps", 1.0))?,
                input_bounds: vec![(-u_max, u_max); 2],
            }
        }
    };
    if let Some(key) = p.keys().next() {
        return Err(Error::param(key.clone(), format!("not a parameter of {kind}")));
    }
    Ok(plant)
}

fn substeps(v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::param("substeps", "must be a positive integer"))
    }
}

fn rk4<F>(x: &DVector<f64>, h: f64, f: F) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

impl Pendulum {
    fn deriv(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let inertia = self.mass * self.length * self.length;
        let acc = (-self.mass * self.gravity * self.length * x[0].sin() - self.damping * x[1] + u) / inertia;
        DVector::from_vec(vec![x[1], acc])
    }
}

impl TwoLinkArm {
    fn mass_matrix(&self, q2: f64) -> Matrix2<f64> {
        let (m1, m2, l1, l2) = (self.mass1, self.mass2, self.length1, self.length2);
        let (lc1, lc2) = (l1 / 2.0, l2 / 2.0);
        let (i1, i2) = (m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0);
        let c2 = q2.cos();
        let m11 = i1 + i2 + m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2);
        let m12 = i2 + m2 * (lc2 * lc2 + l1 * lc2 * c2);
        let m22 = i2 + m2 * lc2 * lc2;
        Matrix2::new(m11, m12, m12, m22)
    }

    fn deriv(&self, x: &DVector<f64>, tau: &[f64]) -> DVector<f64> {
        let (q2, dq1, dq2) = (x[1], x[2], x[3]);
        let h = self.mass2 * self.length1 * (self.length2 / 2.0) * q2.sin();
        let coriolis = Vector2::new(-h * dq2 * (2.0 * dq1 + dq2), h * dq1 * dq1);
        let rhs = Vector2::new(tau[0], tau[1]) - coriolis - Vector2::new(dq1, dq2) * self.friction;
        let mm = self.mass_matrix(q2);
        // The mass matrix is symmetric positive definite for positive masses.
        let acc = mm.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| Vector2::repeat(f64::NAN));
        DVector::from_vec(vec![dq1, dq2, acc[0], acc[1]])
    }

    /// Kinetic energy `½ q̇ᵀ M(q) q̇`; the arm moves in a horizontal plane.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let dq = Vector2::new(x[2], x[3]);
        0.5 * dq.dot(&(self.mass_matrix(x[1]) * dq))
    }

    pub fn end_effector(&self, q1: f64, q2: f64) -> (f64, f64) {
        (
            self.length1 * q1.cos() + self.length2 * (q1 + q2).cos(),
            self.length1 * q1.sin() + self.length2 * (q1 + q2).sin(),
        )
    }
}

impl PlantModel {
    pub fn kind(&self) -> PlantKind {
        match self.dynamics {
            Dynamics::Lti2(_) => PlantKind::Lti2,
            Dynamics::Pendulum(_) => PlantKind::Pendulum,
            Dynamics::TwoLink(_) => PlantKind::Reacher2link,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::Lti2(_) | Dynamics::Pendulum(_) => 2,
            Dynamics::TwoLink(_) => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_bounds.len()
    }

    pub fn output_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Lti2(_) => 1,
            Dynamics::Pendulum(p) if p.trig_outputs => 3,
            Dynamics::Pendulum(_) => 1,
            Dynamics::TwoLink(_) => 8,
        }
    }

    /// One sampling period of the dynamics. Inputs are used as given.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.dynamics {
            Dynamics::Lti2(sys) => {
                let xv = Vector2::new(x[0], x[1]);
                let next = sys.a * xv + sys.b * u[0];
                DVector::from_vec(vec![next[0], next[1]])
            }
            Dynamics::Pendulum(pend) => {
                let h = self.dt / self.substeps as f64;
                (0..self.substeps).fold(x.clone(), |s, _| rk4(&s, h, |z| pend.deriv(z, u[0])))
            }
            Dynamics::TwoLink(arm) => {
                let h = self.dt / self.substeps as f64;
                let tau = [u[0], u[1]];
                (0..self.substeps).fold(x.clone(), |s, _| rk4(&s, h, |z| arm.deriv(z, &tau)))
            }
        }
    }

    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.dynamics {
            Dynamics::Lti2(sys) => DVector::from_element(1, sys.c[0] * x[0] + sys.c[1] * x[1]),
            Dynamics::Pendulum(p) if p.trig_outputs => DVector::from_vec(vec![x[0].sin(), x[0].cos(), x[1]]),
            Dynamics::Pendulum(_) => DVector::from_element(1, x[0]),
            Dynamics::TwoLink(arm) => {
                let (q1, q2) = (x[0], x[1]);
                let (ex, ey) = arm.end_effector(q1, q2);
                DVector::from_vec(vec![q1.sin(), q1.cos(), q2.sin(), q2.cos(), ex, ey, x[2], x[3]])
            }
        }
    }

    /// Clamps `u` into the input box; the flag reports whether anything moved.
    pub fn clamp_input(&self, u: &DVector<f64>) -> (DVector<f64>, bool) {
        let mut clamped = false;
        let out = DVector::from_iterator(
            u.len(),
            u.iter().zip(&self.input_bounds).map(|(&v, &(lo, hi))| {
                let c = v.clamp(lo, hi);
                clamped |= c != v;
                c
            }),
        );
        (out, clamped)
    }

    /// The `(A, B, C)` matrices when the plant is the LTI system.
    pub fn lti_matrices(&self) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        match &self.dynamics {
            Dynamics::Lti2(sys) => Some((
                DMatrix::from_iterator(2, 2, sys.a.iter().copied()),
                DMatrix::from_column_slice(2, 1, sys.b.as_slice()),
                DMatrix::from_row_slice(1, 2, sys.c.as_slice()),
            )),
            _ => None,
        }
    }
}

/// Output measurement noise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-channel standard deviation; empty means noiseless.
    #[serde(default)]
    pub output_noise_std: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn is_noiseless(&self) -> bool {
        self.output_noise_std.iter().all(|&s| s == 0.0)
    }

    pub(crate) fn sampler(&self, p: usize) -> Result<OutputNoise> {
        if self.output_noise_std.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::param("output_noise_std", "must be non-negative"));
        }
        let std: Vec<f64> = match self.output_noise_std.len() {
            0 => vec![0.0; p],
            1 => vec![self.output_noise_std[0]; p],
            n if n == p => self.output_noise_std.clone(),
            n => return Err(Error::dims(format!("{n} noise levels for {p} outputs"))),
        };
        Ok(OutputNoise {
            std,
            rng: rng_from_seed(self.seed),
        })
    }
}

/// Stateful noise source used during rollouts and closed-loop runs.
pub(crate) struct OutputNoise {
    std: Vec<f64>,
    rng: crate::rng::Rng,
}

impl OutputNoise {
    pub(crate) fn corrupt(&mut self, y: &mut DVector<f64>) {
        for (v, &s) in y.iter_mut().zip(&self.std) {
            if s > 0.0 {
                let n = Normal::new(0.0, s).expect("validated std");
                *v += n.sample(&mut self.rng);
            }
        }
    }
}

/// Result of an open-loop rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// State after the last input has been applied.
    pub final_state: DVector<f64>,
    /// Number of steps whose input had to be clamped into the box.
    pub clamped_steps: usize,
}

/// Simulates `plant` from `x0` under `inputs` (m × T), recording
/// `y_k = observe(x_k) + noise` and the applied, clamped inputs.
pub fn rollout(plant: &PlantModel, x0: &DVector<f64>, inputs: &DMatrix<f64>, noise: &NoiseSpec) -> Result<Rollout> {
    let (m, p) = (plant.input_dim(), plant.output_dim());
    if inputs.nrows() != m {
        return Err(Error::dims(format!("inputs have {} rows, plant expects {m}", inputs.nrows())));
    }
    if x0.len() != plant.state_dim() {
        return Err(Error::dims(format!(
            "x0 has {} entries, plant state is {}",
            x0.len(),
            plant.state_dim()
        )));
    }
    let steps = inputs.ncols();
    let mut noise = noise.sampler(p)?;
    let mut u_rec = DMatrix::zeros(m, steps);
    let mut y_rec = DMatrix::zeros(p, steps);
    let mut x = x0.clone();
    let mut clamped_steps = 0;
    for k in 0..steps {
        let mut y = plant.observe(&x);
        noise.corrupt(&mut y);
        y_rec.column_mut(k).copy_from(&y);
        let (u, clamped) = plant.clamp_input(&inputs.column(k).into_owned());
        clamped_steps += usize::from(clamped);
        u_rec.column_mut(k).copy_from(&u);
        x = plant.step(&x, &u);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k });
        }
    }
    Ok(Rollout {
        trajectory: Trajectory::new(u_rec, y_rec, plant.dt)?,
        final_state: x,
        clamped_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn reacher_signature() {
        let arm = make_plant(PlantKind::Reacher2link, &BTreeMap::new()).unwrap();
        assert_eq!((arm.input_dim(), arm.output_dim(), arm.state_dim()), (2, 8, 4));
    }

    #[test]
    fn pendulum_rest_is_equilibrium() {
        let pend = make_plant(PlantKind::Pendulum, &BTreeMap::new()).unwrap();
        let next = pend.step(&DVector::zeros(2), &DVector::zeros(1));
        assert_eq!(next, DVector::zeros(2));
        let trig = make_plant(PlantKind::Pendulum, &params(&[("outputs", 3.0)])).unwrap();
        assert_eq!(trig.output_dim(), 3);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!("cartpole".parse::<PlantKind>(), Err(Error::Unknown { .. })));
        for (kind, key) in [
            (PlantKind::Pendulum, "mass"),
            (PlantKind::Pendulum, "length"),
            (PlantKind::Reacher2link, "mass2"),
            (PlantKind::Reacher2link, "length1"),
        ] {
            let err = make_plant(kind, &params(&[(key, -1.0)])).unwrap_err();
            assert!(matches!(err, Error::InvalidParameter { .. }), "{kind} {key}");
        }
        assert!(make_plant(PlantKind::Pendulum, &params(&[("lenght", 1.0)])).is_err());
    }

    #[test]
    fn reacher_conserves_energy_without_friction() {
        let arm = make_plant(PlantKind::Reacher2link, &params(&[("friction", 0.0), ("dt", 1e-3)])).unwrap();
        let Dynamics::TwoLink(model) = &arm.dynamics else { unreachable!() };
        let mut x = DVector::from_vec(vec![0.3, -0.7, 1.5, -2.0]);
        let e0 = model.energy(&x);
        let zero = DVector::zeros(2);
        for _ in 0..100 {
            x = arm.step(&x, &zero);
        }
        assert!(((model.energy(&x) - e0) / e0).abs() < 1e-6);
    }

    #[test]
    fn lti_zero_and_impulse() {
        let lti = make_plant(PlantKind::Lti2, &BTreeMap::new()).unwrap();
        let zero = rollout(&lti, &DVector::zeros(2), &DMatrix::zeros(1, 20), &NoiseSpec::noiseless()).unwrap();
        assert!(zero.trajectory.outputs().iter().all(|&v| v == 0.0));

        let (a, b, c) = lti.lti_matrices().unwrap();
        let mut impulse = DMatrix::zeros(1, 15);
        impulse[(0, 0)] = 1.0;
        let r = rollout(&lti, &DVector::zeros(2), &impulse, &NoiseSpec::noiseless()).unwrap();
        let y = r.trajectory.outputs();
        assert_eq!(y[(0, 0)], 0.0);
        let mut ak = DMatrix::identity(2, 2);
        for k in 1..15 {
            let expected = (&c * &ak * &b)[(0, 0)];
            assert!((y[(0, k)] - expected).abs() < 1e-14, "k={k}");
            ak = &a * ak;
        }
    }

    #[test]
    fn rollout_determinism_and_clamping() {
        let pend = make_plant(PlantKind::Pendulum, &BTreeMap::new()).unwrap();
        let inputs = DMatrix::from_fn(1, 30, |_, k| 2.0 * ((k as f64) * 0.7).sin());
        let noise = NoiseSpec {
            output_noise_std: vec![0.01],
            seed: 9,
        };
        let x0 = DVector::from_vec(vec![0.2, 0.0]);
        let a = rollout(&pend, &x0, &inputs, &noise).unwrap();
        let b = rollout(&pend, &x0, &inputs, &noise).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert!(a.clamped_steps > 0);
        assert!(a.trajectory.inputs().iter().all(|v| v.abs() <= 1.0));

        let quiet = rollout(
            &pend,
            &x0,
            &inputs,
            &NoiseSpec {
                output_noise_std: vec![0.0],
                seed: 3,
            },
        )
        .unwrap();
        let clean = rollout(&pend, &x0, &inputs, &NoiseSpec::noiseless()).unwrap();
        assert_eq!(quiet.trajectory, clean.trajectory);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let lti = make_plant(PlantKind::Lti2, &params(&[("a11", 1e200), ("u_max", 1e300)])).unwrap();
        let inputs = DMatrix::from_element(1, 10, 1e300);
        let err = rollout(&lti, &DVector::from_vec(vec![1e200, 0.0]), &inputs, &NoiseSpec::noiseless()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 0 }));
    }
}
