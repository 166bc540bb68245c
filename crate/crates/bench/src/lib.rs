//! Fixtures shared by the criterion benchmarks.

use std::collections::BTreeMap;

use deepc_core::rng::rng_from_seed;
use deepc_core::{build_hankel, make_plant, rollout, DeepcConfig, HankelSet, NoiseSpec, PlantKind, PlantModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub const T_INI: usize = 4;
pub const HORIZON: usize = 10;

pub fn pendulum() -> PlantModel {
    make_plant(PlantKind::Pendulum, &BTreeMap::new()).expect("default pendulum")
}

/// Hankel set with exactly `columns` columns from one random-input pendulum rollout.
pub fn pendulum_hankel(columns: usize, seed: u64) -> HankelSet {
    let plant = pendulum();
    let mut rng = rng_from_seed(seed);
    let len = columns + T_INI + HORIZON - 1;
    let inputs = DMatrix::from_fn(1, len, |_, _| rng.random_range(-1.0..=1.0));
    let x0 = DVector::from_vec(vec![0.1, 0.0]);
    let traj = rollout(&plant, &x0, &inputs, &NoiseSpec::noiseless()).expect("rollout").trajectory;
    build_hankel(&[traj], T_INI, HORIZON).expect("hankel")
}

/// Past window and reference taken from the first column, so the problem is feasible.
pub fn problem(h: &HankelSet) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let u_ini = h.up.column(0).into_owned();
    let y_ini = h.yp.column(0).into_owned();
    let r = DVector::from_element(HORIZON, 0.05);
    (u_ini, y_ini, r)
}

pub fn config(plant: &PlantModel, input_box: bool) -> DeepcConfig {
    let mut cfg = DeepcConfig::diagonal(&[1.0], &[0.01]).with_regularization(1.0, 1e5);
    if input_box {
        cfg.u_box = Some(plant.input_bounds.clone());
    }
    cfg
}
