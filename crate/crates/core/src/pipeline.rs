//! Training-data generation: sample a context and a Bernoulli column subset,
//! run the closed loop on that subset, record the cost. Also dataset files
//! and the per-α model registry.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{run_closed_loop, InitialCondition, LoopSetup, Policy, ReferenceTrack};
use crate::datamodel::{
    make_context, train_net, Activation, ContextDims, ContextEncoding, ContextNet, IndicatorVector, NetSample, TrainOptions, TrainReport,
    TrainedModel,
};
use crate::error::{Error, Result};
use crate::plants::{rollout, NoiseSpec, PlantKind, PlantModel};
use crate::rng::{derive_seed, rng_from_seed};
use crate::solver::DeepcConfig;
use crate::stats::percentile;
use crate::trajectory::{ColumnSubset, HankelSet, Trajectory};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDist {
    #[default]
    RandomRolloutSuffix,
    ArchiveDraw,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefStrategy {
    ConstantSetpoint,
    Perturbation,
    Primitives,
    #[default]
    Relative,
}

impl FromStr for RefStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_setpoint" => Ok(Self::ConstantSetpoint),
            "perturbation" => Ok(Self::Perturbation),
            "primitives" => Ok(Self::Primitives),
            "relative" => Ok(Self::Relative),
            _ => Err(Error::Unknown {
                what: "reference strategy",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Step,
    Ramp,
    Sinusoid,
    ReturnToOrigin,
}

/// Ranges the reference samplers draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceParams {
    /// Per-output box for constant setpoints.
    pub setpoint_box: Vec<(f64, f64)>,
    /// Nominal constant output for perturbations; empty means the last measured output.
    #[serde(default)]
    pub nominal: Vec<f64>,
    pub perturbation_std: f64,
    /// Standard deviation of the constant offset added to the last output.
    pub relative_std: f64,
    /// Largest primitive amplitude.
    pub primitive_amplitude: f64,
    /// Sinusoid period range in steps.
    pub primitive_period: (f64, f64),
}

/// Distribution over initial trajectories, references and subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub init_dist: InitDist,
    pub ref_strategy: RefStrategy,
    /// Inclusion probability of each column.
    pub alpha: f64,
    /// Closed-loop evaluation length in steps.
    pub t_sim: usize,
    /// Random-input steps before the initial window is taken.
    pub burn_in: usize,
    /// Per-state reset box.
    pub reset_box: Vec<(f64, f64)>,
    /// Burn-in inputs are uniform in `[-a, a]`.
    pub input_amplitude: f64,
    pub reference: ReferenceParams,
}

impl SamplerSpec {
    /// Defaults sized for `plant`.
    pub fn for_plant(plant: &PlantModel) -> Self {
        let p = plant.output_dim();
        let (reset_box, setpoint_box, relative_std) = match plant.kind() {
            PlantKind::Lti2 => (vec![(-1.0, 1.0); 2], vec![(-1.0, 1.0)], 0.5),
            PlantKind::Pendulum if p == 1 => (vec![(-0.3, 0.3), (-0.5, 0.5)], vec![(-0.15, 0.15)], 0.1),
            PlantKind::Pendulum => (vec![(-0.3, 0.3), (-0.5, 0.5)], vec![(-0.15, 0.15), (0.98, 1.0), (0.0, 0.0)], 0.05),
            PlantKind::Reacher2link => (vec![(-PI, PI), (-PI, PI), (-0.5, 0.5), (-0.5, 0.5)], vec![(-1.0, 1.0); p], 0.1),
        };
        Self {
            init_dist: InitDist::RandomRolloutSuffix,
            ref_strategy: RefStrategy::Relative,
            alpha: 0.1,
            t_sim: 40,
            burn_in: 20,
            reset_box,
            input_amplitude: plant.input_bounds.iter().map(|&(lo, hi)| hi.min(-lo)).fold(f64::INFINITY, f64::min),
            reference: ReferenceParams {
                setpoint_box,
                nominal: Vec::new(),
                perturbation_std: relative_std / 2.0,
                relative_std,
                primitive_amplitude: 2.0 * relative_std,
                primitive_period: (5.0, 20.0),
            },
        }
    }

    pub fn validate(&self, plant: &PlantModel, t_ini: usize, horizon: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha", format!("{} is not in (0, 1)", self.alpha)));
        }
        if self.t_sim < horizon {
            return Err(Error::param(
                "t_sim",
                format!("{} is shorter than the horizon {horizon}", self.t_sim),
            ));
        }
        if self.burn_in < t_ini {
            return Err(Error::param("burn_in", format!("{} is shorter than T_ini={t_ini}", self.burn_in)));
        }
        if self.reset_box.len() != plant.state_dim() {
            return Err(Error::dims(format!(
                "reset box has {} entries, state has {}",
                self.reset_box.len(),
                plant.state_dim()
            )));
        }
        if self.reference.setpoint_box.len() != plant.output_dim() {
            return Err(Error::dims("setpoint box does not match the output dimension"));
        }
        if !self.reference.nominal.is_empty() && self.reference.nominal.len() != plant.output_dim() {
            return Err(Error::dims("nominal reference does not match the output dimension"));
        }
        let r = &self.reference;
        if [self.input_amplitude, r.perturbation_std, r.relative_std, r.primitive_amplitude]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::param("sampler", "amplitudes and deviations must be non-negative"));
        }
        if !(r.primitive_period.0 > 0.0 && r.primitive_period.0 <= r.primitive_period.1) {
            return Err(Error::param("primitive_period", "needs 0 < low ≤ high"));
        }
        Ok(())
    }
}

/// A recorded trajectory with the reset state it started from.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub trajectory: Trajectory,
    pub x0: DVector<f64>,
}

fn uniform_in(rng: &mut impl rand::Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Applies `inputs` (m × T, T ≥ `t_ini`) from `x0`; the last `t_ini` steps
/// form the initial trajectory and the state after them is returned with it.
pub fn burn_in(plant: &PlantModel, x0: &DVector<f64>, inputs: &DMatrix<f64>, noise: &NoiseSpec, t_ini: usize) -> Result<InitialCondition> {
    if inputs.ncols() < t_ini {
        return Err(Error::param(
            "burn_in",
            format!("{} steps cannot fill T_ini={t_ini}", inputs.ncols()),
        ));
    }
    let ro = rollout(plant, x0, inputs, noise)?;
    let start = inputs.ncols() - t_ini;
    Ok(InitialCondition {
        state: ro.final_state,
        u_ini: ro.trajectory.input_window(start, t_ini),
        y_ini: ro.trajectory.output_window(start, t_ini),
    })
}

/// Draws a plant state and the initial trajectory that led to it.
pub fn sample_initial(
    plant: &PlantModel,
    spec: &SamplerSpec,
    noise: &NoiseSpec,
    archive: Option<&[ArchiveEntry]>,
    t_ini: usize,
    seed: u64,
) -> Result<InitialCondition> {
    let mut rng = rng_from_seed(seed);
    match spec.init_dist {
        InitDist::RandomRolloutSuffix => {
            let x0 = DVector::from_iterator(
                spec.reset_box.len(),
                spec.reset_box.iter().map(|&(lo, hi)| uniform_in(&mut rng, lo, hi)),
            );
            let a = spec.input_amplitude;
            let inputs = DMatrix::from_fn(plant.input_dim(), spec.burn_in, |_, _| uniform_in(&mut rng, -a, a));
            let noise = NoiseSpec {
                seed: derive_seed(seed, 0, "burn-in-noise"),
                ..noise.clone()
            };
            burn_in(plant, &x0, &inputs, &noise, t_ini)
        }
        InitDist::ArchiveDraw => {
            let archive = archive.filter(|a| !a.is_empty()).ok_or(Error::Empty("trajectory archive"))?;
            let entry = &archive[rng.random_range(0..archive.len())];
            let len = entry.trajectory.len();
            if len < t_ini {
                return Err(Error::TrajectoryTooShort {
                    index: 0,
                    len,
                    window: t_ini,
                });
            }
            let start = rng.random_range(0..=len - t_ini);
            replay_window(plant, entry, start, t_ini)
        }
    }
}

/// Reconstructs the state at the end of the window `[start, start + t_ini)`
/// of an archived trajectory by replaying its inputs from the recorded reset.
pub fn replay_window(plant: &PlantModel, entry: &ArchiveEntry, start: usize, t_ini: usize) -> Result<InitialCondition> {
    let traj = &entry.trajectory;
    let end = start + t_ini;
    if end > traj.len() {
        return Err(Error::IndexOutOfRange {
            index: end,
            columns: traj.len(),
        });
    }
    let inputs = traj.inputs().columns(0, end).into_owned();
    let ro = rollout(plant, &entry.x0, &inputs, &NoiseSpec::noiseless())?;
    Ok(InitialCondition {
        state: ro.final_state,
        u_ini: traj.input_window(start, t_ini),
        y_ini: traj.output_window(start, t_ini),
    })
}

/// Reference shape from `start`, stacked over `horizon` steps.
///
/// Steps jump to `start + amplitude`, ramps go linearly from `start` to
/// `start + amplitude` over the horizon, sinusoids oscillate around `start`
/// and return-to-origin ramps from `start` down to zero.
pub fn primitive_reference(
    kind: Primitive,
    start: &DVector<f64>,
    amplitude: &DVector<f64>,
    period: f64,
    phase: f64,
    horizon: usize,
) -> DVector<f64> {
    let p = start.len();
    let frac = |k: usize| if horizon > 1 { k as f64 / (horizon - 1) as f64 } else { 1.0 };
    DVector::from_fn(p * horizon, |i, _| {
        let (k, c) = (i / p, i % p);
        match kind {
            Primitive::Step => start[c] + amplitude[c],
            Primitive::Ramp => start[c] + amplitude[c] * frac(k),
            Primitive::Sinusoid => start[c] + amplitude[c] * (2.0 * PI * k as f64 / period + phase).sin(),
            Primitive::ReturnToOrigin => start[c] * (1.0 - frac(k)),
        }
    })
}

/// Samples a stacked reference window `r` (length `horizon · p`).
pub fn sample_reference(
    y_ini: &DVector<f64>,
    p: usize,
    horizon: usize,
    strategy: RefStrategy,
    params: &ReferenceParams,
    seed: u64,
) -> Result<DVector<f64>> {
    if p == 0 || y_ini.len() < p || !y_ini.len().is_multiple_of(p) {
        return Err(Error::dims("y_ini is not a whole number of output vectors"));
    }
    let mut rng = rng_from_seed(seed);
    let y_last = y_ini.rows(y_ini.len() - p, p).into_owned();
    let gauss = |rng: &mut crate::rng::Rng, std: f64| -> f64 {
        if std > 0.0 {
            Normal::new(0.0, std).expect("validated std").sample(rng)
        } else {
            0.0
        }
    };
    let repeat = |v: &DVector<f64>| DVector::from_fn(p * horizon, |i, _| v[i % p]);
    let r = match strategy {
        RefStrategy::ConstantSetpoint => {
            if params.setpoint_box.len() != p {
                return Err(Error::dims("setpoint box does not match the output dimension"));
            }
            let sp = DVector::from_iterator(p, params.setpoint_box.iter().map(|&(lo, hi)| uniform_in(&mut rng, lo, hi)));
            repeat(&sp)
        }
        RefStrategy::Perturbation => {
            let nominal = if params.nominal.is_empty() {
                y_last
            } else {
                DVector::from_column_slice(&params.nominal)
            };
            let base = repeat(&nominal);
            DVector::from_fn(p * horizon, |i, _| base[i] + gauss(&mut rng, params.perturbation_std))
        }
        RefStrategy::Primitives => {
            let kind = [Primitive::Step, Primitive::Ramp, Primitive::Sinusoid, Primitive::ReturnToOrigin][rng.random_range(0..4)];
            let a = params.primitive_amplitude;
            let amplitude = DVector::from_fn(p, |_, _| uniform_in(&mut rng, -a, a));
            let period = uniform_in(&mut rng, params.primitive_period.0, params.primitive_period.1);
            let phase = uniform_in(&mut rng, 0.0, 2.0 * PI);
            primitive_reference(kind, &y_last, &amplitude, period, phase, horizon)
        }
        RefStrategy::Relative => {
            let delta = DVector::from_fn(p, |_, _| gauss(&mut rng, params.relative_std));
            repeat(&(y_last + delta))
        }
    };
    Ok(r)
}

/// Independent Bernoulli(`alpha`) bits, redrawn until at least `k_min` are set.
/// Returns the bits and the number of redraws.
pub fn sample_indicator(columns: usize, alpha: f64, k_min: usize, seed: u64) -> Result<(IndicatorVector, u32)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", format!("{alpha} is not in (0, 1)")));
    }
    if k_min > columns {
        return Err(Error::KOutOfRange { k: k_min, columns });
    }
    const MAX_REDRAWS: u32 = 10_000;
    let mut rng = rng_from_seed(seed);
    for redraws in 0..=MAX_REDRAWS {
        let bits: Vec<bool> = (0..columns).map(|_| rng.random_bool(alpha)).collect();
        let s = IndicatorVector::new(bits);
        if s.count_ones() >= k_min {
            return Ok((s, redraws));
        }
    }
    Err(Error::param(
        "alpha",
        format!("{MAX_REDRAWS} draws with alpha={alpha} never reached {k_min} of {columns} columns"),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    /// Some step was infeasible or the state diverged; the cost is the penalty.
    Infeasible,
    /// The run raised an error; the cost is the penalty.
    Failed,
}

/// One `(u_ini, y_ini, r, s, J)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub index: usize,
    pub u_ini: DVector<f64>,
    pub y_ini: DVector<f64>,
    pub r: DVector<f64>,
    pub s: IndicatorVector,
    pub j: f64,
    pub status: SampleStatus,
    pub seed: u64,
    pub t_sim: usize,
    pub alpha: f64,
    /// Indicator redraws needed to meet the popcount guard.
    pub resamples: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub m: usize,
    pub p: usize,
    pub t_ini: usize,
    pub horizon: usize,
    pub columns: usize,
    pub alpha: f64,
    pub t_sim: usize,
    pub master_seed: u64,
    pub samples: usize,
}

const DATASET_FORMAT: &str = "deepc-datamodel-dataset";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<TrainingSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    i: usize,
    u_ini: Vec<f64>,
    y_ini: Vec<f64>,
    r: Vec<f64>,
    s: String,
    j: f64,
    status: SampleStatus,
    seed: u64,
    t_sim: usize,
    alpha: f64,
    resamples: u32,
}

impl Dataset {
    pub fn dims(&self) -> ContextDims {
        ContextDims {
            m: self.header.m,
            p: self.header.p,
            t_ini: self.header.t_ini,
            horizon: self.header.horizon,
        }
    }

    /// Header line followed by one JSON record per sample.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        writeln!(w)?;
        for s in &self.samples {
            let rec = SampleRecord {
                i: s.index,
                u_ini: s.u_ini.as_slice().to_vec(),
                y_ini: s.y_ini.as_slice().to_vec(),
                r: s.r.as_slice().to_vec(),
                s: s.s.to_hex(),
                j: s.j,
                status: s.status,
                seed: s.seed,
                t_sim: s.t_sim,
                alpha: s.alpha,
                resamples: s.resamples,
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| Error::format("dataset", "missing header line"))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT || header.version != 1 {
            return Err(Error::format(
                "dataset",
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut samples = Vec::with_capacity(header.samples);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)?;
            let (tp, tm) = (header.p * header.t_ini, header.m * header.t_ini);
            if rec.u_ini.len() != tm || rec.y_ini.len() != tp || rec.r.len() != header.p * header.horizon {
                return Err(Error::format("dataset", format!("record {n} does not match the header dimensions")));
            }
            samples.push(TrainingSample {
                index: rec.i,
                u_ini: DVector::from_vec(rec.u_ini),
                y_ini: DVector::from_vec(rec.y_ini),
                r: DVector::from_vec(rec.r),
                s: IndicatorVector::from_hex(&rec.s, header.columns)?,
                j: rec.j,
                status: rec.status,
                seed: rec.seed,
                t_sim: rec.t_sim,
                alpha: rec.alpha,
                resamples: rec.resamples,
            });
        }
        if samples.len() != header.samples {
            return Err(Error::format(
                "dataset",
                format!("header announces {} samples, found {}", header.samples, samples.len()),
            ));
        }
        Ok(Self { header, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Network training samples under `encoding`.
    pub fn net_samples(&self, encoding: ContextEncoding) -> Result<Vec<NetSample>> {
        self.samples
            .iter()
            .map(|s| {
                Ok(NetSample {
                    context: make_context(&s.u_ini, &s.y_ini, &s.r, self.dims(), encoding)?.vector,
                    indicator: s.s.clone(),
                    cost: s.j,
                })
            })
            .collect()
    }

    pub fn status_counts(&self) -> (usize, usize, usize) {
        self.samples.iter().fold((0, 0, 0), |(ok, inf, fail), s| match s.status {
            SampleStatus::Ok => (ok + 1, inf, fail),
            SampleStatus::Infeasible => (ok, inf + 1, fail),
            SampleStatus::Failed => (ok, inf, fail + 1),
        })
    }

    pub fn mean_popcount(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.s.count_ones() as f64).sum::<f64>() / self.samples.len() as f64
    }
}

/// Everything a dataset run needs besides its size and seed.
#[derive(Debug, Clone)]
pub struct GenerationSetup<'a> {
    pub plant: &'a PlantModel,
    pub h: &'a HankelSet,
    pub cfg: &'a DeepcConfig,
    pub noise: NoiseSpec,
    pub spec: &'a SamplerSpec,
    pub archive: Option<&'a [ArchiveEntry]>,
    /// Penalty used when no feasible cost has been observed at all.
    pub penalty_fallback: f64,
}

/// Per-sample draws, also used to rebuild a scenario from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    pub initial: InitialCondition,
    pub r: DVector<f64>,
    pub s: IndicatorVector,
    pub resamples: u32,
}

pub fn draw_sample(setup: &GenerationSetup, seed: u64) -> Result<SampleDraw> {
    let (h, spec) = (setup.h, setup.spec);
    let initial = sample_initial(
        setup.plant,
        spec,
        &setup.noise,
        setup.archive,
        h.t_ini,
        derive_seed(seed, 0, "initial"),
    )?;
    let r = sample_reference(
        &initial.y_ini,
        h.output_dim(),
        h.horizon,
        spec.ref_strategy,
        &spec.reference,
        derive_seed(seed, 0, "reference"),
    )?;
    let k_min = (h.input_dim() + h.output_dim()) * h.t_ini;
    let (s, resamples) = sample_indicator(h.columns(), spec.alpha, k_min.min(h.columns()), derive_seed(seed, 0, "subset"))?;
    Ok(SampleDraw { initial, r, s, resamples })
}

/// Closed-loop cost of one sample, `None` when it needs the penalty.
fn evaluate(setup: &GenerationSetup, draw: &SampleDraw, seed: u64) -> Result<Option<f64>> {
    let loop_setup = LoopSetup {
        plant: setup.plant,
        h: setup.h,
        cfg: setup.cfg,
        noise: NoiseSpec {
            seed: derive_seed(seed, 0, "loop-noise"),
            ..setup.noise.clone()
        },
        t_sim: setup.spec.t_sim,
    };
    let track = ReferenceTrack::from_stacked(&draw.r, setup.h.output_dim())?;
    let subset = ColumnSubset::from_indicator(draw.s.bits());
    let res = run_closed_loop(&loop_setup, &draw.initial, &Policy::Fixed(subset), &track)?;
    let ok = res.infeasible_steps == 0 && res.aborted_at.is_none() && res.metrics.cost.is_finite();
    Ok(ok.then_some(res.metrics.cost))
}

/// Runs the sampling loop for `n_train` samples.
///
/// Samples are generated in parallel from seeds derived from
/// `(master_seed, i)` and merged in index order. Infeasible or failed runs
/// get `10 ×` the 95th percentile of the feasible costs at lower indices.
pub fn generate_dataset(setup: &GenerationSetup, n_train: usize, master_seed: u64) -> Result<Dataset> {
    let h = setup.h;
    setup.spec.validate(setup.plant, h.t_ini, h.horizon)?;
    setup.cfg.validate()?;
    let outcomes: Vec<Result<(SampleDraw, Result<Option<f64>>)>> = (0..n_train)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, i as u64, "sample");
            let draw = draw_sample(setup, seed)?;
            let cost = evaluate(setup, &draw, seed);
            Ok((draw, cost))
        })
        .collect();

    let all_feasible: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| match o {
            Ok((_, Ok(Some(j)))) => Some(*j),
            _ => None,
        })
        .collect();
    let batch_penalty = percentile(&all_feasible, 95.0).map_or(setup.penalty_fallback, |q| 10.0 * q);

    let mut seen: Vec<f64> = Vec::new();
    let mut samples = Vec::with_capacity(n_train);
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let (draw, cost) = outcome?;
        let penalty = percentile(&seen, 95.0).map_or(batch_penalty, |q| 10.0 * q);
        let (j, status) = match cost {
            Ok(Some(j)) => {
                seen.push(j);
                (j, SampleStatus::Ok)
            }
            Ok(None) => (penalty, SampleStatus::Infeasible),
            Err(e) => {
                log::warn!("sample {i} failed: {e}");
                (penalty, SampleStatus::Failed)
            }
        };
        samples.push(TrainingSample {
            index: i,
            u_ini: draw.initial.u_ini,
            y_ini: draw.initial.y_ini,
            r: draw.r,
            s: draw.s,
            j,
            status,
            seed: derive_seed(master_seed, i as u64, "sample"),
            t_sim: setup.spec.t_sim,
            alpha: setup.spec.alpha,
            resamples: draw.resamples,
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: 1,
            m: h.input_dim(),
            p: h.output_dim(),
            t_ini: h.t_ini,
            horizon: h.horizon,
            columns: h.columns(),
            alpha: setup.spec.alpha,
            t_sim: setup.spec.t_sim,
            master_seed,
            samples: n_train,
        },
        samples,
    })
}

/// Architecture of a context network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub encoding: ContextEncoding,
    pub init_seed: u64,
}

impl NetSpec {
    pub fn build(&self, dims: ContextDims, columns: usize) -> Result<ContextNet> {
        let mut sizes = vec![self.encoding.dim(dims)];
        sizes.extend(&self.hidden);
        sizes.push(columns + 1);
        ContextNet::new(&sizes, self.activation, self.encoding, self.init_seed)
    }
}

/// Trains one network on `dataset`.
pub fn train_on_dataset(dataset: &Dataset, spec: &NetSpec, opts: &TrainOptions) -> Result<(TrainedModel, TrainReport)> {
    let net = spec.build(dataset.dims(), dataset.header.columns)?;
    let data = dataset.net_samples(spec.encoding)?;
    let (net, report) = train_net(net, &data, opts)?;
    let model = TrainedModel {
        net,
        alpha: dataset.header.alpha,
        validation_loss: report.final_validation_loss(),
        init_seed: spec.init_seed,
    };
    Ok((model, report))
}

/// One network per dataset; a diverging α does not stop the others.
pub fn train_alpha_ensemble(datasets: &[Dataset], spec: &NetSpec, opts: &TrainOptions) -> Vec<(f64, Result<(TrainedModel, TrainReport)>)> {
    datasets
        .iter()
        .map(|d| {
            let out = train_on_dataset(d, spec, opts);
            if let Err(e) = &out {
                log::warn!("training for alpha={} failed: {e}", d.header.alpha);
            }
            (d.header.alpha, out)
        })
        .collect()
}

/// Trained networks keyed by their training inclusion probability.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: Vec<TrainedModel>,
}

impl ModelRegistry {
    pub fn new(mut models: Vec<TrainedModel>) -> Self {
        models.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        Self { models }
    }

    pub fn models(&self) -> &[TrainedModel] {
        &self.models
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Model whose `α·M` is closest to `k`; ties go to the lower α.
    pub fn select(&self, k: usize) -> Option<&TrainedModel> {
        let dist = |m: &TrainedModel| (m.alpha * m.net.columns() as f64 - k as f64).abs();
        self.models.iter().fold(None, |best: Option<&TrainedModel>, m| match best {
            Some(b) if dist(b) <= dist(m) => Some(b),
            _ => Some(m),
        })
    }

    /// Like [`select`](Self::select), but rejects models with `|α·M − K| / K > 1`.
    pub fn select_checked(&self, k: usize) -> Result<&TrainedModel> {
        let model = self.select(k).ok_or(Error::Empty("model registry"))?;
        let gap = (model.alpha * model.net.columns() as f64 - k as f64).abs() / k.max(1) as f64;
        if gap > 1.0 {
            return Err(Error::param(
                "K",
                format!(
                    "no model close to K={k} (nearest alpha={} gives alpha*M={:.1})",
                    model.alpha,
                    model.alpha * model.net.columns() as f64
                ),
            ));
        }
        Ok(model)
    }
}

impl fmt::Display for SampleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleStatus::Ok => "ok",
            SampleStatus::Infeasible => "infeasible",
            SampleStatus::Failed => "failed",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::make_plant;
    use crate::trajectory::build_hankel;
    use std::collections::BTreeMap;

    fn pendulum() -> PlantModel {
        make_plant(PlantKind::Pendulum, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn burn_in_of_exactly_t_ini_keeps_inputs() {
        let plant = pendulum();
        let inputs = DMatrix::from_row_slice(1, 4, &[0.1, -0.2, 0.3, 0.4]);
        let ic = burn_in(&plant, &DVector::zeros(2), &inputs, &NoiseSpec::noiseless(), 4).unwrap();
        assert_eq!(ic.u_ini.as_slice(), &[0.1, -0.2, 0.3, 0.4]);
        assert_eq!(ic.y_ini[0], 0.0);
    }

    #[test]
    fn sample_initial_is_seeded() {
        let plant = pendulum();
        let spec = SamplerSpec::for_plant(&plant);
        let a = sample_initial(&plant, &spec, &NoiseSpec::noiseless(), None, 4, 8).unwrap();
        let b = sample_initial(&plant, &spec, &NoiseSpec::noiseless(), None, 4, 8).unwrap();
        let c = sample_initial(&plant, &spec, &NoiseSpec::noiseless(), None, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn reference_examples() {
        let y_ini = DVector::from_vec(vec![0.0, 0.1, 0.2, 0.25]);
        let plant = pendulum();
        let mut params = SamplerSpec::for_plant(&plant).reference;
        let c = sample_reference(&y_ini, 1, 10, RefStrategy::ConstantSetpoint, &params, 3).unwrap();
        assert!(c.iter().all(|&v| v == c[0]));
        assert!((-0.15..=0.15).contains(&c[0]));
        params.relative_std = 0.0;
        let rel = sample_reference(&y_ini, 1, 10, RefStrategy::Relative, &params, 3).unwrap();
        assert!(rel.iter().all(|&v| v == 0.25));
        let ramp = primitive_reference(Primitive::Ramp, &DVector::zeros(1), &DVector::from_element(1, 2.0), 1.0, 0.0, 5);
        assert_eq!(ramp.as_slice(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        let back = primitive_reference(
            Primitive::ReturnToOrigin,
            &DVector::from_element(1, 1.0),
            &DVector::zeros(1),
            1.0,
            0.0,
            3,
        );
        assert_eq!(back.as_slice(), &[1.0, 0.5, 0.0]);
        assert!(matches!("zigzag".parse::<RefStrategy>(), Err(Error::Unknown { .. })));
        for seed in 0..20 {
            let r = sample_reference(&y_ini, 1, 10, RefStrategy::Primitives, &params, seed).unwrap();
            assert_eq!(r.len(), 10);
            assert!(r.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indicator_popcount_and_guard() {
        let (s, _) = sample_indicator(10_000, 0.5, 0, 1).unwrap();
        assert!((4800..=5200).contains(&s.count_ones()), "{}", s.count_ones());
        let (a, _) = sample_indicator(50, 0.3, 0, 2).unwrap();
        let (b, _) = sample_indicator(50, 0.3, 0, 2).unwrap();
        assert_eq!(a, b);
        let (small, redraws) = sample_indicator(20, 0.05, 3, 5).unwrap();
        assert!(small.count_ones() >= 3);
        assert!(redraws > 0);
        assert!(sample_indicator(10, 1.0, 0, 0).is_err());
    }

    #[test]
    fn archive_replay_reproduces_window() {
        let plant = pendulum();
        let inputs = DMatrix::from_fn(1, 30, |_, k| (k as f64 * 0.7).sin());
        let x0 = DVector::from_vec(vec![0.2, -0.1]);
        let traj = rollout(&plant, &x0, &inputs, &NoiseSpec::noiseless()).unwrap().trajectory;
        let entry = ArchiveEntry {
            trajectory: traj.clone(),
            x0,
        };
        let ic = replay_window(&plant, &entry, 12, 4).unwrap();
        let next = plant.observe(&ic.state);
        assert!((next[0] - traj.outputs()[(0, 16)]).abs() < 1e-12);
        let spec = SamplerSpec {
            init_dist: InitDist::ArchiveDraw,
            ..SamplerSpec::for_plant(&plant)
        };
        let drawn = sample_initial(&plant, &spec, &NoiseSpec::noiseless(), Some(&[entry]), 4, 1).unwrap();
        assert_eq!(drawn.u_ini.len(), 4);
    }

    fn small_setup_parts() -> (PlantModel, HankelSet, DeepcConfig, SamplerSpec) {
        let plant = make_plant(PlantKind::Lti2, &BTreeMap::new()).unwrap();
        let mut rng = rng_from_seed(1);
        let u = DMatrix::from_fn(1, 60, |_, _| rng.random_range(-1.0..1.0));
        let traj = rollout(&plant, &DVector::zeros(2), &u, &NoiseSpec::noiseless()).unwrap().trajectory;
        let h = build_hankel(&[traj], 4, 10).unwrap();
        let cfg = DeepcConfig::diagonal(&[1.0], &[0.1]);
        let spec = SamplerSpec {
            alpha: 0.5,
            t_sim: 12,
            ..SamplerSpec::for_plant(&plant)
        };
        (plant, h, cfg, spec)
    }

    #[test]
    fn dataset_generation_is_deterministic_and_round_trips() {
        let (plant, h, cfg, spec) = small_setup_parts();
        let setup = GenerationSetup {
            plant: &plant,
            h: &h,
            cfg: &cfg,
            noise: NoiseSpec::noiseless(),
            spec: &spec,
            archive: None,
            penalty_fallback: 1e3,
        };
        assert!(generate_dataset(&setup, 0, 1).unwrap().samples.is_empty());
        let a = generate_dataset(&setup, 6, 42).unwrap();
        let b = generate_dataset(&setup, 6, 42).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let back = Dataset::read_from(ba.as_slice()).unwrap();
        assert_eq!(back, a);
        assert!(a.samples.iter().all(|s| s.j.is_finite() && s.j >= 0.0));
        assert!(a.samples.iter().all(|s| s.s.count_ones() >= 8));
    }

    #[test]
    fn registry_selection() {
        let net = |alpha: f64| TrainedModel {
            net: ContextNet::new(&[3, 2, 101], Activation::Relu, ContextEncoding::Direct, 0).unwrap(),
            alpha,
            validation_loss: 0.0,
            init_seed: 0,
        };
        let reg = ModelRegistry::new(vec![net(0.2), net(0.1)]);
        assert_eq!(reg.select(11).unwrap().alpha, 0.1);
        assert_eq!(reg.select(30).unwrap().alpha, 0.2);
        assert_eq!(reg.select(15).unwrap().alpha, 0.1);
        assert!(reg.select_checked(100).is_ok());
        assert!(reg.select_checked(4).is_err());
        let single = ModelRegistry::new(vec![net(0.2)]);
        assert_eq!(single.select(1000).unwrap().alpha, 0.2);
        assert!(ModelRegistry::default().select(3).is_none());
    }
}
