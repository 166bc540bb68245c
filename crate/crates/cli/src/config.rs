//! Experiment configuration: one JSON file with a section per stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context as _, Result};
use deepc_core::datamodel::{Activation, ContextEncoding, TrainOptions};
use deepc_core::grid::{ExperimentGrid, Method};
use deepc_core::pipeline::{InitDist, NetSpec, RefStrategy, ReferenceParams, SamplerSpec};
use deepc_core::solver::AdmmSettings;
use deepc_core::{make_plant, DeepcConfig, NoiseSpec, PlantKind, PlantModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    /// Worker threads, 0 for one per core.
    pub threads: usize,
    pub plant: PlantSection,
    pub hankel: HankelSection,
    pub deepc: DeepcSection,
    pub datamodel: DatamodelSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub kind: PlantKind,
    /// Overrides of the plant's physical parameters, `dt` and `u_max`.
    pub params: BTreeMap<String, f64>,
    /// Output noise standard deviation, one value or one per output.
    pub noise_std: Vec<f64>,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            kind: PlantKind::Pendulum,
            params: BTreeMap::new(),
            noise_std: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HankelSection {
    pub t_ini: usize,
    pub horizon: usize,
    pub trajectories: usize,
    pub length: usize,
    /// Excitation inputs are uniform in `[-a, a]`.
    pub input_amplitude: f64,
}

impl Default for HankelSection {
    fn default() -> Self {
        Self {
            t_ini: 4,
            horizon: 10,
            trajectories: 20,
            length: 60,
            input_amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepcSection {
    /// Output weights, one value or one per output.
    pub q: Vec<f64>,
    /// Input weights, one value or one per input.
    pub r: Vec<f64>,
    pub lambda_g: f64,
    pub lambda_y: f64,
    /// Relax the past-output constraint with a penalized slack.
    pub slack: bool,
    /// Constrain predicted inputs to the plant's input box.
    pub input_box: bool,
    pub output_box: Option<Vec<(f64, f64)>>,
    pub output_box_weight: f64,
    pub admm: AdmmSettings,
    pub feasibility_tol: f64,
}

impl Default for DeepcSection {
    fn default() -> Self {
        let base = DeepcConfig::diagonal(&[1.0], &[1.0]);
        Self {
            q: vec![1.0],
            r: vec![0.01],
            lambda_g: base.lambda_g,
            lambda_y: base.lambda_y,
            slack: true,
            input_box: true,
            output_box: None,
            output_box_weight: base.y_box_weight,
            admm: base.admm,
            feasibility_tol: base.feasibility_tol,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerOverrides {
    pub burn_in: Option<usize>,
    pub reset_box: Option<Vec<(f64, f64)>>,
    pub input_amplitude: Option<f64>,
    pub reference: Option<ReferenceParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatamodelSection {
    pub encoding: ContextEncoding,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight decay.
    pub lambda_phi: f64,
    pub validation_fraction: f64,
    pub alphas: Vec<f64>,
    pub n_train: usize,
    pub t_sim: usize,
    pub init_dist: InitDist,
    pub ref_strategy: RefStrategy,
    pub sampler: SamplerOverrides,
    /// Cost recorded for infeasible samples when no feasible cost exists yet.
    pub penalty_fallback: f64,
}

impl Default for DatamodelSection {
    fn default() -> Self {
        let train = TrainOptions::default();
        Self {
            encoding: ContextEncoding::Relative,
            hidden: vec![256, 256, 256],
            activation: Activation::Relu,
            lr: train.lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lambda_phi: train.lambda_phi,
            validation_fraction: train.validation_fraction,
            alphas: vec![0.05, 0.1, 0.25],
            n_train: 2000,
            t_sim: 40,
            init_dist: InitDist::RandomRolloutSuffix,
            ref_strategy: RefStrategy::Relative,
            sampler: SamplerOverrides::default(),
            penalty_fallback: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Vec<Method>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub t_sim: usize,
    /// Reference strategy of the test scenarios; defaults to the training one.
    pub ref_strategy: Option<RefStrategy>,
    /// Record wall time per step (makes the results file non-reproducible).
    pub record_timing: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Datamodel, Method::L1, Method::Random],
            ks: vec![20, 50, 100],
            seeds: (0..10).collect(),
            t_sim: 40,
            ref_strategy: None,
            record_timing: false,
        }
    }
}

fn broadcast(name: &str, v: &[f64], n: usize) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        len if len == n => Ok(v.to_vec()),
        len => bail!("{name} has {len} entries, expected 1 or {n}"),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Checks every section before anything runs.
    pub fn validate(&self) -> Result<()> {
        let plant = self.build_plant().context("plant")?;
        let h = &self.hankel;
        ensure!(h.t_ini >= 1 && h.horizon >= 1, "hankel: t_ini and horizon must be positive");
        ensure!(h.trajectories >= 1, "hankel: need at least one trajectory");
        ensure!(
            h.length >= h.t_ini + h.horizon,
            "hankel: length {} is shorter than t_ini + horizon = {}",
            h.length,
            h.t_ini + h.horizon
        );
        ensure!(h.input_amplitude > 0.0, "hankel: input_amplitude must be positive");
        self.deepc_config(&plant).context("deepc")?.validate().context("deepc")?;
        let d = &self.datamodel;
        ensure!(!d.alphas.is_empty(), "datamodel: alphas must not be empty");
        for &a in &d.alphas {
            self.sampler_spec(&plant, a)
                .validate(&plant, h.t_ini, h.horizon)
                .context("datamodel")?;
        }
        ensure!(d.batch_size >= 1, "datamodel: batch_size must be positive");
        ensure!(
            d.lr >= 0.0 && d.lambda_phi >= 0.0,
            "datamodel: lr and lambda_phi must be non-negative"
        );
        ensure!(
            (0.0..1.0).contains(&d.validation_fraction),
            "datamodel: validation_fraction must be in [0, 1)"
        );
        ensure!(d.hidden.iter().all(|&n| n > 0), "datamodel: hidden layer sizes must be positive");
        let b = &self.bench;
        ensure!(
            !b.methods.is_empty() && !b.ks.is_empty() && !b.seeds.is_empty(),
            "bench: methods, ks and seeds must not be empty"
        );
        ensure!(b.ks.iter().all(|&k| k > 0), "bench: K values must be positive");
        ensure!(b.t_sim >= 1, "bench: t_sim must be positive");
        Ok(())
    }

    pub fn build_plant(&self) -> Result<PlantModel> {
        Ok(make_plant(self.plant.kind, &self.plant.params)?)
    }

    pub fn noise(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            output_noise_std: self.plant.noise_std.clone(),
            seed,
        }
    }

    pub fn deepc_config(&self, plant: &PlantModel) -> Result<DeepcConfig> {
        let d = &self.deepc;
        let q = broadcast("q", &d.q, plant.output_dim())?;
        let r = broadcast("r", &d.r, plant.input_dim())?;
        let mut cfg = DeepcConfig::diagonal(&q, &r).with_regularization(d.lambda_g, if d.slack { d.lambda_y } else { 0.0 });
        if d.input_box {
            cfg.u_box = Some(plant.input_bounds.clone());
        }
        cfg.y_box = d.output_box.clone();
        cfg.y_box_weight = d.output_box_weight;
        cfg.admm = d.admm.clone();
        cfg.feasibility_tol = d.feasibility_tol;
        Ok(cfg)
    }

    pub fn sampler_spec(&self, plant: &PlantModel, alpha: f64) -> SamplerSpec {
        let d = &self.datamodel;
        let base = SamplerSpec::for_plant(plant);
        let o = &d.sampler;
        SamplerSpec {
            init_dist: d.init_dist,
            ref_strategy: d.ref_strategy,
            alpha,
            t_sim: d.t_sim,
            burn_in: o.burn_in.unwrap_or(base.burn_in),
            reset_box: o.reset_box.clone().unwrap_or(base.reset_box),
            input_amplitude: o.input_amplitude.unwrap_or(base.input_amplitude),
            reference: o.reference.clone().unwrap_or(base.reference),
        }
    }

    pub fn bench_sampler(&self, plant: &PlantModel) -> SamplerSpec {
        let mut spec = self.sampler_spec(plant, self.datamodel.alphas[0]);
        if let Some(s) = self.bench.ref_strategy {
            spec.ref_strategy = s;
        }
        spec
    }

    pub fn net_spec(&self) -> NetSpec {
        NetSpec {
            hidden: self.datamodel.hidden.clone(),
            activation: self.datamodel.activation,
            encoding: self.datamodel.encoding,
            init_seed: deepc_core::rng::derive_seed(self.seed, 0, "net-init"),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let d = &self.datamodel;
        TrainOptions {
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lambda_phi: d.lambda_phi,
            seed: deepc_core::rng::derive_seed(self.seed, 0, "train"),
            validation_fraction: d.validation_fraction,
            ..TrainOptions::default()
        }
    }

    pub fn grid(&self) -> ExperimentGrid {
        ExperimentGrid {
            methods: self.bench.methods.clone(),
            ks: self.bench.ks.clone(),
            seeds: self.bench.seeds.clone(),
            t_sim: self.bench.t_sim,
            record_timing: self.bench.record_timing,
        }
    }
}
