//! Cost-versus-columns study: every (method, K, seed) cell is one closed-loop run.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{run_closed_loop, InitialCondition, LoopSetup, Policy, ReferenceTrack};
use crate::error::{Error, Result};
use crate::pipeline::{sample_initial, sample_reference, ArchiveEntry, ModelRegistry, SamplerSpec};
use crate::plants::{NoiseSpec, PlantModel};
use crate::rng::derive_seed;
use crate::solver::DeepcConfig;
use crate::stats::{mean, std_dev};
use crate::trajectory::HankelSet;

pub const RESULTS_HEADER: &str = "method,K,seed,cost,iae,ise,mean_step_ms,infeasible_steps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Datamodel,
    L1,
    Random,
    /// All columns; `K` is ignored.
    Full,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Datamodel => "datamodel",
            Method::L1 => "l1",
            Method::Random => "random",
            Method::Full => "full",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "datamodel" => Ok(Method::Datamodel),
            "l1" => Ok(Method::L1),
            "random" => Ok(Method::Random),
            "full" => Ok(Method::Full),
            _ => Err(Error::Unknown {
                what: "method",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub methods: Vec<Method>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub t_sim: usize,
    /// Write measured step times; otherwise the column is 0 so that reruns
    /// produce identical files.
    pub record_timing: bool,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Empty("method list"));
        }
        if self.ks.is_empty() {
            return Err(Error::Empty("K list"));
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty("seed list"));
        }
        Ok(())
    }
}

/// Plant, data and scenario distribution shared by all cells.
#[derive(Debug, Clone)]
pub struct GridSetup<'a> {
    pub plant: &'a PlantModel,
    pub h: &'a HankelSet,
    pub cfg: &'a DeepcConfig,
    pub noise: NoiseSpec,
    pub sampler: &'a SamplerSpec,
    pub archive: Option<&'a [ArchiveEntry]>,
}

/// Scenario for `seed`: the same initial condition, reference and noise for every method.
pub fn scenario(setup: &GridSetup, seed: u64) -> Result<(InitialCondition, ReferenceTrack)> {
    let h = setup.h;
    let init = sample_initial(
        setup.plant,
        setup.sampler,
        &setup.noise,
        setup.archive,
        h.t_ini,
        derive_seed(seed, 0, "bench-initial"),
    )?;
    let r = sample_reference(
        &init.y_ini,
        h.output_dim(),
        h.horizon,
        setup.sampler.ref_strategy,
        &setup.sampler.reference,
        derive_seed(seed, 0, "bench-reference"),
    )?;
    Ok((init, ReferenceTrack::from_stacked(&r, h.output_dim())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub cost: f64,
    pub iae: f64,
    pub ise: f64,
    pub mean_step_ms: f64,
    pub infeasible_steps: usize,
    /// Set when the cell could not be run; metrics are NaN then.
    pub error: Option<String>,
}

impl GridRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

fn run_cell(setup: &GridSetup, grid: &ExperimentGrid, registry: &ModelRegistry, method: Method, k: usize, seed: u64) -> Result<GridRow> {
    let (init, track) = scenario(setup, seed)?;
    let model;
    let policy = match method {
        Method::Datamodel => {
            model = registry.select_checked(k)?;
            Policy::Datamodel { net: &model.net, k }
        }
        Method::L1 => Policy::L1 { k },
        Method::Random => Policy::Random {
            k,
            seed: derive_seed(seed, k as u64, "bench-random"),
        },
        Method::Full => Policy::Full,
    };
    let loop_setup = LoopSetup {
        plant: setup.plant,
        h: setup.h,
        cfg: setup.cfg,
        noise: NoiseSpec {
            seed: derive_seed(seed, 0, "bench-noise"),
            ..setup.noise.clone()
        },
        t_sim: grid.t_sim,
    };
    let res = run_closed_loop(&loop_setup, &init, &policy, &track)?;
    if let Some(t) = res.aborted_at {
        return Err(Error::NonFiniteState { step: t });
    }
    Ok(GridRow {
        method,
        k,
        seed,
        cost: res.metrics.cost,
        iae: res.metrics.iae,
        ise: res.metrics.ise,
        mean_step_ms: if grid.record_timing { res.mean_step_ms() } else { 0.0 },
        infeasible_steps: res.infeasible_steps,
        error: None,
    })
}

/// Runs every cell; failures are recorded in their row and do not stop the grid.
pub fn run_grid(setup: &GridSetup, grid: &ExperimentGrid, registry: &ModelRegistry) -> Result<Vec<GridRow>> {
    grid.validate()?;
    let mut cells = Vec::new();
    for &method in &grid.methods {
        for &k in &grid.ks {
            for &seed in &grid.seeds {
                cells.push((method, k, seed));
            }
        }
    }
    let run = |&(method, k, seed): &(Method, usize, u64)| {
        run_cell(setup, grid, registry, method, k, seed).unwrap_or_else(|e| {
            log::warn!("cell {method} K={k} seed={seed} failed: {e}");
            GridRow {
                method,
                k,
                seed,
                cost: f64::NAN,
                iae: f64::NAN,
                ise: f64::NAN,
                mean_step_ms: f64::NAN,
                infeasible_steps: 0,
                error: Some(e.to_string()),
            }
        })
    };
    // Timed cells run one at a time so that step times are not inflated by contention.
    Ok(if grid.record_timing {
        cells.iter().map(run).collect()
    } else {
        cells.par_iter().map(run).collect()
    })
}

pub fn results_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method, r.k, r.seed, r.cost, r.iae, r.ise, r.mean_step_ms, r.infeasible_steps
        )
        .expect("writing to a String");
    }
    out
}

/// Parses a results CSV written by [`results_csv`].
pub fn parse_results_csv(text: &str) -> Result<Vec<GridRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        other => return Err(Error::format("results CSV", format!("unexpected header {other:?}"))),
    }
    let bad = |n: usize, what: &str| Error::format("results CSV", format!("line {}: bad {what}", n + 2));
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(n, "field count"));
            }
            let num = |i: usize, what: &str| f[i].trim().parse::<f64>().map_err(|_| bad(n, what));
            let cost = num(3, "cost")?;
            Ok(GridRow {
                method: f[0].parse()?,
                k: f[1].trim().parse().map_err(|_| bad(n, "K"))?,
                seed: f[2].trim().parse().map_err(|_| bad(n, "seed"))?,
                cost,
                iae: num(4, "iae")?,
                ise: num(5, "ise")?,
                mean_step_ms: num(6, "mean_step_ms")?,
                infeasible_steps: f[7].trim().parse().map_err(|_| bad(n, "infeasible_steps"))?,
                error: cost.is_nan().then(|| "failed cell".to_string()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub k: usize,
    pub runs: usize,
    pub failed: usize,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub iae_mean: f64,
    pub iae_std: f64,
    pub ise_mean: f64,
    pub ise_std: f64,
    pub step_ms_mean: f64,
    pub infeasible_mean: f64,
}

/// Mean and sample standard deviation across seeds, failed cells excluded.
pub fn aggregate(rows: &[GridRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(Method, usize), Vec<&GridRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, r.k)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, k), rs)| {
            let ok: Vec<&GridRow> = rs.iter().copied().filter(|r| !r.failed()).collect();
            let col = |f: fn(&GridRow) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (cost, iae, ise) = (col(|r| r.cost), col(|r| r.iae), col(|r| r.ise));
            Aggregate {
                method,
                k,
                runs: rs.len(),
                failed: rs.len() - ok.len(),
                cost_mean: mean(&cost),
                cost_std: std_dev(&cost),
                iae_mean: mean(&iae),
                iae_std: std_dev(&iae),
                ise_mean: mean(&ise),
                ise_std: std_dev(&ise),
                step_ms_mean: mean(&col(|r| r.mean_step_ms)),
                infeasible_mean: mean(&col(|r| r.infeasible_steps as f64)),
            }
        })
        .collect()
}

pub fn aggregate_tsv(aggs: &[Aggregate]) -> String {
    let mut out = String::from(
        "method\tK\truns\tfailed\tcost_mean\tcost_std\tiae_mean\tiae_std\tise_mean\tise_std\tmean_step_ms\tinfeasible_steps_mean\n",
    );
    for a in aggs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4}\t{:.3}",
            a.method,
            a.k,
            a.runs,
            a.failed,
            a.cost_mean,
            a.cost_std,
            a.iae_mean,
            a.iae_std,
            a.ise_mean,
            a.ise_std,
            a.step_ms_mean,
            a.infeasible_mean
        )
        .expect("writing to a String");
    }
    out
}

/// Cost-versus-K curves, one gnuplot data block per method.
pub fn gnuplot_data(aggs: &[Aggregate]) -> String {
    let mut out = String::new();
    let mut methods: Vec<Method> = aggs.iter().map(|a| a.method).collect();
    methods.dedup();
    for (i, method) in methods.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        writeln!(out, "# {method}\n# K cost_mean cost_std").expect("writing to a String");
        for a in aggs.iter().filter(|a| a.method == *method) {
            writeln!(out, "{} {:.6e} {:.6e}", a.k, a.cost_mean, a.cost_std).expect("writing to a String");
        }
    }
    out
}

/// Plain-text cost-versus-K table with one column per method.
pub fn text_summary(aggs: &[Aggregate]) -> String {
    let mut methods: Vec<Method> = aggs.iter().map(|a| a.method).collect();
    methods.dedup();
    let mut ks: Vec<usize> = aggs.iter().map(|a| a.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut out = format!("{:>8}", "K");
    for m in &methods {
        write!(out, " {:>24}", m.as_str()).expect("writing to a String");
    }
    out.push('\n');
    for k in ks {
        write!(out, "{k:>8}").expect("writing to a String");
        for m in &methods {
            match aggs.iter().find(|a| a.method == *m && a.k == k) {
                Some(a) => write!(out, " {:>12.4e} ± {:<9.2e}", a.cost_mean, a.cost_std),
                None => write!(out, " {:>24}", "-"),
            }
            .expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{make_plant, rollout, PlantKind};
    use crate::rng::rng_from_seed;
    use crate::trajectory::build_hankel;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng as _;

    fn row(method: Method, k: usize, seed: u64, cost: f64) -> GridRow {
        GridRow {
            method,
            k,
            seed,
            cost,
            iae: cost.sqrt(),
            ise: cost,
            mean_step_ms: 0.0,
            infeasible_steps: 0,
            error: None,
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let rows = vec![row(Method::Random, 20, 1, 0.5), row(Method::L1, 50, 2, 1.25e-3)];
        let csv = results_csv(&rows);
        assert!(csv.starts_with("method,K,seed,cost,iae,ise,mean_step_ms,infeasible_steps\n"));
        assert_eq!(parse_results_csv(&csv).unwrap(), rows);
    }

    #[test]
    fn aggregate_mean_and_std() {
        let rows = vec![
            row(Method::Random, 20, 0, 1.0),
            row(Method::Random, 20, 1, 3.0),
            row(Method::Datamodel, 20, 0, 2.0),
        ];
        let aggs = aggregate(&rows);
        assert_eq!(aggs.len(), 2);
        let random = aggs.iter().find(|a| a.method == Method::Random).unwrap();
        assert_eq!(random.cost_mean, 2.0);
        assert!((random.cost_std - 2f64.sqrt()).abs() < 1e-15);
        assert!(aggregate_tsv(&aggs).lines().count() == 3);
        assert!(gnuplot_data(&aggs).contains("# random"));
    }

    #[test]
    fn one_cell_grid_is_deterministic() {
        let plant = make_plant(PlantKind::Lti2, &Default::default()).unwrap();
        let mut rng = rng_from_seed(2);
        let u = DMatrix::from_fn(1, 70, |_, _| rng.random_range(-1.0..1.0));
        let traj = rollout(&plant, &DVector::zeros(2), &u, &NoiseSpec::noiseless()).unwrap().trajectory;
        let h = build_hankel(&[traj], 4, 10).unwrap();
        let cfg = DeepcConfig::diagonal(&[1.0], &[0.1]);
        let sampler = SamplerSpec::for_plant(&plant);
        let setup = GridSetup {
            plant: &plant,
            h: &h,
            cfg: &cfg,
            noise: NoiseSpec::noiseless(),
            sampler: &sampler,
            archive: None,
        };
        let grid = ExperimentGrid {
            methods: vec![Method::Random],
            ks: vec![20],
            seeds: vec![3],
            t_sim: 10,
            record_timing: false,
        };
        let a = run_grid(&setup, &grid, &ModelRegistry::default()).unwrap();
        assert_eq!(a.len(), 1);
        assert!(!a[0].failed());
        let b = run_grid(&setup, &grid, &ModelRegistry::default()).unwrap();
        assert_eq!(results_csv(&a), results_csv(&b));

        let with_model = ExperimentGrid {
            methods: vec![Method::Datamodel, Method::L1],
            ..grid
        };
        let rows = run_grid(&setup, &with_model, &ModelRegistry::default()).unwrap();
        assert!(rows[0].failed());
        assert!(!rows[1].failed());
    }
}
