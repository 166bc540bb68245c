//! The subcommands as library functions; `main` only parses flags and prints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context as _, Result};
use deepc_core::datamodel::TrainedModel;
use deepc_core::grid::{self, Aggregate, GridRow, GridSetup, Method};
use deepc_core::pipeline::{generate_dataset, train_on_dataset, ArchiveEntry, Dataset, GenerationSetup, ModelRegistry};
use deepc_core::rng::{derive_seed, derived_rng};
use deepc_core::trajectory::TrajectoryMeta;
use deepc_core::{build_hankel, excitation_rank, rollout, HankelSet, PlantModel, Trajectory};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::config::ExperimentConfig;

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn traj_name(i: usize) -> String {
    format!("traj_{i:03}")
}

#[derive(Debug, Clone)]
pub struct CollectSummary {
    pub files: Vec<PathBuf>,
    pub columns: usize,
    pub rank: usize,
    /// Full rank `m·L + n` expected for a persistently excited linear plant.
    pub linear_rank: usize,
}

impl CollectSummary {
    pub fn render(&self) -> String {
        format!(
            "wrote {} trajectories\nHankel columns: {}\nexcitation rank: {} (m·L + n = {})\n",
            self.files.len() / 2,
            self.columns,
            self.rank,
            self.linear_rank
        )
    }
}

/// Excites the plant from random resets and writes one CSV plus sidecar per run.
pub fn collect(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<CollectSummary> {
    let plant = cfg.build_plant()?;
    guard(&out_dir.join(format!("{}.csv", traj_name(0))), force)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let reset_box = cfg.sampler_spec(&plant, cfg.datamodel.alphas[0]).reset_box;
    let h = &cfg.hankel;
    let a = h.input_amplitude;
    let mut trajs = Vec::with_capacity(h.trajectories);
    let mut files = Vec::new();
    for i in 0..h.trajectories {
        let seed = derive_seed(cfg.seed, i as u64, "collect");
        let mut rng = derived_rng(seed, 0, "excitation");
        let x0 = DVector::from_iterator(
            reset_box.len(),
            reset_box
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo }),
        );
        let inputs = DMatrix::from_fn(plant.input_dim(), h.length, |_, _| rng.random_range(-a..=a));
        let ro = rollout(&plant, &x0, &inputs, &cfg.noise(derive_seed(seed, 0, "noise")))?;
        let csv = out_dir.join(format!("{}.csv", traj_name(i)));
        let meta_path = out_dir.join(format!("{}.meta", traj_name(i)));
        ro.trajectory.write_csv(&csv)?;
        let meta = TrajectoryMeta {
            m: plant.input_dim(),
            p: plant.output_dim(),
            dt: plant.dt,
            seed,
            x0: Some(x0.as_slice().to_vec()),
        };
        fs::write(&meta_path, meta.to_text())?;
        files.push(csv);
        files.push(meta_path);
        trajs.push(ro.trajectory);
    }
    let hk = build_hankel(&trajs, h.t_ini, h.horizon)?;
    Ok(CollectSummary {
        files,
        columns: hk.columns(),
        rank: excitation_rank(&hk),
        linear_rank: plant.input_dim() * hk.window() + plant.state_dim(),
    })
}

/// Trajectories of `dir` in file-name order, with their recorded resets.
pub fn load_trajectories(dir: &Path, plant: &PlantModel) -> Result<Vec<ArchiveEntry>> {
    let mut csvs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading trajectory directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv") && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("traj_"))
        })
        .collect();
    csvs.sort();
    ensure!(!csvs.is_empty(), "no traj_*.csv files in {}", dir.display());
    csvs.iter()
        .map(|csv| {
            let meta_path = csv.with_extension("meta");
            let meta =
                TrajectoryMeta::from_text(&fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?)?;
            ensure!(
                meta.m == plant.input_dim() && meta.p == plant.output_dim(),
                "{} has m={}, p={} but the configured plant has m={}, p={}",
                csv.display(),
                meta.m,
                meta.p,
                plant.input_dim(),
                plant.output_dim()
            );
            let trajectory =
                Trajectory::from_csv(&fs::read_to_string(csv)?, meta.dt).with_context(|| format!("parsing {}", csv.display()))?;
            let x0 = meta.x0.ok_or_else(|| anyhow!("{} records no reset state", meta_path.display()))?;
            Ok(ArchiveEntry {
                trajectory,
                x0: DVector::from_vec(x0),
            })
        })
        .collect()
}

fn hankel_from(cfg: &ExperimentConfig, archive: &[ArchiveEntry]) -> Result<HankelSet> {
    let trajs: Vec<Trajectory> = archive.iter().map(|e| e.trajectory.clone()).collect();
    Ok(build_hankel(&trajs, cfg.hankel.t_ini, cfg.hankel.horizon)?)
}

#[derive(Debug, Clone)]
pub struct GendataSummary {
    pub samples: usize,
    pub ok: usize,
    pub infeasible: usize,
    pub failed: usize,
    pub columns: usize,
    pub alpha: f64,
    pub mean_popcount: f64,
}

impl GendataSummary {
    pub fn render(&self) -> String {
        format!(
            "samples: {} (ok {}, infeasible {}, failed {})\ncolumns M = {}, alpha = {}: mean popcount {:.2} (expected {:.2})\n",
            self.samples,
            self.ok,
            self.infeasible,
            self.failed,
            self.columns,
            self.alpha,
            self.mean_popcount,
            self.alpha * self.columns as f64
        )
    }
}

/// Dataset seed for inclusion probability `alpha`.
pub fn dataset_seed(cfg: &ExperimentConfig, alpha: f64) -> u64 {
    derive_seed(cfg.seed, alpha.to_bits(), "dataset")
}

pub fn gendata(cfg: &ExperimentConfig, traj_dir: &Path, out_file: &Path, alpha: f64, force: bool) -> Result<GendataSummary> {
    guard(out_file, force)?;
    let plant = cfg.build_plant()?;
    let archive = load_trajectories(traj_dir, &plant)?;
    let h = hankel_from(cfg, &archive)?;
    let deepc = cfg.deepc_config(&plant)?;
    let spec = cfg.sampler_spec(&plant, alpha);
    let setup = GenerationSetup {
        plant: &plant,
        h: &h,
        cfg: &deepc,
        noise: cfg.noise(0),
        spec: &spec,
        archive: Some(&archive),
        penalty_fallback: cfg.datamodel.penalty_fallback,
    };
    let dataset = generate_dataset(&setup, cfg.datamodel.n_train, dataset_seed(cfg, alpha))?;
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    dataset.save(out_file)?;
    let (ok, infeasible, failed) = dataset.status_counts();
    Ok(GendataSummary {
        samples: dataset.samples.len(),
        ok,
        infeasible,
        failed,
        columns: h.columns(),
        alpha,
        mean_popcount: dataset.mean_popcount(),
    })
}

pub fn model_file_name(alpha: f64) -> String {
    format!("model_alpha_{alpha}.json")
}

#[derive(Debug)]
pub struct TrainSummary {
    pub alpha: f64,
    pub dataset: PathBuf,
    /// Model path and final validation loss, or the reason training failed.
    pub outcome: Result<(PathBuf, f64)>,
}

pub fn render_train(summaries: &[TrainSummary]) -> String {
    let mut out = String::from("alpha\tvalidation_loss\tmodel\n");
    for s in summaries {
        let _ = match &s.outcome {
            Ok((path, loss)) => writeln!(out, "{}\t{loss:.6e}\t{}", s.alpha, path.display()),
            Err(e) => writeln!(out, "{}\tfailed\t{e:#}", s.alpha),
        };
    }
    out
}

/// Trains one network per dataset and writes the model and its loss curve.
pub fn train(cfg: &ExperimentConfig, datasets: &[PathBuf], out_dir: &Path, force: bool) -> Result<Vec<TrainSummary>> {
    ensure!(!datasets.is_empty(), "no dataset files given");
    let plant = cfg.build_plant()?;
    let mut loaded = Vec::with_capacity(datasets.len());
    for path in datasets {
        let d = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
        let hd = &d.header;
        ensure!(
            hd.m == plant.input_dim() && hd.p == plant.output_dim() && hd.t_ini == cfg.hankel.t_ini && hd.horizon == cfg.hankel.horizon,
            "{}: dataset has m={}, p={}, T_ini={}, N={} but the config has m={}, p={}, T_ini={}, N={}",
            path.display(),
            hd.m,
            hd.p,
            hd.t_ini,
            hd.horizon,
            plant.input_dim(),
            plant.output_dim(),
            cfg.hankel.t_ini,
            cfg.hankel.horizon
        );
        guard(&out_dir.join(model_file_name(hd.alpha)), force)?;
        loaded.push((path.clone(), d));
    }
    fs::create_dir_all(out_dir)?;
    let spec = cfg.net_spec();
    let opts = cfg.train_options();
    Ok(loaded
        .into_iter()
        .map(|(path, d)| {
            let alpha = d.header.alpha;
            let outcome = (|| -> Result<(PathBuf, f64)> {
                let (model, report) = train_on_dataset(&d, &spec, &opts)?;
                let model_path = out_dir.join(model_file_name(alpha));
                model.save(&model_path)?;
                let mut curve = String::from("epoch,train_loss,val_loss\n");
                for (e, t) in report.train_loss.iter().enumerate() {
                    let v = report.val_loss.get(e).copied().unwrap_or(f64::NAN);
                    let _ = writeln!(curve, "{e},{t},{v}");
                }
                fs::write(out_dir.join(format!("loss_alpha_{alpha}.csv")), curve)?;
                Ok((model_path, model.validation_loss))
            })();
            if let Err(e) = &outcome {
                log::warn!("alpha={alpha}: {e:#}");
            }
            TrainSummary {
                alpha,
                dataset: path,
                outcome,
            }
        })
        .collect())
}

/// Every `model_*.json` of `dir`.
pub fn load_registry(dir: &Path) -> Result<ModelRegistry> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading model directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json") && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("model_"))
        })
        .collect();
    paths.sort();
    let models = paths
        .iter()
        .map(|p| TrainedModel::load(p).with_context(|| format!("loading model {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelRegistry::new(models))
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub rows: Vec<GridRow>,
    pub aggregates: Vec<Aggregate>,
    pub files: Vec<PathBuf>,
}

impl BenchSummary {
    pub fn failed_cells(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Runs the grid and writes the results CSV, the aggregate TSV and gnuplot data.
pub fn bench(cfg: &ExperimentConfig, traj_dir: &Path, model_dir: Option<&Path>, out_csv: &Path, force: bool) -> Result<BenchSummary> {
    let files = vec![out_csv.to_path_buf(), sibling(out_csv, "tsv"), sibling(out_csv, "dat")];
    for f in &files {
        guard(f, force)?;
    }
    let plant = cfg.build_plant()?;
    let archive = load_trajectories(traj_dir, &plant)?;
    let h = hankel_from(cfg, &archive)?;
    let registry = match model_dir {
        Some(dir) => load_registry(dir)?,
        None if cfg.bench.methods.contains(&Method::Datamodel) => bail!("the datamodel method needs --models"),
        None => ModelRegistry::default(),
    };
    if cfg.bench.methods.contains(&Method::Datamodel) {
        ensure!(!registry.is_empty(), "no model_*.json files found for the datamodel method");
        for m in registry.models() {
            ensure!(
                m.net.columns() == h.columns(),
                "model for alpha={} scores {} columns but the data has {}",
                m.alpha,
                m.net.columns(),
                h.columns()
            );
        }
        for &k in &cfg.bench.ks {
            registry.select_checked(k)?;
        }
    }
    let deepc = cfg.deepc_config(&plant)?;
    let sampler = cfg.bench_sampler(&plant);
    let setup = GridSetup {
        plant: &plant,
        h: &h,
        cfg: &deepc,
        noise: cfg.noise(0),
        sampler: &sampler,
        archive: Some(&archive),
    };
    let rows = grid::run_grid(&setup, &cfg.grid(), &registry)?;
    let aggregates = grid::aggregate(&rows);
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&files[0], grid::results_csv(&rows))?;
    fs::write(&files[1], grid::aggregate_tsv(&aggregates))?;
    fs::write(&files[2], grid::gnuplot_data(&aggregates))?;
    Ok(BenchSummary { rows, aggregates, files })
}

/// Aggregate table and cost-versus-K summary of a results CSV.
pub fn report(results_csv: &Path) -> Result<String> {
    let text = fs::read_to_string(results_csv).with_context(|| format!("reading {}", results_csv.display()))?;
    let rows = grid::parse_results_csv(&text)?;
    let aggs = grid::aggregate(&rows);
    Ok(format!(
        "{}\ncost versus K (mean ± std over seeds)\n{}",
        grid::aggregate_tsv(&aggs),
        grid::text_summary(&aggs)
    ))
}
