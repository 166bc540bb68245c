use std::collections::BTreeMap;

use deepc_core::closed_loop::{run_closed_loop, LoopSetup, Policy, ReferenceTrack};
use deepc_core::datamodel::Activation;
use deepc_core::datamodel::{ContextEncoding, TrainOptions, TrainedModel};
use deepc_core::pipeline::{
    generate_dataset, sample_initial, train_on_dataset, Dataset, GenerationSetup, ModelRegistry, NetSpec, SamplerSpec,
};
use deepc_core::rng::rng_from_seed;
use deepc_core::{build_hankel, make_plant, rollout, DeepcConfig, HankelSet, NoiseSpec, PlantKind, PlantModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn fixture() -> (PlantModel, HankelSet, DeepcConfig) {
    let plant = make_plant(PlantKind::Pendulum, &BTreeMap::new()).unwrap();
    let mut rng = rng_from_seed(11);
    let trajs: Vec<_> = (0..3)
        .map(|_| {
            let u = DMatrix::from_fn(1, 30, |_, _| rng.random_range(-1.0..=1.0));
            rollout(&plant, &DVector::from_vec(vec![0.1, 0.0]), &u, &NoiseSpec::noiseless())
                .unwrap()
                .trajectory
        })
        .collect();
    let h = build_hankel(&trajs, 4, 10).unwrap();
    let mut cfg = DeepcConfig::diagonal(&[1.0], &[0.01]).with_regularization(1.0, 1e5);
    cfg.u_box = Some(plant.input_bounds.clone());
    (plant, h, cfg)
}

fn small_dataset(plant: &PlantModel, h: &HankelSet, cfg: &DeepcConfig, seed: u64) -> Dataset {
    let spec = SamplerSpec {
        alpha: 0.4,
        t_sim: 12,
        ..SamplerSpec::for_plant(plant)
    };
    let setup = GenerationSetup {
        plant,
        h,
        cfg,
        noise: NoiseSpec::noiseless(),
        spec: &spec,
        archive: None,
        penalty_fallback: 1e3,
    };
    generate_dataset(&setup, 16, seed).unwrap()
}

#[test]
fn dataset_generation_is_seeded_and_round_trips() {
    let (plant, h, cfg) = fixture();
    let a = small_dataset(&plant, &h, &cfg, 5);
    let b = small_dataset(&plant, &h, &cfg, 5);
    let mut bytes_a = Vec::new();
    let mut bytes_b = Vec::new();
    a.write_to(&mut bytes_a).unwrap();
    b.write_to(&mut bytes_b).unwrap();
    assert_eq!(bytes_a, bytes_b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    a.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    let mut bytes_back = Vec::new();
    back.write_to(&mut bytes_back).unwrap();
    assert_eq!(bytes_a, bytes_back);

    let k_min = 2 * h.t_ini;
    assert!(a.samples.iter().all(|s| s.s.count_ones() >= k_min && s.j.is_finite()));
    assert_ne!(small_dataset(&plant, &h, &cfg, 6).samples[0].s, a.samples[0].s);
}

#[test]
fn trained_model_drives_closed_loop_and_survives_serialization() {
    let (plant, h, cfg) = fixture();
    let data = small_dataset(&plant, &h, &cfg, 9);
    let spec = NetSpec {
        hidden: vec![8],
        activation: Activation::Relu,
        encoding: ContextEncoding::Relative,
        init_seed: 1,
    };
    let opts = TrainOptions {
        epochs: 5,
        batch_size: 4,
        ..TrainOptions::default()
    };
    let (model, report) = train_on_dataset(&data, &spec, &opts).unwrap();
    assert_eq!(report.train_loss.len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    assert_eq!(back.to_json().unwrap(), model.to_json().unwrap());

    let registry = ModelRegistry::new(vec![back]);
    let k = (0.4 * h.columns() as f64).round() as usize;
    let chosen = registry.select_checked(k).unwrap();

    let sampler = SamplerSpec::for_plant(&plant);
    let init = sample_initial(&plant, &sampler, &NoiseSpec::noiseless(), None, h.t_ini, 3).unwrap();
    let track = ReferenceTrack::constant(&DVector::from_element(1, 0.05)).unwrap();
    let setup = LoopSetup {
        plant: &plant,
        h: &h,
        cfg: &cfg,
        noise: NoiseSpec::noiseless(),
        t_sim: 10,
    };
    let res = run_closed_loop(&setup, &init, &Policy::Datamodel { net: &chosen.net, k }, &track).unwrap();
    assert_eq!(res.steps.len(), 10);
    assert!(res.steps.iter().all(|s| s.selected == k));
    assert!(res.metrics.cost.is_finite());
}
