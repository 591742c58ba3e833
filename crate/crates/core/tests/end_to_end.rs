//! Slower checks that chain several modules together.

use pfgm_core::dataset::{generate_toy, stats as dataset_stats, Dataset, ToyName};
use pfgm_core::field::{normalized_field, AugmentedPoint};
use pfgm_core::geometry::{sample_unit_sphere, RngState};
use pfgm_core::likelihood::{log_likelihood, DivergenceMethod};
use pfgm_core::model::{loss, train, TrainConfig};
use pfgm_core::ode::OdeConfig;
use pfgm_core::perturb::{perturb, PerturbConfig};
use pfgm_core::prior::PriorSpec;
use pfgm_core::stats::{energy_distance, mean};
use pfgm_core::verify::{calibrate_energy_threshold, generate, interpolate, theorem1_uniformity, Theorem1Options};
use pfgm_core::{FieldModel, VectorField};

fn toy(name: ToyName, count: usize, seed: u64) -> Dataset {
    generate_toy(name, count, &mut RngState::new(seed, 0).rng()).unwrap()
}

fn exact(d: Dataset) -> FieldModel {
    FieldModel::ExactEmpirical { dataset: d, gamma: 0.05 }
}

fn far_ode() -> OdeConfig {
    OdeConfig {
        z_max: 40.0,
        gamma: 0.05,
        ..OdeConfig::default()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn energy_distance_tells_disk_from_heart() {
    let mut rng = RngState::new(20, 0).rng();
    let threshold = calibrate_energy_threshold(&toy(ToyName::Disk, 4000, 21), 500, 50, &mut rng).unwrap();
    let model = exact(toy(ToyName::Disk, 2000, 22));
    let prior = PriorSpec::new(40.0, 2).unwrap();
    let (generated, nfe) = generate(&model, &prior, &far_ode(), 500, &mut rng).unwrap();
    assert!(nfe > 0.0);
    let disk = toy(ToyName::Disk, 500, 23);
    let heart = toy(ToyName::Heart, 500, 24);
    let same = energy_distance(generated.flat(), disk.flat(), 2).unwrap();
    let other = energy_distance(generated.flat(), heart.flat(), 2).unwrap();
    assert!(same < threshold, "disk {same} vs threshold {threshold}");
    assert!(other > threshold, "heart {other} vs threshold {threshold}");
}

#[test]
fn theorem1_holds_on_the_heart() {
    let heart = toy(ToyName::Heart, 500, 30);
    let r = 1e3 * dataset_stats(&heart).unwrap().max_norm * 1.0001;
    let opts = Theorem1Options {
        threshold: Some(0.0163),
        ..Theorem1Options::default()
    };
    let rep = theorem1_uniformity(&heart, r, 10_000, &opts, &mut RngState::new(31, 0).rng()).unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn interpolation_endpoints_round_trip() {
    let d = toy(ToyName::Disk, 1000, 40);
    let model = exact(d.clone());
    let cfg = OdeConfig {
        rk45_atol: 1e-6,
        rk45_rtol: 1e-6,
        ..far_ode()
    };
    let fresh = toy(ToyName::Disk, 2, 41);
    let (a, b) = (fresh.point(0), fresh.point(1));
    let path = interpolate(a, b, 2, &model, &cfg).unwrap();
    for (got, want) in path.iter().zip([a, b]) {
        let err: f64 = got.iter().zip(want).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(err < 1e-2, "{err}");
    }
}

fn mean_bits_per_dim(model: &FieldModel, points: &Dataset, cfg: &OdeConfig) -> f64 {
    let mut rng = RngState::new(50, 0).rng();
    let bpd: Vec<f64> = points
        .iter()
        .map(|x| log_likelihood(x, model, cfg, DivergenceMethod::ExactFd, &mut rng).unwrap().bits_per_dim)
        .collect();
    assert!(bpd.iter().all(|b| b.is_finite()));
    mean(&bpd)
}

#[test]
fn bits_per_dim_is_stable_across_tolerances() {
    let model = exact(toy(ToyName::Disk, 300, 51));
    let points = toy(ToyName::Disk, 1000, 52);
    let at = |tol: f64| {
        let cfg = OdeConfig {
            rk45_atol: tol,
            rk45_rtol: tol,
            ..far_ode()
        };
        mean_bits_per_dim(&model, &points, &cfg)
    };
    let (loose, tight) = (at(1e-4), at(1e-6));
    assert!((loose - tight).abs() < 0.05, "{loose} vs {tight}");
}

#[test]
fn log_likelihood_settles_once_the_prior_is_far() {
    let d = toy(ToyName::Disk, 200, 60);
    let z0 = 1e3 * dataset_stats(&d).unwrap().max_norm * 1.01;
    let model = exact(d);
    let points = toy(ToyName::Disk, 10, 61);
    let mut rng = RngState::new(62, 0).rng();
    let ll = |z_max: f64, x: &[f64], rng: &mut _| {
        let cfg = OdeConfig {
            z_max,
            rk45_atol: 1e-8,
            rk45_rtol: 1e-8,
            ..far_ode()
        };
        log_likelihood(x, &model, &cfg, DivergenceMethod::ExactFd, rng).unwrap().log_density
    };
    for x in points.iter() {
        let (a, b) = (ll(z0, x, &mut rng), ll(4.0 * z0, x, &mut rng));
        assert!((a - b).abs() < 0.01, "{a} vs {b}");
    }
}

#[test]
fn single_point_training_learns_the_radial_field() {
    // copies of one point, so batches can be drawn
    let point = [0.3, -0.2];
    let rows = vec![point; 256];
    let d = Dataset::from_rows(&rows).unwrap();
    let pcfg = PerturbConfig {
        gamma: 0.05,
        ..PerturbConfig::default()
    };
    let tcfg = TrainConfig {
        steps: 1500,
        batch_size: 64,
        large_batch_size: 256,
        lr: 3e-3,
        ema_decay: 0.99,
        hidden: vec![32, 32],
        ..TrainConfig::default()
    };
    let out = train(&d, &pcfg, &tcfg, &mut RngState::new(70, 0).rng()).unwrap();
    let mut rng = RngState::new(71, 0).rng();
    let mut worst: f64 = 1.0;
    for _ in 0..100 {
        let mut u = sample_unit_sphere(2, &mut rng).unwrap();
        u[2] = u[2].abs().max(0.05);
        let rho = 1.0 + 4.0 * rand::Rng::random::<f64>(&mut rng);
        let q = AugmentedPoint::new(vec![point[0] + rho * u[0], point[1] + rho * u[1]], rho * u[2]);
        let want = normalized_field(&q, &d, 0.05).unwrap().v;
        worst = worst.min(cosine(&out.model.evaluate(&q).unwrap(), &want));
    }
    assert!(worst >= 0.99, "worst cosine {worst}");
}

#[test]
fn training_cuts_held_out_loss_tenfold() {
    let d = toy(ToyName::Disk, 4000, 80);
    let held = toy(ToyName::Disk, 500, 81);
    let pcfg = PerturbConfig {
        gamma: 0.05,
        ..PerturbConfig::default()
    };
    let tcfg = TrainConfig {
        steps: 1500,
        ema_decay: 0.99,
        hidden: vec![64, 64],
        ..TrainConfig::default()
    };
    let mut rng = RngState::new(82, 0).rng();
    let points: Vec<AugmentedPoint> = held.iter().map(|x| perturb(x, &pcfg, &mut rng).unwrap().point).collect();
    let targets: Vec<Vec<f64>> = points.iter().map(|q| normalized_field(q, &d, 0.05).unwrap().v).collect();
    let init = train(&d, &pcfg, &TrainConfig { steps: 0, ..tcfg.clone() }, &mut RngState::new(83, 0).rng()).unwrap();
    let trained = train(&d, &pcfg, &tcfg, &mut RngState::new(83, 0).rng()).unwrap();
    let before = loss(&init.raw, &points, &targets).unwrap();
    let after = loss(&trained.model, &points, &targets).unwrap();
    assert!(after * 10.0 <= before, "loss {before} -> {after}");
}
