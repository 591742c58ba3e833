//! One function per subcommand. Each writes its outputs and a
//! `manifest.json` into the configured output directory.

use std::path::{Path, PathBuf};

use pfgm_core::dataset::{center, generate_toy, stats as dataset_stats};
use pfgm_core::field::{negative_normalized, normalized_field};
use pfgm_core::likelihood::{log_likelihood, DivergenceMethod};
use pfgm_core::model::train;
use pfgm_core::ode::{integrate_backward, OdeRun};
use pfgm_core::prior::sample_prior;
use pfgm_core::tree::{build_tree, tree_empirical_field};
use pfgm_core::verify::{self, Direction, TestReport, Theorem1Options};
use pfgm_core::{stats, AugmentedPoint, Dataset, FieldModel, OdeConfig, RngState, ToyName, VectorField};
use serde::Serialize;

use crate::config::{Derivations, RunConfig};
use crate::error::CliError;
use crate::io::{self, Checkpoint, CsvOptions};
use crate::manifest::ManifestBuilder;
use crate::svg;

/// Independent random streams per purpose, all keyed by the run seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const LIKELIHOOD: u64 = 4;
    pub const VERIFY: u64 = 5;
    pub const HELD_OUT: u64 = 6;
}

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    manifest: ManifestBuilder,
}

impl Run {
    pub fn new(command: &str, cfg: RunConfig) -> Result<Self, CliError> {
        let out = PathBuf::from(&cfg.out);
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            out,
            manifest: ManifestBuilder::start(command),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.output(name);
        self.out.join(name)
    }

    fn rng(&self, stream: u64) -> pfgm_core::geometry::StreamRng {
        RngState::new(self.cfg.seed, stream).rng()
    }

    fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            header: self.cfg.csv_header,
            charge_column: self.cfg.csv_charge_column,
        }
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        let path = self.path("manifest.json");
        let m = self.manifest.finish(&self.cfg);
        io::write_json(&path, &m)?;
        Ok(path)
    }
}

/// The configured dataset: a generator name draws `count` points from the
/// data stream, anything else is read as CSV.
pub fn load_dataset(cfg: &RunConfig, opts: CsvOptions) -> Result<Dataset, CliError> {
    let d = match cfg.dataset.parse::<ToyName>() {
        Ok(name) => generate_toy(name, cfg.count, &mut RngState::new(cfg.seed, stream::DATA).rng())?,
        Err(_) => io::load_csv(Path::new(&cfg.dataset), opts)?,
    };
    Ok(if cfg.center { center(&d)? } else { d })
}

/// A fresh draw from the same generator, or `None` for CSV data.
fn held_out(cfg: &RunConfig, count: usize) -> Result<Option<Dataset>, CliError> {
    match cfg.dataset.parse::<ToyName>() {
        Ok(name) => Ok(Some(generate_toy(name, count, &mut RngState::new(cfg.seed, stream::HELD_OUT).rng())?)),
        Err(_) => Ok(None),
    }
}

pub fn gen_data(cfg: RunConfig) -> Result<PathBuf, CliError> {
    if cfg.dataset.parse::<ToyName>().is_err() {
        return Err(CliError::Input(format!("`{}` is not a generator name", cfg.dataset)));
    }
    let mut run = Run::new("gen-data", cfg)?;
    let d = load_dataset(&run.cfg, run.csv_options())?;
    let path = run.path("data.csv");
    io::save_csv(&path, &d, run.csv_options())?;
    run.manifest.derivations = Some(run.cfg.derive(&d)?);
    run.finish()
}

pub fn train_cmd(cfg: RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::new("train", cfg)?;
    let d = load_dataset(&run.cfg, run.csv_options())?;
    let dv = run.cfg.derive(&d)?;
    let pcfg = run.cfg.perturb_config(&dv);
    if run.cfg.large_batch_size > d.len() {
        eprintln!("warning: large_batch_size {} capped at the dataset size {}", run.cfg.large_batch_size, d.len());
        run.cfg.large_batch_size = d.len();
        run.cfg.batch_size = run.cfg.batch_size.min(d.len());
    }
    let tcfg = run.cfg.train_config();
    let out = train(&d, &pcfg, &tcfg, &mut run.rng(stream::TRAIN))?;
    let losses = &out.state.loss_history;
    let loss_path = run.path("loss.csv");
    io::save_table(
        &loss_path,
        &["step".into(), "loss".into()],
        losses.iter().enumerate().map(|(i, l)| vec![(i + 1) as f64, *l]),
    )?;
    let ckpt = Checkpoint::new(out.model, out.raw, pcfg, tcfg, dv, losses.last().copied());
    let ckpt_path = run.path("checkpoint.json");
    io::write_json(&ckpt_path, &ckpt)?;
    run.manifest.derivations = Some(dv);
    run.finish()
}

/// Model and derived schedule for `sample`, `likelihood` and `interpolate`.
/// Returns the dataset too when the exact field is used.
/// A checkpoint's own `gamma` replaces the configured one, since the
/// z-substitution must match the normalization the network learned.
fn model_for(run: &mut Run) -> Result<(FieldModel, Derivations, Option<Dataset>), CliError> {
    let cfg = &run.cfg;
    if cfg.exact {
        let d = load_dataset(cfg, run.csv_options())?;
        let dv = cfg.derive(&d)?;
        let m = FieldModel::ExactEmpirical {
            dataset: d.clone(),
            gamma: cfg.gamma,
        };
        return Ok((m, dv, Some(d)));
    }
    let Some(path) = cfg.checkpoint.clone() else {
        return Err(CliError::Config("need --exact or --checkpoint".into()));
    };
    let ckpt = Checkpoint::load(Path::new(&path))?;
    let mut dv = ckpt.derivations;
    if let Some(z) = cfg.z_max {
        dv.z_max = z;
    }
    match cfg.norm_clip {
        Some(c) if c <= 0.0 => dv.norm_clip = None,
        Some(c) => dv.norm_clip = Some(c),
        None => {}
    }
    dv.z_min = cfg.z_min;
    run.cfg.gamma = ckpt.perturb.gamma;
    Ok((FieldModel::Neural(ckpt.ema), dv, None))
}

fn points_of(d: &Dataset) -> Vec<Vec<f64>> {
    d.iter().map(<[f64]>::to_vec).collect()
}

pub fn sample(cfg: RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::new("sample", cfg)?;
    let (model, dv, data) = model_for(&mut run)?;
    let ode = run.cfg.ode_config(&dv);
    let prior = run.cfg.prior(&dv)?;
    let mut rng = run.rng(stream::SAMPLE);
    let mut samples = Vec::with_capacity(run.cfg.sample_count);
    let mut runs: Vec<OdeRun> = Vec::new();
    let mut failures = 0usize;
    let mut first_error = None;
    for _ in 0..run.cfg.sample_count {
        let x0 = sample_prior(&prior, &mut rng)?;
        match integrate_backward(&x0, &model, &ode) {
            Ok(r) => {
                run.manifest.nfe.push(r.nfe);
                samples.push(r.terminal().x.clone());
                if ode.record_every > 0 {
                    runs.push(r);
                }
            }
            Err(e) => {
                failures += 1;
                run.manifest.nfe.push(e.partial.nfe);
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if samples.is_empty() {
        return Err(CliError::Numerical(first_error.unwrap_or_default()));
    }
    if failures > 0 {
        eprintln!("warning: {failures} of {} trajectories aborted", run.cfg.sample_count);
        run.manifest.note("failed_runs", failures);
        run.manifest.note("first_failure", first_error);
    }
    let n = dv.n;
    let path = run.path("samples.csv");
    io::save_table(&path, &coordinate_header(n), samples.iter().cloned())?;
    if !runs.is_empty() {
        let path = run.path("trajectories.csv");
        io::save_trajectories(&path, &runs, n)?;
        let (report, bins) = verify::norm_z_diagnostic(&runs, run.cfg.norm_z_bins)?;
        let path = run.path("norm_z.csv");
        io::save_table(
            &path,
            &["z_lo", "z_hi", "count", "mean_norm", "std_norm"].map(String::from),
            bins.iter().map(|b| vec![b.z_lo, b.z_hi, b.count as f64, b.mean_norm, b.std_norm]),
        )?;
        run.manifest.note("norm_z", report);
    }
    if run.cfg.svg && n == 2 {
        let truth = data.as_ref().map(points_of).unwrap_or_default();
        let path = run.path("samples.svg");
        std::fs::write(path, svg::scatter(&[(&truth, "#999999"), (&samples, "#c0392b")], "samples"))?;
    }
    run.manifest.derivations = Some(dv);
    run.finish()
}

fn coordinate_header(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

#[derive(Debug, Serialize)]
struct LikelihoodSummary {
    count: usize,
    failed: usize,
    mean_log_density: f64,
    std_log_density: f64,
    mean_bits_per_dim: f64,
    std_bits_per_dim: f64,
}

pub fn likelihood(cfg: RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::new("likelihood", cfg)?;
    let (model, dv, data) = model_for(&mut run)?;
    // The exact field's own sources are degenerate points of its density, so
    // generator datasets are scored on a fresh draw.
    let points = match (&run.cfg.queries, held_out(&run.cfg, run.cfg.sample_count)?) {
        (Some(q), _) => io::load_csv(Path::new(q), CsvOptions::default())?,
        (None, Some(fresh)) => fresh,
        (None, None) => data.map_or_else(|| load_dataset(&run.cfg, run.csv_options()), Ok)?,
    };
    if points.dim().n() != dv.n {
        return Err(CliError::Dimension {
            expected: dv.n,
            got: points.dim().n(),
        });
    }
    let ode = OdeConfig {
        record_every: 0,
        ..run.cfg.ode_config(&dv)
    };
    let method = match run.cfg.hutchinson_probes {
        0 => DivergenceMethod::ExactFd,
        probes => DivergenceMethod::Hutchinson { probes },
    };
    let mut rng = run.rng(stream::LIKELIHOOD);
    let count = run.cfg.sample_count.min(points.len());
    let mut rows = Vec::with_capacity(count);
    let mut failed = 0;
    for x in points.iter().take(count) {
        match log_likelihood(x, &model, &ode, method, &mut rng) {
            Ok(r) => {
                run.manifest.nfe.push(r.nfe);
                let mut row = x.to_vec();
                row.extend([r.log_density, r.bits_per_dim, r.nfe as f64]);
                rows.push(row);
            }
            Err(e) => {
                failed += 1;
                eprintln!("warning: likelihood failed: {e}");
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Numerical("every likelihood evaluation failed".into()));
    }
    let n = dv.n;
    let ld: Vec<f64> = rows.iter().map(|r| r[n]).collect();
    let bpd: Vec<f64> = rows.iter().map(|r| r[n + 1]).collect();
    let summary = LikelihoodSummary {
        count: rows.len(),
        failed,
        mean_log_density: stats::mean(&ld),
        std_log_density: stats::std_dev(&ld),
        mean_bits_per_dim: stats::mean(&bpd),
        std_bits_per_dim: stats::std_dev(&bpd),
    };
    let mut header = coordinate_header(n);
    header.extend(["log_density", "bits_per_dim", "nfe"].map(String::from));
    let path = run.path("likelihood.csv");
    io::save_table(&path, &header, rows)?;
    let path = run.path("summary.json");
    io::write_json(&path, &summary)?;
    run.manifest.derivations = Some(dv);
    run.finish()
}

pub fn interpolate(cfg: RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::new("interpolate", cfg)?;
    let (model, dv, data) = model_for(&mut run)?;
    let (a, b) = match (&run.cfg.interp_a, &run.cfg.interp_b) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => {
            let d = match data {
                Some(d) => d,
                None => load_dataset(&run.cfg, run.csv_options())?,
            };
            if d.len() < 2 {
                return Err(CliError::Input("need two endpoints".into()));
            }
            (d.point(0).to_vec(), d.point(1).to_vec())
        }
    };
    for p in [&a, &b] {
        if p.len() != dv.n {
            return Err(CliError::Dimension {
                expected: dv.n,
                got: p.len(),
            });
        }
    }
    let ode = run.cfg.ode_config(&dv);
    let path_points = verify::interpolate(&a, &b, run.cfg.interp_steps, &model, &ode)?;
    let steps = path_points.len();
    let mut header = vec!["s".to_string()];
    header.extend(coordinate_header(dv.n));
    let path = run.path("interpolation.csv");
    io::save_table(
        &path,
        &header,
        path_points.into_iter().enumerate().map(|(k, p)| {
            let mut row = vec![k as f64 / (steps - 1) as f64];
            row.extend(p);
            row
        }),
    )?;
    run.manifest.derivations = Some(dv);
    run.finish()
}

pub fn field_eval(cfg: RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::new("field-eval", cfg)?;
    let Some(qpath) = run.cfg.queries.clone() else {
        return Err(CliError::Config("field-eval needs `queries` (CSV of x..., z rows)".into()));
    };
    let queries = io::load_csv(Path::new(&qpath), CsvOptions::default())?;
    let aug = queries.dim().n();
    let (model, dv, data) = model_for(&mut run)?;
    if aug != dv.n + 1 {
        return Err(CliError::Dimension {
            expected: dv.n + 1,
            got: aug,
        });
    }
    let tree = match (&data, run.cfg.tree_theta) {
        (Some(d), Some(theta)) => Some(build_tree(d, run.cfg.tree_leaf, theta)?),
        _ => None,
    };
    let sqrt_n = (dv.n as f64).sqrt();
    let mut header: Vec<String> = coordinate_header(dv.n);
    header.push("z".into());
    if data.is_some() {
        header.extend((1..=aug).map(|i| format!("e{i}")));
    }
    header.extend((1..=aug).map(|i| format!("v{i}")));
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries.iter() {
        let p = AugmentedPoint::from_slice(q);
        let mut row = q.to_vec();
        match (&data, &tree) {
            (Some(_), Some(t)) => {
                let e = tree_empirical_field(&p, t)?;
                let v = negative_normalized(&e, sqrt_n, run.cfg.gamma);
                row.extend(e);
                row.extend(v);
            }
            (Some(d), None) => {
                let f = normalized_field(&p, d, run.cfg.gamma)?;
                row.extend(f.e_hat);
                row.extend(f.v);
            }
            (None, _) => row.extend(model.evaluate(&p)?),
        }
        rows.push(row);
    }
    let path = run.path("field.csv");
    io::save_table(&path, &header, rows)?;
    run.manifest.derivations = Some(dv);
    run.finish()
}

pub const SUITES: &[&str] = &["theorem1", "backward", "hits", "kappa", "norm_z", "tree", "interpolate"];

#[derive(Debug, Serialize)]
struct VerifyOutput {
    all_pass: bool,
    reports: Vec<TestReport>,
}

pub fn verify_cmd(cfg: RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::new("verify", cfg)?;
    let selected: Vec<&str> = if run.cfg.suite == "all" {
        SUITES.to_vec()
    } else {
        let asked: Vec<String> = run.cfg.suite.split(',').map(|s| s.trim().to_string()).collect();
        if let Some(bad) = asked.iter().find(|s| !SUITES.contains(&s.as_str())) {
            return Err(CliError::Config(format!("unknown suite `{bad}`; expected all or one of {SUITES:?}")));
        }
        SUITES.iter().copied().filter(|s| asked.iter().any(|a| a == s)).collect()
    };
    let d = load_dataset(&run.cfg, run.csv_options())?;
    let dv = run.cfg.derive(&d)?;
    let ode = run.cfg.ode_config(&dv);
    let prior = run.cfg.prior(&dv)?;
    let model = FieldModel::ExactEmpirical {
        dataset: d.clone(),
        gamma: run.cfg.gamma,
    };
    let mut rng = run.rng(stream::VERIFY);
    let mut reports = Vec::new();
    let count = run.cfg.verify_count;
    for suite in selected {
        let rep = match suite {
            "theorem1" => {
                let r = run.cfg.verify_radius.unwrap_or(1e3 * dv.max_norm);
                verify::theorem1_uniformity(&d, r, count, &Theorem1Options::default(), &mut rng)?
            }
            "backward" => backward_suite(&run.cfg, &d, &ode, &prior, &mut rng)?,
            "hits" => {
                let charges = Dataset::from_rows(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])?.with_charges(vec![1.0, 3.0])?;
                verify::hit_probability(&charges, run.cfg.hit_count, 1e3, 1e-3, None, &mut rng)?
            }
            "kappa" => {
                let k = verify::kappa(dv.z_max, dv.mean_sq_norm, dv.n);
                TestReport::new("kappa_at_z_max", k, 100.0, Direction::Above, d.len()).with("z_max", dv.z_max)
            }
            "norm_z" => {
                let rec = OdeConfig { record_every: 1, ..ode };
                let mut runs = Vec::new();
                for _ in 0..100 {
                    let x0 = sample_prior(&prior, &mut rng)?;
                    runs.push(integrate_backward(&x0, &model, &rec)?);
                }
                let (rep, bins) = verify::norm_z_diagnostic(&runs, run.cfg.norm_z_bins)?;
                let path = run.path("norm_z.csv");
                io::save_table(
                    &path,
                    &["z_lo", "z_hi", "count", "mean_norm", "std_norm"].map(String::from),
                    bins.iter().map(|b| vec![b.z_lo, b.z_hi, b.count as f64, b.mean_norm, b.std_norm]),
                )?;
                announce(&rep);
                reports.push(rep);
                let norms: Vec<f64> = (0..10_000)
                    .map(|_| sample_prior(&prior, &mut rng).map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt()))
                    .collect::<Result<_, _>>()?;
                verify::prior_norm_spread(&norms, dv.n)
            }
            "tree" => tree_suite(&d, &mut rng)?,
            "interpolate" => {
                let tight = OdeConfig {
                    rk45_atol: 1e-6,
                    rk45_rtol: 1e-6,
                    ..ode
                };
                let (a, b) = (d.point(0), d.point(d.len() - 1));
                let ends = verify::interpolate(a, b, 2, &model, &tight)?;
                let err = dist(&ends[0], a).max(dist(&ends[1], b));
                TestReport::new("interpolate_endpoints", err, 1e-2, Direction::Below, 2)
            }
            _ => unreachable!(),
        };
        announce(&rep);
        reports.push(rep);
    }
    let all_pass = reports.iter().all(|r| r.pass);
    let path = run.path("report.json");
    io::write_json(&path, &VerifyOutput { all_pass, reports: reports.clone() })?;
    run.manifest.derivations = Some(dv);
    let failed: Vec<String> = reports.iter().filter(|r| !r.pass).map(|r| r.name.clone()).collect();
    run.finish()?;
    if all_pass {
        Ok(PathBuf::from(&path))
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

fn announce(rep: &TestReport) {
    let verdict = if rep.pass { "PASS" } else { "FAIL" };
    eprintln!("{verdict} {}: {:.4e} (threshold {:.4e})", rep.name, rep.statistic, rep.threshold);
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn backward_suite<R: rand::Rng>(
    cfg: &RunConfig,
    d: &Dataset,
    ode: &OdeConfig,
    prior: &pfgm_core::PriorSpec,
    rng: &mut R,
) -> Result<TestReport, CliError> {
    let size = cfg.verify_count.min(1000);
    let (model_data, pool) = match held_out(cfg, 4 * size)? {
        Some(pool) => (d.clone(), pool),
        None => {
            if d.len() < 4 * size {
                return Err(CliError::Input(format!("backward suite needs at least {} points", 4 * size)));
            }
            d.split_at(d.len() - 2 * size)
        }
    };
    let threshold = verify::calibrate_energy_threshold(&pool, size, 100, rng)?;
    let (reference, _) = pool.split_at(size);
    let model = FieldModel::ExactEmpirical {
        dataset: model_data,
        gamma: cfg.gamma,
    };
    let out = verify::backward_recovery(&model, prior, &OdeConfig { record_every: 0, ..*ode }, &reference, size, size, threshold, rng)?;
    Ok(out.report)
}

fn tree_suite<R: rand::Rng>(d: &Dataset, rng: &mut R) -> Result<TestReport, CliError> {
    let st = dataset_stats(d)?;
    let n = d.dim().n();
    let r1 = ((n as f64).sqrt() * st.mean_sq_norm / 2.0).sqrt();
    let tree = build_tree(d, 16, 0.5)?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut u = pfgm_core::geometry::sample_unit_sphere(n, rng)?;
        u[n] = u[n].abs();
        let rho = r1 * 10f64.powf(rng.random::<f64>()) * 1.0001;
        let q = AugmentedPoint::from_slice(&u.iter().map(|c| c * rho).collect::<Vec<_>>());
        let exact = pfgm_core::field::empirical_field(&q, d)?;
        let approx = tree_empirical_field(&q, &tree)?;
        let nrm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(dist(&exact, &approx) / nrm);
    }
    Ok(TestReport::new("tree_fidelity", worst, 1e-3, Direction::Below, 100))
}
