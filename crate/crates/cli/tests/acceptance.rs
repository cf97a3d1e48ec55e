//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with the measured values; the process fails if any criterion fails.
//!
//! Set `IONEX_REAL_FILE` to also run the IONEX round trip on a real IGS file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use vtec_bnn::bnn::{
    kl_gaussian, loss_and_grads_with_eps, loss_with_eps, parse_architecture, train, Batch, Epsilon, GaussianParam,
    KlScale, Network, TrainConfig, TrainingData,
};
use vtec_bnn::calibrate::{fit_calibration, CalibrationPair};
use vtec_bnn::checkpoint::Model;
use vtec_bnn::dataset::{bootstrap_indices, build_samples, ENCODED_DIM};
use vtec_bnn::eval::{apply_to_records, coverage_ratio, error_records, summarize, ErrorRecord};
use vtec_bnn::inference::{predict_bagged, predict_grid, PredictedMapSet};
use vtec_bnn::ionex::{parse_ionex, write_ionex, GridSpec, IonexFile};
use vtec_bnn::rng;
use vtec_bnn::spaceweather::{parse_spaceweather, SpaceWeatherTable};
use vtec_bnn::synth::{synth_day, SynthConfig};
use vtec_bnn_cli::config::RunConfig;
use vtec_bnn_cli::pipeline::{load_model_file, train_from_config, Trained};
use vtec_bnn_cli::synth_file_name;

const BIN: &str = env!("CARGO_BIN_EXE_vtecbnn");

fn testdata(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/testdata").join(name)
}

fn spaceweather() -> SpaceWeatherTable {
    parse_spaceweather(&fs::read_to_string(testdata("spaceweather_2008_2009.csv")).unwrap()).unwrap()
}

fn jan(day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2009, 1, day).unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- gradients

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut where_ = String::new();
    for (a, arch) in ["D4-D1", "V4-D1", "V4-V1"].into_iter().enumerate() {
        let spec = parse_architecture(arch, 6).unwrap();
        let mut net = Network::init(spec, 40 + a as u64);
        net.set_posterior_rho(-1.5);
        let mut r = rng::stream(91, &[a as u64]);
        // Move the priors and biases away from their defaults so every term is exercised.
        for layout in net.layers().to_vec() {
            for b in layout.biases() {
                net.params_mut()[b] = r.random_range(-0.3..0.3);
            }
            if layout.kind == vtec_bnn::bnn::LayerKind::Variational {
                let p = layout.prior();
                net.params_mut()[p] = r.random_range(-0.5..0.5);
                net.params_mut()[p + 1] = r.random_range(-1.0..0.5);
            }
        }
        let n = 16;
        let inputs: Vec<f64> = (0..n * 6).map(|_| r.random_range(-1.5..1.5)).collect();
        let targets: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
        let batch = Batch {
            inputs: &inputs,
            targets: &targets,
            weights: &weights,
        };
        let eps = Epsilon::draw(&net, &mut r);
        let kl_weight = 0.1;
        let analytic = loss_and_grads_with_eps(&net, &batch, &eps, kl_weight).unwrap().grads;
        let h = 1e-5;
        for (i, &grad) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let numeric = (loss_with_eps(&plus, &batch, &eps, kl_weight).unwrap()
                - loss_with_eps(&minus, &batch, &eps, kl_weight).unwrap())
                / (2.0 * h);
            let err = relative_error(grad, numeric);
            if err > worst {
                worst = err;
                where_ = format!("{arch} param {i}");
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e} ({where_}), {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- KL oracle

fn kl_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(2024, &[1]);
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    for pair in 0..20 {
        let (mq, sq) = (r.random_range(-3.0..3.0), r.random_range(0.1..3.0));
        let (mp, sp) = (r.random_range(-3.0..3.0), r.random_range(0.1..3.0));
        let closed = kl_gaussian(GaussianParam::from_sigma(mq, sq), GaussianParam::from_sigma(mp, sp));
        let q = Normal::new(mq, sq).unwrap();
        let log_pdf = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
        let mut draws = rng::stream(2024, &[2, pair]);
        let draws_n = 1_000_000;
        let mc = (0..draws_n)
            .map(|_| {
                let x = q.sample(&mut draws);
                log_pdf(x, mq, sq) - log_pdf(x, mp, sp)
            })
            .sum::<f64>()
            / draws_n as f64;
        let abs = (mc - closed).abs();
        worst_abs = worst_abs.max(abs);
        worst = worst.max(abs / closed.max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 5e-3 && secs < 30.0,
        format!("max |MC - closed| / max(1, KL) {worst:.2e} (max absolute {worst_abs:.2e}), {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- degeneracy

fn degeneracy() -> Outcome {
    let mut r = rng::stream(7, &[0]);
    let n = 50 * 32;
    let inputs: Vec<f64> = (0..n * ENCODED_DIM).map(|_| StandardNormal.sample(&mut r)).collect();
    let targets: Vec<f64> = (0..n)
        .map(|i| {
            let x = &inputs[i * ENCODED_DIM..(i + 1) * ENCODED_DIM];
            (x[0] - 0.5 * x[3]).sin() + 0.3 * x[7] * x[1]
        })
        .collect();
    let data = TrainingData {
        dim: ENCODED_DIM,
        inputs,
        targets,
        weights: vec![1.0; n],
    };
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 1,
        kl_scale: KlScale::Constant(0.0),
        seed: 11,
        ..TrainConfig::default()
    };
    let mut hybrid = Network::init(parse_architecture("V64-D32-D16-D1", ENCODED_DIM).unwrap(), 5);
    hybrid.set_posterior_rho(-800.0);
    let mut plain = Network::init(parse_architecture("D64-D32-D16-D1", ENCODED_DIM).unwrap(), 5);
    let a = train(&mut hybrid, &data, None, &cfg).unwrap().step_loss;
    let b = train(&mut plain, &data, None, &cfg).unwrap().step_loss;
    let linf = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    outcome(
        a.len() == 50 && b.len() == 50 && linf < 1e-7,
        format!("{} steps, loss trace L-inf difference {linf:.2e}", a.len()),
    )
}

// ---------------------------------------------------------------- IONEX

fn scaled(file: &IonexFile) -> Vec<Option<i64>> {
    let scale = 10f64.powi(file.header.exponent);
    file.tec_maps
        .iter()
        .chain(&file.rms_maps)
        .flat_map(|m| m.values.iter().map(|v| v.map(|x| (x / scale).round() as i64)))
        .collect()
}

fn ionex_round_trip(text: &str) -> Result<(usize, usize), String> {
    let first = parse_ionex(text).map_err(|e| e.to_string())?;
    let second = parse_ionex(&write_ionex(&first).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if scaled(&first) != scaled(&second) {
        return Err("scaled integers differ after round trip".into());
    }
    let epochs = |f: &IonexFile| f.tec_maps.iter().map(|m| m.epoch).collect::<Vec<_>>();
    if epochs(&first) != epochs(&second) || first.header.grid != second.header.grid {
        return Err("epochs or grid differ after round trip".into());
    }
    Ok((first.tec_maps.len(), first.tec_value_count()))
}

fn ionex_fidelity() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    let mut files = vec![testdata("synth_2009_001.09i")];
    if let Some(real) = std::env::var_os("IONEX_REAL_FILE") {
        files.push(PathBuf::from(real));
    } else {
        details.push("IONEX_REAL_FILE not set, IGS-layout generated file only".to_string());
    }
    for path in files {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        match fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| ionex_round_trip(&t)) {
            Ok((maps, values)) => {
                pass &= maps == 12 && values == 12 * 71 * 73;
                details.push(format!("{name}: {maps} maps, {values} values, identity on scaled integers"));
            }
            Err(e) => {
                pass = false;
                details.push(format!("{name}: {e}"));
            }
        }
    }
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------- desk scale

struct Desk {
    _dir: tempfile::TempDir,
    ionex_dir: PathBuf,
    sw: SpaceWeatherTable,
    truth: IonexFile,
}

impl Desk {
    fn new() -> Desk {
        let dir = tempfile::tempdir().unwrap();
        let ionex_dir = dir.path().join("ionex");
        fs::create_dir_all(&ionex_dir).unwrap();
        let sw = spaceweather();
        let cfg = SynthConfig::default();
        for day in jan(1).iter_days().take(14) {
            let text = write_ionex(&synth_day(day, &sw, &cfg).unwrap()).unwrap();
            fs::write(ionex_dir.join(synth_file_name(day)), text).unwrap();
        }
        let truth = parse_ionex(&fs::read_to_string(ionex_dir.join(synth_file_name(jan(1)))).unwrap()).unwrap();
        Desk {
            _dir: dir,
            ionex_dir,
            sw,
            truth,
        }
    }

    fn config(&self, batch_size: usize) -> RunConfig {
        RunConfig {
            ionex: Some(self.ionex_dir.join("*.09i").to_string_lossy().into_owned()),
            spaceweather: Some(testdata("spaceweather_2008_2009.csv")),
            architecture: Some("V64-D32-D16-D1".into()),
            batch_size: Some(batch_size),
            epochs: Some(8),
            holdout: Some(vec![jan(1)]),
            seed: Some(2009),
            ..RunConfig::default()
        }
    }

    fn train(&self, batch_size: usize) -> Trained {
        train_from_config(&self.config(batch_size), 2009, false).unwrap()
    }

    fn predict(&self, model: &Model) -> PredictedMapSet {
        let epochs: Vec<_> = self.truth.tec_maps.iter().map(|m| m.epoch).collect();
        predict_grid(model, &epochs, GridSpec::igs(), &self.sw, 100, 2009).unwrap()
    }

    fn records(&self, pred: &PredictedMapSet) -> Vec<ErrorRecord> {
        error_records(pred, &self.truth).unwrap()
    }
}

fn mae(records: &[ErrorRecord]) -> f64 {
    summarize(records).mean_abs_error
}

struct DeskRun {
    records: Vec<ErrorRecord>,
    min_sigma: f64,
    secs: f64,
}

fn desk_run(desk: &Desk, batch_size: usize) -> DeskRun {
    let start = Instant::now();
    let trained = desk.train(batch_size);
    let pred = desk.predict(&trained.model);
    let min_sigma = pred
        .sigma_maps
        .iter()
        .flat_map(|m| m.values.iter().flatten())
        .fold(f64::INFINITY, |a, &b| a.min(b));
    DeskRun {
        records: desk.records(&pred),
        min_sigma,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn desk_pipeline(run: &DeskRun) -> Outcome {
    let mae = mae(&run.records);
    outcome(
        mae > 0.5 && mae < 8.0 && run.min_sigma > 0.0 && run.secs < 1800.0,
        format!(
            "validation MAE {mae:.3} TECU over {} nodes, min sigma {:.4}, {:.0} s on one thread",
            run.records.len(),
            run.min_sigma,
            run.secs
        ),
    )
}

fn batch_sizes(desk: &Desk, run128: &DeskRun) -> Outcome {
    let m1024 = mae(&desk_run(desk, 1024).records);
    let m128 = mae(&run128.records);
    let m32 = mae(&desk_run(desk, 32).records);
    outcome(
        m1024 >= m128 && (m128 - m32).abs() < 0.5 * m128,
        format!("MAE batch 1024 {m1024:.3}, 128 {m128:.3}, 32 {m32:.3} TECU"),
    )
}

fn calibration(run: &DeskRun) -> Outcome {
    let mut records = run.records.clone();
    let pairs: Vec<CalibrationPair> = records
        .iter()
        .map(|r| CalibrationPair {
            sigma_raw: r.sigma_raw,
            abs_error: r.eps.abs(),
            lat: r.lat,
        })
        .collect();
    let model = fit_calibration(&pairs, 10.0).unwrap();
    apply_to_records(&mut records, &model);
    let raw = coverage_ratio(&records, false, 10.0).unwrap();
    let cal = coverage_ratio(&records, true, 10.0).unwrap();
    let mut pass = true;
    let mut bands = Vec::new();
    for (r, c) in raw.iter().zip(&cal) {
        if let (Some(rr), Some(cc)) = (r.ratio, c.ratio) {
            pass &= (0.9..=1.1).contains(&cc);
            bands.push(format!("[{},{}) {rr:.2}->{cc:.3}", r.lo, r.hi));
        }
    }
    let raw_max = raw.iter().filter_map(|b| b.ratio).fold(0.0, f64::max);
    let raw_min = raw.iter().filter_map(|b| b.ratio).fold(f64::INFINITY, f64::min);
    // The calibrated sigma must also stay positive and finite.
    pass &= records.iter().all(|r| r.sigma_cal.is_some_and(|s| s.is_finite() && s > 0.0));
    outcome(
        pass,
        format!(
            "raw coverage ratio {raw_min:.2}..{raw_max:.2} (sigma underestimates the error by up to {raw_max:.1}x); \
             per band raw->calibrated: {}",
            bands.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- bagging

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "vtecbnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn write_days(dir: &Path, days: usize) {
    let sw = testdata("spaceweather_2008_2009.csv");
    run_cli(&[
        "synth",
        "--spaceweather",
        sw.to_str().unwrap(),
        "--start",
        "2009-01-01",
        "--days",
        &days.to_string(),
        "--output-dir",
        dir.to_str().unwrap(),
    ]);
}

fn bootstrap() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ionex = dir.path().join("ionex");
    write_days(&ionex, 4);
    let sw_path = testdata("spaceweather_2008_2009.csv");
    let glob = ionex.join("*.09i");
    let out = dir.path().join("bag");
    run_cli(&[
        "bag",
        "--ionex",
        glob.to_str().unwrap(),
        "--spaceweather",
        sw_path.to_str().unwrap(),
        "--holdout",
        "2009-01-01",
        "--epochs",
        "2",
        "--seed",
        "300",
        "--models",
        "5",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    let models: Vec<Model> = (0..5)
        .map(|m| load_model_file(&out.join(format!("model_{m:02}.ckpt"))).unwrap())
        .collect();

    let sw = spaceweather();
    let truth = parse_ionex(&fs::read_to_string(ionex.join(synth_file_name(jan(1)))).unwrap()).unwrap();
    let validation = build_samples(&[truth], &sw, false).unwrap();
    let mut r = rng::stream(301, &[0]);
    let points = 1000;
    let positive = (0..points)
        .filter(|&p| {
            let s = &validation.samples[r.random_range(0..validation.len())];
            predict_bagged(&models, &s.features, 302 + p as u64).unwrap().sigma > 0.0
        })
        .count();

    let n = 100_000;
    let mut seen = vec![false; n];
    for i in bootstrap_indices(n, 300) {
        seen[i] = true;
    }
    let distinct = seen.iter().filter(|&&s| s).count() as f64 / n as f64;
    let frac = positive as f64 / points as f64;
    outcome(
        frac >= 0.99 && (distinct - 0.632).abs() <= 0.02,
        format!("sigma > 0 at {positive}/{points} validation points; distinct fraction {distinct:.4} at N = {n}"),
    )
}

// ---------------------------------------------------------------- determinism

/// Run a command twice into the same directory and compare stdout and every file written.
fn twice(work: &Path, name: &str, args: &[String]) -> Result<(), String> {
    let snapshot = || -> Vec<(PathBuf, Vec<u8>)> {
        let mut files: Vec<_> = walk(work).into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect();
        files.sort();
        files
    };
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let first = (run_cli(&argv), snapshot());
    let second = (run_cli(&argv), snapshot());
    if first.0 != second.0 {
        return Err(format!("{name}: stdout differs"));
    }
    if first.1 != second.1 {
        return Err(format!("{name}: output files differ"));
    }
    Ok(())
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let sw = testdata("spaceweather_2008_2009.csv").to_string_lossy().into_owned();
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let day1 = d("ionex/synt0010.09i");
    let common = |out: &str| {
        s(&[
            "--ionex",
            &d("ionex/*.09i"),
            "--spaceweather",
            &sw,
            "--holdout",
            "2009-01-01",
            "--epochs",
            "1",
            "--seed",
            "77",
            "--output-dir",
            &d(out),
        ])
    };
    let mut steps: Vec<(&str, Vec<String>)> = vec![
        ("synth", s(&["synth", "--spaceweather", &sw, "--start", "2009-01-01", "--days", "2", "--output-dir", &d("ionex")])),
        ("ionex-dump", s(&["ionex-dump", &day1, "--epoch", "12:00", "--format", "csv"])),
    ];
    steps.push(("train", [s(&["train"]), common("train")].concat()));
    steps.push(("bag", [s(&["bag", "--models", "2"]), common("bag")].concat()));
    steps.push((
        "predict",
        s(&[
            "predict",
            "--checkpoint",
            &d("train/model.ckpt"),
            "--date",
            "2009-01-01",
            "--spaceweather",
            &sw,
            "--k",
            "8",
            "--seed",
            "78",
            "--output-dir",
            &d("predict"),
        ]),
    ));
    steps.push((
        "predict (bagged)",
        s(&[
            "predict",
            "--checkpoint",
            &d("bag/model_00.ckpt"),
            "--checkpoint",
            &d("bag/model_01.ckpt"),
            "--date",
            "2009-01-01",
            "--spaceweather",
            &sw,
            "--seed",
            "79",
            "--output-dir",
            &d("bagged"),
        ]),
    ));
    steps.push((
        "calibrate",
        s(&["calibrate", "--predicted", &d("predict/prediction.ionex"), "--truth", &day1, "--output", &d("cal/calibration.csv")]),
    ));
    steps.push((
        "evaluate",
        s(&[
            "evaluate",
            "--predicted",
            &d("predict/prediction.ionex"),
            "--truth",
            &d("ionex/*.09i"),
            "--calibration",
            &d("cal/calibration.csv"),
            "--output-dir",
            &d("eval"),
        ]),
    ));
    let mut failures = Vec::new();
    for (name, args) in &steps {
        if let Err(e) = twice(dir.path(), name, args) {
            failures.push(e);
        }
    }
    let names: Vec<&str> = steps.iter().map(|(n, _)| *n).collect();
    if failures.is_empty() {
        outcome(true, format!("byte-identical reruns: {}", names.join(", ")))
    } else {
        outcome(false, failures.join("; "))
    }
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("gradient correctness", gradient_check());
    report("KL oracle", kl_oracle());
    report("degeneracy equivalence", degeneracy());
    report("IONEX fidelity", ionex_fidelity());

    let desk = Desk::new();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run128 = pool.install(|| desk_run(&desk, 128));
    report("desk-scale pipeline", desk_pipeline(&run128));
    report("batch-size comparison", pool.install(|| batch_sizes(&desk, &run128)));
    report("underestimation and calibration", calibration(&run128));
    report("bootstrap distinctness", bootstrap());
    report("determinism", determinism());

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
