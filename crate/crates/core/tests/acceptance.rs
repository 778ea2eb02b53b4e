//! Acceptance checks. Each test prints one `[n] name: PASS|FAIL (...)`
//! line and then asserts it. Tests are serialized so the runtime limits
//! are measured without the others competing for the CPU.
mod common;

use std::f64::consts::PI;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use nna_aat::activation_tables::{sigmoid, ActivationKind, ActivationTables};
use nna_aat::autodiff::{SteKind, Tape};
use nna_aat::checkpoint::model_to_file;
use nna_aat::config::ExperimentConfig;
use nna_aat::experiment::{analyze_model, run_experiment, ROW_FP, ROW_PTQ, ROW_STAGE2};
use nna_aat::fixed_point::{decode, encode, quantize_dynamic, quantize_static, DynamicScaleSet, QFormat, RoundingMode};
use nna_aat::golden::{compare_traces, emulator_trace, golden_run};
use nna_aat::qnn::InputSpec;
use nna_aat::tensor::Tensor;
use nna_aat::training::{activity_loss, baseline_train, evaluate, gen_task, stage1_train, ActivityConfig, ModelDims, OptimConfig, Split, Stage, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

const NEAREST: RoundingMode = RoundingMode::NearestTiesAwayFromZero;
const TRUNC: RoundingMode = RoundingMode::TowardZero;

/// Print the verdict line, then fail the test if it did not pass.
fn verdict(n: u32, name: &str, start: Instant, limit: Duration, ok: bool, detail: String) {
    let t = start.elapsed();
    let in_time = t <= limit;
    let pass = ok && in_time;
    println!(
        "[{n}] {name}: {} ({detail}; {:.1}s of {}s allowed)",
        if pass { "PASS" } else { "FAIL" },
        t.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "[{n}] {name}: {detail}");
    assert!(in_time, "[{n}] {name}: took {t:?}, limit {limit:?}");
}

#[test]
fn quantizer_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut failures = Vec::new();

    let q17 = QFormat::Q1_7;
    for code in -128i64..=127 {
        let x = decode(code, q17).unwrap();
        if x != code as f64 / 128.0 {
            failures.push(format!("decode({code}) = {x}"));
        }
        for mode in [NEAREST, TRUNC] {
            if encode(x, q17, mode).unwrap() != code || quantize_static(x, q17, mode).unwrap() != x {
                failures.push(format!("code {code} does not round-trip under {mode:?}"));
            }
        }
    }

    let q32 = QFormat::new(3, 2).unwrap();
    if (q32.f_min(), q32.f_max()) != (-4.0, 3.75) || (q32.code_min(), q32.code_max()) != (-16, 15) {
        failures.push(format!(
            "Q3.2 range ({}, {}) codes [{}, {}]",
            q32.f_min(),
            q32.f_max(),
            q32.code_min(),
            q32.code_max()
        ));
    }

    let formats = [q17, q32, QFormat::new(2, 14).unwrap(), QFormat::new(4, 4).unwrap(), QFormat::new(8, 8).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let samples = 1_000_000;
    for i in 0..samples {
        let q = formats[i % formats.len()];
        let x = rng.gen_range(q.f_min()..=q.f_max());
        let bound = 2f64.powi(-(q.frac_bits() as i32 + 1));
        let e = (x - quantize_static(x, q, NEAREST).unwrap()).abs();
        worst = worst.max(e / bound);
        if e > bound {
            failures.push(format!("Q{}.{} x = {x}: error {e} above {bound}", q.int_bits(), q.frac_bits()));
        }
    }
    failures.truncate(5);
    verdict(
        1,
        "quantizer correctness",
        start,
        Duration::from_secs(10),
        failures.is_empty(),
        format!(
            "256 Q1.7 codes round-trip, Q3.2 = [{}, {}] codes [{}, {}], {samples} samples worst error {:.4} of the bound{}",
            q32.f_min(),
            q32.f_max(),
            q32.code_min(),
            q32.code_max(),
            worst,
            if failures.is_empty() { String::new() } else { format!(", failures: {failures:?}") }
        ),
    );
}

/// Smallest allowed scale that fits every element, else the largest; then
/// `S * clip(trunc(x / S * 2^n)) / 2^n`, all recomputed from scratch.
fn dynamic_oracle(xs: &[f64], q: QFormat, scales: &[f64]) -> (Vec<f64>, f64) {
    let (lo, hi) = (q.f_min(), q.f_max());
    let s = scales
        .iter()
        .copied()
        .find(|&s| xs.iter().all(|&x| x / s >= lo && x / s <= hi))
        .unwrap_or(*scales.last().unwrap());
    let n = 2f64.powi(q.frac_bits() as i32);
    let (cmin, cmax) = ((lo * n) as i64, (hi * n) as i64);
    let out = xs
        .iter()
        .map(|&x| {
            let code = ((x / s * n).trunc() as i64).clamp(cmin, cmax);
            s * code as f64 / n
        })
        .collect();
    (out, s)
}

#[test]
fn dynamic_quantization_matches_brute_force() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let sets: Vec<Vec<f64>> = vec![
        vec![1.0, 2.0, 4.0, 8.0, 16.0],
        vec![1.0, 2.0, 4.0, 16.0],
        vec![1.0],
        vec![1.0, 8.0, 1024.0],
    ];
    let formats = [QFormat::Q1_7, QFormat::new(3, 5).unwrap(), QFormat::new(2, 14).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tensors = 100_000;
    let mut mismatches = 0usize;
    let mut first = None;
    let mut clipped = 0usize;
    for t in 0..tensors {
        let scales = &sets[t % sets.len()];
        let set = DynamicScaleSet::new(scales).unwrap();
        let q = formats[(t / sets.len()) % formats.len()];
        let len = rng.gen_range(1..=16);
        let mag = 2f64.powi(rng.gen_range(-4..=12));
        let mut xs: Vec<f64> = (0..len).map(|_| rng.gen_range(-mag..mag)).collect();
        // Put some elements exactly on a scaled range edge.
        if rng.gen_bool(0.2) {
            let s = scales[rng.gen_range(0..scales.len())];
            let i = rng.gen_range(0..len);
            xs[i] = if rng.gen_bool(0.5) { s * q.f_max() } else { s * q.f_min() };
        }
        let (got, s) = quantize_dynamic(&xs, q, &set).unwrap();
        let (want, ws) = dynamic_oracle(&xs, q, scales);
        if s == *scales.last().unwrap() && xs.iter().any(|&x| x / s < q.f_min() || x / s > q.f_max()) {
            clipped += 1;
        }
        // Minimality: half the chosen scale, when allowed, must not fit.
        let minimal = s == 1.0
            || !scales.contains(&(s / 2.0))
            || xs.iter().any(|&x| x / (s / 2.0) < q.f_min() || x / (s / 2.0) > q.f_max());
        // Value equality: the oracle's zeros are all +0.
        let same = s == ws && got == want;
        if !same || !minimal {
            mismatches += 1;
            first.get_or_insert(format!("{xs:?} under {scales:?}: S {s} vs {ws}"));
        }
    }
    verdict(
        2,
        "dynamic quantization",
        start,
        Duration::from_secs(30),
        mismatches == 0,
        format!(
            "{tensors} tensors, {mismatches} disagreements with the brute-force oracle, {clipped} clipped at the largest scale{}",
            first.map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    );
}

#[test]
fn emulator_engine_bit_exact() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let policy = common::nna_policy();
    let configs = 1200;
    let mut divergences = Vec::new();
    let mut probes = 0usize;
    for cfg in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg as u64);
        let hidden = [4, 8, 64][cfg % 3];
        let layers = rng.gen_range(1..=2);
        let steps = rng.gen_range(0..=32);
        // Every fourth configuration is adversarial: weights past the Q1.7
        // range, large biases, inputs past the largest scale.
        let adversarial = cfg % 4 == 3;
        let (wb, bb, amp) = if adversarial { (2.0, 24.0, 60.0) } else { (0.5, 1.0, rng.gen_range(0.1..10.0)) };
        let (spec, input) = if rng.gen_bool(0.25) {
            let spec = InputSpec::Tokens { vocab: 10, embed_dim: 6 };
            (spec, common::random_tokens(&mut rng, steps, 10))
        } else {
            let dim = rng.gen_range(1..=8);
            (InputSpec::Features { dim }, common::random_features(&mut rng, steps, dim, amp))
        };
        let model = common::random_model(&mut rng, spec, layers, hidden, 2, wb, bb);
        let engine = golden_run(&model, &policy, &input).unwrap();
        let emulated = emulator_trace(&model, &policy, &input).unwrap();
        probes += engine.records.iter().map(|r| r.values.len()).sum::<usize>();
        if let Some(d) = compare_traces(&engine, &emulated) {
            divergences.push(format!("config {cfg}: {d}"));
        }
    }
    verdict(
        3,
        "emulator/engine bit-exactness",
        start,
        Duration::from_secs(120),
        divergences.is_empty(),
        format!(
            "{configs} configurations, {probes} probe values compared, {} diverged{}",
            divergences.len(),
            divergences.first().map(|d| format!(", first: {d}")).unwrap_or_default()
        ),
    );
}

#[test]
fn gradient_contracts() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();

    // (a) finite differences on full-precision networks.
    let fd_worst = (0..100).map(common::fd_worst_error).fold(0.0, f64::max);
    let fd_ok = fd_worst <= common::FD_TOL;

    // (b) clipped-cosine factor from the quantize node against the closed
    // form, 10^5 random points plus the landmarks.
    let q = QFormat::Q1_7;
    let bin = q.resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut xs: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let landmarks: Vec<(f64, f64)> = (-128..128)
        .flat_map(|k| {
            let k = k as f64;
            [(k, 1.0), (k + 0.25, 0.0), (k - 0.25, 0.0), (k + 0.5, 0.0)]
        })
        .map(|(u, want)| (u * bin, want))
        .collect();
    xs.extend(landmarks.iter().map(|&(x, _)| x));
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::row(xs.clone()));
    let y = tape.quantize(xv, q, TRUNC, None, SteKind::clipped_cosine()).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let factor = grads.get(xv);
    let mut ulp_worst = 0.0f64;
    let mut landmark_misses = 0;
    let n = xs.len() - landmarks.len();
    // Landmarks are checked for exact values below; cos(pi/2) itself is
    // not exactly 0 in floating point.
    for (i, &x) in xs[..n].iter().enumerate() {
        let p = (x / bin).abs().fract();
        let closed = (2.0 * PI * p.min(1.0 - p)).cos().clamp(0.0, 1.0);
        let got = factor.data()[i];
        let ulps = if got == closed { 0.0 } else { (got - closed).abs() / (f64::EPSILON * closed.abs().max(f64::MIN_POSITIVE)) };
        ulp_worst = ulp_worst.max(ulps);
    }
    for (j, &(_, want)) in landmarks.iter().enumerate() {
        if factor.data()[n + j] != want {
            landmark_misses += 1;
        }
    }
    let cos_ok = ulp_worst <= 1.0 && landmark_misses == 0;

    // (c) activation node backward against the exact derivative.
    let pts: Vec<f64> = (0..20_001).map(|i| -10.0 + i as f64 * 0.001).collect();
    let tables = ActivationTables::standard();
    let mut act_worst = 0.0f64;
    for (table, kind) in [(&tables.tanh, ActivationKind::Tanh), (&tables.sigmoid, ActivationKind::Sigmoid)] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(pts.clone()));
        let y = tape.activation(x, table);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().get(x);
        for (i, &v) in pts.iter().enumerate() {
            let exact = match kind {
                ActivationKind::Tanh => 1.0 - v.tanh() * v.tanh(),
                ActivationKind::Sigmoid => sigmoid(v) * (1.0 - sigmoid(v)),
            };
            act_worst = act_worst.max((g.data()[i] - exact).abs());
        }
    }
    let act_ok = act_worst <= 1e-12;

    verdict(
        4,
        "gradient contracts",
        start,
        Duration::from_secs(60),
        fd_ok && cos_ok && act_ok,
        format!(
            "FD worst relative error {fd_worst:.2e} (limit 1e-6); cosine factor worst {ulp_worst:.1} ulp over {} points, {landmark_misses} landmark misses; activation derivative worst {act_worst:.1e} (limit 1e-12)",
            xs.len()
        ),
    );
}

#[test]
fn pwl_accuracy() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let tables = ActivationTables::standard();
    let points = 1_000_000;
    let mut details = Vec::new();
    let mut ok = true;
    for (table, f) in [(&tables.tanh, f64::tanh as fn(f64) -> f64), (&tables.sigmoid, sigmoid)] {
        let mut worst = (0.0f64, 0.0);
        let mut monotone = true;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=points {
            let x = -8.0 + 16.0 * i as f64 / points as f64;
            let y = table.eval(x);
            let e = (y - f(x)).abs();
            if e > worst.0 {
                worst = (e, x);
            }
            monotone &= y >= prev;
            prev = y;
        }
        ok &= worst.0 <= 0.01 && monotone;
        details.push(format!("{} max error {:.5} at {:+.4}, monotone {monotone}", table.kind().name(), worst.0, worst.1));
    }
    let t0 = tables.tanh.eval(0.0);
    let s0 = tables.sigmoid.eval(0.0);
    ok &= t0 == 0.0 && s0 == 0.5;
    details.push(format!("tanh(0) = {t0}, sigmoid(0) = {s0}"));
    verdict(5, "PWL accuracy", start, Duration::from_secs(30), ok, details.join("; "));
}

#[test]
fn activity_regularizer() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();

    // Exact hinge properties.
    let cfg = ActivityConfig::default();
    let inside = [-4.0, -3.9, 0.0, 2.5, 4.0];
    let (v_in, g_in) = activity_loss(&inside, &cfg).unwrap();
    let mixed = [-6.0, -4.0, 0.0, 4.0, 5.5];
    let (v_mix, g_mix) = activity_loss(&mixed, &cfg).unwrap();
    let n = mixed.len() as f64;
    let hinge_ok = v_in == 0.0
        && g_in.iter().all(|&g| g == 0.0)
        && v_mix == (2.0 + 1.5) / n
        && g_mix == vec![-1.0 / n, 0.0, 0.0, 0.0, 1.0 / n];

    // Stage I on the default adding problem, with and without the penalty.
    let exp = ExperimentConfig::default();
    let reg = exp.train_config(Stage::I);
    let policy = exp.nna_policy(Arc::new(ActivationTables::standard()));
    let test = gen_task(&exp.task, exp.seed, Split::Test).unwrap();
    let control = baseline_train(&reg).unwrap();
    let trained = stage1_train(&reg).unwrap();
    let measure = |m| evaluate(m, &test, &policy, &exp.task, &exp.activity, &exp.eval).unwrap();
    let (c, r) = (measure(&control.model), measure(&trained.model));
    let drop = if c.out_of_range_fraction > 0.0 { 1.0 - r.out_of_range_fraction / c.out_of_range_fraction } else { 0.0 };
    verdict(
        6,
        "activity regularizer",
        start,
        Duration::from_secs(600),
        hinge_ok && c.out_of_range_fraction > 0.0 && drop >= 0.5,
        format!(
            "hinge properties {}; {}x{} LSTM, {} steps, seed {}: z outside [{}, {}] {:.5} (lambda 0) -> {:.5} (lambda {}), drop {:.1}% (need 50%)",
            if hinge_ok { "exact" } else { "WRONG" },
            exp.model.layers,
            exp.model.hidden,
            reg.optim.steps,
            exp.seed,
            cfg.z_min,
            cfg.z_max,
            c.out_of_range_fraction,
            r.out_of_range_fraction,
            exp.activity.lambda,
            100.0 * drop
        ),
    );
}

#[test]
fn aat_recovers_quantization_gap() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let tables = Arc::new(ActivationTables::standard());
    let mut ok = true;
    let mut details = Vec::new();
    for seed in 0..3 {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        let run = run_experiment(&cfg, tables.clone(), None).unwrap();
        let s = &run.summary;
        let (fp, ptq, aat) = (
            s.row(ROW_FP).unwrap().accuracy,
            s.row(ROW_PTQ).unwrap().accuracy,
            s.row(ROW_STAGE2).unwrap().accuracy,
        );
        let degradation = (fp - ptq) / fp;
        let recovery = (aat - ptq) / (fp - ptq);
        let seed_ok = degradation > 0.02 && recovery >= 0.5 && aat >= ptq;
        ok &= seed_ok;
        details.push(format!(
            "seed {seed}: fp {fp:.3} ptq {ptq:.3} aat {aat:.3}, degradation {:.1}%, recovery {:.0}%{}",
            100.0 * degradation,
            100.0 * recovery,
            if seed_ok { "" } else { " (short)" }
        ));
    }
    verdict(7, "AAT gap recovery", start, Duration::from_secs(1800), ok, details.join("; "));
}

#[test]
fn pipelines_are_deterministic() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 8;
    cfg.task = TaskSpec {
        seq_len: 10,
        train_size: 600,
        test_size: 300,
        ..TaskSpec::default()
    };
    cfg.model = ModelDims { layers: 2, hidden: 12 };
    cfg.stage1 = OptimConfig {
        steps: 300,
        hold_steps: 100,
        eval_every: 100,
        ..OptimConfig::default()
    };
    cfg.stage2 = OptimConfig { eval_every: 50, ..OptimConfig::constant(100, 1e-3) };

    let produce = |dir: &std::path::Path| {
        let tables = cfg.tables.resolve().unwrap();
        let run = run_experiment(&cfg, tables.clone(), Some(dir)).unwrap();
        let policy = cfg.nna_policy(tables);
        let test = gen_task(&cfg.task, cfg.seed, Split::Test).unwrap();
        let report = analyze_model(&run.stage2.model, &test, &policy, &cfg).unwrap();
        std::fs::write(dir.join("analysis.txt"), report.to_text()).unwrap();
        for k in 0..5 {
            golden_run(&run.stage2.model, &policy, &test.inputs[k]).unwrap().save(dir.join(format!("trace{k}"))).unwrap();
        }
        model_to_file(&run.stage1.model, None).save(dir.join("stage1_f64.ckpt")).unwrap();
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    produce(a.path());
    produce(b.path());
    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    verdict(
        8,
        "determinism",
        start,
        Duration::from_secs(600),
        differing.is_empty() && names.len() >= 15,
        format!("{} artifacts compared byte for byte, differing: {differing:?}", names.len()),
    );
}
