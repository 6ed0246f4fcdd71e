//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p lrcnn-core --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use lrcnn_core::analyzer::{analyze, compare, diff_table, CostReport};
use lrcnn_core::gradcheck::gradient_suite;
use lrcnn_core::init::{composite_stddev, geometric_mean_ratio, variance_probe, InitSpec};
use lrcnn_core::ops::{conv2d_forward, same_padding};
use lrcnn_core::train::checkpoint::{encode, load_checkpoint, save_checkpoint};
use lrcnn_core::train::{cifar, evaluate, load_cifar10, train, Dataset, TrainConfig, Trained};
use lrcnn_core::{zoo, ArchSpec, Error, FilterGroup, Rng, Shape, Tensor};

const VGG_INPUT: (usize, usize, usize) = (3, 224, 224);
const STATIC_BUDGET: Duration = Duration::from_secs(1);
const NUMERIC_BUDGET: Duration = Duration::from_secs(120);
const MEMORIZE_BUDGET: Duration = Duration::from_secs(60);
const DESK_BUDGET: Duration = Duration::from_secs(2 * 3600);

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Outcome {
            pass,
            summary: summary.into(),
            details: Vec::new(),
        }
    }

    fn with(mut self, detail: impl Into<String>) -> Self {
        self.details.push(detail.into());
        self
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn report(name: &str) -> CostReport {
    analyze(&zoo::build(name).unwrap(), VGG_INPUT).unwrap()
}

/// `1 - model / baseline` MAC savings checked against `target ± tol`.
fn savings_check(baseline: &str, model: &str, target: f64, tol: f64) -> Outcome {
    let (a, b) = (report(baseline), report(model));
    let s = compare(&a, &b).macs;
    let pass = (s - target).abs() <= tol;
    let out = Outcome::new(
        pass,
        format!(
            "{model} saves {} of {baseline} MACs ({} -> {}), target {} ± {} pp",
            pct(s),
            a.total_macs,
            b.total_macs,
            pct(target),
            100.0 * tol
        ),
    );
    if pass {
        out
    } else {
        out.with(diff_table(&a, &b))
    }
}

fn c01() -> Outcome {
    let (a, b) = (report("vgg11"), report("vgg-gmp"));
    let ratio = b.total_params as f64 / a.total_params as f64;
    Outcome::new(
        ratio <= 0.25,
        format!(
            "vgg-gmp params {} = {} of vgg11 {} (limit 25%)",
            b.total_params,
            pct(ratio),
            a.total_params
        ),
    )
}

fn c02() -> Outcome {
    savings_check("vgg11", "vgg-gmp-sf", 0.14, 0.03)
}

fn c03() -> Outcome {
    let (a, b) = (report("vgg-gmp"), report("vgg-gmp-lr"));
    let frac = b.total_macs as f64 / a.total_macs as f64;
    let pass = (frac - 1.0 / 3.0).abs() <= 0.05;
    let out = Outcome::new(
        pass,
        format!("vgg-gmp-lr needs {} of vgg-gmp MACs, target 33.33% ± 5 pp", pct(frac)),
    );
    if pass {
        out
    } else {
        out.with(diff_table(&a, &b))
    }
}

fn c04() -> Outcome {
    let m = report("vgg-gmp-lr-join");
    let (v11, gmp) = (report("vgg11"), report("vgg-gmp"));
    let s11 = compare(&v11, &m).macs;
    let sg = compare(&gmp, &m).macs;
    let near = |s: f64| (s - 0.49).abs() <= 0.05;
    let matches: Vec<&str> = [("vgg11", s11), ("vgg-gmp", sg)]
        .iter()
        .filter(|(_, s)| near(*s))
        .map(|(n, _)| *n)
        .collect();
    let closer = if (s11 - 0.49).abs() <= (sg - 0.49).abs() { "vgg11" } else { "vgg-gmp" };
    let out = Outcome::new(
        !matches.is_empty(),
        format!(
            "vgg-gmp-lr-join saves {} vs vgg11 and {} vs vgg-gmp, target 49% ± 5 pp; within: [{}], closest: {closer}",
            pct(s11),
            pct(sg),
            matches.join(", ")
        ),
    );
    if matches.is_empty() {
        out.with(diff_table(&v11, &m)).with(diff_table(&gmp, &m))
    } else {
        out
    }
}

fn c05() -> Outcome {
    savings_check("vgg-gmp", "vgg-gmp-lr-2x", 0.58, 0.05)
}

fn c06() -> Outcome {
    savings_check("vgg-gmp", "vgg-gmp-lr-join-wfull", 0.16, 0.04)
}

fn c07() -> Outcome {
    savings_check("vgg-gmp", "vgg-gmp-lr-lde", 0.86, 0.04)
}

fn c08() -> Outcome {
    const SEEDS: usize = 100;
    const LIMIT: f64 = 1e-6;
    let checks = gradient_suite(8, SEEDS).unwrap();
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failing: Vec<String> = checks
        .iter()
        .filter(|c| c.max_rel_error.is_nan() || c.max_rel_error >= LIMIT)
        .map(|c| format!("{}={:e}", c.op, c.max_rel_error))
        .collect();
    let mut out = Outcome::new(
        failing.is_empty(),
        format!(
            "{} ops x {SEEDS} random cases, worst {} at {:e} (limit {LIMIT:e})",
            checks.len(),
            worst.op,
            worst.max_rel_error
        ),
    );
    for c in &checks {
        out = out.with(format!("{:<15} {:e}", c.op, c.max_rel_error));
    }
    if !failing.is_empty() {
        out = out.with(format!("failing: {}", failing.join(", ")));
    }
    out
}

fn c09() -> Outcome {
    const CONFIGS: usize = 50;
    let kernels = [(1, 3), (3, 1), (1, 7), (7, 1), (5, 5), (3, 3), (1, 1), (2, 4)];
    let mut rng = Rng::new(9);
    let mut mismatches = 0;
    let mut covered = std::collections::BTreeSet::new();
    for i in 0..CONFIGS {
        // Cycle through every kernel shape and both strides before sampling.
        let (kh, kw) = if i < 2 * kernels.len() { kernels[i / 2] } else { kernels[rng.below(kernels.len())] };
        let s = if i < 2 * kernels.len() { 1 + i % 2 } else { 1 + rng.below(2) };
        let stride = (s, 1 + rng.below(2));
        let pad = if rng.coin() { same_padding(kh, kw) } else { (rng.below(kh), rng.below(kw)) };
        let shape = Shape::new(1 + rng.below(3), 1 + rng.below(4), kh + rng.below(9), kw + rng.below(9));
        let d = 1 + rng.below(5);
        let w = common::random_weights(&mut rng, d, shape.c, kh, kw);
        let x = Tensor::randn(shape, &mut rng);
        let fast = conv2d_forward(&x, &w, stride, pad).unwrap();
        let slow = common::naive_conv(&x, &w, stride, pad);
        covered.insert((kh, kw, stride.0));
        if fast.shape() != slow.shape() || fast.data().iter().zip(slow.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    let needed = [(1, 3), (3, 1), (1, 7), (7, 1), (5, 5)];
    let all_covered = needed
        .iter()
        .all(|&(kh, kw)| covered.contains(&(kh, kw, 1)) && covered.contains(&(kh, kw, 2)));
    Outcome::new(
        mismatches == 0 && all_covered,
        format!("{CONFIGS} random configurations, {mismatches} not bit-identical to the nested-loop oracle; required kernels x strides covered: {all_covered}"),
    )
}

fn c10() -> Outcome {
    const TRIALS: usize = 20;
    let stack = zoo::composite_stack(10, 64, 16);
    let good = variance_probe(&stack, &InitSpec::composite(10), TRIALS, 10).unwrap();
    let bad = variance_probe(&stack, &InitSpec::composite(10).scaled(2.0), TRIALS, 10).unwrap();
    let in_band = good.iter().all(|r| (0.7..=1.4).contains(&r.ratio_mean));
    let g_good = geometric_mean_ratio(&good);
    let g_bad = geometric_mean_ratio(&bad);
    let (lo, hi) = good.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r.ratio_mean), hi.max(r.ratio_mean)));
    let mut out = Outcome::new(
        in_band && g_bad > 1.5,
        format!(
            "10-layer composite stack (c=64), {TRIALS} trials: ratios in [{lo:.3}, {hi:.3}] (band [0.7, 1.4]), geo-mean {g_good:.3}; 2x sigma control geo-mean {g_bad:.3} (> 1.5)"
        ),
    );
    for (g, b) in good.iter().zip(&bad) {
        out = out.with(format!(
            "layer {:>2}: {:.4} ± {:.4}   control {:.4}",
            g.layer_index, g.ratio_mean, g.ratio_std, b.ratio_mean
        ));
    }
    out
}

fn c11() -> Outcome {
    let cross = composite_stddev(&[FilterGroup::new(3, 1, 32), FilterGroup::new(1, 3, 32)]).unwrap();
    let wfull = composite_stddev(&[
        FilterGroup::new(3, 1, 24),
        FilterGroup::new(1, 3, 24),
        FilterGroup::new(3, 3, 16),
    ])
    .unwrap();
    let pass = (cross - 0.102062).abs() <= 1e-6 && (wfull - 0.083333).abs() <= 1e-6;
    Outcome::new(pass, format!("cross {cross:.9} (0.102062), with full-rank group {wfull:.9} (0.083333), tol 1e-6"))
}

/// 100 training images: the real set when present, otherwise synthetic
/// CIFAR-format records written to disk and read back through the loader.
fn memorization_set(tmp: &Path) -> (Dataset, &'static str) {
    let dir = match common::cifar_dir() {
        Some(d) => return (load_cifar10(d).unwrap().0.take(100), "CIFAR-10"),
        None => tmp.to_path_buf(),
    };
    common::write_synthetic_cifar(&dir, 100, 12);
    (load_cifar10(&dir).unwrap().0.take(100), "synthetic CIFAR-format records (CIFAR-10 not present)")
}

fn memorization_config() -> TrainConfig {
    let mut c = TrainConfig::new(0.02, 0.0, 10, 1000, 2024);
    c.momentum = 0.9;
    c.max_iterations = Some(500);
    c
}

struct Memorized {
    arch: ArchSpec,
    data: Dataset,
    source: &'static str,
    run: Trained,
    elapsed: Duration,
}

fn memorize(tmp: &Path) -> Memorized {
    let arch = zoo::build("desk-full").unwrap();
    let (data, source) = memorization_set(tmp);
    let start = Instant::now();
    let run = train(&arch, &data, None, &memorization_config()).unwrap();
    Memorized {
        arch,
        data,
        source,
        run,
        elapsed: start.elapsed(),
    }
}

fn c12(m: &Memorized) -> Outcome {
    let eval = evaluate(&m.arch, &m.run.params, &m.data, 1).unwrap();
    let iters = m.run.history.iterations.len();
    let first = m.run.history.iterations.iter().find(|r| r.loss < 0.05).map(|r| r.t);
    let pass = eval.loss < 0.05 && iters <= 500 && m.elapsed < MEMORIZE_BUDGET;
    Outcome::new(
        pass,
        format!(
            "desk-full on 100 images of {}: full-set loss {:.5} after {iters} iterations (limit 0.05), train acc {:.0}%, first batch below 0.05 at t={first:?}, {:.1} s (limit 60 s)",
            m.source,
            eval.loss,
            100.0 * eval.top1,
            m.elapsed.as_secs_f64()
        ),
    )
}

fn c13() -> Outcome {
    let full = analyze(&zoo::build("desk-full").unwrap(), zoo::CIFAR_INPUT).unwrap();
    let lr = analyze(&zoo::build("desk-lr").unwrap(), zoo::CIFAR_INPUT).unwrap();
    let mac_savings = compare(&full, &lr).macs;
    let Some(dir) = common::cifar_dir() else {
        return Outcome::new(
            false,
            format!(
                "BLOCKED: CIFAR-10 binaries not found (set LRCNN_CIFAR_DIR or place them in data/cifar-10-batches-bin); desk-lr saves {} of desk-full MACs",
                pct(mac_savings)
            ),
        );
    };
    let (train_set, test_set) = load_cifar10(dir).unwrap();
    let mut config = TrainConfig::new(0.01, 5e-4, 32, 5, 13);
    config.momentum = 0.9;
    config.augment.crop = true;
    config.augment.mirror = true;
    let start = Instant::now();
    let mut acc = Vec::new();
    for name in ["desk-full", "desk-lr"] {
        let arch = zoo::build(name).unwrap();
        let run = train(&arch, &train_set, None, &config).unwrap();
        acc.push(evaluate(&arch, &run.params, &test_set, 5).unwrap().top1);
    }
    let elapsed = start.elapsed();
    let pass = mac_savings >= 0.40
        && acc[0] >= 0.50
        && acc[1] >= 0.50
        && acc[0] - acc[1] <= 0.04
        && train_set.len() == 50_000
        && test_set.len() == 10_000
        && elapsed <= DESK_BUDGET;
    Outcome::new(
        pass,
        format!(
            "desk-full top-1 {}, desk-lr top-1 {} (>= 50%, gap <= 4 pp), desk-lr saves {} MACs (>= 40%), {:.0} s",
            pct(acc[0]),
            pct(acc[1]),
            pct(mac_savings),
            elapsed.as_secs_f64()
        ),
    )
}

fn c14(first: &Memorized, tmp: &Path) -> Outcome {
    let second = memorize(tmp);
    let bits = |m: &Memorized| m.run.history.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    let same_trace = bits(first) == bits(&second);
    let ck = |m: &Memorized| encode(&m.run.clone().checkpoint(&m.arch)).unwrap();
    let same_ckpt = ck(first) == ck(&second);
    Outcome::new(
        same_trace && same_ckpt,
        format!(
            "two seeded memorization runs: loss traces identical {same_trace} ({} values), checkpoints identical {same_ckpt}",
            first.run.history.iterations.len()
        ),
    )
}

fn c15(m: &Memorized, tmp: &Path) -> Outcome {
    let a = tmp.join("a.ckpt");
    let b = tmp.join("b.ckpt");
    save_checkpoint(&m.run.clone().checkpoint(&m.arch), &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    let ckpt_ok = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
        && evaluate(&m.arch, &loaded.params, &m.data, 1).unwrap() == evaluate(&m.arch, &m.run.params, &m.data, 1).unwrap();

    let mut arch_ok = true;
    for name in zoo::model_names() {
        let arch = zoo::build(name).unwrap();
        let p = tmp.join(format!("{name}.toml"));
        arch.save(&p).unwrap();
        let back = ArchSpec::load(&p).unwrap();
        let p2 = tmp.join(format!("{name}.2.toml"));
        back.save(&p2).unwrap();
        arch_ok &= back == arch && std::fs::read(&p).unwrap() == std::fs::read(&p2).unwrap();
    }

    let batch = tmp.join("truncated.bin");
    let records = common::synthetic_records(4, 15);
    std::fs::write(&batch, &records[..records.len() - 1]).unwrap();
    let want = (3 * cifar::RECORD_BYTES) as u64;
    let (trunc_ok, trunc_msg) = match cifar::load_batch(&batch) {
        Err(e @ Error::Format { offset, .. }) => (offset == want, e.to_string()),
        Err(e) => (false, e.to_string()),
        Ok(_) => (false, "accepted".to_string()),
    };
    Outcome::new(
        ckpt_ok && arch_ok && trunc_ok,
        format!("checkpoint save/load/save identical {ckpt_ok}; {} arch files round-trip {arch_ok}; truncated batch rejected at final record {trunc_ok}", zoo::model_names().len()),
    )
    .with(trunc_msg)
}

fn run(id: &str, f: impl FnOnce() -> Outcome) -> (bool, Duration) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(ToString::to_string))
            .unwrap_or_default();
        Outcome::new(false, format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id}: {} [{:.2} s]", outcome.summary, elapsed.as_secs_f64());
    for d in &outcome.details {
        for line in d.lines() {
            println!("         {line}");
        }
    }
    (outcome.pass, elapsed)
}

fn main() {
    // Accept and ignore libtest-style arguments such as `--nocapture`.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |id: &str| filter.as_deref().is_none_or(|f| id.contains(f));
    println!("acceptance ({} mode)", lrcnn_core::par::mode());
    let mut results = Vec::new();

    let statics: [Criterion; 7] = [
        ("C01 gmp-param-reduction", c01),
        ("C02 separable-savings", c02),
        ("C03 low-rank-third", c03),
        ("C04 join-savings", c04),
        ("C05 low-rank-2x-savings", c05),
        ("C06 wfull-savings", c06),
        ("C07 lde-savings", c07),
    ];
    for (id, f) in statics {
        if wanted(id) {
            let (pass, t) = run(id, f);
            let in_time = t < STATIC_BUDGET;
            if !in_time {
                println!("         over the {STATIC_BUDGET:?} budget");
            }
            results.push((id, pass && in_time));
        }
    }

    let numeric: [Criterion; 4] = [
        ("C08 finite-difference-suite", c08),
        ("C09 conv-oracle-bitwise", c09),
        ("C10 init-variance-probe", c10),
        ("C11 composite-stddev-values", c11),
    ];
    let mut numeric_time = Duration::ZERO;
    let mut numeric_ids = Vec::new();
    for (id, f) in numeric {
        if wanted(id) {
            let (pass, t) = run(id, f);
            numeric_time += t;
            numeric_ids.push(results.len());
            results.push((id, pass));
        }
    }
    if numeric_time >= NUMERIC_BUDGET {
        println!("[FAIL] C08-C11 runtime {:.1} s exceeds {NUMERIC_BUDGET:?}", numeric_time.as_secs_f64());
        for i in numeric_ids {
            results[i].1 = false;
        }
    } else if !numeric_ids.is_empty() {
        println!("[PASS] C08-C11 runtime {:.1} s within {NUMERIC_BUDGET:?}", numeric_time.as_secs_f64());
    }

    let tmp = tempfile::tempdir().unwrap();
    let needs_run = ["C12", "C14", "C15"].iter().any(|id| wanted(id));
    let memorized = needs_run.then(|| catch_unwind(AssertUnwindSafe(|| memorize(tmp.path()))));
    let with_run = |id: &'static str, results: &mut Vec<(&str, bool)>, f: &dyn Fn(&Memorized) -> Outcome| {
        if !wanted(id) {
            return;
        }
        let pass = match &memorized {
            Some(Ok(m)) => run(id, || f(m)).0,
            _ => run(id, || Outcome::new(false, "memorization run panicked")).0,
        };
        results.push((id, pass));
    };
    with_run("C12 desk-memorization", &mut results, &c12);
    if wanted("C13") {
        results.push(("C13 desk-cifar-comparison", run("C13 desk-cifar-comparison", c13).0));
    }
    let scratch = tempfile::tempdir().unwrap();
    with_run("C14 training-determinism", &mut results, &|m| c14(m, scratch.path()));
    with_run("C15 round-trips", &mut results, &|m| c15(m, scratch.path()));

    let passed = results.iter().filter(|r| r.1).count();
    println!("\nacceptance: {passed}/{} criteria passed", results.len());
    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
