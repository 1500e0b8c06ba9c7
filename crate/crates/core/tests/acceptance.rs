//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.
//!
//! Set `CIFAR100_DIR` to a directory holding the CIFAR-100 binary files to run
//! the split and end-to-end checks on the real data; otherwise a generated
//! stand-in with the same layout is used and the lines say so.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fewshot::data::{fc100_split, load_cifar100, standin_cifar100, synth_dataset, CifarOptions, Fc100Splits, SynthConfig};
use fewshot::embedding::{ExtractorConfig, FilmLayers, TenConfig};
use fewshot::episodes::{episode_graph, run_episode, Episode, EpisodeProgram, GraphOptions, QuerySpec};
use fewshot::metric::scaling::{
    limit_grad_large_alpha, limit_relative_error, nearest_gap, random_lemma_instance, LemmaInstanceConfig, LimitSide,
};
use fewshot::metric::{argmin, distance, scaled_class_probabilities, AlphaSpec, SimilarityKind};
use fewshot::model::{ten_report_csv, FewShotModel, MetricConfig, ModelConfig};
use fewshot::numerics::{check_grad, collect_gradient, BoundParams, Tape, Tensor};
use fewshot::training::{
    aux_probability, learning_rate, sweep_alpha, train, EvalConfig, SweepTable, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Below this the error sequence is at rounding level and cannot shrink.
const ROUNDING_FLOOR: f64 = 1e-13;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn decreasing(errs: &[f64]) -> bool {
    errs.windows(2).all(|w| w[1] < w[0] || (w[0] <= ROUNDING_FLOOR && w[1] <= ROUNDING_FLOOR))
}

fn lemma_instances(n: usize, seed: u64) -> Vec<(FewShotModel, Episode)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LemmaInstanceConfig::default();
    (0..n).map(|_| random_lemma_instance(&cfg, &mut rng).expect("instance")).collect()
}

fn small_alpha_limit() -> Outcome {
    let alphas = [1e-2, 1e-3, 1e-4];
    let mut worst_final: f64 = 0.0;
    let mut non_monotone = 0;
    let instances = lemma_instances(24, 11);
    for (model, ep) in &instances {
        let errs: Vec<f64> =
            alphas.iter().map(|&a| limit_relative_error(model, ep, a, LimitSide::Small).expect("error")).collect();
        if !decreasing(&errs) {
            non_monotone += 1;
        }
        worst_final = worst_final.max(errs[2]);
    }
    outcome(
        non_monotone == 0 && worst_final <= 1e-3,
        format!("{} instances, {non_monotone} non-monotone, max rel error at 1e-4 = {worst_final:.3e} (tol 1e-3)", instances.len()),
    )
}

/// `(1/α)·∂CE_i/∂φ` for the single query `i`.
fn one_query_grad(model: &FewShotModel, ep: &Episode, i: usize, alpha: f64) -> Vec<f64> {
    let mut w = vec![0.0; ep.query_count()];
    w[i] = 1.0;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, model.params());
    let g = episode_graph(
        model,
        &mut tape,
        &bound,
        ep,
        GraphOptions { alpha: Some(alpha), query_weights: Some(&w), training: false },
    )
    .expect("graph");
    let grads = tape.backward(g.loss);
    collect_gradient(&grads, &bound, model.params()).scaled(1.0 / alpha).values().to_vec()
}

fn large_alpha_limit() -> Outcome {
    let alphas = [10.0, 100.0, 1000.0];
    let mut kept = 0;
    let mut non_monotone = 0;
    let mut worst_final: f64 = 0.0;
    let mut zero_checked = 0;
    let mut zero_violations = 0;
    let mut worst_correct: f64 = 0.0;
    for (model, ep) in lemma_instances(400, 12) {
        let (gap, wrong) = nearest_gap(&model, &ep).expect("gap");
        if gap < 0.1 || wrong == 0 {
            continue;
        }
        kept += 1;
        let errs: Vec<f64> =
            alphas.iter().map(|&a| limit_relative_error(&model, &ep, a, LimitSide::Large).expect("error")).collect();
        if !decreasing(&errs) {
            non_monotone += 1;
        }
        worst_final = worst_final.max(errs[2]);
        for k in 0..ep.ways {
            let lim = limit_grad_large_alpha(&model, &ep, k).expect("limit");
            for c in lim.contributions.iter().filter(|c| !c.is_misclassified(k)) {
                zero_checked += 1;
                if c.gradient.values().iter().any(|&v| v != 0.0) {
                    zero_violations += 1;
                }
                let exact = one_query_grad(&model, &ep, c.query, 1000.0);
                worst_correct = worst_correct.max(exact.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        if kept == 24 {
            break;
        }
    }
    outcome(
        kept >= 20 && non_monotone == 0 && worst_final <= 1e-3 && zero_violations == 0 && worst_correct <= 1e-12,
        format!(
            "{kept} instances (gap >= 0.1, >= 1 misclassified), {non_monotone} non-monotone, max rel error at 1000 = \
             {worst_final:.3e} (tol 1e-3); {zero_checked} nearest-is-own-class terms exactly zero: {}, \
             max exact norm {worst_correct:.1e}",
            zero_violations == 0
        ),
    )
}

fn random_images(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![n, 3, 8, 8], (0..n * 192).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn image_episode(ways: usize, shots: usize, per_class: usize, rng: &mut ChaCha8Rng) -> Episode {
    Episode {
        ways,
        shots,
        sample_x: random_images(ways * shots, rng),
        sample_labels: (0..ways).flat_map(|k| std::iter::repeat_n(k, shots)).collect(),
        query_x: random_images(ways * per_class, rng),
        query_labels: (0..ways).flat_map(|k| std::iter::repeat_n(k, per_class)).collect(),
        class_ids: (0..ways).collect(),
    }
}

fn conditioned_config(kind: SimilarityKind, seed: u64) -> ModelConfig {
    ModelConfig {
        extractor: ExtractorConfig::mini_resnet(3, 8, 8),
        ten: Some(TenConfig::default()),
        metric: MetricConfig { kind, alpha: AlphaSpec::Trainable { init: 1.5 } },
        aux_classes: None,
        seed,
    }
}

fn gradient_check() -> Outcome {
    let mut model = FewShotModel::new(conditioned_config(SimilarityKind::SquaredEuclidean, 5)).expect("model");
    let ten = model.ten().expect("ten").clone();
    let mut params = model.params().clone();
    for layer in 0..ten.layer_count() {
        ten.set_post_multipliers(&mut params, layer, 0.3, -0.2);
    }
    model.set_params(params).expect("params");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ep = image_episode(2, 1, 2, &mut rng);
    let report = check_grad(&EpisodeProgram { model: &model, episode: &ep }, model.params(), 1e-4);
    let worst = report.worst.as_ref().map(|(s, i)| format!("{s}[{i}]")).unwrap_or_default();
    outcome(
        report.passed(),
        format!(
            "{} parameters in {} segments, max rel error {:.3e} at {worst} (tol 1e-4){}",
            model.params().len(),
            report.segments.len(),
            report.max_rel_error,
            report.failure.as_ref().map(|e| format!(", failure: {e}")).unwrap_or_default()
        ),
    )
}

/// Cosine head over a 16-d MLP whose embeddings are pre-scaled by 10.
fn scaling_fixture() -> (SweepTable, Duration) {
    let t0 = Instant::now();
    let data = synth_dataset(&SynthConfig {
        classes: 100,
        superclasses: 20,
        input_dim: 16,
        mean_scale: 1.0,
        class_scale: 1.0,
        within_scale: 1.0,
        samples_per_class: 60,
        split_superclasses: [12, 4, 4],
        seed: 1,
    })
    .expect("synthetic data");
    let mut ext = ExtractorConfig::mlp(16, vec![32], 16);
    ext.output_scale = 10.0;
    ext.film_layers = FilmLayers::None;
    let base = ModelConfig {
        extractor: ext,
        ten: None,
        metric: MetricConfig { kind: SimilarityKind::Cosine, alpha: AlphaSpec::Fixed(1.0) },
        aux_classes: None,
        seed: 2,
    };
    let mut tc = TrainConfig::for_shots(5, 5);
    tc.episodes = 200;
    tc.lr0 = 0.1;
    tc.val_interval = tc.episodes;
    tc.val_tasks = 50;
    let eval = EvalConfig { ways: 5, shots: 5, queries: QuerySpec::Total(50), tasks: 500, restarts: 1 };
    let table = sweep_alpha(&base, &tc, &data.train, &data.val, &eval, &[0.01, 0.1, 1.0, 10.0, 100.0]).expect("sweep");
    (table, t0.elapsed())
}

fn scaling_effect(table: &SweepTable, took: Duration) -> Outcome {
    let best = table.best().expect("rows");
    let unscaled = table.rows.iter().find(|r| r.alpha == 1.0).expect("alpha 1 row");
    let gap = best.acc - unscaled.acc;
    outcome(
        gap >= 0.05 && took < Duration::from_secs(600),
        format!(
            "cross-validated alpha {} acc {:.4} vs alpha 1 acc {:.4}: +{:.1} points (need >= 5), {:.1}s",
            best.alpha,
            best.acc,
            unscaled.acc,
            100.0 * gap,
            took.as_secs_f64()
        ),
    )
}

fn inverse_u(table: &SweepTable) -> Outcome {
    let best = table.best().expect("rows");
    let first = &table.rows[0];
    let last = table.rows.last().expect("rows");
    let interior = best.alpha != first.alpha && best.alpha != last.alpha;
    let margin = (best.acc - first.acc).min(best.acc - last.acc);
    let curve: Vec<String> = table.rows.iter().map(|r| format!("{}:{:.4}", r.alpha, r.acc)).collect();
    outcome(
        interior && margin >= 0.02,
        format!("[{}], optimum {} beats both endpoints by {:.1} points (need >= 2)", curve.join(" "), best.alpha, 100.0 * margin),
    )
}

struct Fc100 {
    splits: Fc100Splits,
    standin: bool,
    _dir: Option<tempfile::TempDir>,
}

fn load_fc100(side: usize) -> Fc100 {
    let (dir, tmp, standin) = match std::env::var_os("CIFAR100_DIR") {
        Some(d) => (PathBuf::from(d), None, false),
        None => {
            let tmp = tempfile::tempdir().expect("tempdir");
            standin_cifar100(tmp.path(), 50, 10, 7).expect("stand-in data");
            (tmp.path().to_path_buf(), Some(tmp), true)
        }
    };
    let store = Arc::new(load_cifar100(&dir, CifarOptions { side, normalize: true }).expect("CIFAR-100 files"));
    Fc100 { splits: fc100_split(&store).expect("split"), standin, _dir: tmp }
}

fn tag(standin: bool) -> &'static str {
    if standin {
        "[stand-in] "
    } else {
        ""
    }
}

fn fc100_exactness(data: &Fc100, took: Duration) -> Outcome {
    let expected: [&[usize]; 3] = [&[1, 2, 3, 4, 5, 6, 9, 10, 15, 17, 18, 19], &[8, 11, 13, 16], &[0, 7, 12, 14]];
    let mut ok = took < Duration::from_secs(30);
    let mut seen = Vec::new();
    let mut counts = Vec::new();
    for (split, want) in data.splits.all().into_iter().zip(expected) {
        ok &= split.superclasses() == want;
        counts.push(split.classes().len());
        seen.extend_from_slice(split.classes());
    }
    seen.sort_unstable();
    ok &= counts == [60, 20, 20] && seen == (0..100).collect::<Vec<_>>();
    outcome(
        ok,
        format!("{}classes {counts:?}, superclass sets match, partition of 0..100: {}, {:.1}s", tag(data.standin), seen.len() == 100, took.as_secs_f64()),
    )
}

fn schedules() -> Outcome {
    let t = 30_000;
    let aux = [aux_probability(0, t, 0.9, 20), aux_probability(t / 20, t, 0.9, 20), aux_probability(t - 1, t, 0.9, 20)];
    let aux_ok = aux[0] == 0.9 && (aux[1] - 0.81).abs() <= 1e-12 && (aux[2] - 0.121_576_654_590_569_36).abs() <= 1e-9
        && (aux[2] * 1e5).round() == 12_158.0;
    let breaks = [(0, 0.1), (14_999, 0.1), (15_000, 0.01), (17_499, 0.01), (17_500, 0.001), (19_999, 0.001), (20_000, 0.0001), (29_999, 0.0001)];
    let lr_ok = breaks.iter().all(|&(s, lr)| learning_rate(s, t, 0.1) == lr);
    outcome(
        aux_ok && lr_ok,
        format!("aux p = {:.12} / {:.12} / {:.12}; lr plateaus exact at 8 breakpoints: {lr_ok}", aux[0], aux[1], aux[2]),
    )
}

fn identity_conditioning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    let episodes = 100;
    for e in 0..episodes {
        let kind = if e % 2 == 0 { SimilarityKind::SquaredEuclidean } else { SimilarityKind::Cosine };
        let with = FewShotModel::new(conditioned_config(kind, 100 + e as u64)).expect("model");
        let mut cfg = with.config().clone();
        cfg.ten = None;
        let mut without = FewShotModel::new(cfg).expect("model");
        let mut p = without.params().clone();
        for seg in p.layout().segments().to_vec() {
            let src = with.params().by_name(&seg.name).expect("shared segment");
            p.values_mut()[seg.range()].copy_from_slice(src);
        }
        without.set_params(p).expect("params");
        let ep = image_episode(rng.random_range(2..=5), rng.random_range(1..=3), rng.random_range(1..=3), &mut rng);
        let a = run_episode(&with, &ep).expect("episode");
        let b = run_episode(&without, &ep).expect("episode");
        let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        let same = bits(&a.probabilities) == bits(&b.probabilities)
            && a.predictions == b.predictions
            && a.episode_loss.to_bits() == b.episode_loss.to_bits()
            && bits(&a.prototypes.prototypes) == bits(&b.prototypes.prototypes);
        if !same {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{episodes} episodes, {mismatches} differ in any bit of probabilities, predictions, loss or prototypes"))
}

fn softmax_invariants() -> Outcome {
    let draws = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut fails = [0usize; 6];
    for _ in 0..draws {
        let k = rng.random_range(2..=8);
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
        let alpha = rng.random_range(1e-3..5.0);
        let p = scaled_class_probabilities(&row, alpha).expect("p");
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || p.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            fails[0] += 1;
        }
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = row.iter().map(|d| d + c).collect();
        let ps = scaled_class_probabilities(&shifted, alpha).expect("p");
        if p.iter().zip(&ps).any(|(a, b)| (a - b).abs() > 1e-12) {
            fails[1] += 1;
        }
        let amax = p.iter().enumerate().fold(0, |m, (j, &x)| if x > p[m] { j } else { m });
        if amax != argmin(&row) {
            fails[2] += 1;
        }
        let pu = scaled_class_probabilities(&row, 1e-8).expect("p");
        if pu.iter().any(|&x| (x - 1.0 / k as f64).abs() > 1e-6) {
            fails[3] += 1;
        }
        let a2 = alpha * rng.random_range(1.0..10.0);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
        if max(&scaled_class_probabilities(&row, a2).expect("p")) < max(&p) - 1e-15 {
            fails[4] += 1;
        }
        let dim = 4;
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cs: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s = rng.random_range(0.1..10.0);
        let d = |z: &[f64], cs: &[Vec<f64>]| {
            cs.iter().map(|c| distance(SimilarityKind::SquaredEuclidean, z, c).expect("d")).collect::<Vec<_>>()
        };
        let zs: Vec<f64> = z.iter().map(|v| v * s).collect();
        let css: Vec<Vec<f64>> = cs.iter().map(|c| c.iter().map(|v| v * s).collect()).collect();
        let lhs = scaled_class_probabilities(&d(&zs, &css), alpha / (s * s)).expect("p");
        let rhs = scaled_class_probabilities(&d(&z, &cs), alpha).expect("p");
        if lhs.iter().zip(&rhs).any(|(a, b)| (a - b).abs() > 1e-10) {
            fails[5] += 1;
        }
    }
    let names = ["normalization", "shift", "argmax/argmin", "uniformity", "sharpening", "duality"];
    let summary: Vec<String> = names.iter().zip(&fails).map(|(n, f)| format!("{n} {f}")).collect();
    outcome(fails.iter().all(|&f| f == 0), format!("{draws} draws each, failures: {}", summary.join(", ")))
}

fn end_to_end(data: &Fc100) -> Outcome {
    let t0 = Instant::now();
    let mut model = FewShotModel::new(ModelConfig {
        extractor: ExtractorConfig::mini_resnet(3, 8, 8),
        ten: Some(TenConfig::default()),
        metric: MetricConfig { kind: SimilarityKind::SquaredEuclidean, alpha: AlphaSpec::Trainable { init: 1.0 } },
        aux_classes: Some(data.splits.train.classes().len()),
        seed: 3,
    })
    .expect("model");
    let mut tc = TrainConfig::for_shots(5, 1);
    tc.episodes = 2000;
    tc.aux.enabled = true;
    tc.val_tasks = 100;
    let report = match train(&mut model, &tc, &data.splits.train, &data.splits.val) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("{}training failed: {e}", tag(data.standin))),
    };
    let rows = model.ten_magnitude_report().expect("report");
    let csv = ten_report_csv(&rows);
    let layers = model.extractor().film_widths().len();
    let acc = report.best_val_acc;
    outcome(
        acc >= 0.30 && rows.len() == layers && csv.lines().count() == layers + 1,
        format!(
            "{}val acc {:.4} at step {} (need >= 0.30), {} episodic + {} aux steps, alpha {:.3}, {} (|gamma0|,|beta0|) rows for {layers} conditioned layers, {:.1}s",
            tag(data.standin),
            acc,
            report.best_t,
            report.episodic_steps,
            report.aux_steps,
            model.alpha(),
            rows.len(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t0 = Instant::now();
    let mut o = f();
    let took = t0.elapsed();
    if let Some(limit) = limit {
        o.passed &= took < limit;
        o.detail = format!("{}, {:.1}s (limit {}s)", o.detail, took.as_secs_f64(), limit.as_secs());
    }
    o
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n, name, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "small-alpha limit", timed(secs(10), small_alpha_limit));
    record(2, "large-alpha limit", timed(secs(10), large_alpha_limit));
    record(3, "full-pipeline gradient check", timed(secs(60), gradient_check));
    let (table, took) = scaling_fixture();
    record(4, "metric scaling effect", scaling_effect(&table, took));
    record(5, "inverse-U over alpha", inverse_u(&table));
    let t0 = Instant::now();
    let data = load_fc100(8);
    record(6, "FC100 split", fc100_exactness(&data, t0.elapsed()));
    record(7, "schedules", timed(None, schedules));
    record(8, "identity conditioning", timed(None, identity_conditioning));
    record(9, "softmax invariants", timed(None, softmax_invariants));
    record(10, "end-to-end training", end_to_end(&data));
    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.passed).map(|(n, _, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
