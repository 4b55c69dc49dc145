//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.
//!
//! Criteria 5 to 7 share one run of the default five-seed experiment, which
//! takes several minutes on one core.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rkld::eval::{harmonic_mean, ks_two_sample, EvalReport};
use rkld::lm::{Bound, Example, LanguageModel, LmConfig, Packed};
use rkld::ndgrad::{max_relative_error, Tape, Tensor, Var};
use rkld::train::cross_entropy;
use rkld::unlearn::{
    build_teacher_logits, distill_loss, fkl_loss, ga_loss, npo_loss, rkl_loss, rt_loss,
    Distribution, Method, RetainMode, Role, UnlearnSpec,
};
use rkld_workbench::config::{CorpusParams, Schedule};
use rkld_workbench::{run_all, ExperimentConfig, Report, RunDir};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

struct GradCase {
    forget: Vec<Example>,
    retain: Vec<Example>,
    teacher_logp: Vec<f64>,
    original_logp: Vec<f64>,
    npo_ref: Vec<f64>,
}

type LossFn = fn(&mut Tape<f64>, &LanguageModel<f64>, &Bound, &GradCase) -> rkld::Result<Var>;

fn log_softmax_f64(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn frozen_logits(m: &LanguageModel<f64>, packed: &Packed) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = m.bind_frozen(&mut tape);
    let l = m.logits(&mut tape, &bound, packed).unwrap();
    tape.value(l).to_vec()
}

fn random_examples(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let p = rng.gen_range(1..4);
            let t = rng.gen_range(1..4);
            Example::new(
                (0..p).map(|_| rng.gen_range(4..vocab)).collect(),
                (0..t).map(|_| rng.gen_range(4..vocab)).collect(),
            )
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let losses: [(&str, LossFn); 7] = [
        ("CE", |t, m, b, c| {
            Ok(cross_entropy(t, m, b, &c.forget.iter().collect::<Vec<_>>())?.0)
        }),
        ("RKL", |t, m, b, c| {
            let p = Packed::from_examples(&c.forget, true, m.config().ctx_len)?;
            Ok(distill_loss(t, m, b, &p, c.teacher_logp.clone(), true)?.0)
        }),
        ("FKL", |t, m, b, c| {
            let p = Packed::from_examples(&c.forget, true, m.config().ctx_len)?;
            Ok(distill_loss(t, m, b, &p, c.teacher_logp.clone(), false)?.0)
        }),
        ("GA", |t, m, b, c| {
            Ok(ga_loss(t, m, b, &c.forget.iter().collect::<Vec<_>>())?.0)
        }),
        ("NPO", |t, m, b, c| {
            let exs: Vec<&Example> = c.forget.iter().collect();
            Ok(npo_loss(t, m, b, &exs, &c.npo_ref, 0.5)?.0)
        }),
        ("RT", |t, m, b, c| {
            Ok(rt_loss(t, m, b, &c.retain.iter().collect::<Vec<_>>())?.0)
        }),
        ("retain-KL", |t, m, b, c| {
            let p = Packed::from_examples(&c.retain, true, m.config().ctx_len)?;
            Ok(distill_loss(t, m, b, &p, c.original_logp.clone(), true)?.0)
        }),
    ];
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let h = 1e-5;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cfg = |s: u64| LmConfig {
            vocab_size: 14,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ctx_len: 12,
            seed: s,
        };
        let mut student: LanguageModel<f64> = LanguageModel::<f32>::new(cfg(seed)).unwrap().cast();
        let original: LanguageModel<f64> =
            LanguageModel::<f32>::new(cfg(seed + 50)).unwrap().cast();
        let strong: LanguageModel<f64> = LanguageModel::<f32>::new(cfg(seed + 90)).unwrap().cast();
        let v = 14;
        let forget = random_examples(&mut rng, v, 2);
        let retain = random_examples(&mut rng, v, 2);
        let pf = Packed::from_examples(&forget, true, 12).unwrap();
        let pr = Packed::from_examples(&retain, true, 12).unwrap();
        let rows = pf.rows.len();
        let lo = Tensor::new(vec![rows, v], frozen_logits(&original, &pf)).unwrap();
        let ls = Tensor::new(vec![rows, v], frozen_logits(&strong, &pf)).unwrap();
        let teacher = build_teacher_logits(&lo, &ls, 2.0).unwrap();
        let mut npo_ref = vec![0.0; forget.len()];
        for (lp, &owner) in original.label_logprobs(&pf).unwrap().iter().zip(&pf.owners) {
            npo_ref[owner] += lp;
        }
        let case = GradCase {
            teacher_logp: log_softmax_f64(teacher.data(), v),
            original_logp: log_softmax_f64(&frozen_logits(&original, &pr), v),
            npo_ref,
            forget,
            retain,
        };

        // Three random coordinates of every parameter tensor.
        let coords: Vec<(usize, usize)> = student
            .params()
            .iter()
            .enumerate()
            .flat_map(|(i, p)| {
                let n = p.numel();
                (0..3).map(|_| (i, rng.gen_range(0..n))).collect::<Vec<_>>()
            })
            .collect();
        student.set_trainable(true);
        for (name, f) in &losses {
            let mut tape = Tape::new();
            let bound = student.bind(&mut tape);
            let loss = f(&mut tape, &student, &bound, &case).unwrap();
            let grads = tape.backward(loss).unwrap();
            let analytic: Vec<f64> = coords
                .iter()
                .map(|&(i, j)| grads.get(bound.vars()[i]).map_or(0.0, |g| g[j]))
                .collect();
            let value = |m: &LanguageModel<f64>| {
                let mut tape = Tape::new();
                let bound = m.bind_frozen(&mut tape);
                let loss = f(&mut tape, m, &bound, &case).unwrap();
                tape.scalar(loss)
            };
            let mut probe = student.clone();
            let numeric: Vec<f64> = coords
                .iter()
                .map(|&(i, j)| {
                    let x = probe.params()[i].data()[j];
                    probe.params_mut()[i].data_mut()[j] = x + h;
                    let up = value(&probe);
                    probe.params_mut()[i].data_mut()[j] = x - h;
                    let down = value(&probe);
                    probe.params_mut()[i].data_mut()[j] = x;
                    (up - down) / (2.0 * h)
                })
                .collect();
            let err = max_relative_error(&analytic, &numeric);
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        max <= 1e-3 && secs < 60.0,
        format!("max rel err {max:.1e} ({detail}); {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn teacher_oracle(o: f32, s: f32, alpha: f32) -> f32 {
    let d = s - o;
    if d > 0.0 {
        o - alpha * d
    } else {
        o
    }
}

fn criterion_2() -> Outcome {
    let o = Tensor::new(vec![3], vec![2.0f32, 1.0, 0.0]).unwrap();
    let s = Tensor::new(vec![3], vec![5.0f32, 1.0, -1.0]).unwrap();
    let worked = build_teacher_logits(&o, &s, 1.0).unwrap();
    let worked_ok = worked
        .data()
        .iter()
        .zip([-1.0f32, 1.0, 0.0])
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0usize;
    let mut mismatches = 0usize;
    let mut coords = 0usize;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..48);
        let scale = [1.0f32, 10.0, 1e4][rng.gen_range(0..3)];
        let o: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let s: Vec<f32> = o
            .iter()
            .map(|&x| match rng.gen_range(0..4) {
                0 => x,
                1 => x + rng.gen_range(0.0..1.0) * scale,
                _ => rng.gen_range(-1.0..1.0) * scale,
            })
            .collect();
        let alpha = [0.0f32, 1.0, rng.gen_range(0.0..100.0)][rng.gen_range(0..3)];
        let t = build_teacher_logits(
            &Tensor::new(vec![n], o.clone()).unwrap(),
            &Tensor::new(vec![n], s.clone()).unwrap(),
            alpha as f64,
        )
        .unwrap();
        for i in 0..n {
            coords += 1;
            let v = t.data()[i];
            if v > o[i] || (s[i] <= o[i] && v.to_bits() != o[i].to_bits()) {
                violations += 1;
            }
            if v.to_bits() != teacher_oracle(o[i], s[i], alpha).to_bits() {
                mismatches += 1;
            }
        }
    }
    outcome(
        worked_ok && violations == 0 && mismatches == 0,
        format!(
            "worked example {:?}; {coords} coordinates, {violations} property violations, {mismatches} oracle mismatches",
            worked.data()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    Distribution::from_logits(&logits, Role::Teacher).probs
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut negative = 0;
    let mut iff_failures = 0;
    for k in 0..10_000 {
        let n = rng.gen_range(2..40);
        let p = random_distribution(&mut rng, n);
        // Alternate equal pairs, pairs equal up to 1e-9 and independent pairs.
        let q = match k % 3 {
            0 => p.clone(),
            1 => {
                let mut q = p.clone();
                q[0] += 1e-9;
                q[1] -= 1e-9;
                q
            }
            _ => random_distribution(&mut rng, n),
        };
        let a = Distribution::new(p.clone(), Role::Teacher).unwrap();
        let b = Distribution::new(q.clone(), Role::Student).unwrap();
        let (f, r) = (fkl_loss(&a, &b), rkl_loss(&a, &b));
        if f < 0.0 || r < 0.0 {
            negative += 1;
        }
        let equal = p.iter().zip(&q).all(|(x, y)| (x - y).abs() <= 1e-6);
        if (f.abs() <= 1e-6) != equal || (r.abs() <= 1e-6) != equal {
            iff_failures += 1;
        }
    }
    let t = Distribution::new(vec![0.5, 0.5], Role::Teacher).unwrap();
    let s = Distribution::new(vec![0.25, 0.75], Role::Student).unwrap();
    let (f, r) = (fkl_loss(&t, &s), rkl_loss(&t, &s));
    let pair_ok = (f - 0.1438).abs() < 1e-4 && (r - 0.1308).abs() < 1e-4;
    outcome(
        negative == 0 && iff_failures == 0 && pair_ok,
        format!(
            "10000 pairs: {negative} negative, {iff_failures} zero-iff-equal failures; fkl {f:.4} rkl {r:.4}"
        ),
    )
}

// ---------------------------------------------------------------- 4

/// D of one labelling of the pooled, sorted sample (no ties).
fn labelled_statistic(labels: &[bool], n: usize, m: usize) -> f64 {
    let (mut i, mut j, mut best) = (0usize, 0usize, 0.0f64);
    for &first in labels {
        if first {
            i += 1;
        } else {
            j += 1;
        }
        best = best.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    best
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sizes = [5usize, 10, 20];
    let mut worst = 0.0f64;
    let mut worst_at = (0, 0);
    for &n in &sizes {
        for &m in &sizes {
            for _ in 0..50 {
                let shift = rng.gen_range(0.0..1.2);
                let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                let b: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() + shift).collect();
                let r = ks_two_sample(&a, &b).unwrap();
                let mut pooled: Vec<(f64, bool)> = a
                    .iter()
                    .map(|&x| (x, true))
                    .chain(b.iter().map(|&x| (x, false)))
                    .collect();
                pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
                let observed =
                    labelled_statistic(&pooled.iter().map(|p| p.1).collect::<Vec<_>>(), n, m);
                let mut labels: Vec<bool> = pooled.iter().map(|p| p.1).collect();
                let mut hits = 0;
                for _ in 0..10_000 {
                    labels.shuffle(&mut rng);
                    if labelled_statistic(&labels, n, m) >= observed - 1e-12 {
                        hits += 1;
                    }
                }
                let diff = (hits as f64 / 10_000.0 - r.p_value).abs();
                if diff > worst {
                    worst = diff;
                    worst_at = (n, m);
                }
            }
        }
    }
    let same = [0.3, 0.1, 0.7, 0.2, 0.9];
    let r = ks_two_sample(&same, &same).unwrap();
    let identical_ok = r.statistic == 0.0 && r.p_value == 1.0;
    outcome(
        worst <= 0.02 && identical_ok,
        format!(
            "450 draws, max |p - p_perm| {worst:.4} at n,m = {worst_at:?}; identical samples D={} p={}",
            r.statistic, r.p_value
        ),
    )
}

// ---------------------------------------------------------------- 5, 6, 7

struct FullRun {
    report: Report,
    minutes: f64,
}

fn run_default() -> rkld_workbench::Result<FullRun> {
    let out = tempfile::tempdir().expect("temp dir");
    let cfg = ExperimentConfig::default();
    let dir = RunDir::new(out.path(), &cfg);
    let start = Instant::now();
    let report = run_all(&cfg, &dir)?;
    Ok(FullRun {
        report,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    })
}

fn criterion_5(run: &FullRun) -> Outcome {
    let r = &run.report;
    let (Some(rkld), Some(ga)) = (r.method("RKLD"), r.method("GA")) else {
        return outcome(false, "RKLD or GA missing from the report".into());
    };
    let curve = &rkld.forget_quality_curve;
    let best = curve.iter().copied().fold(0.0, f64::max);
    let best_epoch = curve.iter().position(|&q| q == best).map_or(0, |i| i + 1);
    let a = best > 0.05 && best_epoch <= 10;
    let b = rkld.model_utility > ga.model_utility;
    let originals: Vec<&EvalReport> = r
        .baselines
        .iter()
        .filter(|row| row.method == "original")
        .map(|row| &row.report)
        .collect();
    let c = !originals.is_empty() && originals.iter().all(|rep| rep.forget_quality < 0.05);
    let max_original = originals
        .iter()
        .map(|rep| rep.forget_quality)
        .fold(0.0, f64::max);
    // The pipeline is single-threaded, so wall time bounds CPU time.
    let fast = run.minutes <= 15.0;
    outcome(
        a && b && c && fast,
        format!(
            "(a) RKLD mean forget quality peaks at {best:.3} in epoch {best_epoch}: {}; \
             (b) utility at peak RKLD {:.3} vs GA {:.3}: {}; \
             (c) original max p {max_original:.2e} over {} seeds: {}; runtime {:.1} min: {}",
            pass_word(a),
            rkld.model_utility,
            ga.model_utility,
            pass_word(b),
            originals.len(),
            pass_word(c),
            run.minutes,
            pass_word(fast),
        ),
    )
}

fn criterion_6(run: &FullRun) -> Outcome {
    let r = &run.report;
    let (Some(rk), Some(fk)) = (r.method("RKLD"), r.method("FKLD")) else {
        return outcome(false, "RKLD or FKLD missing from the report".into());
    };
    let quality = rk.forget_quality > fk.forget_quality;
    let prob = rk.forget_prob < fk.forget_prob;
    outcome(
        quality && prob,
        format!(
            "forget quality RKL {:.3} vs FKL {:.3e}; forget prob RKL {:.3} vs FKL {:.3}",
            rk.forget_quality, fk.forget_quality, rk.forget_prob, fk.forget_prob
        ),
    )
}

fn criterion_7(run: &FullRun) -> Outcome {
    let r = &run.report;
    let (Some(rk), Some(ori)) = (r.method("RKLD"), r.baseline("original")) else {
        return outcome(false, "RKLD or original missing from the report".into());
    };
    let ratio = if rk.leakage > 0.0 {
        ori.leakage / rk.leakage
    } else {
        f64::INFINITY
    };
    outcome(
        rk.leakage <= 0.2 && ori.leakage >= 0.8 && ratio >= 4.0,
        format!(
            "top-5 leakage RKLD {:.3} vs original {:.3} (ratio {ratio:.1})",
            rk.leakage, ori.leakage
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = 0;
    for _ in 0..1000 {
        let xs: [f64; 9] = std::array::from_fn(|_| rng.gen_range(1e-3..1.0));
        let h = harmonic_mean(&xs);

        let mut zeroed = xs;
        zeroed[rng.gen_range(0..9)] = 0.0;
        if harmonic_mean(&zeroed) != 0.0 {
            failures += 1;
        }

        let c = rng.gen_range(1e-3..1.0);
        if (harmonic_mean(&[c; 9]) - c).abs() > 1e-12 * c {
            failures += 1;
        }

        let k = rng.gen_range(0..9);
        let mut up = xs;
        up[k] += rng.gen_range(0.0..1.0);
        let mut down = xs;
        down[k] *= rng.gen_range(0.0..1.0);
        if harmonic_mean(&up) < h || harmonic_mean(&down) > h {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("1000 nonuples, {failures} property failures"),
    )
}

// ---------------------------------------------------------------- 9

fn small_config() -> ExperimentConfig {
    let sched = |epochs| Schedule {
        lr: 5e-3,
        weight_decay: 0.01,
        batch_size: 16,
        epochs,
        grad_clip: None,
    };
    let methods = [
        UnlearnSpec::new(Method::Rkld),
        UnlearnSpec::new(Method::Fkld),
        UnlearnSpec::new(Method::Ga).with_retain(RetainMode::Rt),
        UnlearnSpec::new(Method::Npo).with_retain(RetainMode::Kl),
        UnlearnSpec::new(Method::Idk),
        UnlearnSpec::new(Method::Ta),
    ]
    .map(|mut s| {
        s.epochs = 2;
        s
    });
    ExperimentConfig {
        name: "determinism".into(),
        seeds: vec![1, 2],
        corpus: CorpusParams {
            n_persons: 10,
            qa_per_person: 4,
            forget_pct: 10,
        },
        finetune: sched(4),
        strengthen: sched(2),
        unlearn: sched(2),
        methods: methods.to_vec(),
        retain_eval_limit: Some(10),
        ..Default::default()
    }
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable run dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let cfg = small_config();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().expect("temp dir");
        let dir = RunDir::new(out.path(), &cfg);
        if let Err(e) = run_all(&cfg, &dir) {
            return outcome(false, format!("pipeline failed: {e}"));
        }
        trees.push(files_under(out.path()));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let checkpoints = a
        .keys()
        .filter(|k| k.extension().is_some_and(|e| e == "ckpt"))
        .count();
    outcome(
        differing.is_empty() && checkpoints > 0,
        format!(
            "{} files ({checkpoints} checkpoints) compared, {} differ{}",
            a.len(),
            differing.len(),
            differing
                .first()
                .map(|d| format!(", e.g. {d}"))
                .unwrap_or_default()
        ),
    )
}

// ----------------------------------------------------------------

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} {name}: {verdict} ({})", o.detail);
}

fn main() -> ExitCode {
    let mut all = true;
    let mut record = |n: usize, name: &str, o: Outcome| {
        report(n, name, &o);
        all &= o.pass;
    };
    record(1, "gradient correctness", criterion_1());
    record(2, "teacher logits exactness", criterion_2());
    record(3, "divergence properties", criterion_3());
    record(4, "KS oracle equivalence", criterion_4());
    match run_default() {
        Ok(run) => {
            record(5, "forget quality and utility versus GA", criterion_5(&run));
            record(6, "reverse versus forward KL", criterion_6(&run));
            record(7, "fill-in-blank leakage", criterion_7(&run));
        }
        Err(e) => {
            for (n, name) in [
                (5, "forget quality and utility versus GA"),
                (6, "reverse versus forward KL"),
                (7, "fill-in-blank leakage"),
            ] {
                record(
                    n,
                    name,
                    outcome(false, format!("default pipeline failed: {e}")),
                );
            }
        }
    }
    record(8, "utility aggregation", criterion_8());
    record(9, "determinism", criterion_9());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
