use ndgrad::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rkld::lm::{Example, LanguageModel, LmConfig, Packed};
use rkld::train::cross_entropy;
use rkld::unlearn::{
    build_teacher_logits, distill_loss, fkl_loss, ga_loss, kl_floored, kl_rows, log_softmax_rows,
    npo_loss, rkl_loss, rt_loss, sequence_logprob_sums, task_arithmetic, Distribution, Method,
    RetainMode, Role, UnlearnSpec, PROB_FLOOR,
};
use rkld::Error;

fn teacher_oracle(o: f32, s: f32, alpha: f32) -> f32 {
    if s > o {
        o - alpha * (s - o)
    } else {
        o
    }
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a > 0.0 {
            total += a * (a / b.max(1e-12)).ln();
        }
    }
    total
}

fn dist(p: &[f64], role: Role) -> Distribution {
    Distribution::new(p.to_vec(), role).unwrap()
}

fn small_model(seed: u64) -> LanguageModel {
    LanguageModel::<f32>::new(LmConfig {
        vocab_size: 9,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ctx_len: 16,
        seed,
    })
    .unwrap()
}

fn examples() -> Vec<Example> {
    vec![
        Example::new(vec![4, 5], vec![6, 7]),
        Example::new(vec![8], vec![4, 4, 5]),
    ]
}

#[test]
fn teacher_worked_example() {
    let o = Tensor::new(vec![1, 4], vec![1.0f32, 2.0, 3.0, 0.5]).unwrap();
    let s = Tensor::new(vec![1, 4], vec![2.0f32, 2.0, 1.0, 0.75]).unwrap();
    let t = build_teacher_logits(&o, &s, 2.0).unwrap();
    assert_eq!(t.data(), &[-1.0, 2.0, 3.0, 0.0]);
    let o3 = Tensor::new(vec![3], vec![2.0f32, 1.0, 0.0]).unwrap();
    let s3 = Tensor::new(vec![3], vec![5.0f32, 1.0, -1.0]).unwrap();
    assert_eq!(
        build_teacher_logits(&o3, &s3, 1.0).unwrap().data(),
        &[-1.0, 1.0, 0.0]
    );
    assert_eq!(build_teacher_logits(&o, &s, 0.0).unwrap().data(), o.data());
    let wrong = Tensor::new(vec![2, 2], vec![0.0f32; 4]).unwrap();
    assert!(build_teacher_logits(&o, &wrong, 1.0).is_err());
    assert!(matches!(
        build_teacher_logits(&o, &s, -1.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn teacher_matches_the_scalar_oracle_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let n = 64;
        let o: Vec<f32> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let s: Vec<f32> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let alpha: f32 = rng.gen_range(0.0..50.0);
        let t = build_teacher_logits(
            &Tensor::new(vec![n], o.clone()).unwrap(),
            &Tensor::new(vec![n], s.clone()).unwrap(),
            alpha as f64,
        )
        .unwrap();
        for i in 0..n {
            assert_eq!(
                t.data()[i].to_bits(),
                teacher_oracle(o[i], s[i], alpha).to_bits()
            );
        }
    }
}

proptest! {
    #[test]
    fn teacher_logits_fall_as_alpha_grows(
        o in prop::collection::vec(-10.0f32..10.0, 8),
        s in prop::collection::vec(-10.0f32..10.0, 8),
        a in 0.0f64..10.0,
        extra in 0.0f64..10.0,
    ) {
        let to = Tensor::new(vec![8], o.clone()).unwrap();
        let ts = Tensor::new(vec![8], s.clone()).unwrap();
        let lo = build_teacher_logits(&to, &ts, a).unwrap();
        let hi = build_teacher_logits(&to, &ts, a + extra).unwrap();
        for i in 0..8 {
            prop_assert!(hi.data()[i] <= lo.data()[i]);
            prop_assert!(lo.data()[i] <= o[i]);
            if s[i] <= o[i] {
                prop_assert_eq!(lo.data()[i], o[i]);
            }
        }
    }

    #[test]
    fn divergences_match_the_oracle(
        a in prop::collection::vec(-6.0f64..6.0, 5),
        b in prop::collection::vec(-6.0f64..6.0, 5),
    ) {
        let p = Distribution::from_logits(&a, Role::Teacher);
        let q = Distribution::from_logits(&b, Role::Student);
        prop_assert!((fkl_loss(&p, &q) - kl_oracle(&p.probs, &q.probs)).abs() < 1e-12);
        prop_assert!((rkl_loss(&p, &q) - kl_oracle(&q.probs, &p.probs)).abs() < 1e-12);
        prop_assert!(fkl_loss(&p, &q) >= -1e-12 && rkl_loss(&p, &q) >= -1e-12);
        prop_assert!(fkl_loss(&p, &p).abs() < 1e-12);
    }
}

#[test]
fn kl_examples_and_asymmetry() {
    let t = dist(&[0.5, 0.5], Role::Teacher);
    let s = dist(&[0.9, 0.1], Role::Student);
    let fkl = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    let rkl = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
    assert!((fkl_loss(&t, &s) - fkl).abs() < 1e-12);
    assert!((rkl_loss(&t, &s) - rkl).abs() < 1e-12);
    assert!((fkl - 0.5108).abs() < 1e-4 && (rkl - 0.3681).abs() < 1e-4);

    let s = dist(&[0.25, 0.75], Role::Student);
    assert!((fkl_loss(&t, &s) - 0.1438).abs() < 1e-4);
    assert!((rkl_loss(&t, &s) - 0.1308).abs() < 1e-4);

    // Zero mass in the second argument hits the floor instead of infinity.
    let v = kl_floored(&[0.5, 0.5], &[1.0, 0.0]);
    assert!((v - (0.5 * 0.5f64.ln() + 0.5 * (0.5 / PROB_FLOOR).ln())).abs() < 1e-9);
    assert_eq!(kl_floored(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
    assert!(Distribution::new(vec![0.5, 0.6], Role::Teacher).is_err());
    assert!(Distribution::new(vec![1.5, -0.5], Role::Teacher).is_err());
}

#[test]
fn reverse_kl_seeks_a_mode_and_forward_kl_covers_both() {
    let teacher = dist(&[0.49, 0.02, 0.49], Role::Teacher);
    let covering = dist(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], Role::Student);
    let seeking = dist(&[0.9, 0.05, 0.05], Role::Student);
    assert!(rkl_loss(&teacher, &seeking) < rkl_loss(&teacher, &covering));
    assert!(fkl_loss(&teacher, &covering) < fkl_loss(&teacher, &seeking));

    // A student sitting entirely on a token the teacher rules out.
    let teacher = dist(&[0.5, 0.5, 0.0], Role::Teacher);
    let stray = dist(&[0.0, 0.0, 1.0], Role::Student);
    let (r, f) = (rkl_loss(&teacher, &stray), fkl_loss(&teacher, &stray));
    assert!(r > f && f.is_finite());
    assert!((r - (1.0 / PROB_FLOOR).ln()).abs() < 1e-9);
}

#[test]
fn kl_rows_on_the_tape_matches_the_scalar_version() {
    let a = [0.3, -1.2, 2.0, 0.1, 0.0, 0.4];
    let b = [1.0, 1.0, -3.0, 0.2, 0.9, -0.5];
    let mut tape = Tape::<f64>::new();
    let la = tape.constant(vec![2, 3], a.to_vec()).unwrap();
    let lb = tape.constant(vec![2, 3], b.to_vec()).unwrap();
    let sa = tape.log_softmax(la).unwrap();
    let sb = tape.log_softmax(lb).unwrap();
    let rows = kl_rows(&mut tape, sa, sb).unwrap();
    for r in 0..2 {
        let p = Distribution::from_logits(&a[r * 3..r * 3 + 3], Role::Student);
        let q = Distribution::from_logits(&b[r * 3..r * 3 + 3], Role::Teacher);
        assert!((tape.value(rows)[r] - kl_oracle(&p.probs, &q.probs)).abs() < 1e-12);
    }
    let lsr = log_softmax_rows(&[0.0, 0.0, 0.0, 0.0, 1.0, 2.0], 3);
    assert!((lsr[0] - (1.0f32 / 3.0).ln()).abs() < 1e-6);
    let total: f32 = lsr[3..].iter().map(|l| l.exp()).sum();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn ascent_and_retain_losses_relate_to_cross_entropy() {
    let m = small_model(3);
    let exs = examples();
    let refs: Vec<&Example> = exs.iter().collect();
    let value =
        |f: &dyn Fn(&mut Tape<f32>, &rkld::lm::Bound) -> rkld::Result<(ndgrad::Var, f64)>| {
            let mut tape = Tape::new();
            let bound = m.bind_frozen(&mut tape);
            let (v, w) = f(&mut tape, &bound).unwrap();
            (tape.scalar(v) as f64, w)
        };
    let (ce, n) = value(&|t, b| cross_entropy(t, &m, b, &refs));
    let (ga, gn) = value(&|t, b| ga_loss(t, &m, b, &refs));
    let (rt, _) = value(&|t, b| rt_loss(t, &m, b, &refs));
    assert_eq!(ga, -ce);
    assert_eq!(rt, ce);
    // Two answer tokens plus <eos>, then three plus <eos>.
    assert_eq!((n, gn), (7.0, 7.0));

    // Oracle for the mean NLL from per-token log-probabilities.
    let lps: Vec<f64> = exs
        .iter()
        .flat_map(|e| {
            let mut t = e.target.clone();
            t.push(rkld::lm::EOS);
            m.sequence_logprobs(&e.prefix, &t).unwrap()
        })
        .collect();
    let want = -lps.iter().sum::<f64>() / lps.len() as f64;
    assert!((ce - want).abs() < 1e-5);
}

#[test]
fn npo_examples() {
    let m = small_model(4);
    let exs = examples();
    let refs: Vec<&Example> = exs.iter().collect();
    let own = sequence_logprob_sums(&m, &exs).unwrap();
    let beta = 0.5;
    let npo = |r: &[f64]| {
        let mut tape = Tape::new();
        let bound = m.bind_frozen(&mut tape);
        let (v, _) = npo_loss(&mut tape, &m, &bound, &refs, r, beta).unwrap();
        tape.scalar(v) as f64
    };
    // Student equal to the reference: (2/β)·ln 2.
    assert!((npo(&own) - 2.0 / beta * 2f64.ln()).abs() < 1e-5);
    // Shifting the reference by δ gives the closed form with Δ = −δ.
    let shifted: Vec<f64> = own.iter().map(|x| x + 3.0).collect();
    let want = 2.0 / beta * (1.0 + (-beta * 3.0f64).exp()).ln();
    assert!((npo(&shifted) - want).abs() < 1e-5);
}

#[test]
fn distill_loss_is_zero_against_itself() {
    let m = small_model(5);
    let exs = examples();
    let packed = Packed::from_examples(&exs, true, 16).unwrap();
    let mut tape = Tape::new();
    let bound = m.bind_frozen(&mut tape);
    let logits = m.logits(&mut tape, &bound, &packed).unwrap();
    let own = log_softmax_rows(tape.value(logits), 9);
    for student_first in [true, false] {
        let mut tape = Tape::new();
        let bound = m.bind_frozen(&mut tape);
        let (v, n) =
            distill_loss(&mut tape, &m, &bound, &packed, own.clone(), student_first).unwrap();
        assert!(tape.scalar(v).abs() < 1e-5);
        assert_eq!(n, 7.0);
    }
}

#[test]
fn task_arithmetic_example() {
    let ori = small_model(6);
    let mut strong = ori.clone();
    for p in strong.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x += 0.25);
    }
    let ta = task_arithmetic(&ori, &strong, 1.0).unwrap();
    for (t, o) in ta.params().iter().zip(ori.params()) {
        for (a, b) in t.data().iter().zip(o.data()) {
            assert!((a - (b - 0.25)).abs() < 1e-6);
        }
    }
    assert_eq!(task_arithmetic(&ori, &strong, 0.0).unwrap(), ori);
}

#[test]
fn spec_validation_and_labels() {
    assert_eq!(UnlearnSpec::new(Method::Rkld).label(), "RKLD");
    assert_eq!(
        UnlearnSpec::new(Method::Ga)
            .with_retain(RetainMode::Kl)
            .label(),
        "GA+KL"
    );
    assert!(UnlearnSpec::new(Method::Ta)
        .with_retain(RetainMode::Rt)
        .validate()
        .is_err());
    let mut s = UnlearnSpec::new(Method::Npo);
    s.beta = 0.0;
    assert!(matches!(s.validate(), Err(Error::Config(_))));
    let mut s = UnlearnSpec::new(Method::Rkld);
    s.alpha = -1.0;
    assert!(s.validate().is_err());
    s.alpha = 1.0;
    s.epochs = 0;
    assert!(s.validate().is_err());
    let json =
        serde_json::to_string(&UnlearnSpec::new(Method::Fkld).with_retain(RetainMode::Rt)).unwrap();
    assert!(json.contains("\"FKLD\"") && json.contains("\"RT\""));
}
