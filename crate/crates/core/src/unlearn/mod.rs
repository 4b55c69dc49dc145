//! Unlearning objectives: distillation from a logit-edited teacher (reverse
//! or forward KL), gradient ascent, NPO, refusal tuning, task arithmetic, and
//! the retain-set regularizers.

mod divergence;

use ndgrad::{Real, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, Which};
use crate::lm::{Bound, Example, LanguageModel, Packed, Tokenizer};
use crate::train::{cross_entropy, label_logprobs, train_with, Objective, TrainConfig};
use crate::{Error, Result};

pub use divergence::{
    build_teacher_logits, fkl_loss, kl_floored, kl_rows, log_softmax_rows, rkl_loss, Distribution,
    Role, PROB_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "RKLD")]
    Rkld,
    #[serde(rename = "FKLD")]
    Fkld,
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "IDK")]
    Idk,
    #[serde(rename = "NPO")]
    Npo,
    #[serde(rename = "TA")]
    Ta,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rkld => "RKLD",
            Method::Fkld => "FKLD",
            Method::Ga => "GA",
            Method::Idk => "IDK",
            Method::Npo => "NPO",
            Method::Ta => "TA",
        }
    }

    /// Methods that need the strengthened model.
    pub fn needs_strengthened(self) -> bool {
        matches!(self, Method::Rkld | Method::Fkld | Method::Ta)
    }

    /// Gradient-ascent style methods, clipped by default.
    pub fn is_ascent(self) -> bool {
        matches!(self, Method::Ga | Method::Npo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetainMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "RT")]
    Rt,
    #[serde(rename = "KL")]
    Kl,
}

impl RetainMode {
    pub fn name(self) -> &'static str {
        match self {
            RetainMode::None => "none",
            RetainMode::Rt => "RT",
            RetainMode::Kl => "KL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnSpec {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub ta_lambda: f64,
    pub retain_mode: RetainMode,
    pub retain_weight: f64,
    pub epochs: usize,
}

impl Default for UnlearnSpec {
    fn default() -> Self {
        Self {
            method: Method::Rkld,
            alpha: 8.0,
            beta: 0.1,
            ta_lambda: 1.0,
            retain_mode: RetainMode::None,
            retain_weight: 1.0,
            epochs: 10,
        }
    }
}

impl UnlearnSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn with_retain(mut self, mode: RetainMode) -> Self {
        self.retain_mode = mode;
        self
    }

    /// Short label such as `RKLD` or `GA+RT`.
    pub fn label(&self) -> String {
        match self.retain_mode {
            RetainMode::None => self.method.name().to_string(),
            m => format!("{}+{}", self.method.name(), m.name()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.retain_weight >= 0.0) {
            return Err(Error::Config(format!(
                "retain_weight must be >= 0, got {}",
                self.retain_weight
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("unlearning needs at least one epoch".into()));
        }
        match self.method {
            Method::Rkld | Method::Fkld if !(self.alpha >= 0.0) => Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            ))),
            Method::Npo if !(self.beta > 0.0) => Err(Error::Config(format!(
                "beta must be > 0, got {}",
                self.beta
            ))),
            Method::Ta if self.retain_mode != RetainMode::None => Err(Error::Config(
                "task arithmetic does no training and cannot take a retain regularizer".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Negated mean target-token NLL: minimizing it pushes the likelihood down.
pub fn ga_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &LanguageModel<T>,
    bound: &Bound,
    forget: &[&Example],
) -> Result<(Var, f64)> {
    let (nll, n) = cross_entropy(tape, model, bound, forget)?;
    Ok((tape.scale(nll, -1.0), n))
}

/// Mean target-token NLL on retain pairs; identical to the training loss.
pub fn rt_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &LanguageModel<T>,
    bound: &Bound,
    retain: &[&Example],
) -> Result<(Var, f64)> {
    cross_entropy(tape, model, bound, retain)
}

/// `(2/β)·ln(1 + (π_θ(y|x)/π_ori(y|x))^β)` averaged over sequences, where
/// `ref_logp[i]` is the frozen model's sequence log-probability of example `i`.
pub fn npo_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &LanguageModel<T>,
    bound: &Bound,
    forget: &[&Example],
    ref_logp: &[f64],
    beta: f64,
) -> Result<(Var, f64)> {
    let packed = Packed::from_examples(forget.iter().copied(), true, model.config().ctx_len)?;
    let lp = label_logprobs(tape, model, bound, &packed)?;
    let lens: Vec<usize> = forget.iter().map(|e| e.target.len() + 1).collect();
    let seq = tape.segment_sum(lp, &lens)?;
    let refs = tape.constant(
        vec![forget.len()],
        ref_logp.iter().map(|&v| T::from_f64(v)).collect(),
    )?;
    let ratio = tape.sub(seq, refs)?;
    let scaled = tape.scale(ratio, beta);
    let sp = tape.softplus(scaled);
    let mean = tape.mean(sp);
    Ok((tape.scale(mean, 2.0 / beta), packed.rows.len() as f64))
}

/// Mean over rows of `KL(first ‖ second)` where the student's log-softmax is
/// `first` when `student_first`, and `fixed_logp` (constant rows) is the other.
pub fn distill_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &LanguageModel<T>,
    bound: &Bound,
    packed: &Packed,
    fixed_logp: Vec<T>,
    student_first: bool,
) -> Result<(Var, f64)> {
    let logits = model.logits(tape, bound, packed)?;
    let student = tape.log_softmax(logits)?;
    let fixed = tape.constant(tape.shape(student).to_vec(), fixed_logp)?;
    let rows = if student_first {
        kl_rows(tape, student, fixed)?
    } else {
        kl_rows(tape, fixed, student)?
    };
    let n = packed.rows.len() as f64;
    Ok((tape.mean(rows), n))
}

/// Forget questions paired with refusal templates, cycled in order.
pub fn idk_pairs(bundle: &CorpusBundle, tok: &Tokenizer) -> Vec<Example> {
    bundle.render_training_sequences(tok, Which::Idk)
}

/// `θ_ori − λ·(θ_str − θ_ori)`.
pub fn task_arithmetic(
    original: &LanguageModel,
    strengthened: &LanguageModel,
    lambda: f64,
) -> Result<LanguageModel> {
    original.param_axpy(strengthened, -lambda)
}

/// Logits of the read-out rows of `examples` (answer tokens and `<eos>`),
/// split per example.
pub fn cached_logits(model: &LanguageModel, examples: &[Example]) -> Result<Vec<Vec<f32>>> {
    let v = model.config().vocab_size;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let packed = Packed::from_examples(chunk, true, model.config().ctx_len)?;
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let logits = model.logits(&mut tape, &bound, &packed)?;
        let data = tape.value(logits);
        let mut at = 0;
        for ex in chunk {
            let rows = ex.target.len() + 1;
            out.push(data[at * v..(at + rows) * v].to_vec());
            at += rows;
        }
    }
    Ok(out)
}

/// Sequence log-probability (answer tokens and `<eos>`) of every example.
pub fn sequence_logprob_sums(model: &LanguageModel, examples: &[Example]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let packed = Packed::from_examples(chunk, true, model.config().ctx_len)?;
        let lp = model.label_logprobs(&packed)?;
        let mut at = 0;
        for ex in chunk {
            let rows = ex.target.len() + 1;
            out.push(lp[at..at + rows].iter().sum());
            at += rows;
        }
    }
    Ok(out)
}

/// Per-epoch snapshots of one unlearning run.
#[derive(Debug, Clone)]
pub struct UnlearnRun {
    pub spec: UnlearnSpec,
    /// One model per epoch (a single edited model for task arithmetic).
    pub checkpoints: Vec<LanguageModel>,
    pub losses: Vec<f64>,
}

struct RetainStream<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    original_logits: Vec<Option<Vec<f32>>>,
}

impl RetainStream<'_> {
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.examples.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

struct UnlearnObjective<'a> {
    spec: &'a UnlearnSpec,
    original: &'a LanguageModel,
    forget: &'a [Example],
    /// Per forget example: (original logits, strengthened logits).
    logit_cache: Vec<(Vec<f32>, Vec<f32>)>,
    ref_logp: Vec<f64>,
    retain: Option<RetainStream<'a>>,
}

impl Objective for UnlearnObjective<'_> {
    fn batch_loss(
        &mut self,
        tape: &mut Tape<f32>,
        model: &LanguageModel,
        bound: &Bound,
        batch: &[usize],
    ) -> Result<(Var, f64)> {
        let exs: Vec<&Example> = batch.iter().map(|&i| &self.forget[i]).collect();
        let ctx = model.config().ctx_len;
        let v = model.config().vocab_size;
        let (loss, weight) = match self.spec.method {
            Method::Ga => ga_loss(tape, model, bound, &exs)?,
            Method::Idk => cross_entropy(tape, model, bound, &exs)?,
            Method::Npo => {
                let refs: Vec<f64> = batch.iter().map(|&i| self.ref_logp[i]).collect();
                npo_loss(tape, model, bound, &exs, &refs, self.spec.beta)?
            }
            Method::Rkld | Method::Fkld => {
                let packed = Packed::from_examples(exs.iter().copied(), true, ctx)?;
                let mut teacher = Vec::with_capacity(packed.rows.len() * v);
                for &i in batch {
                    let (ori, strong) = &self.logit_cache[i];
                    teacher.extend(divergence::teacher_row(ori, strong, self.spec.alpha));
                }
                let teacher = log_softmax_rows(&teacher, v);
                distill_loss(
                    tape,
                    model,
                    bound,
                    &packed,
                    teacher,
                    self.spec.method == Method::Rkld,
                )?
            }
            Method::Ta => {
                return Err(Error::Contract(
                    "task arithmetic has no training loss".into(),
                ))
            }
        };
        let Some(stream) = self.retain.as_mut() else {
            return Ok((loss, weight));
        };
        let idx = stream.next_batch(batch.len());
        let rexs: Vec<&Example> = idx.iter().map(|&i| &stream.examples[i]).collect();
        let (reg, _) = match self.spec.retain_mode {
            RetainMode::Rt => rt_loss(tape, model, bound, &rexs)?,
            RetainMode::Kl => {
                let mut fixed = Vec::new();
                for &i in &idx {
                    if stream.original_logits[i].is_none() {
                        let l = cached_logits(
                            self.original,
                            std::slice::from_ref(&stream.examples[i]),
                        )?;
                        stream.original_logits[i] = l.into_iter().next();
                    }
                    fixed.extend_from_slice(
                        stream.original_logits[i].as_deref().unwrap_or_default(),
                    );
                }
                let packed = Packed::from_examples(rexs.iter().copied(), true, ctx)?;
                distill_loss(
                    tape,
                    model,
                    bound,
                    &packed,
                    log_softmax_rows(&fixed, v),
                    true,
                )?
            }
            RetainMode::None => unreachable!("stream exists only with a retain mode"),
        };
        let reg = tape.scale(reg, self.spec.retain_weight);
        Ok((tape.add(loss, reg)?, weight))
    }
}

/// Runs one unlearning method from `original`, snapshotting every epoch.
/// `cfg` supplies the optimizer settings; its epoch count is replaced by
/// `spec.epochs`. Ascent methods clip gradients at norm 1.0 unless `cfg`
/// sets a clip of its own.
pub fn run_unlearn(
    original: &LanguageModel,
    strengthened: Option<&LanguageModel>,
    bundle: &CorpusBundle,
    tok: &Tokenizer,
    spec: &UnlearnSpec,
    cfg: &TrainConfig,
) -> Result<UnlearnRun> {
    spec.validate()?;
    let strong = match (spec.method.needs_strengthened(), strengthened) {
        (true, None) => {
            return Err(Error::Contract(format!(
                "{} needs a strengthened model",
                spec.method.name()
            )))
        }
        (_, s) => s,
    };
    if let Some(s) = strong {
        if s.config() != original.config() {
            return Err(Error::Incompatible(
                "strengthened and original configs differ".into(),
            ));
        }
    }
    if spec.method == Method::Ta {
        let edited = task_arithmetic(original, strong.expect("checked above"), spec.ta_lambda)?;
        return Ok(UnlearnRun {
            spec: spec.clone(),
            checkpoints: vec![edited],
            losses: Vec::new(),
        });
    }

    let forget = if spec.method == Method::Idk {
        idk_pairs(bundle, tok)
    } else {
        bundle.render_training_sequences(tok, Which::Forget)
    };
    let retain_data = bundle.render_training_sequences(tok, Which::Retain);
    let logit_cache = match (spec.method, strong) {
        (Method::Rkld | Method::Fkld, Some(s)) => cached_logits(original, &forget)?
            .into_iter()
            .zip(cached_logits(s, &forget)?)
            .collect(),
        _ => Vec::new(),
    };
    let ref_logp = if spec.method == Method::Npo {
        sequence_logprob_sums(original, &forget)?
    } else {
        Vec::new()
    };
    let retain = (spec.retain_mode != RetainMode::None && !retain_data.is_empty()).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_4E7A1);
        let mut order: Vec<usize> = (0..retain_data.len()).collect();
        order.shuffle(&mut rng);
        RetainStream {
            examples: &retain_data,
            order,
            cursor: 0,
            rng,
            original_logits: vec![None; retain_data.len()],
        }
    });
    let mut objective = UnlearnObjective {
        spec,
        original,
        forget: &forget,
        logit_cache,
        ref_logp,
        retain,
    };
    let mut cfg = cfg.clone();
    cfg.epochs = spec.epochs;
    if spec.method.is_ascent() && cfg.grad_clip.is_none() {
        cfg.grad_clip = Some(1.0);
    }
    let mut model = original.clone();
    let mut checkpoints = Vec::with_capacity(spec.epochs);
    let losses = train_with(&mut model, forget.len(), &cfg, &mut objective, |_, m| {
        let mut snap = m.clone();
        snap.set_trainable(false);
        checkpoints.push(snap);
        Ok(())
    })?;
    Ok(UnlearnRun {
        spec: spec.clone(),
        checkpoints,
        losses,
    })
}
