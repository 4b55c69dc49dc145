//! AdamW with warmup/decay schedule, the generic training loop, and the
//! finetune / retrain / continued-training procedures.

use ndgrad::{Real, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, Which};
use crate::lm::{Bound, Example, LanguageModel, LmConfig, Packed, Tokenizer};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new<T: Real>(model: &LanguageModel<T>) -> Self {
        let zeros = || {
            model
                .params()
                .iter()
                .map(|p| vec![0.0; p.numel()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at(lr: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        lr * (total - step) as f64 / (total - warmup) as f64
    }
}

/// One AdamW update from the gradients stored on the model's parameters.
/// Parameters without a gradient buffer are treated as having zero gradient.
pub fn adamw_step<T: Real>(
    model: &mut LanguageModel<T>,
    state: &mut OptState,
    weight_decay: f64,
    lr_now: f64,
) -> Result<()> {
    for (name, p) in model.names().iter().zip(model.params()) {
        if p.grad()
            .is_some_and(|g| g.iter().any(|x| !x.to_f64().is_finite()))
        {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let grad = p.take_grad();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[j].to_f64());
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let mut x = w.to_f64();
            x -= lr_now * weight_decay * x;
            x -= lr_now * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            *w = T::from_f64(x);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(model: &mut LanguageModel<T>, max_norm: f64) -> f64 {
    let sq: f64 = model
        .params()
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter().map(|x| x.to_f64() * x.to_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for p in model.params_mut() {
            if let Some(g) = p.take_grad() {
                let scaled: Vec<T> = g.iter().map(|x| T::from_f64(x.to_f64() * s)).collect();
                p.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}

/// A loss over a batch of example indices.
pub trait Objective {
    /// Records the batch loss on `tape`; returns it with the weight (e.g.
    /// token count) used when averaging epoch losses.
    fn batch_loss(
        &mut self,
        tape: &mut Tape<f32>,
        model: &LanguageModel,
        bound: &Bound,
        batch: &[usize],
    ) -> Result<(Var, f64)>;
}

/// Per-row log-probability of each packed label, shape `[rows]`.
pub fn label_logprobs<T: Real>(
    tape: &mut Tape<T>,
    model: &LanguageModel<T>,
    bound: &Bound,
    packed: &Packed,
) -> Result<Var> {
    let logits = model.logits(tape, bound, packed)?;
    let lp = tape.log_softmax(logits)?;
    Ok(tape.pick(lp, &packed.labels)?)
}

/// Mean next-token negative log-likelihood over answer tokens and `<eos>`.
pub fn cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    model: &LanguageModel<T>,
    bound: &Bound,
    examples: &[&Example],
) -> Result<(Var, f64)> {
    let packed = Packed::from_examples(examples.iter().copied(), true, model.config().ctx_len)?;
    let lp = label_logprobs(tape, model, bound, &packed)?;
    let n = packed.rows.len() as f64;
    let total = tape.sum(lp);
    Ok((tape.scale(total, -1.0 / n), n))
}

/// Plain cross-entropy on `(prefix, target)` pairs.
pub struct CrossEntropy<'a> {
    pub examples: &'a [Example],
}

impl Objective for CrossEntropy<'_> {
    fn batch_loss(
        &mut self,
        tape: &mut Tape<f32>,
        model: &LanguageModel,
        bound: &Bound,
        batch: &[usize],
    ) -> Result<(Var, f64)> {
        let exs: Vec<&Example> = batch.iter().map(|&i| &self.examples[i]).collect();
        cross_entropy(tape, model, bound, &exs)
    }
}

/// Optimizes `objective` over `n_examples` indices with seeded shuffling and
/// one AdamW step per batch. The first epoch warms the rate up linearly, the
/// rest decay it linearly towards 0. `on_epoch(epoch, model)` runs after every
/// epoch (1-based). Returns the weighted mean loss of each epoch.
pub fn train_with<O, F>(
    model: &mut LanguageModel,
    n_examples: usize,
    cfg: &TrainConfig,
    objective: &mut O,
    on_epoch: F,
) -> Result<Vec<f64>>
where
    O: Objective + ?Sized,
    F: FnMut(usize, &LanguageModel) -> Result<()>,
{
    let mut state = OptState::new(model);
    train_from(model, &mut state, n_examples, cfg, objective, on_epoch)
}

/// [`train_with`] resuming from existing Adam moments. The step counter in
/// `state` keeps counting, so bias correction continues where it stopped;
/// the rate schedule starts afresh.
pub fn train_from<O, F>(
    model: &mut LanguageModel,
    state: &mut OptState,
    n_examples: usize,
    cfg: &TrainConfig,
    objective: &mut O,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    O: Objective + ?Sized,
    F: FnMut(usize, &LanguageModel) -> Result<()>,
{
    cfg.validate()?;
    if n_examples == 0 {
        return Err(Error::Contract(
            "training needs at least one example".into(),
        ));
    }
    if state.m.len() != model.params().len() {
        return Err(Error::Incompatible(
            "optimizer state does not match the model".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = n_examples.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = if cfg.epochs > 1 { steps_per_epoch } else { 0 };
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    model.set_trainable(true);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut weight) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let (loss, w) = objective.batch_loss(&mut tape, model, &bound, batch)?;
            let value = tape.scalar(loss).to_f64();
            if !value.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite loss {value} at step {step}"
                )));
            }
            sum += value * w;
            weight += w;
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&bound, &grads)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(model, c);
            }
            // Warmup steps use the rate at the end of the step so none is zero.
            let lr_now = if step < warmup {
                lr_at(cfg.lr, step + 1, total, warmup)
            } else {
                lr_at(cfg.lr, step, total, warmup)
            };
            adamw_step(model, state, cfg.weight_decay, lr_now)?;
            step += 1;
        }
        history.push(sum / weight);
        on_epoch(epoch, model)?;
    }
    model.zero_grad();
    Ok(history)
}

pub fn train<O: Objective + ?Sized>(
    model: &mut LanguageModel,
    n_examples: usize,
    cfg: &TrainConfig,
    objective: &mut O,
) -> Result<Vec<f64>> {
    train_with(model, n_examples, cfg, objective, |_, _| Ok(()))
}

/// A trained model with the optimizer moments it ended with.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: LanguageModel,
    pub state: OptState,
    pub losses: Vec<f64>,
}

/// Fits a freshly initialised model on the full training text (`s`, held-out
/// persons and world facts). Pretraining and finetuning are one pass here.
pub fn finetune(
    bundle: &CorpusBundle,
    tok: &Tokenizer,
    lm: &LmConfig,
    cfg: &TrainConfig,
) -> Result<Fit> {
    fit_fresh(bundle, tok, lm, cfg, Which::Pretrain)
}

/// Same as [`finetune`] but without the forget set: the reference model.
pub fn retrain(
    bundle: &CorpusBundle,
    tok: &Tokenizer,
    lm: &LmConfig,
    cfg: &TrainConfig,
) -> Result<Fit> {
    fit_fresh(bundle, tok, lm, cfg, Which::Reference)
}

fn fit_fresh(
    bundle: &CorpusBundle,
    tok: &Tokenizer,
    lm: &LmConfig,
    cfg: &TrainConfig,
    which: Which,
) -> Result<Fit> {
    let mut model = LanguageModel::new(lm.clone())?;
    let mut state = OptState::new(&model);
    let data = bundle.render_training_sequences(tok, which);
    let losses = train_from(
        &mut model,
        &mut state,
        data.len(),
        cfg,
        &mut CrossEntropy { examples: &data },
        |_, _| Ok(()),
    )?;
    Ok(Fit {
        model,
        state,
        losses,
    })
}

/// Continues training a copy of `original` on the forget set only; the
/// result is the strengthened model. With `state` the Adam moments of the
/// original run carry over, otherwise they start from zero.
pub fn continued_train(
    original: &LanguageModel,
    state: Option<&OptState>,
    bundle: &CorpusBundle,
    tok: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<Fit> {
    let mut model = original.clone();
    let mut state = state.cloned().unwrap_or_else(|| OptState::new(&model));
    let data = bundle.render_training_sequences(tok, Which::Forget);
    let losses = train_from(
        &mut model,
        &mut state,
        data.len(),
        cfg,
        &mut CrossEntropy { examples: &data },
        |_, _| Ok(()),
    )?;
    Ok(Fit {
        model,
        state,
        losses,
    })
}
