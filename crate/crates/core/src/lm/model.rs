use ndgrad::{Gradients, Real, Tape, Tensor, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{BOS, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    pub seed: u64,
}

impl LmConfig {
    /// Two layers, four heads, width 64, context 64.
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ctx_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.ctx_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d) = (self.vocab_size, self.d_model);
        let mut specs = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.ctx_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            specs.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.b_qkv"), vec![3 * d]),
                (p("attn.w_out"), vec![d, d]),
                (p("attn.b_out"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w_fc"), vec![d, 4 * d]),
                (p("mlp.b_fc"), vec![4 * d]),
                (p("mlp.w_proj"), vec![4 * d, d]),
                (p("mlp.b_proj"), vec![d]),
            ]);
        }
        specs.extend([
            ("ln_f.gamma".to_string(), vec![d]),
            ("ln_f.beta".to_string(), vec![d]),
            ("lm_head".to_string(), vec![d, v]),
        ]);
        specs
    }
}

/// One supervised pair: loss is taken on `target` only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prefix: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn new(prefix: Vec<usize>, target: Vec<usize>) -> Self {
        Self { prefix, target }
    }
}

/// Several sequences packed row-wise into one forward pass, plus the logit
/// rows to read out and their labels.
#[derive(Debug, Clone, Default)]
pub struct Packed {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    /// Packed row whose logits predict `labels[i]`.
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    /// Index of the sequence each row belongs to.
    pub owners: Vec<usize>,
}

impl Packed {
    /// Packs `<bos> prefix target` per example and reads out the rows
    /// predicting each target token, plus `<eos>` when `append_eos` is set.
    pub fn from_examples<'a>(
        examples: impl IntoIterator<Item = &'a Example>,
        append_eos: bool,
        ctx_len: usize,
    ) -> Result<Self> {
        let mut p = Packed::default();
        for (idx, ex) in examples.into_iter().enumerate() {
            if ex.target.is_empty() {
                return Err(Error::Contract("example target is empty".into()));
            }
            let len = 1 + ex.prefix.len() + ex.target.len();
            if len > ctx_len {
                return Err(Error::SequenceTooLong { len, ctx_len });
            }
            let start = p.tokens.len();
            p.tokens.push(BOS);
            p.tokens.extend_from_slice(&ex.prefix);
            p.tokens.extend_from_slice(&ex.target);
            p.positions.extend(0..len);
            p.segments.push((start, len));
            let first = start + ex.prefix.len();
            for (j, &tok) in ex.target.iter().enumerate() {
                p.rows.push(first + j);
                p.labels.push(tok);
                p.owners.push(idx);
            }
            if append_eos {
                p.rows.push(first + ex.target.len());
                p.labels.push(EOS);
                p.owners.push(idx);
            }
        }
        Ok(p)
    }

    /// Packs raw token sequences and reads out the last row of each.
    pub fn last_rows(seqs: &[&[usize]], ctx_len: usize) -> Result<Self> {
        let mut p = Packed::default();
        for (idx, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Contract("cannot run an empty sequence".into()));
            }
            if s.len() > ctx_len {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    ctx_len,
                });
            }
            let start = p.tokens.len();
            p.tokens.extend_from_slice(s);
            p.positions.extend(0..s.len());
            p.segments.push((start, s.len()));
            p.rows.push(start + s.len() - 1);
            p.owners.push(idx);
        }
        Ok(p)
    }

    pub fn n_sequences(&self) -> usize {
        self.segments.len()
    }
}

/// Parameters registered on a tape, in [`LmConfig::param_specs`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Sample from the renormalised `k` most probable tokens.
    TopK {
        k: usize,
        seed: u64,
    },
}

/// Decoder-only causal transformer: learned absolute positions, pre-norm
/// blocks with GELU MLPs, untied output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<T: Real = f32> {
    config: LmConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

const INIT_STD: f64 = 0.02;

impl<T: Real> LanguageModel<T> {
    /// Weights `N(0, 0.02²)`, zero biases, unit norm gains; a pure function of `config`.
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (names, params) = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("gamma") {
                    Tensor::ones(shape)
                } else if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    Tensor::randn(shape, INIT_STD, &mut rng)
                };
                (name, t)
            })
            .unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Builds a model from named tensors, checking names and shapes against `config`.
    pub fn from_params(config: LmConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(Error::Incompatible(format!(
                "expected {} tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, shape), (n, t)) in specs.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor `{n}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for p in &mut self.params {
            p.set_requires_grad(flag);
            if !flag {
                p.zero_grad();
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p)).collect(),
        }
    }

    /// Adds the gradients of a backward pass into the parameter tensors.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if p.requires_grad() {
                grads.accumulate_into(v, p)?;
            }
        }
        Ok(())
    }

    /// Logits `[packed.rows.len() × V]` for the read-out rows of a packed batch.
    pub fn logits(&self, tape: &mut Tape<T>, bound: &Bound, packed: &Packed) -> Result<Var> {
        let c = &self.config;
        if let Some(&bad) = packed.tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(ndgrad::NdError::Index {
                op: "token embedding",
                index: bad,
                len: c.vocab_size,
            }
            .into());
        }
        if let Some(&(_, len)) = packed.segments.iter().find(|&&(_, len)| len > c.ctx_len) {
            return Err(Error::SequenceTooLong {
                len,
                ctx_len: c.ctx_len,
            });
        }
        let v = &bound.vars;
        let tok = tape.gather_rows(v[0], &packed.tokens)?;
        let pos = tape.gather_rows(v[1], &packed.positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..c.n_layers {
            let b = 2 + l * 12;
            let h = tape.layer_norm(x, v[b], v[b + 1])?;
            let qkv = tape.matmul(h, v[b + 2])?;
            let qkv = tape.add_row(qkv, v[b + 3])?;
            let att = tape.causal_attention(qkv, &packed.segments, c.n_heads)?;
            let o = tape.matmul(att, v[b + 4])?;
            let o = tape.add_row(o, v[b + 5])?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, v[b + 6], v[b + 7])?;
            let f = tape.matmul(h, v[b + 8])?;
            let f = tape.add_row(f, v[b + 9])?;
            let f = tape.gelu(f);
            let m = tape.matmul(f, v[b + 10])?;
            let m = tape.add_row(m, v[b + 11])?;
            x = tape.add(x, m)?;
        }
        let head = 2 + c.n_layers * 12;
        let sel = tape.gather_rows(x, &packed.rows)?;
        let h = tape.layer_norm(sel, v[head], v[head + 1])?;
        Ok(tape.matmul(h, v[head + 2])?)
    }

    /// Logits for every position of `tokens`; row `t` predicts token `t + 1`.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        if tokens.len() > self.config.ctx_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                ctx_len: self.config.ctx_len,
            });
        }
        let packed = Packed {
            tokens: tokens.to_vec(),
            positions: (0..tokens.len()).collect(),
            segments: vec![(0, tokens.len())],
            rows: (0..tokens.len()).collect(),
            labels: Vec::new(),
            owners: vec![0; tokens.len()],
        };
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let out = self.logits(&mut tape, &bound, &packed)?;
        Ok(tape.to_tensor(out))
    }

    /// Binds parameters as constants so the pass records no gradient state.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| {
                    tape.constant(p.shape().to_vec(), p.data().to_vec())
                        .expect("parameter data matches its shape")
                })
                .collect(),
        }
    }

    /// Log-probabilities of the label of every read-out row, in row order.
    pub fn label_logprobs(&self, packed: &Packed) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let logits = self.logits(&mut tape, &bound, packed)?;
        let lp = tape.log_softmax(logits)?;
        let picked = tape.pick(lp, &packed.labels)?;
        Ok(tape.value(picked).iter().map(|v| v.to_f64()).collect())
    }

    /// `log P(target_i | <bos> prefix target_<i)` for every target token.
    pub fn sequence_logprobs(&self, prefix: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        if target.is_empty() {
            return Err(Error::Contract(
                "sequence_logprobs needs a non-empty target".into(),
            ));
        }
        let ex = Example::new(prefix.to_vec(), target.to_vec());
        let packed = Packed::from_examples([&ex], false, self.config.ctx_len)?;
        self.label_logprobs(&packed)
    }

    /// Next-token log-distribution after `<bos> prefix`.
    pub fn next_token_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut seq = Vec::with_capacity(prefix.len() + 1);
        seq.push(BOS);
        seq.extend_from_slice(prefix);
        let rows = self.last_row_logprobs(&[&seq])?;
        Ok(rows.into_iter().next().unwrap_or_default())
    }

    fn last_row_logprobs(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let packed = Packed::last_rows(seqs, self.config.ctx_len)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let logits = self.logits(&mut tape, &bound, &packed)?;
        let lp = tape.log_softmax(logits)?;
        let v = self.config.vocab_size;
        Ok(tape
            .value(lp)
            .chunks(v)
            .map(|r| r.iter().map(|x| x.to_f64()).collect())
            .collect())
    }

    /// Extends `prefix` (without `<bos>`) by up to `max_new` tokens, stopping
    /// at `<eos>`. The returned sequence starts with `prefix` and never
    /// contains `<eos>`.
    pub fn generate(
        &self,
        prefix: &[usize],
        max_new: usize,
        mode: DecodeMode,
    ) -> Result<Vec<usize>> {
        if prefix.is_empty() {
            return Err(Error::Contract("generate needs a non-empty prefix".into()));
        }
        let mut rng = match mode {
            DecodeMode::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeMode::Greedy => None,
        };
        let mut seq = Vec::with_capacity(prefix.len() + max_new + 1);
        seq.push(BOS);
        seq.extend_from_slice(prefix);
        for _ in 0..max_new {
            if seq.len() >= self.config.ctx_len {
                break;
            }
            let lp = self.last_row_logprobs(&[&seq])?.pop().unwrap_or_default();
            let next = match (mode, rng.as_mut()) {
                (DecodeMode::TopK { k, .. }, Some(rng)) => {
                    let top = top_k(&lp, k.max(1));
                    let weights: Vec<f64> = top.iter().map(|&(_, l)| l.exp()).collect();
                    let dist = WeightedIndex::new(&weights)
                        .map_err(|e| Error::Contract(format!("top-k sampling: {e}")))?;
                    top[dist.sample(rng)].0
                }
                _ => argmax(&lp),
            };
            if next == EOS {
                break;
            }
            seq.push(next);
        }
        Ok(seq.split_off(1))
    }

    /// Greedy decoding for many prompts at once; same result as calling
    /// [`Self::generate`] on each.
    pub fn generate_greedy_batch(
        &self,
        prefixes: &[Vec<usize>],
        max_new: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let mut seqs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| {
                let mut s = vec![BOS];
                s.extend_from_slice(p);
                s
            })
            .collect();
        if prefixes.iter().any(Vec::is_empty) {
            return Err(Error::Contract("generate needs a non-empty prefix".into()));
        }
        let mut live: Vec<usize> = (0..seqs.len()).collect();
        for _ in 0..max_new {
            live.retain(|&i| seqs[i].len() < self.config.ctx_len);
            if live.is_empty() {
                break;
            }
            let refs: Vec<&[usize]> = live.iter().map(|&i| seqs[i].as_slice()).collect();
            let rows = self.last_row_logprobs(&refs)?;
            let mut still = Vec::with_capacity(live.len());
            for (&i, lp) in live.iter().zip(rows) {
                let next = argmax(&lp);
                if next != EOS {
                    seqs[i].push(next);
                    still.push(i);
                }
            }
            live = still;
        }
        Ok(seqs.into_iter().map(|mut s| s.split_off(1)).collect())
    }

    /// `θ_base + scale · (θ_other − θ_base)` per tensor.
    pub fn param_axpy(&self, other: &Self, scale: f64) -> Result<Self> {
        if self.config != other.config {
            return Err(Error::Incompatible(format!(
                "configs differ: {:?} vs {:?}",
                self.config, other.config
            )));
        }
        let mut out = self.clone();
        out.zero_grad();
        if scale == 0.0 {
            return Ok(out);
        }
        for (dst, o) in out.params.iter_mut().zip(&other.params) {
            for (d, &ov) in dst.data_mut().iter_mut().zip(o.data()) {
                let b = d.to_f64();
                *d = T::from_f64(b + scale * (ov.to_f64() - b));
            }
        }
        Ok(out)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// The `k` largest entries as `(index, value)`, ties broken by index.
pub(crate) fn top_k(xs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i, xs[i])).collect()
}
