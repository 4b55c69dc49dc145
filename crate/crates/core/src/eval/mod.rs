//! Forget quality and model utility: ROUGE-L, length-normalised answer
//! probability, truth ratio, the two-sample KS test, the harmonic-mean
//! utility aggregate and the fill-in-blank probe.

mod ks;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, QaItem};
use crate::lm::{Example, LanguageModel, Packed, Tokenizer};
use crate::{Error, Result};

pub use ks::{
    asymptotic_p_value, exact_p_value, kolmogorov_tail, ks_two_sample, KsResult, EXACT_LIMIT,
};

/// Significance bar for forget quality.
pub const FORGET_QUALITY_THRESHOLD: f64 = 0.05;
/// Token budget for greedy answers scored with ROUGE-L.
pub const MAX_NEW_TOKENS: usize = 32;

/// ROUGE-L F1 over whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-token log-probability of each answer given its question.
pub fn mean_answer_logprobs(
    model: &LanguageModel,
    tok: &Tokenizer,
    pairs: &[(&str, &str)],
) -> Result<Vec<f64>> {
    let examples: Vec<Example> = pairs
        .iter()
        .map(|(q, a)| Example::new(tok.tokenize(q), tok.tokenize(a)))
        .collect();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let packed = Packed::from_examples(chunk, false, model.config().ctx_len)?;
        let lp = model.label_logprobs(&packed)?;
        let mut at = 0;
        for ex in chunk {
            let n = ex.target.len();
            out.push(lp[at..at + n].iter().sum::<f64>() / n as f64);
            at += n;
        }
    }
    Ok(out)
}

/// `P(a|q)^{1/|a|}`, the geometric mean of the answer-token probabilities.
pub fn norm_answer_prob(
    model: &LanguageModel,
    tok: &Tokenizer,
    question: &str,
    answer: &str,
) -> Result<f64> {
    if answer.split_whitespace().next().is_none() {
        return Err(Error::Contract("answer must be non-empty".into()));
    }
    Ok(mean_answer_logprobs(model, tok, &[(question, answer)])?[0].exp())
}

/// Truth ratio from length-normalised probabilities: the mean over perturbed
/// answers divided by the paraphrased answer.
pub fn truth_ratio_from_probs(paraphrased: f64, perturbed: &[f64]) -> f64 {
    perturbed.iter().sum::<f64>() / perturbed.len() as f64 / paraphrased
}

/// Truth ratio of every item, in order.
pub fn truth_ratios(model: &LanguageModel, tok: &Tokenizer, items: &[&QaItem]) -> Result<Vec<f64>> {
    let mut pairs = Vec::new();
    for item in items {
        if item.perturbed_answers.is_empty() {
            return Err(Error::Contract(format!(
                "item {} has no perturbed answers",
                item.id
            )));
        }
        pairs.push((item.question.as_str(), item.paraphrased_answer.as_str()));
        pairs.extend(
            item.perturbed_answers
                .iter()
                .map(|p| (item.question.as_str(), p.as_str())),
        );
    }
    let lp = mean_answer_logprobs(model, tok, &pairs)?;
    let mut out = Vec::with_capacity(items.len());
    let mut at = 0;
    for item in items {
        let k = item.perturbed_answers.len();
        let probs: Vec<f64> = lp[at..at + 1 + k]
            .iter()
            .map(|l| l.max(-700.0).exp())
            .collect();
        out.push(truth_ratio_from_probs(probs[0], &probs[1..]));
        at += 1 + k;
    }
    Ok(out)
}

pub fn truth_ratio(model: &LanguageModel, tok: &Tokenizer, item: &QaItem) -> Result<f64> {
    Ok(truth_ratios(model, tok, &[item])?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgetQuality {
    pub p_value: f64,
    pub ks_statistic: f64,
    pub passed: bool,
}

impl ForgetQuality {
    pub fn from_samples(unlearned: &[f64], reference: &[f64]) -> Result<Self> {
        let ks = ks_two_sample(unlearned, reference)?;
        Ok(Self {
            p_value: ks.p_value,
            ks_statistic: ks.statistic,
            passed: ks.p_value > FORGET_QUALITY_THRESHOLD,
        })
    }
}

/// KS test between the truth ratios of the two models on the forget set.
pub fn forget_quality(
    unlearned: &LanguageModel,
    retrained: &LanguageModel,
    bundle: &CorpusBundle,
    tok: &Tokenizer,
) -> Result<ForgetQuality> {
    let items: Vec<&QaItem> = bundle.forget().collect();
    let a = truth_ratios(unlearned, tok, &items)?;
    let b = truth_ratios(retrained, tok, &items)?;
    ForgetQuality::from_samples(&a, &b)
}

/// Harmonic mean, defined as 0 when any value is not positive.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| !(v > 0.0)) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Scores of one utility dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SetScores {
    pub rouge_l: f64,
    pub probability: f64,
    /// `max(0, 1 − mean truth ratio)`.
    pub truth_ratio: f64,
}

/// Mean ROUGE-L of greedy answers, mean normalised golden-answer
/// probability, and truth-ratio utility over `items`.
pub fn set_scores(model: &LanguageModel, tok: &Tokenizer, items: &[&QaItem]) -> Result<SetScores> {
    if items.is_empty() {
        return Err(Error::Contract("cannot score an empty item set".into()));
    }
    let n = items.len() as f64;
    let answers = greedy_answers(model, tok, items)?;
    let rouge = answers
        .iter()
        .zip(items)
        .map(|(a, i)| rouge_l(a, &i.answer))
        .sum::<f64>()
        / n;
    let pairs: Vec<(&str, &str)> = items
        .iter()
        .map(|i| (i.question.as_str(), i.answer.as_str()))
        .collect();
    let prob = mean_answer_logprobs(model, tok, &pairs)?
        .iter()
        .map(|l| l.exp())
        .sum::<f64>()
        / n;
    let mean_r = truth_ratios(model, tok, items)?.iter().sum::<f64>() / n;
    Ok(SetScores {
        rouge_l: rouge,
        probability: prob,
        truth_ratio: (1.0 - mean_r).clamp(0.0, 1.0),
    })
}

/// Greedy continuations of each question, detokenized, without the question.
pub fn greedy_answers(
    model: &LanguageModel,
    tok: &Tokenizer,
    items: &[&QaItem],
) -> Result<Vec<String>> {
    let prompts: Vec<Vec<usize>> = items.iter().map(|i| tok.tokenize(&i.question)).collect();
    let mut out = Vec::with_capacity(items.len());
    for chunk in prompts.chunks(64) {
        for (prompt, full) in chunk
            .iter()
            .zip(model.generate_greedy_batch(chunk, MAX_NEW_TOKENS)?)
        {
            out.push(tok.detokenize(&full[prompt.len()..]));
        }
    }
    Ok(out)
}

/// The nine utility components: three scores on each of the retain set,
/// the held-out persons and the world facts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Utility {
    pub retain: SetScores,
    pub held_out_authors: SetScores,
    pub world_facts: SetScores,
    pub model_utility: f64,
}

impl Utility {
    pub fn from_sets(
        retain: SetScores,
        held_out_authors: SetScores,
        world_facts: SetScores,
    ) -> Self {
        let mut u = Self {
            retain,
            held_out_authors,
            world_facts,
            model_utility: 0.0,
        };
        u.model_utility = harmonic_mean(&u.components());
        u
    }

    /// `(rouge_l, probability, truth_ratio)` for retain, held-out, world, in that order.
    pub fn components(&self) -> [f64; 9] {
        let s = [self.retain, self.held_out_authors, self.world_facts];
        [
            s[0].rouge_l,
            s[0].probability,
            s[0].truth_ratio,
            s[1].rouge_l,
            s[1].probability,
            s[1].truth_ratio,
            s[2].rouge_l,
            s[2].probability,
            s[2].truth_ratio,
        ]
    }

    pub const COMPONENT_NAMES: [&'static str; 9] = [
        "retain_rouge_l",
        "retain_prob",
        "retain_truth_ratio",
        "held_out_rouge_l",
        "held_out_prob",
        "held_out_truth_ratio",
        "world_rouge_l",
        "world_prob",
        "world_truth_ratio",
    ];
}

/// Model utility over the three datasets. `retain_limit` caps how many
/// retain items are scored (the first ones in corpus order); `None` scores all.
pub fn model_utility(
    model: &LanguageModel,
    bundle: &CorpusBundle,
    tok: &Tokenizer,
    retain_limit: Option<usize>,
) -> Result<Utility> {
    let retain: Vec<&QaItem> = bundle
        .retain()
        .take(retain_limit.unwrap_or(usize::MAX))
        .collect();
    let held: Vec<&QaItem> = bundle.held_out_authors.iter().collect();
    let world: Vec<&QaItem> = bundle.world_facts.iter().collect();
    Ok(Utility::from_sets(
        set_scores(model, tok, &retain)?,
        set_scores(model, tok, &held)?,
        set_scores(model, tok, &world)?,
    ))
}

/// Everything measured for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forget_quality: f64,
    pub forget_quality_passed: bool,
    pub ks_statistic: f64,
    pub model_utility: f64,
    pub retain_rouge_l: f64,
    pub retain_prob: f64,
    pub retain_truth_ratio: f64,
    pub held_out_rouge_l: f64,
    pub held_out_prob: f64,
    pub held_out_truth_ratio: f64,
    pub world_rouge_l: f64,
    pub world_prob: f64,
    pub world_truth_ratio: f64,
    pub forget_rouge_l: f64,
    pub forget_prob: f64,
}

impl EvalReport {
    pub fn new(fq: ForgetQuality, utility: &Utility, forget: SetScores) -> Self {
        let c = utility.components();
        Self {
            forget_quality: fq.p_value,
            forget_quality_passed: fq.passed,
            ks_statistic: fq.ks_statistic,
            model_utility: utility.model_utility,
            retain_rouge_l: c[0],
            retain_prob: c[1],
            retain_truth_ratio: c[2],
            held_out_rouge_l: c[3],
            held_out_prob: c[4],
            held_out_truth_ratio: c[5],
            world_rouge_l: c[6],
            world_prob: c[7],
            world_truth_ratio: c[8],
            forget_rouge_l: forget.rouge_l,
            forget_prob: forget.probability,
        }
    }

    pub fn components(&self) -> [f64; 9] {
        [
            self.retain_rouge_l,
            self.retain_prob,
            self.retain_truth_ratio,
            self.held_out_rouge_l,
            self.held_out_prob,
            self.held_out_truth_ratio,
            self.world_rouge_l,
            self.world_prob,
            self.world_truth_ratio,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

/// Full evaluation of `model` against precomputed reference truth ratios on
/// the forget set.
pub fn evaluate(
    model: &LanguageModel,
    reference_ratios: &[f64],
    bundle: &CorpusBundle,
    tok: &Tokenizer,
    retain_limit: Option<usize>,
) -> Result<EvalReport> {
    let forget: Vec<&QaItem> = bundle.forget().collect();
    let ratios = truth_ratios(model, tok, &forget)?;
    let fq = ForgetQuality::from_samples(&ratios, reference_ratios)?;
    let utility = model_utility(model, bundle, tok, retain_limit)?;
    let forget_scores = forget_scores(model, tok, &forget)?;
    Ok(EvalReport::new(fq, &utility, forget_scores))
}

/// ROUGE-L and probability on the forget set (truth-ratio field left at 0).
pub fn forget_scores(
    model: &LanguageModel,
    tok: &Tokenizer,
    forget: &[&QaItem],
) -> Result<SetScores> {
    let n = forget.len() as f64;
    let answers = greedy_answers(model, tok, forget)?;
    let rouge = answers
        .iter()
        .zip(forget)
        .map(|(a, i)| rouge_l(a, &i.answer))
        .sum::<f64>()
        / n;
    let pairs: Vec<(&str, &str)> = forget
        .iter()
        .map(|i| (i.question.as_str(), i.answer.as_str()))
        .collect();
    let prob = mean_answer_logprobs(model, tok, &pairs)?
        .iter()
        .map(|l| l.exp())
        .sum::<f64>()
        / n;
    Ok(SetScores {
        rouge_l: rouge,
        probability: prob,
        truth_ratio: 0.0,
    })
}

/// Next-token distribution after `prefix`, top `k` by probability with ties
/// broken by ascending token id.
pub fn fill_blank_topk(
    model: &LanguageModel,
    tok: &Tokenizer,
    prefix: &str,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let v = model.config().vocab_size;
    if k > v {
        return Err(Error::Contract(format!(
            "k = {k} exceeds vocabulary size {v}"
        )));
    }
    let lp = model.next_token_logprobs(&tok.tokenize(prefix))?;
    let mut idx: Vec<usize> = (0..v).collect();
    idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    Ok(idx.into_iter().take(k).map(|i| (i, lp[i].exp())).collect())
}

/// Fill-in-blank prefix for an item: the question followed by the answer up
/// to the value slot.
pub fn fill_blank_prefix(item: &QaItem) -> String {
    if item.answer_head.is_empty() {
        item.question.clone()
    } else {
        format!("{} {}", item.question, item.answer_head)
    }
}

/// Fraction of items whose golden value token is among the top `k`
/// fill-in-blank predictions.
pub fn leakage_rate(
    model: &LanguageModel,
    tok: &Tokenizer,
    items: &[&QaItem],
    k: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for item in items {
        let golden = tok.id(&item.value);
        let top = fill_blank_topk(model, tok, &fill_blank_prefix(item), k)?;
        if golden.is_some_and(|g| top.iter().any(|&(t, _)| t == g)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}
