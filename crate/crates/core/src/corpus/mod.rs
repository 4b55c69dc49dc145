//! Deterministic synthetic biography corpus with forget/retain splits,
//! paraphrased and perturbed answers, and utility probe sets.

mod pools;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lm::{Example, Tokenizer};
use crate::{Error, Result};
use pools::{fill, AttributeFrame, ATTRIBUTES, WORLD_FACT};

pub use pools::IDK_TEMPLATES;

/// Number of extra persons seen in training but outside `s`.
pub const HELD_OUT_PERSONS: usize = 5;
pub const PERTURBED_PER_ITEM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
    HeldOut,
    World,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub person_id: usize,
    pub name: String,
    pub attributes: BTreeMap<String, String>,
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: usize,
    /// `None` for world facts.
    pub owner: Option<usize>,
    pub split: Split,
    pub attribute: String,
    pub value: String,
    pub question: String,
    pub answer: String,
    /// Answer words preceding the value, used as the fill-in-blank prefix.
    pub answer_head: String,
    pub paraphrased_answer: String,
    /// Same frame as the paraphrase, with the value swapped for another pool value.
    pub perturbed_answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_persons: usize,
    pub qa_per_person: usize,
    pub forget_pct: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_persons: 40,
            qa_per_person: 10,
            forget_pct: 10,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_persons < 10 {
            return Err(Error::Config(format!(
                "n_persons must be >= 10, got {}",
                self.n_persons
            )));
        }
        if self.qa_per_person < 4 {
            return Err(Error::Config(format!(
                "qa_per_person must be >= 4, got {}",
                self.qa_per_person
            )));
        }
        if ![1, 5, 10].contains(&self.forget_pct) {
            return Err(Error::Config(format!(
                "forget_pct must be 1, 5 or 10, got {}",
                self.forget_pct
            )));
        }
        if self.qa_per_person > ATTRIBUTES.len() {
            return Err(Error::Capacity(format!(
                "qa_per_person {} exceeds the {} attribute kinds",
                self.qa_per_person,
                ATTRIBUTES.len()
            )));
        }
        let pool = pools::name_pool().len();
        if self.n_persons + HELD_OUT_PERSONS > pool {
            return Err(Error::Capacity(format!(
                "{} persons plus {HELD_OUT_PERSONS} held-out exceed the name pool of {pool}",
                self.n_persons
            )));
        }
        Ok(())
    }

    /// Persons whose items form the forget set: the given percentage, at least one.
    pub fn n_forget_persons(&self) -> usize {
        ((self.n_persons as f64 * self.forget_pct as f64 / 100.0).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    /// Everything the original model is fitted on: `s`, held-out persons and world facts.
    Pretrain,
    /// `Pretrain` minus the forget set; what the retrained reference model sees.
    Reference,
    Forget,
    Retain,
    /// Forget questions paired with cycled refusal templates.
    Idk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusBundle {
    pub config: CorpusConfig,
    pub profiles: Vec<Profile>,
    /// `s`: forget and retain items of the main persons.
    pub items: Vec<QaItem>,
    pub held_out_authors: Vec<QaItem>,
    pub world_facts: Vec<QaItem>,
    pub idk_templates: Vec<String>,
}

impl CorpusBundle {
    pub fn generate(config: CorpusConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = pools::name_pool();
        names.shuffle(&mut rng);
        let n_forget = config.n_forget_persons();
        let total = config.n_persons + HELD_OUT_PERSONS;
        let frames = &ATTRIBUTES[..config.qa_per_person];

        let mut profiles = Vec::with_capacity(total);
        let mut items = Vec::new();
        let mut held_out_authors = Vec::new();
        for (pid, name) in names.into_iter().take(total).enumerate() {
            let held_out = pid >= config.n_persons;
            let split = if held_out {
                Split::HeldOut
            } else if pid >= config.n_persons - n_forget {
                Split::Forget
            } else {
                Split::Retain
            };
            let mut attributes = BTreeMap::new();
            for frame in frames {
                let value = *frame.values.choose(&mut rng).expect("non-empty pool");
                attributes.insert(frame.key.to_string(), value.to_string());
                let dst = if held_out {
                    &mut held_out_authors
                } else {
                    &mut items
                };
                let others: Vec<&str> = frame
                    .values
                    .iter()
                    .copied()
                    .filter(|v| *v != value)
                    .collect();
                dst.push(make_item(
                    frame,
                    &name,
                    value,
                    &others,
                    Some(pid),
                    split,
                    &mut rng,
                ));
            }
            profiles.push(Profile {
                person_id: pid,
                name,
                attributes,
                held_out,
            });
        }

        let lands = pools::lands();
        let capitals = pools::capitals();
        let mut world_facts = Vec::with_capacity(pools::N_WORLD_FACTS);
        for (land, city) in lands.iter().zip(&capitals).take(pools::N_WORLD_FACTS) {
            let others: Vec<&str> = capitals
                .iter()
                .map(String::as_str)
                .filter(|c| c != city)
                .collect();
            world_facts.push(make_item(
                &WORLD_FACT,
                land,
                city,
                &others,
                None,
                Split::World,
                &mut rng,
            ));
        }

        let mut bundle = Self {
            config,
            profiles,
            items,
            held_out_authors,
            world_facts,
            idk_templates: IDK_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        };
        let mut id = 0;
        for item in bundle
            .items
            .iter_mut()
            .chain(&mut bundle.held_out_authors)
            .chain(&mut bundle.world_facts)
        {
            item.id = id;
            id += 1;
        }
        Ok(bundle)
    }

    pub fn forget(&self) -> impl Iterator<Item = &QaItem> {
        self.items.iter().filter(|i| i.split == Split::Forget)
    }

    pub fn retain(&self) -> impl Iterator<Item = &QaItem> {
        self.items.iter().filter(|i| i.split == Split::Retain)
    }

    pub fn forget_persons(&self) -> Vec<&Profile> {
        let n = self.config.n_persons;
        let k = self.config.n_forget_persons();
        self.profiles[n - k..n].iter().collect()
    }

    /// Every QA item the corpus knows about.
    pub fn all_items(&self) -> impl Iterator<Item = &QaItem> {
        self.items
            .iter()
            .chain(&self.held_out_authors)
            .chain(&self.world_facts)
    }

    /// Every string the tokenizer has to cover.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for item in self.all_items() {
            out.push(item.question.as_str());
            out.push(item.answer.as_str());
            out.push(item.paraphrased_answer.as_str());
            out.extend(item.perturbed_answers.iter().map(String::as_str));
        }
        out.extend(self.idk_templates.iter().map(String::as_str));
        out
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_texts(self.texts())
    }

    /// `(question, answer)` token pairs for training; the loss covers the answer only.
    pub fn render_training_sequences(&self, tok: &Tokenizer, which: Which) -> Vec<Example> {
        let pair = |q: &str, a: &str| Example::new(tok.tokenize(q), tok.tokenize(a));
        let items: Vec<&QaItem> = match which {
            Which::Pretrain => self.all_items().collect(),
            Which::Reference => self
                .all_items()
                .filter(|i| i.split != Split::Forget)
                .collect(),
            Which::Forget | Which::Idk => self.forget().collect(),
            Which::Retain => self.retain().collect(),
        };
        if which == Which::Idk {
            return items
                .iter()
                .enumerate()
                .map(|(k, i)| {
                    pair(
                        &i.question,
                        &self.idk_templates[k % self.idk_templates.len()],
                    )
                })
                .collect();
        }
        items.iter().map(|i| pair(&i.question, &i.answer)).collect()
    }

    /// Canonical JSON: object keys sorted, so equal bundles give equal bytes.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("bundle is plain data");
        serde_json::to_string_pretty(&value).expect("bundle is plain data")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Contract(format!("corpus json: {e}")))
    }
}

fn make_item(
    frame: &AttributeFrame,
    name: &str,
    value: &str,
    others: &[&str],
    owner: Option<usize>,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> QaItem {
    let wrong: Vec<&str> = others
        .choose_multiple(rng, PERTURBED_PER_ITEM)
        .copied()
        .collect();
    let answer = fill(frame.answer, name, value);
    let head = fill(
        frame.answer.split("{v}").next().unwrap_or_default(),
        name,
        "",
    );
    QaItem {
        id: 0,
        owner,
        split,
        attribute: frame.key.to_string(),
        value: value.to_string(),
        question: fill(frame.question, name, value),
        answer,
        answer_head: head.trim_end().to_string(),
        paraphrased_answer: fill(frame.paraphrase, name, value),
        perturbed_answers: wrong
            .iter()
            .map(|w| fill(frame.paraphrase, name, w))
            .collect(),
    }
}

/// Recovers the value slot of `text` when it is an answer or paraphrase
/// of `attribute` about `name`.
pub fn extract_attribute(attribute: &str, name: &str, text: &str) -> Option<String> {
    let frame = if attribute == WORLD_FACT.key {
        &WORLD_FACT
    } else {
        ATTRIBUTES.iter().find(|f| f.key == attribute)?
    };
    let words: Vec<&str> = text.split(' ').collect();
    [frame.answer, frame.paraphrase]
        .iter()
        .find_map(|template| {
            let filled = template.replace("{n}", name);
            let slots: Vec<&str> = filled.split(' ').collect();
            if slots.len() != words.len() {
                return None;
            }
            let mut value = None;
            for (s, w) in slots.iter().zip(&words) {
                if *s == "{v}" {
                    value = Some(w.to_string());
                } else if s != w {
                    return None;
                }
            }
            value
        })
}

/// The subject an item's frames are filled with: the person's name or the land.
pub fn item_subject<'a>(bundle: &'a CorpusBundle, item: &'a QaItem) -> &'a str {
    match item.owner {
        Some(pid) => &bundle.profiles[pid].name,
        None => item
            .question
            .trim_start_matches("what is the capital of ")
            .trim_end_matches(" ?"),
    }
}
