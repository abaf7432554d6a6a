//! Synthetic fact world: vocabulary, relation templates, facts, edit batches.

mod batch;
mod generate;
mod records;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::ModelConfig;

pub use batch::{filter_neighbors, make_edit_batch, BatchStats, FilterReport};
pub use generate::{generate_world, WorldConfig};
pub use records::{read_batch_jsonl, write_batch_jsonl, RequestRecord, RECORD_VERSION};

pub const WORLD_VERSION: u32 = 1;
pub const BOS: &str = "<bos>";

/// Closed word-level vocabulary. Token 0 is always the BOS marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.intern(BOS);
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        if tokens.first().map(String::as_str) != Some(BOS) {
            return Err(Error::Data("vocabulary must start with the BOS token".into()));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn intern(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), i);
        i
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::input(format!("unknown token {word:?}")))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

/// Words before and after the single subject slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Template {
    pub pre: Vec<usize>,
    pub post: Vec<usize>,
}

impl Template {
    /// Text form with `{}` in the subject slot.
    pub fn to_text(&self, vocab: &Vocab) -> String {
        let mut parts = Vec::new();
        if !self.pre.is_empty() {
            parts.push(vocab.decode(&self.pre));
        }
        parts.push("{}".to_string());
        if !self.post.is_empty() {
            parts.push(vocab.decode(&self.post));
        }
        parts.join(" ")
    }

    pub fn from_text(text: &str, vocab: &Vocab) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let slots: Vec<usize> = (0..words.len()).filter(|&i| words[i] == "{}").collect();
        if slots.len() != 1 {
            return Err(Error::input(format!(
                "template {text:?} must contain exactly one subject slot"
            )));
        }
        let s = slots[0];
        let enc = |ws: &[&str]| ws.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>>>();
        Ok(Template {
            pre: enc(&words[..s])?,
            post: enc(&words[s + 1..])?,
        })
    }
}

/// A rendered prompt and the index of its final subject token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<usize>,
    pub last_subject: usize,
}

/// `[BOS] + prefix + pre + subject + post`.
pub fn render_prompt(template: &Template, subject: &[usize], prefix: &[usize]) -> Result<Rendered> {
    if subject.is_empty() {
        return Err(Error::input("empty subject"));
    }
    let mut tokens = Vec::with_capacity(1 + prefix.len() + template.pre.len() + subject.len() + template.post.len());
    tokens.push(0);
    tokens.extend_from_slice(prefix);
    tokens.extend_from_slice(&template.pre);
    tokens.extend_from_slice(subject);
    let last_subject = tokens.len() - 1;
    tokens.extend_from_slice(&template.post);
    Ok(Rendered {
        tokens,
        last_subject,
    })
}

/// Like [`render_prompt`] but checks every token against the vocabulary size.
pub fn render_checked(
    template: &Template,
    subject: &[usize],
    prefix: &[usize],
    vocab_size: usize,
) -> Result<Rendered> {
    let r = render_prompt(template, subject, prefix)?;
    if let Some(&t) = r.tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::input(format!("unknown token id {t}")));
    }
    Ok(r)
}

/// The bare subject after BOS, used as the anchor prompt for the KL term.
pub fn subject_prompt(subject: &[usize]) -> Rendered {
    let mut tokens = vec![0];
    tokens.extend_from_slice(subject);
    Rendered {
        last_subject: tokens.len() - 1,
        tokens,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub id: usize,
    pub name: String,
    pub edit_template: Template,
    pub paraphrase_templates: Vec<Template>,
    pub object_pool: Vec<usize>,
}

impl RelationSchema {
    /// Edit template first, then paraphrases.
    pub fn all_templates(&self) -> Vec<&Template> {
        std::iter::once(&self.edit_template)
            .chain(self.paraphrase_templates.iter())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: Vec<usize>,
    pub relation: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub format_version: u32,
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub schemas: Vec<RelationSchema>,
    pub facts: Vec<FactTriple>,
    /// Token ids random prefixes are drawn from.
    pub prefix_tokens: Vec<usize>,
    pub pretrain_corpus: Vec<Vec<usize>>,
    /// Held-out utterances used as the collapse probe.
    pub probe_utterances: Vec<Vec<usize>>,
    /// Longest rendered sequence the world can produce, prefix included.
    pub max_seq_len: usize,
}

impl World {
    pub fn schema(&self, relation: usize) -> &RelationSchema {
        &self.schemas[relation]
    }

    /// Fails when the model cannot represent this world's token sequences.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if config.vocab_size < self.vocab.len() {
            return Err(Error::config(format!(
                "world vocabulary has {} tokens but the model holds {}",
                self.vocab.len(),
                config.vocab_size
            )));
        }
        if config.max_seq_len < self.max_seq_len {
            return Err(Error::config(format!(
                "world sequences reach {} tokens but max_seq_len is {}",
                self.max_seq_len, config.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: World = serde_json::from_str(text)?;
        if w.format_version != WORLD_VERSION {
            return Err(Error::Format(format!(
                "unsupported world format version {}",
                w.format_version
            )));
        }
        Ok(w)
    }

    pub fn render_fact(&self, fact: &FactTriple, template: &Template) -> Rendered {
        render_prompt(template, &fact.subject, &[]).expect("facts have nonempty subjects")
    }
}

/// A neighbor prompt: subject rendered through some template of the shared relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborPrompt {
    pub subject: Vec<usize>,
    pub template: Template,
    /// The object the model should still produce.
    pub object: usize,
}

impl NeighborPrompt {
    pub fn render(&self, prefix: &[usize]) -> Rendered {
        render_prompt(&self.template, &self.subject, prefix).expect("nonempty subject")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub id: usize,
    pub triple: FactTriple,
    pub new_object: usize,
    pub edit_template: Template,
    pub paraphrase_templates: Vec<Template>,
    pub assist_neighbor: Option<NeighborPrompt>,
    pub eval_neighbors: Vec<NeighborPrompt>,
}

impl EditRequest {
    pub fn edit_prompt(&self, prefix: &[usize]) -> Rendered {
        render_prompt(&self.edit_template, &self.triple.subject, prefix).expect("nonempty subject")
    }

    pub fn paraphrase_prompts(&self) -> Vec<Rendered> {
        self.paraphrase_templates
            .iter()
            .map(|t| render_prompt(t, &self.triple.subject, &[]).expect("nonempty subject"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditBatch {
    pub requests: Vec<EditRequest>,
    pub prefix_pool: Vec<Vec<usize>>,
    pub seed: u64,
}

impl EditBatch {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}
