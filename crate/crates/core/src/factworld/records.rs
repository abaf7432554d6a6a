//! JSONL request records shaped like CounterFact samples.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{render_prompt, EditRequest, FactTriple, NeighborPrompt, Template, Vocab, World};
use crate::error::{Error, Result};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub prompt: Vec<String>,
    pub ground_truth: Vec<String>,
    pub subject: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Locality {
    pub neighborhood: Neighborhood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSample {
    pub subject: String,
    /// Template text with `{}` in the subject slot.
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub format_version: u32,
    pub id: usize,
    pub relation: usize,
    pub prompt: String,
    pub subject: String,
    pub ground_truth: String,
    pub target_new: String,
    pub paraphrase_prompts: Vec<String>,
    pub locality: Locality,
    pub neighborhood_samples: Vec<NeighborSample>,
}

fn prompt_text(vocab: &Vocab, t: &Template, subject: &[usize]) -> String {
    let r = render_prompt(t, subject, &[]).expect("nonempty subject");
    vocab.decode(&r.tokens[1..])
}

/// Recovers the template by locating the subject inside a prompt.
fn split_prompt(vocab: &Vocab, prompt: &str, subject: &[usize]) -> Result<Template> {
    let toks = vocab.encode(prompt)?;
    let n = subject.len();
    let at = (0..=toks.len().saturating_sub(n))
        .find(|&i| toks.len() >= n && toks[i..i + n] == *subject)
        .ok_or_else(|| Error::Data(format!("subject not found in prompt {prompt:?}")))?;
    Ok(Template {
        pre: toks[..at].to_vec(),
        post: toks[at + n..].to_vec(),
    })
}

impl RequestRecord {
    pub fn from_request(req: &EditRequest, vocab: &Vocab) -> Self {
        let s = &req.triple.subject;
        let ev = &req.eval_neighbors;
        RequestRecord {
            format_version: RECORD_VERSION,
            id: req.id,
            relation: req.triple.relation,
            prompt: prompt_text(vocab, &req.edit_template, s),
            subject: vocab.decode(s),
            ground_truth: vocab.word(req.triple.object).to_string(),
            target_new: vocab.word(req.new_object).to_string(),
            paraphrase_prompts: req
                .paraphrase_templates
                .iter()
                .map(|t| prompt_text(vocab, t, s))
                .collect(),
            locality: Locality {
                neighborhood: Neighborhood {
                    prompt: ev.iter().map(|n| prompt_text(vocab, &n.template, &n.subject)).collect(),
                    ground_truth: ev.iter().map(|n| vocab.word(n.object).to_string()).collect(),
                    subject: ev.iter().map(|n| vocab.decode(&n.subject)).collect(),
                },
            },
            neighborhood_samples: req
                .assist_neighbor
                .iter()
                .map(|a| NeighborSample {
                    subject: vocab.decode(&a.subject),
                    prompt: a.template.to_text(vocab),
                })
                .collect(),
        }
    }

    pub fn to_request(&self, vocab: &Vocab) -> Result<EditRequest> {
        if self.format_version != RECORD_VERSION {
            return Err(Error::Format(format!(
                "unsupported record version {}",
                self.format_version
            )));
        }
        let subject = vocab.encode(&self.subject)?;
        let object = vocab.id(&self.ground_truth)?;
        let nb = &self.locality.neighborhood;
        if nb.prompt.len() != nb.ground_truth.len() || nb.prompt.len() != nb.subject.len() {
            return Err(Error::Data(format!(
                "record {}: neighborhood lists have different lengths",
                self.id
            )));
        }
        let eval_neighbors = nb
            .prompt
            .iter()
            .zip(&nb.ground_truth)
            .zip(&nb.subject)
            .map(|((p, o), s)| {
                let subject = vocab.encode(s)?;
                Ok(NeighborPrompt {
                    template: split_prompt(vocab, p, &subject)?,
                    subject,
                    object: vocab.id(o)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let assist_neighbor = match self.neighborhood_samples.first() {
            Some(a) => Some(NeighborPrompt {
                subject: vocab.encode(&a.subject)?,
                template: Template::from_text(&a.prompt, vocab)?,
                object,
            }),
            None => None,
        };
        Ok(EditRequest {
            id: self.id,
            edit_template: split_prompt(vocab, &self.prompt, &subject)?,
            paraphrase_templates: self
                .paraphrase_prompts
                .iter()
                .map(|p| split_prompt(vocab, p, &subject))
                .collect::<Result<_>>()?,
            triple: FactTriple {
                subject,
                relation: self.relation,
                object,
            },
            new_object: vocab.id(&self.target_new)?,
            assist_neighbor,
            eval_neighbors,
        })
    }
}

pub fn write_batch_jsonl(out: &mut impl Write, requests: &[EditRequest], world: &World) -> Result<()> {
    for r in requests {
        let rec = RequestRecord::from_request(r, &world.vocab);
        let line = serde_json::to_string(&rec)?;
        writeln!(out, "{line}").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn read_batch_jsonl(input: impl BufRead, world: &World) -> Result<Vec<EditRequest>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RequestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        out.push(rec.to_request(&world.vocab)?);
    }
    Ok(out)
}
