//! Edit-quality metrics: efficacy, generalization and specificity, each as
//! accuracy (the expected object is the top-1 token) and success (it beats
//! the competing object), plus their harmonic means and the collapse probe.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factworld::EditRequest;
use crate::toylm::loss::softmax;
use crate::toylm::{is_strict_argmax, ToyLm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Edit,
    Paraphrase,
    Neighbor,
}

/// Per-request outcome. For kinds with several prompts the values are means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestFlags {
    pub id: usize,
    pub accuracy: f64,
    pub success: f64,
    /// Every prompt of this request succeeded.
    pub all_success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub kind: PromptKind,
    pub accuracy: f64,
    pub success: f64,
    pub per_request: Vec<RequestFlags>,
}

/// Next-token distributions at the final position of each prompt, packed.
pub fn final_token_probs(model: &ToyLm, prompts: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    for p in prompts {
        model.check_tokens(p)?;
    }
    let chunks: Vec<Vec<Vec<f64>>> = prompts
        .par_chunks(64)
        .map(|chunk| {
            let cache = model.run(chunk, &[]);
            cache
                .segments
                .iter()
                .map(|seg| softmax(cache.logits.column(seg.start + seg.len - 1).as_slice()))
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// One scored prompt: the token that should win and the one it must beat.
struct Probe {
    request: usize,
    tokens: Vec<usize>,
    expected: usize,
    rival: usize,
}

fn probes_for(requests: &[EditRequest], kind: PromptKind) -> Result<Vec<Probe>> {
    let mut out = Vec::new();
    for (i, r) in requests.iter().enumerate() {
        match kind {
            PromptKind::Edit => out.push(Probe {
                request: i,
                tokens: r.edit_prompt(&[]).tokens,
                expected: r.new_object,
                rival: r.triple.object,
            }),
            PromptKind::Paraphrase => {
                if r.paraphrase_templates.is_empty() {
                    return Err(Error::input(format!("request {} has no paraphrase templates", r.id)));
                }
                for p in r.paraphrase_prompts() {
                    out.push(Probe {
                        request: i,
                        tokens: p.tokens,
                        expected: r.new_object,
                        rival: r.triple.object,
                    });
                }
            }
            PromptKind::Neighbor => {
                if r.eval_neighbors.is_empty() {
                    return Err(Error::input(format!("request {} has no evaluation neighbors", r.id)));
                }
                for nb in &r.eval_neighbors {
                    out.push(Probe {
                        request: i,
                        tokens: nb.render(&[]).tokens,
                        expected: nb.object,
                        rival: r.new_object,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Accuracy and success over `requests` for one prompt kind. Exact ties fail.
pub fn edit_success_metrics(model: &ToyLm, requests: &[EditRequest], kind: PromptKind) -> Result<KindMetrics> {
    if requests.is_empty() {
        return Err(Error::input("no requests to evaluate"));
    }
    let probes = probes_for(requests, kind)?;
    let seqs: Vec<&[usize]> = probes.iter().map(|p| p.tokens.as_slice()).collect();
    let probs = final_token_probs(model, &seqs)?;
    Ok(aggregate(requests, kind, &probes, &probs))
}

fn aggregate(requests: &[EditRequest], kind: PromptKind, probes: &[Probe], probs: &[Vec<f64>]) -> KindMetrics {
    let mut acc = vec![(0.0, 0.0, 0usize, true); requests.len()];
    for (p, pr) in probes.iter().zip(probs) {
        let a = &mut acc[p.request];
        let hit = is_strict_argmax(pr, p.expected);
        let win = pr[p.expected] > pr[p.rival];
        a.0 += hit as u8 as f64;
        a.1 += win as u8 as f64;
        a.2 += 1;
        a.3 &= win;
    }
    let per_request: Vec<RequestFlags> = requests
        .iter()
        .zip(&acc)
        .map(|(r, &(h, w, n, all))| RequestFlags {
            id: r.id,
            accuracy: h / n as f64,
            success: w / n as f64,
            all_success: all,
        })
        .collect();
    let m = per_request.len() as f64;
    KindMetrics {
        kind,
        accuracy: per_request.iter().map(|f| f.accuracy).sum::<f64>() / m,
        success: per_request.iter().map(|f| f.success).sum::<f64>() / m,
        per_request,
    }
}

/// `3 / (1/a + 1/b + 1/c)`, zero when any argument is zero.
pub fn harmonic_score(eff: f64, gen: f64, spec: f64) -> Result<f64> {
    for v in [eff, gen, spec] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::input(format!("metric {v} outside [0, 1]")));
        }
    }
    if eff == 0.0 || gen == 0.0 || spec == 0.0 {
        return Ok(0.0);
    }
    Ok(3.0 / (1.0 / eff + 1.0 / gen + 1.0 / spec))
}

/// Requests whose edit prompt still fails, and requests with at least one
/// neighbor that now prefers the new object.
pub fn underedit_overedit(efficacy: &KindMetrics, specificity: &KindMetrics) -> (Vec<usize>, Vec<usize>) {
    let under = efficacy
        .per_request
        .iter()
        .filter(|f| !f.all_success)
        .map(|f| f.id)
        .collect();
    let over = specificity
        .per_request
        .iter()
        .filter(|f| !f.all_success)
        .map(|f| f.id)
        .collect();
    (under, over)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub efficacy_acc: f64,
    pub efficacy_succ: f64,
    pub generalization_acc: f64,
    pub generalization_succ: f64,
    pub specificity_acc: f64,
    pub specificity_succ: f64,
    pub score_acc: f64,
    pub score_succ: f64,
    /// Perplexity of the held-out probe utterances.
    pub collapse_ppl: f64,
    pub underedit_ids: Vec<usize>,
    pub overedit_ids: Vec<usize>,
}

pub fn evaluate(model: &ToyLm, requests: &[EditRequest], probes: &[Vec<usize>]) -> Result<MetricsReport> {
    let eff = edit_success_metrics(model, requests, PromptKind::Edit)?;
    let gen = edit_success_metrics(model, requests, PromptKind::Paraphrase)?;
    let spec = edit_success_metrics(model, requests, PromptKind::Neighbor)?;
    let (underedit_ids, overedit_ids) = underedit_overedit(&eff, &spec);
    Ok(MetricsReport {
        score_acc: harmonic_score(eff.accuracy, gen.accuracy, spec.accuracy)?,
        score_succ: harmonic_score(eff.success, gen.success, spec.success)?,
        efficacy_acc: eff.accuracy,
        efficacy_succ: eff.success,
        generalization_acc: gen.accuracy,
        generalization_succ: gen.success,
        specificity_acc: spec.accuracy,
        specificity_succ: spec.success,
        collapse_ppl: model.sequence_perplexity(probes)?,
        underedit_ids,
        overedit_ids,
    })
}

pub const CSV_HEADER: [&str; 13] = [
    "k", "eff_acc", "eff_succ", "gen_acc", "gen_succ", "spec_acc", "spec_succ", "score_acc", "score_succ", "me_ppl",
    "p_bar", "p_hat", "gap",
];

/// One report line. Baseline rows (`k = 0`) carry no perplexity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub k: usize,
    pub metrics: MetricsReport,
    pub p_bar: Option<f64>,
    pub p_hat: Option<f64>,
    pub gap: Option<f64>,
}

pub fn write_report_csv(out: impl Write, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.k.to_string(),
            m.efficacy_acc.to_string(),
            m.efficacy_succ.to_string(),
            m.generalization_acc.to_string(),
            m.generalization_succ.to_string(),
            m.specificity_acc.to_string(),
            m.specificity_succ.to_string(),
            m.score_acc.to_string(),
            m.score_succ.to_string(),
            m.collapse_ppl.to_string(),
            opt(r.p_bar),
            opt(r.p_hat),
            opt(r.gap),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
