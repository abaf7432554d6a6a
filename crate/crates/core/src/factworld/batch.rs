use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::random_prefix;
use super::{EditBatch, EditRequest, NeighborPrompt, World};
use crate::error::{Error, Result};
use crate::toylm::{is_strict_argmax, ToyLm};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub requested: usize,
    pub selected: usize,
    /// Facts skipped because editing them would leave fewer than two neighbors.
    pub excluded: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub neighbors_checked: usize,
    pub neighbors_removed: usize,
    pub requests_dropped: Vec<usize>,
    pub requests_kept: usize,
}

/// Samples `m` edit requests whose (relation, original object) group keeps at
/// least two unedited subjects, so one neighbor can assist and one can evaluate.
pub fn make_edit_batch(
    world: &World,
    m: usize,
    n_prefixes: usize,
    seed: u64,
) -> Result<(EditBatch, BatchStats)> {
    if m == 0 {
        return Err(Error::input("batch size m must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, f) in world.facts.iter().enumerate() {
        groups.entry((f.relation, f.object)).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..world.facts.len()).collect();
    order.shuffle(&mut rng);

    let mut edited_in_group: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut selected = Vec::new();
    let mut excluded = 0;
    for &i in &order {
        if selected.len() == m {
            break;
        }
        let f = &world.facts[i];
        let key = (f.relation, f.object);
        let size = groups[&key].len();
        let edited = edited_in_group.entry(key).or_default();
        if size >= *edited + 1 + 2 {
            *edited += 1;
            selected.push(i);
        } else {
            excluded += 1;
        }
    }
    let edited: HashSet<usize> = selected.iter().copied().collect();

    let mut requests = Vec::with_capacity(selected.len());
    for (id, &i) in selected.iter().enumerate() {
        let f = &world.facts[i];
        let schema = world.schema(f.relation);
        let choices: Vec<usize> = schema
            .object_pool
            .iter()
            .copied()
            .filter(|&o| o != f.object)
            .collect();
        let new_object = choices[rng.random_range(0..choices.len())];
        let mut neighbors: Vec<usize> = groups[&(f.relation, f.object)]
            .iter()
            .copied()
            .filter(|j| !edited.contains(j))
            .collect();
        neighbors.shuffle(&mut rng);
        let templates = schema.all_templates();
        let assist = NeighborPrompt {
            subject: world.facts[neighbors[0]].subject.clone(),
            template: schema.edit_template.clone(),
            object: f.object,
        };
        let eval_neighbors = neighbors[1..]
            .iter()
            .map(|&j| NeighborPrompt {
                subject: world.facts[j].subject.clone(),
                template: templates[rng.random_range(0..templates.len())].clone(),
                object: f.object,
            })
            .collect();
        requests.push(EditRequest {
            id,
            triple: f.clone(),
            new_object,
            edit_template: schema.edit_template.clone(),
            paraphrase_templates: schema.paraphrase_templates.clone(),
            assist_neighbor: Some(assist),
            eval_neighbors,
        });
    }
    let prefix_pool = (0..n_prefixes)
        .map(|_| random_prefix(&mut rng, &world.prefix_tokens, world.config.max_prefix_len))
        .collect();
    let stats = BatchStats {
        requested: m,
        selected: requests.len(),
        excluded,
        shortfall: m - requests.len(),
    };
    Ok((
        EditBatch {
            requests,
            prefix_pool,
            seed,
        },
        stats,
    ))
}

fn recalls(model: &ToyLm, n: &NeighborPrompt) -> Result<bool> {
    let r = n.render(&[]);
    let p = model.next_token_probs(&r.tokens)?;
    Ok(is_strict_argmax(p.as_slice(), n.object))
}

/// Drops neighbor prompts the model does not answer with their recorded object
/// (strict top-1; ties fail). A failed assist neighbor is replaced by the first
/// surviving eval neighbor; requests left without one assist and one eval
/// neighbor are removed.
pub fn filter_neighbors(model: &ToyLm, batch: &EditBatch) -> Result<(EditBatch, FilterReport)> {
    let mut report = FilterReport {
        neighbors_checked: 0,
        neighbors_removed: 0,
        requests_dropped: Vec::new(),
        requests_kept: 0,
    };
    let mut requests = Vec::with_capacity(batch.requests.len());
    for req in &batch.requests {
        let mut assist = None;
        if let Some(a) = &req.assist_neighbor {
            report.neighbors_checked += 1;
            if recalls(model, a)? {
                assist = Some(a.clone());
            } else {
                report.neighbors_removed += 1;
            }
        }
        let mut evals = Vec::with_capacity(req.eval_neighbors.len());
        for n in &req.eval_neighbors {
            report.neighbors_checked += 1;
            if recalls(model, n)? {
                evals.push(n.clone());
            } else {
                report.neighbors_removed += 1;
            }
        }
        if assist.is_none() && evals.len() >= 2 {
            let mut promoted = evals.remove(0);
            promoted.template = req.edit_template.clone();
            if recalls(model, &promoted)? {
                assist = Some(promoted);
            }
        }
        if assist.is_none() || evals.is_empty() {
            report.requests_dropped.push(req.id);
            continue;
        }
        let mut r = req.clone();
        r.assist_neighbor = assist;
        r.eval_neighbors = evals;
        requests.push(r);
    }
    report.requests_kept = requests.len();
    Ok((
        EditBatch {
            requests,
            prefix_pool: batch.prefix_pool.clone(),
            seed: batch.seed,
        },
        report,
    ))
}
