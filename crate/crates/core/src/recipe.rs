//! The reference setup: world, model size and pretraining schedule.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::factworld::{World, WorldConfig};
use crate::iterate::{IterateConfig, IterateMode, SnapshotRetention, StoppingPolicy};
use crate::optimize::{EarlyStop, OptimizeSpec};
use crate::spread::{Algorithm, CausalLayerSet, SpreadConfig};
use crate::toylm::{is_strict_argmax, AdamConfig, ModelConfig, PretrainReport, ToyLm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Recall is measured every this many epochs.
    pub check_every: usize,
    /// Stop once recall over every template of every fact reaches this value.
    #[serde(with = "crate::optser")]
    pub stop_at_recall: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_epochs: 300,
            adam: AdamConfig::default(),
            seed: 1,
            check_every: 5,
            stop_at_recall: Some(1.0),
        }
    }
}

/// Two-token subject names: the final subject token alone does not identify
/// the subject, so its identity has to be assembled in the MLP layers the
/// editor writes to.
pub fn reference_world_config() -> WorldConfig {
    WorldConfig {
        prefixed_per_fact: 5,
        name_parts: 2,
        suffix_fraction: 0.0,
        ..WorldConfig::default()
    }
}

/// Edited layers of the reference model.
pub const REFERENCE_CAUSAL_LAYERS: [usize; 2] = [0, 1];

/// Edits per batch in the reference runs.
pub const REFERENCE_BATCH_SIZE: usize = 50;

/// Random prefixes per batch.
pub const REFERENCE_PREFIXES: usize = 5;

/// Neighbor-term weight when neighbor assistance is on. Equal to the KL
/// weight; at weight 1 the delta search runs away on this model.
pub const REFERENCE_NEIGHBOR_WEIGHT: f64 = 0.0625;

/// The reference editing recipe for `algorithm` on a model with `n_layers`.
pub fn reference_iterate_config(algorithm: Algorithm, n_layers: usize) -> Result<IterateConfig> {
    let layers = CausalLayerSet::new(REFERENCE_CAUSAL_LAYERS.to_vec(), n_layers)?;
    let mut optimize = OptimizeSpec::new(algorithm.target_site(layers.last()));
    optimize.early_stop = EarlyStop::Mpes;
    Ok(IterateConfig {
        algorithm,
        layers,
        optimize,
        spread: SpreadConfig {
            lambda_c: 300.0,
            average_keys: true,
            ..SpreadConfig::default()
        },
        stopping: StoppingPolicy::default(),
        mode: IterateMode::Full,
        snapshots: SnapshotRetention::None,
    })
}

pub fn reference_model_config(world: &World) -> ModelConfig {
    ModelConfig {
        vocab_size: world.vocab.len(),
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        d_mlp: 256,
        max_seq_len: 16,
        seed: 0,
    }
}

/// Fraction of facts whose edit-template prompt yields the object as strict top-1.
pub fn fact_recall(model: &ToyLm, world: &World) -> Result<f64> {
    let mut hit = 0;
    for f in &world.facts {
        let r = world.render_fact(f, &world.schema(f.relation).edit_template);
        if is_strict_argmax(model.next_token_probs(&r.tokens)?.as_slice(), f.object) {
            hit += 1;
        }
    }
    Ok(hit as f64 / world.facts.len() as f64)
}

/// Recall over every template (edit and paraphrases) of every fact.
pub fn template_recall(model: &ToyLm, world: &World) -> Result<f64> {
    let mut hit = 0;
    let mut n = 0;
    for f in &world.facts {
        for t in world.schema(f.relation).all_templates() {
            let r = world.render_fact(f, t);
            n += 1;
            if is_strict_argmax(model.next_token_probs(&r.tokens)?.as_slice(), f.object) {
                hit += 1;
            }
        }
    }
    Ok(hit as f64 / n as f64)
}

pub fn pretrain_on_world(model: &mut ToyLm, world: &World, cfg: &PretrainConfig) -> Result<PretrainReport> {
    world.check_model(&model.config)?;
    let mut recall_err = None;
    let report = model.pretrain_with(
        &world.pretrain_corpus,
        cfg.max_epochs,
        &cfg.adam,
        cfg.seed,
        |epoch, m, loss| {
            let Some(target) = cfg.stop_at_recall else {
                return true;
            };
            if cfg.check_every == 0 || (epoch + 1) % cfg.check_every != 0 {
                return true;
            }
            match template_recall(m, world) {
                Ok(r) => {
                    log::info!("epoch {} loss {loss:.4} template recall {r:.4}", epoch + 1);
                    r < target
                }
                Err(e) => {
                    recall_err = Some(e);
                    false
                }
            }
        },
    )?;
    if let Some(e) = recall_err {
        return Err(e);
    }
    Ok(report)
}

/// Builds the reference model for `world` and pretrains it.
pub fn pretrain_reference(world: &World, cfg: &PretrainConfig) -> Result<(ToyLm, PretrainReport)> {
    let mut model = ToyLm::new(reference_model_config(world))?;
    let report = pretrain_on_world(&mut model, world, cfg)?;
    Ok((model, report))
}
