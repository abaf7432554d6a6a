use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_prompt, FactTriple, RelationSchema, Template, Vocab, World, WORLD_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_relations: usize,
    pub pool_size: usize,
    pub n_paraphrases: usize,
    /// Tokens per subject name. With 2, names combine a given and a family
    /// part drawn from small shared inventories.
    pub name_parts: usize,
    /// Fraction of subjects that get a shared trailing token.
    pub suffix_fraction: f64,
    pub prefixed_per_fact: usize,
    pub n_filler_train: usize,
    pub n_probes: usize,
    pub max_prefix_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            n_subjects: 200,
            n_relations: 8,
            pool_size: 6,
            n_paraphrases: 2,
            name_parts: 1,
            suffix_fraction: 0.3,
            prefixed_per_fact: 2,
            n_filler_train: 300,
            n_probes: 50,
            max_prefix_len: 5,
        }
    }
}

struct RelationDef {
    name: &'static str,
    templates: [&'static str; 4],
    objects: [&'static str; 8],
}

const RELATIONS: [RelationDef; 8] = [
    RelationDef {
        name: "capital",
        templates: [
            "the capital of {} is",
            "{} has its capital at",
            "the seat of power in {} lies in",
            "people from {} call their capital",
        ],
        objects: ["paris", "rome", "cairo", "lima", "oslo", "tokyo", "quito", "dakar"],
    },
    RelationDef {
        name: "language",
        templates: [
            "the official language of {} is",
            "in {} most people speak",
            "{} writes its laws in",
            "the mother tongue of {} is",
        ],
        objects: ["english", "french", "italian", "spanish", "german", "russian", "dutch", "polish"],
    },
    RelationDef {
        name: "continent",
        templates: [
            "{} is located in",
            "{} lies on the continent of",
            "the home continent of {} is",
            "maps place {} inside",
        ],
        objects: ["africa", "asia", "europe", "oceania", "antarctica", "america", "arctica", "zealandia"],
    },
    RelationDef {
        name: "sport",
        templates: [
            "{} professionally plays",
            "the sport of {} is",
            "{} is a famous player of",
            "fans watch {} compete in",
        ],
        objects: ["soccer", "tennis", "hockey", "cricket", "golf", "baseball", "rugby", "boxing"],
    },
    RelationDef {
        name: "instrument",
        templates: [
            "{} performs on the",
            "the instrument of {} is the",
            "on stage {} plays the",
            "{} practices every night on the",
        ],
        objects: ["piano", "violin", "guitar", "cello", "flute", "drums", "harp", "trumpet"],
    },
    RelationDef {
        name: "employer",
        templates: [
            "{} works for",
            "the employer of {} is",
            "{} is employed by",
            "every morning {} commutes to",
        ],
        objects: ["google", "nokia", "toyota", "boeing", "intel", "sony", "siemens", "airbus"],
    },
    RelationDef {
        name: "religion",
        templates: [
            "{} follows the religion of",
            "the faith of {} is",
            "{} prays according to",
            "the creed held by {} is",
        ],
        objects: ["islam", "hinduism", "buddhism", "judaism", "christianity", "shinto", "jainism", "taoism"],
    },
    RelationDef {
        name: "genre",
        templates: [
            "{} is known for playing",
            "the genre of {} is",
            "critics praise {} for its",
            "radio stations list {} under",
        ],
        objects: ["jazz", "opera", "rock", "blues", "reggae", "techno", "folk", "metal"],
    },
];

const SUFFIXES: [&str; 3] = ["city", "corp", "jr"];

const DET: [&str; 2] = ["the", "a"];
const ADJ: [&str; 8] = ["red", "old", "small", "quiet", "bright", "heavy", "green", "cold"];
const NOUN: [&str; 10] = [
    "dog", "river", "house", "tree", "song", "window", "farmer", "child", "stone", "letter",
];
const VERB: [&str; 8] = ["sees", "finds", "carries", "likes", "follows", "paints", "hears", "keeps"];
const PREP: [&str; 4] = ["near", "under", "behind", "beside"];
const ADV: [&str; 4] = ["slowly", "often", "again", "today"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    let w: Vec<&str> = match rng.random_range(0..4) {
        0 => vec![pick(rng, &DET), pick(rng, &ADJ), pick(rng, &NOUN), pick(rng, &VERB), pick(rng, &DET), pick(rng, &NOUN)],
        1 => vec![
            pick(rng, &DET), pick(rng, &NOUN), pick(rng, &VERB), pick(rng, &DET), pick(rng, &ADJ),
            pick(rng, &NOUN), pick(rng, &PREP), pick(rng, &DET), pick(rng, &NOUN),
        ],
        2 => vec![pick(rng, &DET), pick(rng, &NOUN), pick(rng, &VERB), pick(rng, &ADV)],
        _ => vec![
            pick(rng, &DET), pick(rng, &ADJ), pick(rng, &NOUN), pick(rng, &VERB), pick(rng, &PREP),
            pick(rng, &DET), pick(rng, &NOUN), pick(rng, &ADV),
        ],
    };
    w.join(" ")
}

const CONSONANTS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn subject_name(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    (0..n)
        .map(|_| format!("{}{}", pick(rng, &CONSONANTS), pick(rng, &VOWELS)))
        .collect()
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_relations == 0 || self.n_probes == 0 {
            return Err(Error::config("world counts must be positive"));
        }
        if self.n_relations > RELATIONS.len() {
            return Err(Error::config(format!(
                "at most {} relations are available",
                RELATIONS.len()
            )));
        }
        if self.pool_size < 3 || self.pool_size > RELATIONS[0].objects.len() {
            return Err(Error::config(format!(
                "pool_size must be in 3..={}",
                RELATIONS[0].objects.len()
            )));
        }
        if self.n_paraphrases < 1 || self.n_paraphrases > 3 {
            return Err(Error::config("n_paraphrases must be in 1..=3"));
        }
        if self.n_subjects < 2 * self.n_relations * self.pool_size {
            return Err(Error::config(format!(
                "{} subjects cannot give every (relation, object) pair two subjects; need {}",
                self.n_subjects,
                2 * self.n_relations * self.pool_size
            )));
        }
        if !(1..=3).contains(&self.name_parts) {
            return Err(Error::config("name_parts must be 1, 2 or 3"));
        }
        if !(0.0..=1.0).contains(&self.suffix_fraction) {
            return Err(Error::config("suffix_fraction must be in [0, 1]"));
        }
        if self.max_prefix_len == 0 {
            return Err(Error::config("max_prefix_len must be positive"));
        }
        Ok(())
    }
}

/// Deterministic synthetic world.
///
/// Subject `i` of the shuffled subject list gets relation `i mod R`; within a
/// relation, objects are dealt round-robin from its pool so every
/// (relation, object) group has at least two subjects.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vocab = Vocab::new();

    let mut prefix_tokens = Vec::new();
    for w in DET.iter().chain(&ADJ).chain(&NOUN).chain(&VERB).chain(&PREP).chain(&ADV) {
        prefix_tokens.push(vocab.intern(w));
    }

    let mut schemas = Vec::with_capacity(cfg.n_relations);
    for (id, def) in RELATIONS.iter().take(cfg.n_relations).enumerate() {
        for t in def.templates {
            for w in t.split_whitespace().filter(|w| *w != "{}") {
                vocab.intern(w);
            }
        }
        let templates: Vec<Template> = def
            .templates
            .iter()
            .take(1 + cfg.n_paraphrases)
            .map(|t| Template::from_text(t, &vocab))
            .collect::<Result<_>>()?;
        let object_pool = def.objects[..cfg.pool_size]
            .iter()
            .map(|o| vocab.intern(o))
            .collect();
        schemas.push(RelationSchema {
            id,
            name: def.name.to_string(),
            edit_template: templates[0].clone(),
            paraphrase_templates: templates[1..].to_vec(),
            object_pool,
        });
    }
    let suffix_ids: Vec<usize> = SUFFIXES.iter().map(|s| vocab.intern(s)).collect();

    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let fresh_name = |rng: &mut ChaCha8Rng, vocab: &mut Vocab| loop {
        let name = subject_name(rng);
        if !vocab.contains(&name) {
            return vocab.intern(&name);
        }
    };
    if cfg.name_parts == 1 {
        while subjects.len() < cfg.n_subjects {
            subjects.push(vec![fresh_name(&mut rng, &mut vocab)]);
        }
    } else {
        // each part inventory is just large enough for the required combinations
        let per_part = (cfg.n_subjects as f64).powf(1.0 / cfg.name_parts as f64).ceil() as usize + 1;
        let parts: Vec<Vec<usize>> = (0..cfg.name_parts)
            .map(|_| (0..per_part).map(|_| fresh_name(&mut rng, &mut vocab)).collect())
            .collect();
        let mut seen = HashSet::new();
        while subjects.len() < cfg.n_subjects {
            let s: Vec<usize> = parts.iter().map(|p| p[rng.random_range(0..p.len())]).collect();
            if seen.insert(s.clone()) {
                subjects.push(s);
            }
        }
    }
    for s in &mut subjects {
        if rng.random_bool(cfg.suffix_fraction) {
            s.push(suffix_ids[rng.random_range(0..suffix_ids.len())]);
        }
    }
    subjects.shuffle(&mut rng);

    let r = cfg.n_relations;
    let facts: Vec<FactTriple> = subjects
        .into_iter()
        .enumerate()
        .map(|(i, subject)| {
            let relation = i % r;
            let pool = &schemas[relation].object_pool;
            FactTriple {
                subject,
                relation,
                object: pool[(i / r) % pool.len()],
            }
        })
        .collect();

    let mut corpus = Vec::new();
    let mut max_len = 0;
    for f in &facts {
        let schema = &schemas[f.relation];
        let templates = schema.all_templates();
        for t in &templates {
            let mut seq = render_prompt(t, &f.subject, &[])?.tokens;
            seq.push(f.object);
            corpus.push(seq);
        }
        for _ in 0..cfg.prefixed_per_fact {
            let t = templates[rng.random_range(0..templates.len())];
            let prefix = random_prefix(&mut rng, &prefix_tokens, cfg.max_prefix_len);
            let mut seq = render_prompt(t, &f.subject, &prefix)?.tokens;
            seq.push(f.object);
            corpus.push(seq);
        }
        for t in &templates {
            let len = 1 + cfg.max_prefix_len + t.pre.len() + f.subject.len() + t.post.len() + 1;
            max_len = max_len.max(len);
        }
    }

    let mut seen = HashSet::new();
    let mut probes = Vec::with_capacity(cfg.n_probes);
    let mut filler = Vec::with_capacity(cfg.n_filler_train);
    let mut attempts = 0usize;
    while probes.len() < cfg.n_probes || filler.len() < cfg.n_filler_train {
        attempts += 1;
        if attempts > 1000 * (cfg.n_probes + cfg.n_filler_train) {
            return Err(Error::config("filler grammar cannot supply enough distinct sentences"));
        }
        let s = filler_sentence(&mut rng);
        if !seen.insert(s.clone()) {
            continue;
        }
        let mut seq = vec![0];
        seq.extend(vocab.encode(&s)?);
        max_len = max_len.max(seq.len());
        if probes.len() < cfg.n_probes {
            probes.push(seq);
        } else {
            filler.push(seq);
        }
    }
    corpus.extend(filler);

    Ok(World {
        format_version: WORLD_VERSION,
        config: cfg.clone(),
        vocab,
        schemas,
        facts,
        prefix_tokens,
        pretrain_corpus: corpus,
        probe_utterances: probes,
        max_seq_len: max_len,
    })
}

pub(crate) fn random_prefix(rng: &mut ChaCha8Rng, tokens: &[usize], max_len: usize) -> Vec<usize> {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| tokens[rng.random_range(0..tokens.len())]).collect()
}
