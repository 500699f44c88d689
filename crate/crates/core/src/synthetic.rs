//! Seeded synthetic coreference retrieval task. Every passage states one
//! attribute of one invented entity. Conversations open by naming an entity
//! and then ask about further attributes through a pronoun, so later queries
//! can only be resolved from the history.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::Qrels;
use crate::robust::{ConversationalDataset, EvalConversation, EvalTurn};
use crate::text::{Passage, Session, TrainingSample, Turn};

const ATTRIBUTES: [&str; 12] = [
    "color", "size", "origin", "age", "weight", "price", "shape", "owner", "speed", "height",
    "flavor", "texture",
];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const FOLLOW_UPS: [&str; 3] = ["what about its {a}", "and its {a}", "what is its {a}"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub n_attributes: usize,
    pub n_conversations: usize,
    /// Conversations reserved for evaluation; the rest become training data.
    pub n_heldout: usize,
    pub turns_per_conversation: usize,
    /// Extra single-turn training queries naming entity and attribute.
    pub n_adhoc: usize,
    /// Negatives attached to each training sample: half share the entity,
    /// half share the attribute.
    pub n_hard_negatives: usize,
    pub n_value_words: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_attributes: 10,
            n_conversations: 200,
            n_heldout: 40,
            turns_per_conversation: 3,
            n_adhoc: 1000,
            n_hard_negatives: 4,
            n_value_words: 60,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub corpus: Vec<Passage>,
    pub train: Vec<TrainingSample>,
    pub heldout: ConversationalDataset,
    pub qrels: Qrels,
}

impl SyntheticTask {
    /// Qrels as TREC lines.
    pub fn qrels_text(&self) -> String {
        let mut out = String::new();
        for (qid, j) in &self.qrels {
            for (pid, g) in j {
                out.push_str(&format!("{qid} 0 {pid} {g}\n"));
            }
        }
        out
    }
}

fn pid(e: usize, a: usize) -> String {
    format!("e{e:03}a{a:02}")
}

fn words(rng: &mut ChaCha8Rng, n: usize, syllables: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS.choose(rng).expect("non-empty"),
                    VOWELS.choose(rng).expect("non-empty")
                )
            })
            .collect::<String>()
            + ONSETS.choose(rng).expect("non-empty");
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticTask, String> {
    if cfg.n_attributes < cfg.turns_per_conversation.max(2) || cfg.n_attributes > ATTRIBUTES.len() {
        return Err(format!(
            "n_attributes must lie in {}..={}",
            cfg.turns_per_conversation.max(2),
            ATTRIBUTES.len()
        ));
    }
    if cfg.n_entities < 2 || cfg.n_heldout > cfg.n_conversations || cfg.turns_per_conversation == 0 {
        return Err("need at least 2 entities, one turn, and n_heldout <= n_conversations".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken: HashSet<String> = ATTRIBUTES.iter().map(|s| s.to_string()).collect();
    taken.extend(
        ["the", "of", "is", "tell", "me", "about", "what", "its", "and"]
            .iter()
            .map(|s| s.to_string()),
    );
    let entities = words(&mut rng, cfg.n_entities, 2, &mut taken);
    let values = words(&mut rng, cfg.n_value_words, 1, &mut taken);
    let attrs = &ATTRIBUTES[..cfg.n_attributes];

    let mut text = BTreeMap::new();
    let mut corpus = Vec::with_capacity(cfg.n_entities * cfg.n_attributes);
    for (e, name) in entities.iter().enumerate() {
        for (a, attr) in attrs.iter().enumerate() {
            let v1 = values.choose(&mut rng).expect("values");
            let v2 = values.choose(&mut rng).expect("values");
            let t = format!("the {attr} of {name} is {v1} {v2} .");
            text.insert((e, a), t.clone());
            corpus.push(Passage::new(pid(e, a), t));
        }
    }
    let passage = |e: usize, a: usize| Passage::new(pid(e, a), text[&(e, a)].clone());

    let negatives = |rng: &mut ChaCha8Rng, e: usize, a: usize| -> Vec<Passage> {
        let same_entity = cfg.n_hard_negatives.div_ceil(2).min(cfg.n_attributes - 1);
        let mut other_attrs: Vec<usize> = (0..cfg.n_attributes).filter(|&x| x != a).collect();
        other_attrs.shuffle(rng);
        let mut out: Vec<Passage> = other_attrs[..same_entity].iter().map(|&x| passage(e, x)).collect();
        let mut other_entities: Vec<usize> = (0..cfg.n_entities).filter(|&x| x != e).collect();
        other_entities.shuffle(rng);
        let rest = (cfg.n_hard_negatives - same_entity).min(other_entities.len());
        out.extend(other_entities[..rest].iter().map(|&x| passage(x, a)));
        out
    };

    let mut conv_entities: Vec<usize> = (0..cfg.n_entities).collect();
    conv_entities.shuffle(&mut rng);
    let mut heldout = Vec::new();
    let mut heldout_pairs = HashSet::new();
    let mut train = Vec::new();
    let mut qrels = Qrels::new();
    for c in 0..cfg.n_conversations {
        let e = conv_entities[c % cfg.n_entities];
        let name = &entities[e];
        let mut order: Vec<usize> = (0..cfg.n_attributes).collect();
        order.shuffle(&mut rng);
        let id = format!("conv{c:03}");
        let is_heldout = c < cfg.n_heldout;
        let mut turns = Vec::with_capacity(cfg.turns_per_conversation);
        for (i, &a) in order[..cfg.turns_per_conversation].iter().enumerate() {
            let attr = attrs[a];
            let query = if i == 0 {
                format!("tell me about the {attr} of {name}")
            } else {
                FOLLOW_UPS.choose(&mut rng).expect("templates").replace("{a}", attr)
            };
            turns.push(EvalTurn {
                query,
                response: text[&(e, a)].clone(),
                rewrite: Some(format!("what is the {attr} of {name}")),
            });
            if is_heldout {
                heldout_pairs.insert((e, a));
            }
        }
        let conv = EvalConversation {
            conversation_id: id,
            turns,
        };
        for (i, &a) in order[..cfg.turns_per_conversation].iter().enumerate() {
            if is_heldout {
                qrels.insert(conv.qid(i), [(pid(e, a), 1)].into());
            } else {
                train.push(TrainingSample {
                    session: conv.session_at(i),
                    positive: passage(e, a),
                    hard_negatives: negatives(&mut rng, e, a),
                });
            }
        }
        if is_heldout {
            heldout.push(conv);
        }
    }
    let free: Vec<(usize, usize)> = (0..cfg.n_entities)
        .flat_map(|e| (0..cfg.n_attributes).map(move |a| (e, a)))
        .filter(|p| !heldout_pairs.contains(p))
        .collect();
    for k in 0..cfg.n_adhoc {
        let &(e, a) = free.choose(&mut rng).ok_or("no free pairs for ad-hoc queries")?;
        let q = if rng.gen_bool(0.5) {
            format!("tell me about the {} of {}", attrs[a], entities[e])
        } else {
            format!("what is the {} of {}", attrs[a], entities[e])
        };
        train.push(TrainingSample {
            session: Session {
                conversation_id: format!("adhoc{k:04}"),
                turns: vec![Turn::user(q)],
            },
            positive: passage(e, a),
            hard_negatives: negatives(&mut rng, e, a),
        });
    }
    train.shuffle(&mut rng);
    Ok(SyntheticTask {
        corpus,
        train,
        heldout: ConversationalDataset {
            name: "synthetic".into(),
            conversations: heldout,
        },
        qrels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_task_shape() {
        let t = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(t.corpus.len(), 2000);
        assert_eq!(t.heldout.conversations.len(), 40);
        assert_eq!(t.qrels.len(), 120);
        assert_eq!(t.train.len(), 160 * 3 + 1000);
        for s in &t.train {
            s.validate().unwrap();
            assert_eq!(s.hard_negatives.len(), 4);
        }
        let mut pids: Vec<_> = t.corpus.iter().map(|p| &p.pid).collect();
        pids.dedup();
        assert_eq!(pids.len(), 2000);
    }

    #[test]
    fn heldout_pairs_never_train_positives() {
        let t = generate(&SyntheticConfig::default()).unwrap();
        let gold: HashSet<&String> = t.qrels.values().flat_map(|j| j.keys()).collect();
        for s in &t.train {
            assert!(!gold.contains(&s.positive.pid));
        }
    }

    #[test]
    fn later_turns_use_pronouns() {
        let t = generate(&SyntheticConfig::default()).unwrap();
        for c in &t.heldout.conversations {
            assert!(c.turns[0].query.starts_with("tell me about"));
            for turn in &c.turns[1..] {
                assert!(turn.query.contains(" its "));
                assert!(turn.rewrite.as_ref().unwrap().starts_with("what is the"));
            }
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SyntheticConfig {
            seed: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_ne!(a.corpus, c.corpus);
    }
}
