//! Rule-generated toy NLI corpus for desk-scale runs and the end-to-end
//! test suite.
//!
//! Premises describe an entity with a color, an action, a place, and one
//! extra attribute (a mood or a time): "the happy red dog runs in the park"
//! or "the red dog runs in the park at night". Hypotheses follow the label
//! semantics: entailment states a subset of the premise's attributes,
//! contradiction replaces exactly one shared attribute with a conflicting
//! value, and neutral adds the extra attribute type the premise does not
//! mention. Every label therefore requires comparing the hypothesis against
//! the premise; none is decidable from the hypothesis alone.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Label, RawExample};
use crate::numerics::seeded_rng;

const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
const ENTITIES: [&str; 6] = ["man", "woman", "dog", "cat", "bird", "child"];
const VERBS: [&str; 6] = ["runs", "sleeps", "eats", "jumps", "sits", "walks"];
const PLACES: [&str; 6] = ["park", "house", "street", "field", "beach", "room"];
const MOODS: [&str; 6] = ["happy", "sad", "tired", "busy", "calm", "proud"];
const TIMES: [&str; 6] = ["dawn", "noon", "dusk", "night", "spring", "winter"];

#[derive(Debug, Clone, Copy)]
pub struct ToyCorpusConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Distinct values per attribute, between 2 and 6. Fewer values repeat
    /// each conflict pattern more often and make the matching task easier to
    /// learn at small scale.
    pub attribute_values: usize,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig { n_train: 3000, n_dev: 600, n_test: 600, seed: 7, attribute_values: 3 }
    }
}

/// Which extra attribute type a premise carries.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Extra {
    Mood(usize),
    Time(usize),
}

#[derive(Debug, Clone, Copy)]
struct Premise {
    color: usize,
    entity: usize,
    verb: usize,
    place: usize,
    extra: Extra,
}

impl Premise {
    fn tokens(&self) -> Vec<String> {
        let mut out: Vec<&str> = vec!["the"];
        if let Extra::Mood(m) = self.extra {
            out.push(MOODS[m]);
        }
        out.extend([COLORS[self.color], ENTITIES[self.entity], VERBS[self.verb], "in", "the", PLACES[self.place]]);
        if let Extra::Time(t) = self.extra {
            out.extend(["at", TIMES[t]]);
        }
        out.into_iter().map(str::to_string).collect()
    }
}

fn conflicting(rng: &mut impl Rng, current: usize, values: usize) -> usize {
    let shift = rng.gen_range(1..values);
    (current + shift) % values
}

fn hypothesis(premise: &Premise, label: Label, values: usize, rng: &mut impl Rng) -> Vec<String> {
    let the = "the".to_string();
    let entity = ENTITIES[premise.entity].to_string();
    let verb = VERBS[premise.verb].to_string();
    match label {
        Label::Entailment => {
            // A subset of the premise's attributes.
            match rng.gen_range(0..4) {
                0 => vec![the, entity, verb],
                1 => vec![the, COLORS[premise.color].into(), entity, verb],
                2 => vec![the.clone(), entity, verb, "in".into(), the, PLACES[premise.place].into()],
                _ => match premise.extra {
                    Extra::Mood(m) => vec![the, MOODS[m].into(), entity, verb],
                    Extra::Time(t) => vec![the, entity, verb, "at".into(), TIMES[t].into()],
                },
            }
        }
        Label::Contradiction => {
            // Exactly one shared attribute value conflicts with the premise.
            match rng.gen_range(0..4) {
                0 => vec![the, entity, VERBS[conflicting(rng, premise.verb, values)].into()],
                1 => vec![the, COLORS[conflicting(rng, premise.color, values)].into(), entity, verb],
                2 => vec![
                    the.clone(),
                    entity,
                    verb,
                    "in".into(),
                    the,
                    PLACES[conflicting(rng, premise.place, values)].into(),
                ],
                _ => match premise.extra {
                    Extra::Mood(m) => {
                        vec![the, MOODS[conflicting(rng, m, values)].into(), entity, verb]
                    }
                    Extra::Time(t) => vec![
                        the,
                        entity,
                        verb,
                        "at".into(),
                        TIMES[conflicting(rng, t, values)].into(),
                    ],
                },
            }
        }
        Label::Neutral => {
            // Adds the extra attribute type the premise does not mention.
            match premise.extra {
                Extra::Mood(_) => {
                    let time = TIMES[rng.gen_range(0..values)];
                    if rng.gen_bool(0.5) {
                        vec![the, entity, verb, "at".into(), time.into()]
                    } else {
                        vec![
                            the.clone(),
                            entity,
                            verb,
                            "in".into(),
                            the,
                            PLACES[premise.place].into(),
                            "at".into(),
                            time.into(),
                        ]
                    }
                }
                Extra::Time(_) => {
                    let mood = MOODS[rng.gen_range(0..values)];
                    if rng.gen_bool(0.5) {
                        vec![the, mood.into(), entity, verb]
                    } else {
                        vec![the, mood.into(), COLORS[premise.color].into(), entity, verb]
                    }
                }
            }
        }
    }
}

/// Three disjoint-premise splits of rule-generated examples with evenly
/// cycled labels. Premise attribute combinations are partitioned across the
/// splits so test premises are never seen in training.
pub fn toy_corpus(cfg: &ToyCorpusConfig) -> (Vec<RawExample>, Vec<RawExample>, Vec<RawExample>) {
    let values = cfg.attribute_values.clamp(2, 6);
    let mut all_premises: Vec<Premise> = Vec::new();
    for color in 0..values {
        for entity in 0..6 {
            for verb in 0..values {
                for place in 0..values {
                    for extra_value in 0..values {
                        all_premises.push(Premise {
                            color,
                            entity,
                            verb,
                            place,
                            extra: Extra::Mood(extra_value),
                        });
                        all_premises.push(Premise {
                            color,
                            entity,
                            verb,
                            place,
                            extra: Extra::Time(extra_value),
                        });
                    }
                }
            }
        }
    }
    let mut rng = seeded_rng(cfg.seed, "toy-premise-split");
    all_premises.shuffle(&mut rng);
    let n = all_premises.len();
    let dev_start = n * 7 / 10;
    let test_start = n * 85 / 100;
    let splits = [
        (&all_premises[..dev_start], cfg.n_train, "toy-train"),
        (&all_premises[dev_start..test_start], cfg.n_dev, "toy-dev"),
        (&all_premises[test_start..], cfg.n_test, "toy-test"),
    ];

    let mut out: Vec<Vec<RawExample>> = Vec::with_capacity(3);
    for (pool, count, name) in splits {
        let mut rng = seeded_rng(cfg.seed, name);
        let mut examples = Vec::with_capacity(count);
        for i in 0..count {
            let premise = pool[rng.gen_range(0..pool.len())];
            let label = crate::data::ALL_LABELS[i % 3];
            examples.push(RawExample {
                premise: premise.tokens(),
                hypothesis: hypothesis(&premise, label, values, &mut rng),
                label,
            });
        }
        out.push(examples);
    }
    let test = out.pop().unwrap();
    let dev = out.pop().unwrap();
    let train = out.pop().unwrap();
    (train, dev, test)
}
