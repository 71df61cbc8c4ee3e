//! Generated question-pair corpora for tests and small experiments.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::dataset::{Dataset, Split};
use crate::error::Result;
use crate::pipelines::QuestionPair;
use crate::tokenizer::Vocab;

const TOPICS: &[&str] = &[
    "geology",
    "music",
    "rap",
    "chemistry",
    "painting",
    "poetry",
    "physics",
    "cooking",
    "chess",
    "photography",
    "history",
    "law",
    "medicine",
    "economics",
    "football",
    "dance",
    "biology",
    "astronomy",
    "design",
    "writing",
    "teaching",
    "nursing",
    "accounting",
    "gardening",
    "sculpture",
    "robotics",
    "farming",
    "sailing",
    "fishing",
    "climbing",
];

/// Each intent is a set of interchangeable phrasings around a topic slot.
const INTENTS: &[&[&str]] = &[
    &[
        "how can i become good at {}",
        "what should i do to be great at {}",
        "how do i get better at {}",
    ],
    &[
        "what is the best way to learn {}",
        "how should i start learning {}",
        "where can i study {}",
    ],
    &[
        "how much money can you make in {}",
        "what is the salary in {}",
        "does {} pay well",
    ],
    &[
        "what are the best books about {}",
        "which books on {} should i read",
        "can you recommend books about {}",
    ],
    &[
        "why is {} so hard",
        "what makes {} difficult",
        "why do people struggle with {}",
    ],
    &[
        "what is the history of {}",
        "how did {} begin",
        "where does {} come from",
    ],
];

fn phrase(intent: usize, topic: &str, rng: &mut impl Rng) -> String {
    INTENTS[intent].choose(rng).expect("non-empty").replace("{}", topic) + " ?"
}

/// Pairs that are duplicates exactly when both questions are the same text;
/// non-duplicates share no topic and no intent. Labels alternate 1, 0, ...
pub fn separable_pairs(n: usize, rng: &mut impl Rng) -> Result<Dataset> {
    let pairs = (0..n)
        .map(|i| {
            let t = rng.random_range(0..TOPICS.len());
            let k = rng.random_range(0..INTENTS.len());
            let a = phrase(k, TOPICS[t], rng);
            if i % 2 == 0 {
                QuestionPair::new(a.clone(), a, Some(1))
            } else {
                let t2 = (t + 1 + rng.random_range(0..TOPICS.len() - 1)) % TOPICS.len();
                let k2 = (k + 1 + rng.random_range(0..INTENTS.len() - 1)) % INTENTS.len();
                QuestionPair::new(a, phrase(k2, TOPICS[t2], rng), Some(0))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(pairs, Split::Train)
}

/// A paraphrase corpus with roughly 37% duplicates. A duplicate asks the same
/// intent about the same topic in possibly different words; a non-duplicate
/// changes either the intent or the topic, so word overlap alone is a weak cue.
pub fn paraphrase_corpus(n: usize, split: Split, rng: &mut impl Rng) -> Result<Dataset> {
    let pairs = (0..n)
        .map(|_| {
            let t = rng.random_range(0..TOPICS.len());
            let k = rng.random_range(0..INTENTS.len());
            let a = phrase(k, TOPICS[t], rng);
            if rng.random_bool(0.37) {
                QuestionPair::new(a, phrase(k, TOPICS[t], rng), Some(1))
            } else if rng.random_bool(0.5) {
                let k2 = (k + 1 + rng.random_range(0..INTENTS.len() - 1)) % INTENTS.len();
                QuestionPair::new(a, phrase(k2, TOPICS[t], rng), Some(0))
            } else {
                let t2 = (t + 1 + rng.random_range(0..TOPICS.len() - 1)) % TOPICS.len();
                QuestionPair::new(a, phrase(k, TOPICS[t2], rng), Some(0))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(pairs, split)
}

/// Vocabulary over every question of the given datasets.
pub fn vocab_for(datasets: &[&Dataset], min_freq: usize) -> Result<Vocab> {
    let texts = datasets
        .iter()
        .flat_map(|d| d.pairs())
        .flat_map(|p| [p.question_a.as_str(), p.question_b.as_str()]);
    Vocab::build(texts, min_freq)
}
