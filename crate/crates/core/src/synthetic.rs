//! Synthetic corpora for experiments and tests.
//!
//! * A two-domain grammar corpus: one domain emits subject-verb-object
//!   sentences, the other emits the same templates with word order reversed.
//! * A token-level Markov corpus whose greedy decoding falls into a loop.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ControlCodeRegistry, SequenceRecord, TextAssets};
use crate::tokenizer::{Tokenizer, TokenizerError};

pub const FORWARD_DOMAIN: &str = "Forward";
pub const REVERSED_DOMAIN: &str = "Reversed";

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that"];

const ADJECTIVES: &[&str] = &[
    "red", "small", "quiet", "old", "bright", "heavy", "young", "brave", "cold", "green", "tall",
    "slow", "clever", "dark", "gentle", "hungry", "lucky", "proud", "rough", "silver", "sleepy",
    "tiny", "warm", "wild", "angry", "busy", "calm", "curious", "eager", "fancy", "golden",
    "honest", "jolly", "kind", "lazy", "merry", "nervous", "polite", "rapid", "shy", "strange",
];

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "farmer", "river", "teacher", "horse", "child", "sailor", "baker", "fox",
    "king", "queen", "doctor", "wolf", "student", "painter", "mouse", "tiger", "pilot", "goat",
    "owl", "lion", "rabbit", "captain", "singer", "hunter", "monkey", "writer", "dragon", "soldier",
    "miner", "turtle", "witch", "giant", "robot", "poet", "spider", "camel", "judge", "banker",
    "butcher", "chef", "clown", "dancer", "driver", "elephant", "falcon", "gardener", "goose",
    "hawk", "knight", "lawyer", "merchant", "nurse", "otter", "parrot", "pirate", "prince", "rider",
    "sheep", "snake", "squirrel", "tailor", "thief", "traveler", "unicorn", "village", "weaver",
    "whale", "wizard", "zebra",
];

const VERBS: &[&str] = &[
    "sees", "follows", "helps", "finds", "chases", "greets", "watches", "calls", "feeds", "trusts",
    "carries", "paints", "visits", "answers", "ignores", "teaches", "warns", "pushes", "thanks",
    "meets", "hears", "blames", "likes", "fears", "admires", "avoids", "catches", "cheers",
    "copies", "doubts", "draws", "envies", "guards", "hides", "invites", "joins", "kicks", "loves",
    "marries", "obeys", "praises", "rescues", "scolds", "serves", "tickles", "wakes",
];

fn noun_phrase<'a>(rng: &mut ChaCha8Rng, out: &mut Vec<&'a str>) {
    out.push(DETERMINERS.choose(rng).unwrap());
    if rng.random_bool(0.5) {
        out.push(ADJECTIVES.choose(rng).unwrap());
    }
    out.push(NOUNS.choose(rng).unwrap());
}

/// One subject-verb-object sentence as words, ending with `"."`.
pub fn svo_sentence(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let mut words = Vec::with_capacity(8);
    noun_phrase(rng, &mut words);
    words.push(VERBS.choose(rng).unwrap());
    noun_phrase(rng, &mut words);
    words.push(".");
    words
}

/// `(domain, text)` documents, alternating domains. Each document holds
/// `sentences` sentences; reversed documents reverse each sentence's words.
pub fn two_domain_documents(seed: u64, documents: usize, sentences: usize) -> Vec<(&'static str, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..documents)
        .map(|d| {
            let reversed = d % 2 == 1;
            let mut words = Vec::with_capacity(sentences * 8);
            for _ in 0..sentences {
                let mut s = svo_sentence(&mut rng);
                if reversed {
                    s.reverse();
                }
                words.extend(s);
            }
            let domain = if reversed { REVERSED_DOMAIN } else { FORWARD_DOMAIN };
            (domain, words.join(" "))
        })
        .collect()
}

/// Registry with the two grammar domains and a tokenizer learned on `docs`
/// with as many merges as fit in `vocab_size`.
pub fn two_domain_assets(docs: &[(&str, String)], vocab_size: usize) -> Result<TextAssets, TokenizerError> {
    let mut registry = ControlCodeRegistry::new();
    registry.add_domain(FORWARD_DOMAIN).expect("valid code");
    registry.add_domain(REVERSED_DOMAIN).expect("valid code");
    let chars: std::collections::BTreeSet<char> = docs.iter().flat_map(|d| d.1.chars()).collect();
    let base = 1 + registry.len() + chars.len();
    let merges = vocab_size.saturating_sub(base);
    let tokenizer = Tokenizer::learn(docs.iter().map(|d| d.1.as_str()), &registry.names(), merges, 2)?;
    Ok(TextAssets { tokenizer, registry })
}

/// Transition structure of the looping Markov corpus over ids
/// `first..first + size`. Every id has a partner (ids pair up as 2-cycles)
/// that follows it with probability `partner_p`; the remaining mass is split
/// evenly across `alternatives` other ids chosen per state.
#[derive(Debug, Clone)]
pub struct LoopChain {
    pub first: u32,
    pub size: u32,
    pub partner_p: f64,
    successors: Vec<Vec<u32>>,
}

impl LoopChain {
    pub fn new(seed: u64, first: u32, size: u32, alternatives: usize, partner_p: f64) -> Self {
        assert!(size >= 2 && size % 2 == 0);
        assert!((alternatives as u32) < size - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successors = (0..size)
            .map(|s| {
                let partner = s ^ 1;
                let pool: Vec<u32> = (0..size).filter(|&t| t != s && t != partner).collect();
                let mut next = vec![first + partner];
                next.extend(pool.choose_multiple(&mut rng, alternatives).map(|&t| first + t));
                next
            })
            .collect();
        LoopChain {
            first,
            size,
            partner_p,
            successors,
        }
    }

    pub fn partner(&self, id: u32) -> u32 {
        self.first + ((id - self.first) ^ 1)
    }

    /// Successors of `id`; the partner comes first.
    pub fn successors(&self, id: u32) -> &[u32] {
        &self.successors[(id - self.first) as usize]
    }

    pub fn next(&self, id: u32, rng: &mut ChaCha8Rng) -> u32 {
        let succ = self.successors(id);
        if succ.len() == 1 || rng.random_bool(self.partner_p) {
            succ[0]
        } else {
            *succ[1..].choose(rng).unwrap()
        }
    }

    /// `count` records of length `context`: the code then a walk from a
    /// uniformly drawn start.
    pub fn records(&self, seed: u64, count: usize, context: usize, code: u32, domain: &str) -> Vec<SequenceRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut tokens = Vec::with_capacity(context);
                tokens.push(code);
                let mut t = self.first + rng.random_range(0..self.size);
                tokens.push(t);
                while tokens.len() < context {
                    t = self.next(t, &mut rng);
                    tokens.push(t);
                }
                SequenceRecord {
                    tokens,
                    domain: domain.to_string(),
                }
            })
            .collect()
    }
}
