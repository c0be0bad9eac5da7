//! Deterministic synthetic English-like corpus for desk-scale runs.
//!
//! Documents have a topic that biases word choice, nouns carry a number
//! class that verbs and determiners must agree with (sometimes across a
//! relative clause), and adjectives favour fixed partners. That gives a
//! masked LM local and longer-range structure to learn.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub target_bytes: usize,
    pub topics: usize,
    pub nouns_per_topic: usize,
    pub verbs_per_topic: usize,
    pub adjectives_per_topic: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            target_bytes: 1_000_000,
            topics: 24,
            nouns_per_topic: 24,
            verbs_per_topic: 12,
            adjectives_per_topic: 8,
            seed: 0,
        }
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr",
];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 5] = ["", "n", "r", "l", "s"];

/// Distinct pseudo-words. Word classes get suffixes built from letters the
/// syllables never use, so inflected forms cannot collide.
struct WordMint {
    next: usize,
}

impl WordMint {
    fn word(&mut self) -> String {
        let mut i = self.next;
        self.next += 1;
        // Two syllables in mixed radix; a third appears once the pairs run out.
        let per = ONSETS.len() * NUCLEI.len() * CODAS.len();
        let mut w = String::new();
        loop {
            let s = i % per;
            w.push_str(ONSETS[s % ONSETS.len()]);
            w.push_str(NUCLEI[(s / ONSETS.len()) % NUCLEI.len()]);
            w.push_str(CODAS[s / (ONSETS.len() * NUCLEI.len())]);
            i /= per;
            if i == 0 {
                break;
            }
            i -= 1;
        }
        w
    }
}

struct Topic {
    nouns: Vec<(String, String)>,
    verbs: Vec<(String, String)>,
    adjectives: Vec<String>,
    partner: Vec<usize>,
}

struct Lexicon {
    topics: Vec<Topic>,
    adverbs: Vec<String>,
    preps: Vec<String>,
}

fn zipf_index<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    // Inverse-CDF on weights 1/(k+1).
    let total: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for k in 0..n {
        u -= 1.0 / (k + 1) as f64;
        if u <= 0.0 {
            return k;
        }
    }
    n - 1
}

impl Lexicon {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut mint = WordMint { next: 0 };
        let topics = (0..cfg.topics)
            .map(|_| {
                let nouns: Vec<_> = (0..cfg.nouns_per_topic)
                    .map(|_| {
                        let w = mint.word();
                        (w.clone(), format!("{w}ox"))
                    })
                    .collect();
                let verbs = (0..cfg.verbs_per_topic)
                    .map(|_| {
                        let w = mint.word();
                        (format!("{w}ey"), format!("{w}ew"))
                    })
                    .collect();
                let adjectives: Vec<_> = (0..cfg.adjectives_per_topic).map(|_| format!("{}ich", mint.word())).collect();
                let partner = (0..cfg.adjectives_per_topic)
                    .map(|_| rng.random_range(0..cfg.nouns_per_topic))
                    .collect();
                Topic {
                    nouns,
                    verbs,
                    adjectives,
                    partner,
                }
            })
            .collect();
        let adverbs = (0..30).map(|_| format!("{}ly", mint.word())).collect();
        let preps = (0..8).map(|_| format!("{}oh", mint.word())).collect();
        Lexicon {
            topics,
            adverbs,
            preps,
        }
    }
}

struct Writer<'a> {
    lex: &'a Lexicon,
    topic: usize,
    out: Vec<&'a str>,
}

impl<'a> Writer<'a> {
    fn topic_of<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a Topic {
        if rng.random::<f64>() < 0.1 {
            &self.lex.topics[rng.random_range(0..self.lex.topics.len())]
        } else {
            &self.lex.topics[self.topic]
        }
    }

    /// Pushes a noun phrase and returns whether it is plural.
    fn noun_phrase<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        let t = self.topic_of(rng);
        let plural = rng.random::<f64>() < 0.4;
        let (noun, with_adj) = if rng.random::<f64>() < 0.35 {
            let a = zipf_index(rng, t.adjectives.len());
            (t.partner[a], Some(a))
        } else {
            (zipf_index(rng, t.nouns.len()), None)
        };
        self.out.push(match (plural, rng.random::<f64>() < 0.5) {
            (false, true) => "the",
            (false, false) => "a",
            (true, true) => "the",
            (true, false) => "some",
        });
        if let Some(a) = with_adj {
            self.out.push(&t.adjectives[a]);
        }
        let (s, p) = &t.nouns[noun];
        self.out.push(if plural { p } else { s });
        plural
    }

    fn verb<R: Rng + ?Sized>(&mut self, rng: &mut R, plural: bool) {
        let t = self.topic_of(rng);
        let (s, p) = &t.verbs[zipf_index(rng, t.verbs.len())];
        self.out.push(if plural { p } else { s });
    }

    fn sentence<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let form = rng.random_range(0..10);
        if form == 0 {
            self.out.push(&self.lex.adverbs[zipf_index(rng, self.lex.adverbs.len())]);
            self.out.push(",");
        }
        let subject = self.noun_phrase(rng);
        if form >= 7 {
            // Relative clause: the main verb agrees with the distant subject.
            self.out.push("that");
            let inner = self.noun_phrase(rng);
            self.verb(rng, inner);
        }
        self.verb(rng, subject);
        self.noun_phrase(rng);
        if rng.random::<f64>() < 0.5 {
            self.out.push(&self.lex.preps[zipf_index(rng, self.lex.preps.len())]);
            self.noun_phrase(rng);
        }
        self.out.push(".");
    }
}

/// Generates roughly `target_bytes` of text, one document per line.
pub fn generate(cfg: &SynthConfig) -> Result<String> {
    if cfg.topics == 0 || cfg.nouns_per_topic == 0 || cfg.verbs_per_topic == 0 || cfg.adjectives_per_topic == 0 {
        return Err(Error::Config("synthetic lexicon sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = Lexicon::new(cfg, &mut rng);
    let mut text = String::with_capacity(cfg.target_bytes + 1024);
    while text.len() < cfg.target_bytes {
        let mut w = Writer {
            lex: &lex,
            topic: rng.random_range(0..cfg.topics),
            out: Vec::new(),
        };
        for _ in 0..rng.random_range(4..=12) {
            w.sentence(&mut rng);
        }
        text.push_str(&w.out.join(" "));
        text.push('\n');
    }
    Ok(text)
}
