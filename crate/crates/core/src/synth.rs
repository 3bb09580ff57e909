//! Synthetic query/code corpora with a controllable amount of shared signal.
//!
//! Every pair draws a handful of topic words. The query keeps a few of them,
//! the code snippet uses all of them as identifier parts, and each emitted
//! token is independently swapped for a random vocabulary word with
//! probability `noise`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};
use crate::io::{Corpus, CorpusRecord, Split};
use crate::rng::{self, label, Rng};

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "pl",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "n", "r", "s", "x", "l"];

const KEYWORDS: &[&str] = &["def", "return", "self", "if", "for", "in", "None", "value", "result"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub pairs: usize,
    pub vocab: usize,
    pub noise: f64,
    pub seed: u64,
    pub topic_words: (usize, usize),
    pub query_words: (usize, usize),
    /// Zipf exponent for topic-word popularity.
    pub zipf: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pairs: 2000,
            vocab: 1000,
            noise: 0.3,
            seed: 0,
            topic_words: (4, 7),
            query_words: (3, 5),
            zipf: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs < 1 {
            return Err(Error::config("synthetic corpus needs at least one pair"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocabulary needs at least two words"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise rate must lie in [0, 1], got {}", self.noise)));
        }
        let (tl, th) = self.topic_words;
        let (ql, qh) = self.query_words;
        if tl < 1 || tl > th || ql < 1 || ql > qh {
            return Err(Error::config("word-count ranges must satisfy 1 <= low <= high"));
        }
        if !(self.zipf > 0.0) {
            return Err(Error::config("zipf exponent must be positive"));
        }
        Ok(())
    }
}

/// Deterministic pronounceable pseudo-words, all distinct.
pub fn vocabulary(size: usize, rng: &mut Rng) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let syllables = 2 + (rng.next_u32() % 2) as usize;
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(NUCLEI.choose(rng).unwrap());
            w.push_str(CODAS.choose(rng).unwrap());
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn render_code(words: &[&str], rng: &mut Rng) -> String {
    let mut chunks = words.chunks(2);
    let name = chunks.next().map(|c| c.join("_")).unwrap_or_default();
    let mut body = Vec::new();
    for chunk in chunks {
        let ident = if rng.random::<bool>() {
            chunk
                .iter()
                .enumerate()
                .map(|(i, w)| if i == 0 { w.to_string() } else { capitalize(w) })
                .collect::<String>()
        } else {
            chunk.join("_")
        };
        let kw = KEYWORDS.choose(rng).unwrap();
        body.push(format!("    {kw} {ident}"));
    }
    format!("def {name}(self):\n{}\n    return result", body.join("\n"))
}

pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut vocab_rng = rng::stream(cfg.seed, &[label::SYNTH, 0]);
    let vocab = vocabulary(cfg.vocab, &mut vocab_rng);
    let zipf = Zipf::new(cfg.vocab as f64, cfg.zipf).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng::stream(cfg.seed, &[label::SYNTH, 1]);
    let width = cfg.pairs.to_string().len().max(5);

    let mut records = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let n_topic = rng.random_range(cfg.topic_words.0..=cfg.topic_words.1);
        let mut topic: Vec<usize> = Vec::with_capacity(n_topic);
        while topic.len() < n_topic {
            let w = zipf.sample(&mut rng) as usize - 1;
            if !topic.contains(&w) {
                topic.push(w);
            }
        }
        let n_query = rng.random_range(cfg.query_words.0..=cfg.query_words.1).min(n_topic);
        let mut query_pick = topic.clone();
        query_pick.shuffle(&mut rng);
        query_pick.truncate(n_query);

        let noisy = |w: usize, rng: &mut Rng| {
            if rng.random::<f64>() < cfg.noise {
                rng.random_range(0..cfg.vocab)
            } else {
                w
            }
        };
        let query_words: Vec<&str> = query_pick
            .iter()
            .map(|&w| vocab[noisy(w, &mut rng)].as_str())
            .collect();
        let code_words: Vec<&str> = topic
            .iter()
            .map(|&w| vocab[noisy(w, &mut rng)].as_str())
            .collect();
        let code = render_code(&code_words, &mut rng);
        let id = format!("pair-{i:0width$}");
        let split = Split::from_id(&id);
        records.push(CorpusRecord::text(id, split, query_words.join(" "), code));
    }
    Ok(Corpus { records })
}
