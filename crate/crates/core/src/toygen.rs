//! Synthetic, separable corpora for the toy encoder.
//!
//! A fixed set of "components" each has several synonym words made of random
//! letters, so synonyms share no surface form and only training can tie them
//! together. A caption mentions a few components plus a filler word; its pair
//! partner names the same components with different synonyms, either as a
//! caption or as statements. A benchmark positive paraphrases one of the
//! caption's components and the negatives name components the caption does
//! not mention, all in one statement template.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{CaptionPair, Category, Ted6kInstance};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusConfig {
    pub seed: u64,
    pub components: usize,
    pub synonyms: usize,
    /// Components mentioned per caption.
    pub mentions: usize,
    pub pairs: usize,
    pub instances: usize,
    pub negatives: usize,
    /// Random filler words mixed into captions.
    pub fillers: usize,
    /// Synonym words have `word_len - 1 ..= word_len + 1` letters.
    pub word_len: usize,
    /// Probability that a pair partner is written as statements.
    pub statement_prob: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 2,
            components: 8,
            synonyms: 2,
            mentions: 1,
            pairs: 512,
            instances: 400,
            negatives: 3,
            fillers: 4,
            word_len: 10,
            statement_prob: 0.5,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.synonyms < 2 {
            return Err(Error::Config("paraphrases need at least 2 synonyms per component".into()));
        }
        if self.mentions == 0 || self.negatives == 0 || self.components < self.mentions + self.negatives {
            return Err(Error::Config(format!(
                "{} mentions and {} negatives need at least that many components (have {})",
                self.mentions, self.negatives, self.components
            )));
        }
        if self.fillers == 0 {
            return Err(Error::Config("filler vocabulary is empty".into()));
        }
        if self.word_len < 4 {
            return Err(Error::Config(format!("word length {} is too short", self.word_len)));
        }
        if !(0.0..=1.0).contains(&self.statement_prob) {
            return Err(Error::Config(format!("statement probability {} outside [0, 1]", self.statement_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    /// `lexicon[c]` lists the synonyms of component `c`.
    pub lexicon: Vec<Vec<String>>,
    pub pairs: Vec<CaptionPair>,
    pub bench: Vec<Ted6kInstance>,
    /// Components mentioned by each pair.
    pub pair_components: Vec<Vec<usize>>,
    /// Component named by each benchmark positive.
    pub bench_components: Vec<usize>,
}

const STATEMENT_TEMPLATES: [&str; 3] = ["there is a {w}", "the image shows a {w}", "a {w} is visible"];

fn word<R: Rng>(rng: &mut R, len: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.gen_range(len);
    (0..n).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
}

pub fn generate(cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = std::collections::HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng, len: std::ops::RangeInclusive<usize>| loop {
        let w = word(rng, len.clone());
        if seen.insert(w.clone()) {
            return w;
        }
    };
    let lexicon: Vec<Vec<String>> = (0..cfg.components)
        .map(|_| (0..cfg.synonyms).map(|_| fresh(&mut rng, cfg.word_len - 1..=cfg.word_len + 1)).collect())
        .collect();
    let fillers: Vec<String> = (0..cfg.fillers).map(|_| fresh(&mut rng, 3..=5)).collect();
    let all: Vec<usize> = (0..cfg.components).collect();

    // Words in random order plus one filler word at a random slot.
    let caption = |rng: &mut ChaCha8Rng, words: &[&String]| {
        let mut parts: Vec<&str> = words.iter().map(|w| w.as_str()).collect();
        parts.shuffle(rng);
        let slot = rng.gen_range(0..=parts.len());
        parts.insert(slot, fillers.choose(rng).expect("fillers"));
        parts.join(" ")
    };
    // Two distinct synonyms per component.
    let synonym_pairs = |rng: &mut ChaCha8Rng, comps: &[usize]| -> (Vec<&String>, Vec<&String>) {
        comps
            .iter()
            .map(|&c| {
                let two: Vec<&String> = lexicon[c].choose_multiple(rng, 2).collect();
                (two[0], two[1])
            })
            .unzip()
    };

    let mut pairs = Vec::with_capacity(cfg.pairs);
    let mut pair_components = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let comps: Vec<usize> = all.choose_multiple(&mut rng, cfg.mentions).copied().collect();
        let (a, b) = synonym_pairs(&mut rng, &comps);
        let caption_a = caption(&mut rng, &a);
        let caption_b = if rng.gen_bool(cfg.statement_prob) {
            let t = STATEMENT_TEMPLATES.choose(&mut rng).expect("templates");
            b.iter().map(|w| t.replace("{w}", w)).collect::<Vec<_>>().join(" and ")
        } else {
            caption(&mut rng, &b)
        };
        pairs.push(CaptionPair {
            id: format!("pair-{i:04}"),
            caption_a,
            caption_b,
            source: format!("img-{i:04}"),
        });
        pair_components.push(comps);
    }

    let mut bench = Vec::with_capacity(cfg.instances);
    let mut bench_components = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let comps: Vec<usize> = all.choose_multiple(&mut rng, cfg.mentions).copied().collect();
        let (cap_words, para_words) = synonym_pairs(&mut rng, &comps);
        let k = rng.gen_range(0..comps.len());
        let template = STATEMENT_TEMPLATES.choose(&mut rng).expect("templates");
        let absent: Vec<usize> = all.iter().copied().filter(|c| !comps.contains(c)).collect();
        let negatives = absent
            .choose_multiple(&mut rng, cfg.negatives)
            .map(|&o| template.replace("{w}", lexicon[o].choose(&mut rng).expect("synonyms")))
            .collect();
        bench.push(Ted6kInstance {
            id: format!("toy-{i:04}"),
            caption: caption(&mut rng, &cap_words),
            positive: template.replace("{w}", para_words[k]),
            negatives,
            category: Category::ALL[i % Category::ALL.len()],
        });
        bench_components.push(comps[k]);
    }
    Ok(ToyCorpus {
        lexicon,
        pairs,
        bench,
        pair_components,
        bench_components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_validity() {
        let c = generate(&ToyCorpusConfig::default()).unwrap();
        assert_eq!(c.pairs.len(), 512);
        assert_eq!(c.bench.len(), 400);
        assert!(c.pairs.iter().all(|p| p.validate().is_ok()));
        assert!(c.bench.iter().all(|b| b.validate().is_ok() && b.negatives.len() == 3));
        for cat in Category::ALL {
            assert!(c.bench.iter().any(|b| b.category == cat));
        }
    }

    #[test]
    fn positives_paraphrase_and_negatives_differ() {
        let c = generate(&ToyCorpusConfig::default()).unwrap();
        let components_of = |text: &str| -> Vec<usize> {
            (0..c.lexicon.len())
                .filter(|&k| c.lexicon[k].iter().any(|w| text.split(' ').any(|t| t == w)))
                .collect()
        };
        for (inst, &comp) in c.bench.iter().zip(&c.bench_components) {
            let mentioned = components_of(&inst.caption);
            assert_eq!(mentioned.len(), 1);
            assert!(mentioned.contains(&comp));
            assert_eq!(components_of(&inst.positive), vec![comp]);
            assert!(
                !inst.positive.split(' ').any(|t| inst.caption.split(' ').any(|u| u == t) && t.len() >= 5),
                "positive repeats a caption word"
            );
            for n in &inst.negatives {
                let named = components_of(n);
                assert_eq!(named.len(), 1);
                assert!(!mentioned.contains(&named[0]));
            }
        }
        for (p, comps) in c.pairs.iter().zip(&c.pair_components) {
            let mut sorted = comps.clone();
            sorted.sort_unstable();
            assert_eq!(components_of(&p.caption_a), sorted);
            assert_eq!(components_of(&p.caption_b), sorted);
            assert_ne!(p.caption_a, p.caption_b);
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&ToyCorpusConfig::default()).unwrap();
        assert_eq!(a, generate(&ToyCorpusConfig::default()).unwrap());
        let b = generate(&ToyCorpusConfig { seed: 8, ..ToyCorpusConfig::default() }).unwrap();
        assert_ne!(a.pairs, b.pairs);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&ToyCorpusConfig { synonyms: 1, ..ToyCorpusConfig::default() }).is_err());
        assert!(generate(&ToyCorpusConfig { components: 3, ..ToyCorpusConfig::default() }).is_err());
        assert!(generate(&ToyCorpusConfig { statement_prob: 1.5, ..ToyCorpusConfig::default() }).is_err());
    }
}
