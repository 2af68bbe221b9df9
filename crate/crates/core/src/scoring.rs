//! Sentence scores from two language models: one trained on public text
//! (`s_p`) and one on deployment-domain text (`s_f`). The bundled model is a
//! word n-gram with additive smoothing; externally computed scores can be
//! imported instead.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::data::{Document, ECExample, ScoredSample};
use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Average natural-log likelihood per word.
pub trait Scorer: Send + Sync {
    fn score(&self, sentence: &str) -> f64;
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramScorer {
    order: usize,
    delta: f64,
    vocab: BTreeSet<String>,
    /// context (n-1 words joined by a space) -> next word -> count
    counts: BTreeMap<String, BTreeMap<String, u64>>,
    /// Lookup cache of context totals.
    totals: HashMap<String, u64>,
}

impl NGramScorer {
    pub fn train(corpus: &[Document], order: usize, delta: f64) -> Result<Self> {
        let texts: Vec<&str> = corpus.iter().map(|d| d.text.as_str()).collect();
        Self::train_texts(&texts, order, delta)
    }

    pub fn train_texts(texts: &[&str], order: usize, delta: f64) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::invalid("cannot train an n-gram model on an empty corpus"));
        }
        if !(1..=5).contains(&order) {
            return Err(Error::invalid(format!("n-gram order must be in 1..=5, got {order}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::invalid("smoothing delta must be positive"));
        }
        let mut vocab = BTreeSet::from([EOS.to_owned()]);
        let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for text in texts {
            let words = tokenize(text);
            vocab.extend(words.iter().cloned());
            let padded = pad(&words, order);
            for i in (order - 1)..padded.len() {
                let ctx = padded[i + 1 - order..i].join(" ");
                *counts.entry(ctx).or_default().entry(padded[i].clone()).or_default() += 1;
            }
        }
        let totals = counts.iter().map(|(c, ws)| (c.clone(), ws.values().sum())).collect();
        Ok(Self {
            order,
            delta,
            vocab,
            counts,
            totals,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Vocabulary size including `</s>` and the unknown-word slot.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn counts(&self) -> &BTreeMap<String, BTreeMap<String, u64>> {
        &self.counts
    }

    fn map_word<'a>(&self, w: &'a str) -> &'a str {
        if w == BOS || self.vocab.contains(w) {
            w
        } else {
            UNK
        }
    }

    /// P(word | context) where `context` holds the preceding `order - 1`
    /// tokens (already lowercased, `<s>` padded).
    pub fn prob(&self, context: &[&str], word: &str) -> f64 {
        let ctx: Vec<&str> = context.iter().map(|w| self.map_word(w)).collect();
        let ctx = ctx.join(" ");
        let word = self.map_word(word);
        let c_ctx = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        let c = self.counts.get(&ctx).and_then(|ws| ws.get(word)).copied().unwrap_or(0) as f64;
        (c + self.delta) / (c_ctx + self.delta * self.vocab_size() as f64)
    }

    /// Every outcome a distribution is defined over: vocabulary plus `<unk>`.
    pub fn outcomes(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(String::as_str).chain(std::iter::once(UNK))
    }

    pub fn seen_contexts(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }
}

fn pad(words: &[String], order: usize) -> Vec<String> {
    let mut out = vec![BOS.to_owned(); order - 1];
    out.extend(words.iter().cloned());
    out.push(EOS.to_owned());
    out
}

impl Scorer for NGramScorer {
    /// Mean ln P over the sentence's words (the end marker is excluded).
    /// Returns 0 for a sentence without tokens.
    fn score(&self, sentence: &str) -> f64 {
        let words = tokenize(sentence);
        if words.is_empty() {
            return 0.0;
        }
        let padded = pad(&words, self.order);
        let n = self.order;
        let total: f64 = (n - 1..n - 1 + words.len())
            .map(|i| {
                let ctx: Vec<&str> = padded[i + 1 - n..i].iter().map(String::as_str).collect();
                self.prob(&ctx, &padded[i]).ln()
            })
            .sum();
        total / words.len() as f64
    }
}

/// Scores each example's clean target with both models.
pub fn score_dataset(examples: &[ECExample], public: &dyn Scorer, domain: &dyn Scorer) -> Vec<ScoredSample> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = examples.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|ex| ScoredSample {
                            sample_id: ex.id.clone(),
                            s_p: public.score(&ex.target),
                            s_f: domain.score(&ex.target),
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("scoring worker panicked")).collect()
    })
}

/// Aligns externally computed scores with `examples` by id.
pub fn align_scores(examples: &[ECExample], scores: &[ScoredSample]) -> Result<Vec<ScoredSample>> {
    let by_id: HashMap<&str, &ScoredSample> = scores.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    examples
        .iter()
        .map(|ex| {
            let s = by_id
                .get(ex.id.as_str())
                .ok_or_else(|| Error::Misaligned(format!("no score for sample {:?}", ex.id)))?;
            if !(s.s_p.is_finite() && s.s_f.is_finite()) {
                return Err(Error::invalid(format!("non-finite score for sample {:?}", ex.id)));
            }
            Ok((*s).clone())
        })
        .collect()
}

/// Keep-or-drop baseline: 1 iff `s_f > s_p` and `s_f > -5`.
pub fn heuristic_weight(s: &ScoredSample) -> f64 {
    if s.s_f > s.s_p && s.s_f > -5.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use proptest::prelude::*;

    fn sample(s_f: f64, s_p: f64) -> ScoredSample {
        ScoredSample {
            sample_id: "x".into(),
            s_p,
            s_f,
        }
    }

    #[test]
    fn heuristic_truth_table() {
        assert_eq!(heuristic_weight(&sample(-4.0, -5.0)), 1.0);
        assert_eq!(heuristic_weight(&sample(-6.0, -7.0)), 0.0);
        assert_eq!(heuristic_weight(&sample(-3.0, -3.0)), 0.0);
        assert_eq!(heuristic_weight(&sample(-5.0, -9.0)), 0.0);
    }

    #[test]
    fn bigram_probability_by_hand() {
        let delta = 0.5;
        let m = NGramScorer::train_texts(&["a b"], 2, delta).unwrap();
        // vocab {a, b, </s>} plus UNK
        let v = 4.0;
        assert_eq!(m.vocab_size(), 4);
        assert!((m.prob(&["a"], "b") - (1.0 + delta) / (1.0 + delta * v)).abs() < 1e-15);
        assert!((m.prob(&["a"], "zzz") - delta / (1.0 + delta * v)).abs() < 1e-15);
        assert!((m.prob(&["qq"], "b") - 1.0 / v).abs() < 1e-15);
        let expected = (((1.0 + delta) / (1.0 + delta * v)).ln() * 2.0) / 2.0;
        assert!((m.score("A  B") - expected).abs() < 1e-12);
    }

    #[test]
    fn unseen_words_score_finite_negative() {
        let m = NGramScorer::train_texts(&["the cat sat", "a dog ran"], 3, 0.1).unwrap();
        let s = m.score("zebra quantum fjord");
        assert!(s.is_finite() && s < 0.0);
        assert_eq!(m.score("   "), 0.0);
    }

    #[test]
    fn training_errors() {
        assert!(NGramScorer::train_texts(&[], 2, 0.1).is_err());
        assert!(NGramScorer::train_texts(&["a"], 0, 0.1).is_err());
        assert!(NGramScorer::train_texts(&["a"], 6, 0.1).is_err());
        assert!(NGramScorer::train_texts(&["a"], 2, 0.0).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let texts = ["the cat sat on the mat", "the dog sat"];
        let a = NGramScorer::train_texts(&texts, 3, 0.1).unwrap();
        let b = NGramScorer::train_texts(&texts, 3, 0.1).unwrap();
        assert_eq!(a.counts(), b.counts());
    }

    fn examples(targets: &[&str]) -> Vec<ECExample> {
        targets
            .iter()
            .enumerate()
            .map(|(i, t)| ECExample::new(format!("s{i}"), *t, *t, Provenance::Original))
            .collect()
    }

    #[test]
    fn same_scorer_gives_equal_scores() {
        let m = NGramScorer::train_texts(&["hello there", "good morning"], 2, 0.1).unwrap();
        let ex = examples(&["hello morning", "there good", "new words"]);
        let s = score_dataset(&ex, &m, &m);
        assert!(s.iter().all(|s| s.s_p == s.s_f));
        assert_eq!(s, score_dataset(&ex, &m, &m));
        assert_eq!(s.iter().map(|s| s.sample_id.as_str()).collect::<Vec<_>>(), ["s0", "s1", "s2"]);
    }

    #[test]
    fn domain_model_prefers_domain_text() {
        let chat = [
            "lol are you coming tonight",
            "omg yes see you soon",
            "haha ok sounds good",
            "are you free tomorrow lol",
            "ok see you tonight haha",
            "yes omg that was so good",
        ];
        let formal = [
            "the committee approved the annual budget",
            "the report describes the quarterly results",
            "the board will review the proposal",
            "the results were approved by the committee",
            "the annual report was published",
            "the proposal describes the budget",
        ];
        let domain = NGramScorer::train_texts(&chat, 3, 0.1).unwrap();
        let public = NGramScorer::train_texts(&formal, 3, 0.1).unwrap();
        let chat_test = examples(&["lol see you tomorrow", "ok are you coming", "haha yes so good"]);
        let formal_test = examples(&["the board approved the report", "the committee will review the results"]);
        let gap = |ex: &[ECExample]| {
            let s = score_dataset(ex, &public, &domain);
            s.iter().map(|s| s.s_f - s.s_p).sum::<f64>() / s.len() as f64
        };
        assert!(gap(&chat_test) > gap(&formal_test));
    }

    #[test]
    fn align_reports_missing_ids() {
        let ex = examples(&["a", "b"]);
        let scores = vec![ScoredSample {
            sample_id: "s1".into(),
            s_p: -1.0,
            s_f: -2.0,
        }];
        assert!(matches!(align_scores(&ex, &scores), Err(Error::Misaligned(_))));
        let mut full = scores.clone();
        full.push(ScoredSample {
            sample_id: "s0".into(),
            s_p: -3.0,
            s_f: -4.0,
        });
        let aligned = align_scores(&ex, &full).unwrap();
        assert_eq!(aligned[0].sample_id, "s0");
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..8).prop_map(|w| w.join(" ")), 1..10)
    }

    proptest! {
        #[test]
        fn distributions_normalize(corpus in corpus_strategy(), order in 1usize..=4, delta in 0.01f64..2.0) {
            let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
            let m = NGramScorer::train_texts(&refs, order, delta).unwrap();
            let contexts: Vec<String> = m.seen_contexts().map(str::to_owned).collect();
            for ctx in contexts.iter().take(10) {
                let words: Vec<&str> = if ctx.is_empty() { vec![] } else { ctx.split(' ').collect() };
                let total: f64 = m.outcomes().map(|w| m.prob(&words, w)).sum();
                prop_assert!((total - 1.0).abs() < 1e-9, "context {:?} sums to {}", ctx, total);
            }
        }

        #[test]
        fn score_is_an_average(words in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 40..80)) {
            let m = NGramScorer::train_texts(&["a b c d e", "f e d c b a", "a c e"], 2, 0.5).unwrap();
            let s = words.join(" ");
            let doubled = format!("{s} {s}");
            let (one, two) = (m.score(&s), m.score(&doubled));
            // Only the single junction bigram differs between the halves.
            prop_assert!((one - two).abs() < 5.0 / words.len() as f64);
        }
    }
}
