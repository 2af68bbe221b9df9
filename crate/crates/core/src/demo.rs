//! Generator for the bundled demo: a 2k-sentence corpus mixing chat-style
//! and news-style text, the two scorer corpora, original training pairs,
//! deployed-model outputs with live metrics, and evaluation runs.
//!
//! In the simulated deployment, live metrics track each model's accuracy on
//! chat-style samples only, so a good reweighting favours domain-like text.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{write_corpus, write_ec_dataset, write_jsonl, Document, ECExample, LiveMetricsRecord, OutputRecord, Provenance};
use crate::error::{Error, Result};
use crate::grammar::{MockInjector, MockInjectorConfig};
use crate::typo::{corrupt, KeyboardModel, TypoConfig};
use crate::util::{rng_for, stable_hash_str};

pub const DEMO_SEED: u64 = 2024;
pub const CORPUS_SIZE: usize = 2000;

pub const DEMO_CONFIG: &str = r#"seed = 17

[paths]
corpus = "corpus.jsonl"
public_corpus = "public.jsonl"
domain_corpus = "domain.jsonl"
original_train = "original_train.jsonl"
out_dir = "out"

[cluster]
k = 20
per_cluster = 10
dim = 64

[grammar]
client = "mock"
failure_rate = 0.3
concurrency = 4

[typo]
p_spatial = 0.02

[scoring]
order = 3
delta = 0.1

[reweight]
dataset = "reweight/eval.jsonl"
restarts = 4

[[reweight.metric_sets]]
name = "traffic"
outputs_dir = "reweight/traffic"
live_metrics = "reweight/traffic_live.jsonl"

[[reweight.metric_sets]]
name = "sessions"
outputs_dir = "reweight/sessions"
live_metrics = "reweight/sessions_live.jsonl"

[[reweight.validation_sets]]
name = "holdout"
outputs_dir = "reweight/holdout"
live_metrics = "reweight/holdout_live.jsonl"

[eval]
judge = "normalized"

[[eval.datasets]]
name = "original_val"
dataset = "eval/original_val.jsonl"
runs = ["eval/original_val_run1.jsonl", "eval/original_val_run2.jsonl", "eval/original_val_run3.jsonl"]

[[eval.datasets]]
name = "synthetic_val"
dataset = "eval/synthetic_val.jsonl"
runs = ["eval/synthetic_val_run1.jsonl", "eval/synthetic_val_run2.jsonl", "eval/synthetic_val_run3.jsonl"]

[mix]
ratio = "1:4"
filter_threshold = 1.0
strategy = "cont_mix_fil"
"#;

const OPENERS: [&str; 10] = ["", "hey ", "omg ", "lol ", "ok so ", "btw ", "haha ", "ugh ", "wait ", "yo "];
const CHAT_SINGULAR: [&str; 10] = [
    "my sister", "my brother", "my mom", "the dog", "our neighbor", "my roommate", "this guy at work", "the baby",
    "my boss", "the cat",
];
const CHAT_PLURAL: [&str; 6] = ["my parents", "the kids", "my friends", "our neighbors", "the guys", "my cousins"];
const PLACES: [&str; 10] = ["mall", "gym", "park", "office", "beach", "store", "party", "game", "airport", "cafe"];
const THINGS: [&str; 10] = [
    "car", "phone", "pizza", "ticket", "jacket", "charger", "playlist", "puppy", "laptop", "recipe",
];
const TIMES: [&str; 7] = ["tonight", "tomorrow", "right now", "this weekend", "later", "after work", "in the morning"];
const CHAT_TEMPLATES: [&str; 12] = [
    "{o}{S} {be} at the {place} {time}",
    "{o}do you know if {S} {have} my {thing}",
    "{o}{S} {have} a new {thing} and it is so cool",
    "{o}i think {S} {be} going to the {place} {time}",
    "{o}can you ask {S} to bring the {thing} {time}",
    "{o}{S} {do} not want to go to the {place} {time}",
    "{o}are you coming to the {place} {time} or not",
    "{o}{S} {be} so mad about the {thing} lol",
    "{o}i left my {thing} at the {place} again",
    "{o}text me when {S} {be} at the {place}",
    "{o}we should get a {thing} for {S} {time}",
    "{o}{S} {have} been at the {place} all day",
];

const FORMAL_SINGULAR: [&str; 10] = [
    "the committee", "the government", "the company", "the university", "the council", "the agency", "the museum",
    "the court", "the bank", "the ministry",
];
const FORMAL_PLURAL: [&str; 6] = [
    "the researchers", "the authorities", "the officials", "the investors", "the members", "the residents",
];
const TOPICS: [&str; 10] = [
    "economy", "climate policy", "public health", "education reform", "housing market", "energy sector",
    "trade agreement", "transport network", "water supply", "tax system",
];
const FORMAL_TEMPLATES: [&str; 9] = [
    "{S} {have} published a report on the {topic}.",
    "In {year}, {s} announced a new plan for the {topic}.",
    "{S} {be} expected to review the {topic} next year.",
    "According to the report, {s} {have} increased spending on the {topic}.",
    "{S} {have} been responsible for the {topic} since {year}.",
    "The study found that {s} {do} not support the proposed changes to the {topic}.",
    "{S} {was} founded in {year} to oversee the {topic}.",
    "Critics argue that {s} {have} failed to address the {topic}.",
    "{S} will present the findings on the {topic} in {year}.",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn conjugate(template: &str, plural: bool) -> String {
    let forms: [(&str, &str, &str); 4] = [
        ("{be}", "is", "are"),
        ("{have}", "has", "have"),
        ("{do}", "does", "do"),
        ("{was}", "was", "were"),
    ];
    let mut out = template.to_owned();
    for (slot, sing, plur) in forms {
        out = out.replace(slot, if plural { plur } else { sing });
    }
    out
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn chat_sentence(rng: &mut ChaCha8Rng) -> String {
    let plural = rng.gen_bool(0.35);
    let subject = if plural { pick(rng, &CHAT_PLURAL) } else { pick(rng, &CHAT_SINGULAR) };
    conjugate(pick(rng, &CHAT_TEMPLATES), plural)
        .replace("{o}", pick(rng, &OPENERS))
        .replace("{S}", subject)
        .replace("{place}", pick(rng, &PLACES))
        .replace("{thing}", pick(rng, &THINGS))
        .replace("{time}", pick(rng, &TIMES))
}

fn formal_sentence(rng: &mut ChaCha8Rng) -> String {
    let plural = rng.gen_bool(0.35);
    let subject = if plural { pick(rng, &FORMAL_PLURAL) } else { pick(rng, &FORMAL_SINGULAR) };
    let year = rng.gen_range(1950..2021).to_string();
    conjugate(pick(rng, &FORMAL_TEMPLATES), plural)
        .replace("{S}", &capitalize(subject))
        .replace("{s}", subject)
        .replace("{topic}", pick(rng, &TOPICS))
        .replace("{year}", &year)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    Chat,
    Formal,
}

/// `n` distinct sentences; each is chat-style with probability `p_chat`.
fn sentences(rng: &mut ChaCha8Rng, n: usize, p_chat: f64, seen: &mut BTreeSet<String>) -> Vec<(Style, String)> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let style = if rng.gen_bool(p_chat) { Style::Chat } else { Style::Formal };
        let s = match style {
            Style::Chat => chat_sentence(rng),
            Style::Formal => formal_sentence(rng),
        };
        if seen.insert(s.clone()) {
            out.push((style, s));
        }
    }
    out
}

fn docs(items: &[(Style, String)], prefix: &str) -> Vec<Document> {
    items
        .iter()
        .enumerate()
        .map(|(i, (style, text))| {
            let tag = if *style == Style::Chat { "chat" } else { "news" };
            Document::new(format!("{prefix}{i:04}"), text.clone(), tag)
        })
        .collect()
}

/// Corrupts clean sentences into EC pairs with the mock injector and the
/// typo simulator.
struct Corruptor {
    injector: MockInjector,
    typo: TypoConfig,
    keyboard: KeyboardModel,
    seed: u64,
}

impl Corruptor {
    fn new(seed: u64) -> Result<Self> {
        Ok(Self {
            injector: MockInjector::new(MockInjectorConfig::default())?,
            typo: TypoConfig {
                p_spatial: 0.03,
                ..TypoConfig::default()
            },
            keyboard: KeyboardModel::qwerty(),
            seed,
        })
    }

    fn pair(&self, id: String, clean: &str, provenance: Provenance) -> ECExample {
        let s = stable_hash_str(self.seed, &id);
        let grammar = self.injector.inject(clean, s).map(|r| r.ungrammatical).unwrap_or_else(|_| clean.to_owned());
        let cfg = TypoConfig { seed: s, ..self.typo.clone() };
        let source = corrupt(&grammar, &cfg, &self.keyboard).corrupted;
        ECExample::new(id, source, clean, provenance)
    }

    fn dataset(&self, items: &[(Style, String)], prefix: &str) -> Vec<ECExample> {
        items
            .iter()
            .enumerate()
            .map(|(i, (_, clean))| self.pair(format!("{prefix}{i:04}"), clean, Provenance::Original))
            .collect()
    }
}

/// A simulated corrector with separate top-1 accuracy per style.
#[derive(Debug, Clone, Copy)]
struct SimModel {
    chat_skill: f64,
    formal_skill: f64,
}

fn drop_word(text: &str, i: usize) -> String {
    text.split(' ').enumerate().filter(|(j, _)| *j != i).map(|(_, w)| w).collect::<Vec<_>>().join(" ")
}

/// Three ranked candidates; returns them with whether the top-1 is right.
fn candidates(rng: &mut ChaCha8Rng, ex: &ECExample, skill: f64) -> (Vec<String>, bool) {
    let words = ex.target.split(' ').count();
    let a = rng.gen_range(0..words);
    let b = (a + 1 + rng.gen_range(0..words - 1)) % words;
    let mut wrong = vec![drop_word(&ex.target, a), drop_word(&ex.target, b)];
    if ex.source != ex.target {
        wrong.insert(0, ex.source.clone());
    } else {
        wrong.push(format!("{} {}", ex.target, ex.target.split(' ').next_back().unwrap_or_default()));
    }
    let top1 = rng.gen_bool(skill);
    let cands = if top1 {
        vec![ex.target.clone(), wrong[0].clone(), wrong[1].clone()]
    } else if rng.gen_bool(0.5) {
        vec![wrong[0].clone(), ex.target.clone(), wrong[1].clone()]
    } else {
        wrong[..3].to_vec()
    };
    (cands, top1)
}

fn outputs_for(rng: &mut ChaCha8Rng, dataset: &[ECExample], styles: &[Style], m: SimModel) -> (Vec<OutputRecord>, f64, f64) {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    let records = dataset
        .iter()
        .zip(styles)
        .map(|(ex, style)| {
            let (slot, skill) = match style {
                Style::Chat => (0, m.chat_skill),
                Style::Formal => (1, m.formal_skill),
            };
            let (cands, ok) = candidates(rng, ex, skill);
            totals[slot] += 1;
            hits[slot] += usize::from(ok);
            OutputRecord {
                sample_id: ex.id.clone(),
                candidates: cands,
            }
        })
        .collect();
    let acc = |s: usize| if totals[s] == 0 { 0.0 } else { hits[s] as f64 / totals[s] as f64 };
    (records, acc(0), acc(1))
}

type MetricFn = fn(f64, f64) -> Vec<(&'static str, f64, f64)>;

/// Traffic metrics: (name, value, noise sd).
fn traffic_metrics(chat: f64, _formal: f64) -> Vec<(&'static str, f64, f64)> {
    vec![("accept_rate", 0.1 + 0.6 * chat, 0.004), ("keep_rate", 0.5 + 0.3 * chat, 0.004)]
}

fn session_metrics(chat: f64, _formal: f64) -> Vec<(&'static str, f64, f64)> {
    vec![("session_len", 30.0 + 40.0 * chat, 0.3)]
}

fn write_metric_set(
    dir: &Path,
    name: &str,
    n_models: usize,
    metrics: MetricFn,
    dataset: &[ECExample],
    styles: &[Style],
    seed: u64,
) -> Result<()> {
    let mut rng = rng_for(seed, &format!("demo/models/{name}"));
    let out_dir = dir.join("reweight").join(name);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut live = Vec::with_capacity(n_models);
    for j in 0..n_models {
        let model_id = format!("{name}_m{j:02}");
        let m = SimModel {
            chat_skill: rng.gen_range(0.15..0.9),
            formal_skill: rng.gen_range(0.15..0.9),
        };
        let (records, chat, formal) = outputs_for(&mut rng, dataset, styles, m);
        write_jsonl(&out_dir.join(format!("{model_id}.jsonl")), &records)?;
        let metrics = metrics(chat, formal)
            .into_iter()
            .map(|(k, v, sd)| {
                let noise = Normal::new(0.0, sd).expect("positive sd").sample(&mut rng);
                (k.to_owned(), v + noise)
            })
            .collect();
        live.push(LiveMetricsRecord { model_id, metrics });
    }
    write_jsonl(&dir.join("reweight").join(format!("{name}_live.jsonl")), &live)
}

/// Counts of what the generator wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleSummary {
    pub corpus: usize,
    pub public: usize,
    pub domain: usize,
    pub original_train: usize,
    pub reweight_samples: usize,
}

/// Writes the full demo bundle, including `config.toml`, into `dir`.
pub fn write_demo_bundle(dir: &Path, seed: u64) -> Result<BundleSummary> {
    for sub in ["", "reweight", "eval"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut seen = BTreeSet::new();
    let mut rng = rng_for(seed, "demo/text");
    let corpus = sentences(&mut rng, CORPUS_SIZE, 0.5, &mut seen);
    let public = sentences(&mut rng, 1500, 0.0, &mut seen);
    let domain = sentences(&mut rng, 1500, 1.0, &mut seen);
    let original = sentences(&mut rng, 400, 1.0, &mut seen);
    let reweight = sentences(&mut rng, 150, 0.5, &mut seen);
    let original_val = sentences(&mut rng, 120, 1.0, &mut seen);
    let synthetic_val = sentences(&mut rng, 120, 0.5, &mut seen);

    write_corpus(&docs(&corpus, "d"), &dir.join("corpus.jsonl"))?;
    write_corpus(&docs(&public, "p"), &dir.join("public.jsonl"))?;
    write_corpus(&docs(&domain, "f"), &dir.join("domain.jsonl"))?;

    let corruptor = Corruptor::new(seed)?;
    write_ec_dataset(&corruptor.dataset(&original, "o"), &dir.join("original_train.jsonl"))?;

    let rw = corruptor.dataset(&reweight, "rw");
    let rw_styles: Vec<Style> = reweight.iter().map(|(s, _)| *s).collect();
    write_ec_dataset(&rw, &dir.join("reweight/eval.jsonl"))?;
    write_metric_set(dir, "traffic", 8, traffic_metrics, &rw, &rw_styles, seed)?;
    write_metric_set(dir, "sessions", 6, session_metrics, &rw, &rw_styles, seed)?;
    write_metric_set(dir, "holdout", 4, traffic_metrics, &rw, &rw_styles, seed)?;

    for (name, items, prefix) in [("original_val", &original_val, "ov"), ("synthetic_val", &synthetic_val, "sv")] {
        let ds = corruptor.dataset(items, prefix);
        let styles: Vec<Style> = items.iter().map(|(s, _)| *s).collect();
        write_ec_dataset(&ds, &dir.join(format!("eval/{name}.jsonl")))?;
        let mut rng = rng_for(seed, &format!("demo/eval/{name}"));
        for run in 1..=3 {
            let m = SimModel {
                chat_skill: 0.7,
                formal_skill: 0.5,
            };
            let (records, _, _) = outputs_for(&mut rng, &ds, &styles, m);
            write_jsonl(&dir.join(format!("eval/{name}_run{run}.jsonl")), &records)?;
        }
    }

    let cfg = dir.join("config.toml");
    fs::write(&cfg, DEMO_CONFIG).map_err(|e| Error::io(&cfg, e))?;
    Ok(BundleSummary {
        corpus: corpus.len(),
        public: public.len(),
        domain: domain.len(),
        original_train: original.len(),
        reweight_samples: rw.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;

    #[test]
    fn templates_agree_in_number() {
        assert_eq!(conjugate("{S} {be} here and {have} it", false), "{S} is here and has it");
        assert_eq!(conjugate("{S} {was} there", true), "{S} were there");
    }

    #[test]
    fn demo_config_parses_and_sentences_are_distinct() {
        PipelineConfig::from_toml(DEMO_CONFIG).unwrap();
        let mut rng = rng_for(1, "t");
        let mut seen = BTreeSet::new();
        let s = sentences(&mut rng, 300, 0.5, &mut seen);
        let distinct: BTreeSet<&String> = s.iter().map(|(_, t)| t).collect();
        assert_eq!(distinct.len(), 300);
        assert!(s.iter().any(|(st, _)| *st == Style::Chat) && s.iter().any(|(st, _)| *st == Style::Formal));
    }

    #[test]
    fn wrong_candidates_never_equal_target() {
        let mut rng = rng_for(3, "t");
        let ex = ECExample::new("a", "the dog are here", "the dog is here", Provenance::Original);
        for _ in 0..200 {
            let (c, ok) = candidates(&mut rng, &ex, 0.3);
            assert_eq!(c.len(), 3);
            assert_eq!(c[0] == ex.target, ok);
            assert!(c.iter().filter(|x| **x == ex.target).count() <= 1);
        }
    }
}
