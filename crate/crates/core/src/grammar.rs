//! Grammar-error injection through an LLM prompt, structured response
//! parsing, roundtrip-consistency filtration and error statistics.
//!
//! The prompt asks the model to play a teacher, list likely errors for the
//! given sentence(s), apply them, describe them, and finally correct them
//! again. Responses use bold markers:
//!
//! ```text
//! **Ungrammatical sentences**: Yesterday I went to a store that have nice furnitures.
//! **Error 1: Subject-verb agreement error**: "have" should be "has" ...
//! **Error 2: Pluralization error**: "furnitures" should be "furniture" ...
//! **Corrected sentences**: Yesterday I went to a store that has nice furniture.
//! ```
//!
//! Only pairs whose corrected text reproduces the original clean text are
//! kept.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{nfc, nfc_eq, ECExample, ErrorAnnotation, ErrorCategory, Provenance};
use crate::error::{Error, Result};
use crate::llm::{HttpClientConfig, HttpCompletionClient};
use crate::util::rng_for;

pub const UNGRAMMATICAL_MARKER: &str = "**Ungrammatical sentences**";
pub const CORRECTED_MARKER: &str = "**Corrected sentences**";

/// Common errors listed to the model before the sentence.
pub const ERROR_CATALOG: [&str; 10] = [
    "subject-verb agreement (\"she have\" instead of \"she has\")",
    "wrong verb tense or verb form (\"I have went\" instead of \"I have gone\")",
    "missing words, especially articles, auxiliaries and prepositions",
    "singular/plural noun errors (\"two apple\", \"furnitures\")",
    "capitalization errors (lowercase sentence start, lowercase \"i\")",
    "word order errors (\"what you are doing\" in a question)",
    "wrong or unnecessary articles (\"a information\", \"the Paris\")",
    "wrong prepositions (\"married with\", \"arrive to\")",
    "misspelled common words (\"recieve\", \"definately\")",
    "pronoun case errors (\"me and him went\")",
];

const SENTENCE_SLOT: &str = "{sentence}";

/// The full prompt template; `{sentence}` is replaced by the escaped text.
pub fn prompt_template() -> String {
    let catalog: Vec<String> = ERROR_CATALOG
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {e}", i + 1))
        .collect();
    format!(
        "Imagine that you are an English school teacher. Your goal is to teach high school students English grammar. \
Here are some common grammatical errors:\n{catalog}\n\n\
Given the following sentence(s):\n{SENTENCE_SLOT}\n\
What grammatical errors are the students likely to make?\n\n\
Now apply these grammatical errors to the original sentence(s), and generate the ungrammatical sentence(s). \
Do not modify the original sentence(s) except applying the grammatical errors.\n\n\
The output should be in the following format:\n\
{UNGRAMMATICAL_MARKER}: <the ungrammatical sentence(s)>\n\
**Error 1: <error type>**: <what was changed and why it is wrong>\n\
**Error 2: <error type>**: <what was changed and why it is wrong>\n\
(one line per added error)\n\n\
Finally, correct the grammatical errors in the generated ungrammatical sentence(s). \
Do not modify the sentence(s) except correcting the grammatical errors. \
The output should be in the following format:\n\
{CORRECTED_MARKER}: <the corrected sentence(s)>\n",
        catalog = catalog.join("\n"),
    )
}

/// Escapes `\` and `*` so text can never form a `**` marker.
pub fn escape_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c == '\\' || c == '*' {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

pub fn unescape_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(next) = chars.next() {
                if next != '\\' && next != '*' {
                    out.push('\\');
                }
                out.push(next);
                continue;
            }
        }
        out.push(c);
    }
    out
}

pub fn render_prompt(clean_text: &str) -> Result<String> {
    if clean_text.trim().is_empty() {
        return Err(Error::invalid("cannot render a prompt for empty text"));
    }
    Ok(prompt_template().replacen(SENTENCE_SLOT, &escape_markers(clean_text), 1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionRequest {
    pub example_id: String,
    pub clean_text: String,
    pub prompt: String,
}

impl InjectionRequest {
    pub fn new(example_id: impl Into<String>, clean_text: impl Into<String>) -> Result<Self> {
        let clean_text = clean_text.into();
        let prompt = render_prompt(&clean_text)?;
        Ok(Self {
            example_id: example_id.into(),
            clean_text,
            prompt,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionResponse {
    pub ungrammatical: String,
    pub errors: Vec<ErrorAnnotation>,
    pub corrected: String,
    pub raw: String,
}

/// Maps a free-text error label to a category. First matching keyword wins.
pub fn category_from_label(label: &str) -> ErrorCategory {
    const TABLE: [(&str, ErrorCategory); 16] = [
        ("agreement", ErrorCategory::Verb),
        ("verb", ErrorCategory::Verb),
        ("tense", ErrorCategory::Verb),
        ("plur", ErrorCategory::Plural),
        ("singular", ErrorCategory::Plural),
        ("missing", ErrorCategory::MissingWord),
        ("omission", ErrorCategory::MissingWord),
        ("omitted", ErrorCategory::MissingWord),
        ("capital", ErrorCategory::Capitalization),
        ("word order", ErrorCategory::WordOrder),
        ("order", ErrorCategory::WordOrder),
        ("article", ErrorCategory::Article),
        ("preposition", ErrorCategory::Preposition),
        ("spelling", ErrorCategory::Spelling),
        ("misspel", ErrorCategory::Spelling),
        ("typo", ErrorCategory::Spelling),
    ];
    let lower = label.to_lowercase();
    TABLE
        .iter()
        .find(|(kw, _)| lower.contains(kw))
        .map(|(_, c)| *c)
        .unwrap_or(ErrorCategory::Other)
}

/// Byte offsets of every unescaped `**`.
fn marker_positions(raw: &str) -> Vec<usize> {
    let bytes = raw.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut backslashes = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                backslashes += 1;
                i += 1;
            }
            b'*' if backslashes % 2 == 0 && bytes.get(i + 1) == Some(&b'*') => {
                out.push(i);
                backslashes = 0;
                i += 2;
            }
            _ => {
                backslashes = 0;
                i += 1;
            }
        }
    }
    out
}

enum Section {
    Ungrammatical,
    Error(String),
    Corrected,
}

fn classify_header(header: &str) -> Option<Section> {
    let h = header.trim();
    let lower = h.to_lowercase();
    if lower.starts_with("ungrammatical") {
        Some(Section::Ungrammatical)
    } else if lower.starts_with("corrected") {
        Some(Section::Corrected)
    } else if lower.starts_with("error") {
        let label = h.split_once(':').map(|(_, l)| l.trim()).unwrap_or(h);
        Some(Section::Error(label.to_owned()))
    } else {
        None
    }
}

fn clean_section(content: &str) -> String {
    let body = content.trim_start();
    let body = body.strip_prefix(':').unwrap_or(body);
    nfc(unescape_markers(body).trim())
}

/// Parses a marker-formatted response.
pub fn parse_response(raw: &str) -> Result<InjectionResponse> {
    let marks = marker_positions(raw);
    // Pair markers into (header_start, header_end) spans.
    let headers: Vec<(usize, usize)> = marks.chunks_exact(2).map(|p| (p[0], p[1] + 2)).collect();

    let mut ungrammatical: Option<String> = None;
    let mut corrected: Option<String> = None;
    let mut errors = Vec::new();
    // Bold text that is not a known header stays part of the current section.
    let mut current: Option<(Section, usize)> = None;

    let mut close = |section: Option<(Section, usize)>, end: usize| {
        if let Some((section, start)) = section {
            let text = clean_section(&raw[start..end]);
            match section {
                Section::Ungrammatical => {
                    ungrammatical.get_or_insert(text);
                }
                Section::Corrected => {
                    corrected.get_or_insert(text);
                }
                Section::Error(label) => errors.push(ErrorAnnotation {
                    category: category_from_label(&label),
                    description: if text.is_empty() { label } else { format!("{label}: {text}") },
                }),
            }
        }
    };

    for &(start, end) in &headers {
        if let Some(section) = classify_header(&raw[start + 2..end - 2]) {
            close(current.take(), start);
            current = Some((section, end));
        }
    }
    close(current.take(), raw.len());

    let ungrammatical = ungrammatical
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::ParseResponse {
            section: "ungrammatical".into(),
        })?;
    let corrected = corrected.filter(|s| !s.is_empty()).ok_or_else(|| Error::ParseResponse {
        section: "corrected".into(),
    })?;
    if errors.is_empty() {
        return Err(Error::ParseResponse {
            section: "errors".into(),
        });
    }
    Ok(InjectionResponse {
        ungrammatical,
        errors,
        corrected,
        raw: raw.to_owned(),
    })
}

/// Formats a response with the markers the parser expects.
pub fn format_response(ungrammatical: &str, errors: &[(String, String)], corrected: &str) -> String {
    let mut out = format!("{UNGRAMMATICAL_MARKER}: {}\n", escape_markers(ungrammatical));
    for (i, (label, desc)) in errors.iter().enumerate() {
        out.push_str(&format!("**Error {}: {}**: {}\n", i + 1, escape_markers(label), escape_markers(desc)));
    }
    out.push_str(&format!("{CORRECTED_MARKER}: {}", escape_markers(corrected)));
    out
}

// ---------------------------------------------------------------------------
// Injector clients

/// Something that answers an injection prompt with raw response text.
///
/// `Err(Error::InvalidInput)` signals that the example should be skipped;
/// any other error counts as a failed request.
pub trait InjectorClient: Send + Sync {
    fn name(&self) -> &str;
    fn inject(&self, request: &InjectionRequest) -> Result<String>;
}

pub struct HttpInjector {
    client: HttpCompletionClient,
}

impl HttpInjector {
    pub fn new(config: HttpClientConfig) -> Self {
        Self {
            client: HttpCompletionClient::from_env(config),
        }
    }

    pub fn with_client(client: HttpCompletionClient) -> Self {
        Self { client }
    }
}

impl InjectorClient for HttpInjector {
    fn name(&self) -> &str {
        "http"
    }

    fn inject(&self, request: &InjectionRequest) -> Result<String> {
        self.client.complete(&request.prompt)
    }
}

/// Categories the mock knows how to produce.
pub const MOCK_CATEGORIES: [ErrorCategory; 4] = [
    ErrorCategory::Verb,
    ErrorCategory::MissingWord,
    ErrorCategory::Plural,
    ErrorCategory::Capitalization,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockInjectorConfig {
    pub seed: u64,
    /// Probability that the corrected section deliberately misses an error.
    pub failure_rate: f64,
    /// Relative weight of each producible category.
    pub category_weights: BTreeMap<ErrorCategory, f64>,
    /// Relative weight of injecting 1, 2 and 3 errors.
    pub errors_per_example: [f64; 3],
}

impl Default for MockInjectorConfig {
    fn default() -> Self {
        // Relative frequencies of the four most common categories observed
        // in LLM-injected data (52/15/10/5).
        let category_weights = BTreeMap::from([
            (ErrorCategory::Verb, 0.52),
            (ErrorCategory::MissingWord, 0.15),
            (ErrorCategory::Plural, 0.10),
            (ErrorCategory::Capitalization, 0.05),
        ]);
        Self {
            seed: 0,
            failure_rate: 0.0,
            category_weights,
            errors_per_example: [0.12, 0.44, 0.44],
        }
    }
}

impl MockInjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(Error::invalid("failure_rate must be in [0, 1]"));
        }
        for (c, w) in &self.category_weights {
            if !MOCK_CATEGORIES.contains(c) {
                return Err(Error::invalid(format!("mock injector cannot produce category {c}")));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::invalid(format!("weight for {c} must be non-negative")));
            }
        }
        if self.category_weights.values().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("category weights sum to zero"));
        }
        if self.errors_per_example.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.errors_per_example.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::invalid("errors_per_example weights must be non-negative and not all zero"));
        }
        Ok(())
    }
}

/// Deterministic rule-based stand-in for an LLM injector. Emits responses
/// in the same marker format as a real model.
#[derive(Debug, Clone)]
pub struct MockInjector {
    config: MockInjectorConfig,
}

struct Token {
    start: usize,
    end: usize,
}

impl Token {
    fn text<'a>(&self, s: &'a str) -> &'a str {
        &s[self.start..self.end]
    }
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Token { start: s, end: i });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Token { start: s, end: text.len() });
    }
    out
}

/// Splits a token into (leading punctuation, word, trailing punctuation).
fn split_punct(tok: &str) -> (&str, &str, &str) {
    let start = tok.find(|c: char| c.is_alphanumeric()).unwrap_or(tok.len());
    let end = tok.rfind(|c: char| c.is_alphanumeric()).map(|i| i + tok[i..].chars().next().unwrap().len_utf8()).unwrap_or(start);
    (&tok[..start], &tok[start..end], &tok[end..])
}

fn match_case(template: &str, word: &str) -> String {
    let mut chars = word.chars();
    match (template.chars().next(), chars.next()) {
        (Some(t), Some(f)) if t.is_uppercase() => f.to_uppercase().chain(chars).collect(),
        _ => word.to_owned(),
    }
}

const VERB_SWAPS: [(&str, &str); 8] = [
    ("is", "are"),
    ("are", "is"),
    ("has", "have"),
    ("have", "has"),
    ("was", "were"),
    ("were", "was"),
    ("does", "do"),
    ("do", "does"),
];

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, Clone)]
enum Edit {
    Replace { token: usize, with: String },
    Drop { token: usize },
}

impl Edit {
    fn token(&self) -> usize {
        match self {
            Edit::Replace { token, .. } | Edit::Drop { token } => *token,
        }
    }
}

struct Candidate {
    category: ErrorCategory,
    edit: Edit,
    label: &'static str,
    description: String,
}

fn candidates(text: &str, tokens: &[Token]) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        let (lead, word, trail) = split_punct(tok.text(text));
        let lower = word.to_lowercase();

        if let Some((_, swap)) = VERB_SWAPS.iter().find(|(v, _)| *v == lower) {
            let new = match_case(word, swap);
            out.push(Candidate {
                category: ErrorCategory::Verb,
                edit: Edit::Replace {
                    token: i,
                    with: format!("{lead}{new}{trail}"),
                },
                label: "Subject-verb agreement error",
                description: format!("\"{new}\" should be \"{word}\" to agree with its subject."),
            });
        }

        if ARTICLES.contains(&lower.as_str()) && lead.is_empty() && trail.is_empty() && i + 1 < tokens.len() {
            let next = split_punct(tokens[i + 1].text(text)).1;
            out.push(Candidate {
                category: ErrorCategory::MissingWord,
                edit: Edit::Drop { token: i },
                label: "Missing article error",
                description: format!("the article \"{word}\" is missing before \"{next}\"."),
            });
        }

        if i > 0 && word.len() >= 3 && word.chars().all(|c| c.is_ascii_lowercase()) {
            let prev = split_punct(tokens[i - 1].text(text)).1.to_lowercase();
            if ARTICLES.contains(&prev.as_str()) {
                let changed = if word.ends_with('s') && !word.ends_with("ss") {
                    word[..word.len() - 1].to_owned()
                } else {
                    format!("{word}s")
                };
                out.push(Candidate {
                    category: ErrorCategory::Plural,
                    edit: Edit::Replace {
                        token: i,
                        with: format!("{lead}{changed}{trail}"),
                    },
                    label: "Pluralization error",
                    description: format!("\"{changed}\" should be \"{word}\"."),
                });
            }
        }

        if i == 0 && lead.is_empty() && word.chars().next().is_some_and(char::is_uppercase) {
            let mut chars = word.chars();
            let first = chars.next().unwrap();
            let lowered: String = first.to_lowercase().chain(chars).collect();
            if lowered != word {
                out.push(Candidate {
                    category: ErrorCategory::Capitalization,
                    edit: Edit::Replace {
                        token: i,
                        with: format!("{lowered}{trail}"),
                    },
                    label: "Capitalization error",
                    description: format!("\"{lowered}\" should be capitalized as \"{word}\" at the start of the sentence."),
                });
            }
        }
    }
    out
}

/// Rebuilds `text` with `edits` applied, preserving the original spacing.
fn apply_edits(text: &str, tokens: &[Token], edits: &[&Edit]) -> String {
    let mut sorted: Vec<&&Edit> = edits.iter().collect();
    sorted.sort_by_key(|e| e.token());
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for edit in sorted {
        let tok = &tokens[edit.token()];
        match edit {
            Edit::Replace { with, .. } => {
                out.push_str(&text[cursor..tok.start]);
                out.push_str(with);
                cursor = tok.end;
            }
            Edit::Drop { token } => {
                out.push_str(&text[cursor..tok.start]);
                // Drop the token together with the whitespace that follows it.
                cursor = tokens.get(token + 1).map(|t| t.start).unwrap_or(tok.end);
            }
        }
    }
    out.push_str(&text[cursor..]);
    out
}

fn weighted_pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if target < w {
                return i;
            }
            target -= w;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).expect("positive total")
}

impl MockInjector {
    pub fn new(config: MockInjectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &MockInjectorConfig {
        &self.config
    }

    /// Injects 1 to 3 rule-based errors into `clean`. Fails with
    /// `InvalidInput` when the text has fewer than two words or offers no
    /// applicable rule.
    pub fn inject(&self, clean: &str, seed: u64) -> Result<InjectionResponse> {
        let raw = self.inject_raw(clean, seed, "")?;
        parse_response(&raw)
    }

    fn inject_raw(&self, clean: &str, seed: u64, key: &str) -> Result<String> {
        let tokens = tokenize(clean);
        if tokens.len() < 2 {
            return Err(Error::invalid("text has fewer than two words"));
        }
        let mut rng = rng_for(seed, &format!("{key}\u{0}{clean}"));
        let pool = candidates(clean, &tokens);

        let n_errors = weighted_pick(&mut rng, &self.config.errors_per_example) + 1;
        let mut used_tokens = Vec::new();
        let mut chosen: Vec<&Candidate> = Vec::new();
        for _ in 0..n_errors {
            let available: Vec<f64> = MOCK_CATEGORIES
                .iter()
                .map(|c| {
                    let has_site = pool
                        .iter()
                        .any(|cand| cand.category == *c && !used_tokens.contains(&cand.edit.token()));
                    if has_site {
                        self.config.category_weights.get(c).copied().unwrap_or(0.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            if available.iter().sum::<f64>() <= 0.0 {
                break;
            }
            let category = MOCK_CATEGORIES[weighted_pick(&mut rng, &available)];
            let sites: Vec<&Candidate> = pool
                .iter()
                .filter(|cand| cand.category == category && !used_tokens.contains(&cand.edit.token()))
                .collect();
            let pick = *sites.choose(&mut rng).expect("category has a free site");
            used_tokens.push(pick.edit.token());
            chosen.push(pick);
        }
        if chosen.is_empty() {
            return Err(Error::invalid("no applicable error rule"));
        }
        chosen.sort_by_key(|c| c.edit.token());

        let edits: Vec<&Edit> = chosen.iter().map(|c| &c.edit).collect();
        let ungrammatical = apply_edits(clean, &tokens, &edits);
        let corrected = if rng.gen::<f64>() < self.config.failure_rate {
            // Leave the first error uncorrected.
            apply_edits(clean, &tokens, &edits[..1])
        } else {
            clean.to_owned()
        };
        let errors: Vec<(String, String)> = chosen
            .iter()
            .map(|c| (c.label.to_owned(), c.description.clone()))
            .collect();
        Ok(format_response(&ungrammatical, &errors, &corrected))
    }
}

impl InjectorClient for MockInjector {
    fn name(&self) -> &str {
        "mock"
    }

    fn inject(&self, request: &InjectionRequest) -> Result<String> {
        self.inject_raw(&request.clean_text, self.config.seed, &request.example_id)
    }
}

// ---------------------------------------------------------------------------
// Running injection over a dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InjectionOutcome {
    Injected { response: InjectionResponse },
    Skipped { reason: String },
    ParseFailed { reason: String },
    ClientFailed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub id: String,
    pub clean: String,
    pub outcome: InjectionOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionCounts {
    pub injected: usize,
    pub skipped: usize,
    pub parse_failed: usize,
    pub client_failed: usize,
}

pub fn count_outcomes(records: &[InjectionRecord]) -> InjectionCounts {
    let mut c = InjectionCounts::default();
    for r in records {
        match r.outcome {
            InjectionOutcome::Injected { .. } => c.injected += 1,
            InjectionOutcome::Skipped { .. } => c.skipped += 1,
            InjectionOutcome::ParseFailed { .. } => c.parse_failed += 1,
            InjectionOutcome::ClientFailed { .. } => c.client_failed += 1,
        }
    }
    c
}

fn run_one(client: &dyn InjectorClient, id: &str, clean: &str) -> InjectionOutcome {
    let request = match InjectionRequest::new(id, clean) {
        Ok(r) => r,
        Err(e) => return InjectionOutcome::Skipped { reason: e.to_string() },
    };
    match client.inject(&request) {
        Ok(raw) => match parse_response(&raw) {
            Ok(response) => InjectionOutcome::Injected { response },
            Err(e) => InjectionOutcome::ParseFailed { reason: e.to_string() },
        },
        Err(Error::InvalidInput(reason)) => InjectionOutcome::Skipped { reason },
        Err(e) => InjectionOutcome::ClientFailed { reason: e.to_string() },
    }
}

/// Sends every `(id, clean)` item through `client` with at most
/// `concurrency` requests in flight. Records come back in input order.
pub fn inject_all(client: &dyn InjectorClient, items: &[(String, String)], concurrency: usize) -> Vec<InjectionRecord> {
    let workers = concurrency.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let mut results: Vec<(usize, InjectionOutcome)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some((id, clean)) = items.get(i) else { break };
                        local.push((i, run_one(client, id, clean)));
                    }
                    local
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("injection worker panicked"))
            .collect()
    });
    results.sort_by_key(|(i, _)| *i);
    results
        .into_iter()
        .map(|(i, outcome)| InjectionRecord {
            id: items[i].0.clone(),
            clean: items[i].1.clone(),
            outcome,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Filtration and statistics

#[derive(Debug, Clone, PartialEq)]
pub struct InjectedPair {
    pub id: String,
    pub clean: String,
    pub response: InjectionResponse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub kept: Vec<ECExample>,
    pub dropped_count: usize,
}

/// Successful injections from a run, in order.
pub fn injected_pairs(records: &[InjectionRecord]) -> Vec<InjectedPair> {
    records
        .iter()
        .filter_map(|r| match &r.outcome {
            InjectionOutcome::Injected { response } => Some(InjectedPair {
                id: r.id.clone(),
                clean: r.clean.clone(),
                response: response.clone(),
            }),
            _ => None,
        })
        .collect()
}

/// Keeps a pair iff the model's own correction reproduces the clean text
/// (NFC, byte-exact).
pub fn roundtrip_filter(pairs: &[InjectedPair]) -> FilterResult {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for p in pairs {
        if nfc_eq(&p.response.corrected, &p.clean) {
            let mut ex = ECExample::new(&p.id, &p.response.ungrammatical, &p.clean, Provenance::Synthetic);
            ex.error_annotations = p.response.errors.clone();
            kept.push(ex);
        } else {
            dropped += 1;
        }
    }
    FilterResult {
        kept,
        dropped_count: dropped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub num_examples: usize,
    pub num_errors: usize,
    /// Fraction of all annotations in each category.
    pub categories: BTreeMap<ErrorCategory, f64>,
    /// Fraction of examples with a given number of annotations.
    pub errors_per_example: BTreeMap<usize, f64>,
}

pub fn error_stats(examples: &[ECExample]) -> ErrorStats {
    let mut cat_counts: BTreeMap<ErrorCategory, usize> = BTreeMap::new();
    let mut per_example: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total = 0;
    for ex in examples {
        *per_example.entry(ex.error_annotations.len()).or_default() += 1;
        for a in &ex.error_annotations {
            *cat_counts.entry(a.category).or_default() += 1;
            total += 1;
        }
    }
    let n = examples.len();
    ErrorStats {
        num_examples: n,
        num_errors: total,
        categories: cat_counts
            .into_iter()
            .map(|(c, k)| (c, k as f64 / total as f64))
            .collect(),
        errors_per_example: per_example
            .into_iter()
            .map(|(e, k)| (e, k as f64 / n as f64))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::test_server;

    const TABLE_EXAMPLE: &str = "**Ungrammatical sentences**: Yesterday I went to a store that have nice furnitures.\n\
**Error 1: Subject-verb agreement error**: \u{201c}have\u{201d} should be \u{201c}has\u{201d} to agree with the singular subject \u{201c}store\u{201d}.\n\
**Error 2: Plurization error**: \u{201c}furnitures\u{201d} should be \u{201c}furniture\u{201d} as it is an uncountable noun.\n\
**Corrected sentences**: Yesterday I went to a store that has nice furniture.";

    #[test]
    fn prompt_contains_sentence_once_and_markers() {
        let s = "Yesterday I went to a store that has nice furniture.";
        let p = render_prompt(s).unwrap();
        assert_eq!(p.matches(s).count(), 1);
        assert!(p.contains(UNGRAMMATICAL_MARKER));
        assert!(p.contains(CORRECTED_MARKER));
        assert!(p.contains("teacher"));
        for item in ERROR_CATALOG {
            assert!(p.contains(item));
        }
    }

    #[test]
    fn prompts_differ_only_in_slot() {
        let a = render_prompt("I like tea.").unwrap();
        let b = render_prompt("We were late again.").unwrap();
        assert_eq!(a.replacen("I like tea.", "X", 1), b.replacen("We were late again.", "X", 1));
        assert!(render_prompt("  ").is_err());
    }

    #[test]
    fn markers_in_text_are_escaped() {
        let s = "this is **really** good";
        let p = render_prompt(s).unwrap();
        assert!(!p.contains("**really**"));
        assert!(p.contains(r"\*\*really\*\*"));
        assert_eq!(unescape_markers(&escape_markers(s)), s);
        assert_eq!(unescape_markers(&escape_markers(r"a\*b\\")), r"a\*b\\");
    }

    #[test]
    fn parses_reference_example() {
        let r = parse_response(TABLE_EXAMPLE).unwrap();
        assert_eq!(r.ungrammatical, "Yesterday I went to a store that have nice furnitures.");
        assert_eq!(r.corrected, "Yesterday I went to a store that has nice furniture.");
        assert_eq!(r.errors.len(), 2);
        assert_eq!(r.errors[0].category, ErrorCategory::Verb);
        assert_eq!(r.errors[1].category, ErrorCategory::Plural);
        assert!(r.errors[0].description.starts_with("Subject-verb agreement error"));
    }

    #[test]
    fn parse_errors_name_the_section() {
        let no_corrected = TABLE_EXAMPLE.split("**Corrected").next().unwrap();
        match parse_response(no_corrected) {
            Err(Error::ParseResponse { section }) => assert_eq!(section, "corrected"),
            other => panic!("{other:?}"),
        }
        let no_errors = "**Ungrammatical sentences**: a b\n**Corrected sentences**: A b";
        match parse_response(no_errors) {
            Err(Error::ParseResponse { section }) => assert_eq!(section, "errors"),
            other => panic!("{other:?}"),
        }
        match parse_response("nothing here") {
            Err(Error::ParseResponse { section }) => assert_eq!(section, "ungrammatical"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_bold_text_stays_in_section() {
        let raw = "**Ungrammatical sentences**: she **really** have a cat\n**Error 1: verb tense**: x\n**Corrected sentences**: She really has a cat";
        let r = parse_response(raw).unwrap();
        assert_eq!(r.ungrammatical, "she **really** have a cat");
    }

    #[test]
    fn label_mapping() {
        assert_eq!(category_from_label("Pluralization error"), ErrorCategory::Plural);
        assert_eq!(category_from_label("Plurization error"), ErrorCategory::Plural);
        assert_eq!(category_from_label("Subject-Verb Agreement"), ErrorCategory::Verb);
        assert_eq!(category_from_label("Missing article"), ErrorCategory::MissingWord);
        assert_eq!(category_from_label("CAPITALIZATION"), ErrorCategory::Capitalization);
        assert_eq!(category_from_label("Incorrect word order"), ErrorCategory::WordOrder);
        assert_eq!(category_from_label("Wrong preposition"), ErrorCategory::Preposition);
        assert_eq!(category_from_label("Article misuse"), ErrorCategory::Article);
        assert_eq!(category_from_label("Spelling mistake"), ErrorCategory::Spelling);
        assert_eq!(category_from_label("Pronoun case"), ErrorCategory::Other);
    }

    fn mock(failure_rate: f64) -> MockInjector {
        MockInjector::new(MockInjectorConfig {
            failure_rate,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn mock_golden_output() {
        // Frozen from a seeded run; any change to the mock rules shows up here.
        let r = mock(0.0).inject("She has a cat.", 7).unwrap();
        assert_eq!(r.corrected, "She has a cat.");
        assert_eq!(r.ungrammatical, "She have cats.");
        let cats: Vec<_> = r.errors.iter().map(|e| e.category).collect();
        assert_eq!(cats, [ErrorCategory::Verb, ErrorCategory::MissingWord, ErrorCategory::Plural]);
    }

    #[test]
    fn mock_is_deterministic_and_parseable() {
        let m = mock(0.3);
        let req = InjectionRequest::new("x1", "The dogs are happy and the cat has a toy.").unwrap();
        let a = InjectorClient::inject(&m, &req).unwrap();
        let b = InjectorClient::inject(&m, &req).unwrap();
        assert_eq!(a, b);
        parse_response(&a).unwrap();
    }

    #[test]
    fn mock_without_failures_always_roundtrips() {
        let m = mock(0.0);
        for (i, s) in ["The cat is on the mat.", "We have a plan for the weekend.", "Is the shop open?", "Do you have  the keys\nfor the car?"]
            .iter()
            .enumerate()
        {
            for seed in 0..20 {
                let r = m.inject(s, seed * 100 + i as u64).unwrap();
                assert_eq!(r.corrected, *s);
                assert_ne!(r.ungrammatical, *s);
                assert!((1..=3).contains(&r.errors.len()));
            }
        }
    }

    #[test]
    fn mock_skips_untokenizable() {
        let m = mock(0.0);
        assert!(matches!(m.inject("hello", 0), Err(Error::InvalidInput(_))));
        assert!(matches!(m.inject("xyz qqq", 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn roundtrip_keeps_exact_and_drops_different() {
        let resp = |corrected: &str| InjectionResponse {
            ungrammatical: "she have a cat".into(),
            errors: vec![ErrorAnnotation {
                category: ErrorCategory::Verb,
                description: "x".into(),
            }],
            corrected: corrected.into(),
            raw: String::new(),
        };
        let pairs = vec![
            InjectedPair {
                id: "a".into(),
                clean: "She has a cat.".into(),
                response: resp("She has a cat."),
            },
            InjectedPair {
                id: "b".into(),
                clean: "She has a cat.".into(),
                response: resp("She has the cat."),
            },
            InjectedPair {
                id: "c".into(),
                clean: "caf\u{e9} time".into(),
                response: resp("cafe\u{301} time"),
            },
        ];
        let r = roundtrip_filter(&pairs);
        assert_eq!(r.dropped_count, 1);
        let ids: Vec<_> = r.kept.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(r.kept[0].source, "she have a cat");
        assert_eq!(r.kept[0].target, "She has a cat.");
        assert_eq!(r.kept[0].provenance, Provenance::Synthetic);
    }

    #[test]
    fn stats_of_single_verb_errors() {
        let ex: Vec<ECExample> = (0..5)
            .map(|i| {
                let mut e = ECExample::new(format!("{i}"), "a", "b", Provenance::Synthetic);
                e.error_annotations.push(ErrorAnnotation {
                    category: ErrorCategory::Verb,
                    description: String::new(),
                });
                e
            })
            .collect();
        let s = error_stats(&ex);
        assert_eq!(s.categories, BTreeMap::from([(ErrorCategory::Verb, 1.0)]));
        assert_eq!(s.errors_per_example, BTreeMap::from([(1, 1.0)]));
    }

    const RICH: [&str; 4] = [
        "The cat is happy, the dogs have a bone and she has a toy.",
        "The kids are at the park and the dog is with a friend who has a ball.",
        "The shop is open, the owners are nice and a clerk has the keys.",
        "The train was late, the buses were full and a man does the talking.",
    ];

    #[test]
    fn stats_match_configured_mix() {
        let m = mock(0.0);
        let items: Vec<(String, String)> = (0..10_000).map(|i| (format!("ex{i}"), RICH[i % 4].to_owned())).collect();
        let records = inject_all(&m, &items, 4);
        assert_eq!(count_outcomes(&records).injected, 10_000);
        let kept = roundtrip_filter(&injected_pairs(&records)).kept;
        let stats = error_stats(&kept);
        let cfg = MockInjectorConfig::default();
        let total: f64 = cfg.category_weights.values().sum();
        for (c, w) in &cfg.category_weights {
            let got = stats.categories.get(c).copied().unwrap_or(0.0);
            assert!((got - w / total).abs() < 0.01, "{c}: {got} vs {}", w / total);
        }
        let total_n: f64 = cfg.errors_per_example.iter().sum();
        for (n, w) in cfg.errors_per_example.iter().enumerate() {
            let got = stats.errors_per_example.get(&(n + 1)).copied().unwrap_or(0.0);
            assert!((got - w / total_n).abs() < 0.01, "{} errors: {got}", n + 1);
        }
        let cat_sum: f64 = stats.categories.values().sum();
        let per_sum: f64 = stats.errors_per_example.values().sum();
        assert!((cat_sum - 1.0).abs() < 1e-9 && (per_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inject_all_preserves_order_under_concurrency() {
        let m = mock(0.5);
        let items: Vec<(String, String)> = (0..200)
            .map(|i| (format!("id{i}"), format!("{} number {i}", RICH[i % 4])))
            .collect();
        let serial = inject_all(&m, &items, 1);
        let parallel = inject_all(&m, &items, 8);
        assert_eq!(serial, parallel);
        assert!(serial.iter().zip(&items).all(|(r, (id, _))| &r.id == id));
    }

    #[test]
    fn http_injector_counts_exhausted_requests() {
        let server = test_server::spawn(|_, prompt| {
            if prompt.contains("fail me") {
                (503, "{}".into())
            } else {
                let text = format_response("she have cat", &[("Subject-verb agreement error".into(), "x".into())], "She has a cat.");
                (200, serde_json::json!({ "text": text }).to_string())
            }
        });
        let cfg = HttpClientConfig {
            endpoint: server.url.clone(),
            timeout_ms: 2_000,
            max_retries: 1,
            backoff_ms: 0,
        };
        let client = HttpInjector::with_client(HttpCompletionClient::with_token(cfg, None));
        let items = vec![
            ("a".to_owned(), "She has a cat.".to_owned()),
            ("b".to_owned(), "please fail me now".to_owned()),
            ("c".to_owned(), "She has a cat.".to_owned()),
        ];
        let records = inject_all(&client, &items, 2);
        let counts = count_outcomes(&records);
        assert_eq!(counts.injected, 2);
        assert_eq!(counts.client_failed, 1);
        assert!(matches!(records[1].outcome, InjectionOutcome::ClientFailed { .. }));
        let kept = roundtrip_filter(&injected_pairs(&records));
        assert_eq!(kept.kept.len(), 2);
    }
}
