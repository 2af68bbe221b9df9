//! Seeded mobile-typing noise: transposition, omission, repetition and
//! spatial (adjacent-key) substitution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IteratorRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, ECExample};
use crate::error::{Error, Result};
use crate::util::{rng_for, stable_hash_str};

const QWERTY_ROWS: [(&str, f64); 3] = [("qwertyuiop", 0.0), ("asdfghjkl", 0.5), ("zxcvbnm", 1.0)];

/// Key adjacency for spatial substitutions. Keys are lowercase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyboardModel {
    pub name: String,
    adjacency: BTreeMap<char, BTreeSet<char>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayoutRecord {
    #[serde(rename = "char")]
    key: char,
    neighbors: Vec<char>,
}

impl KeyboardModel {
    /// QWERTY letters on a staggered grid: same-row neighbours plus the
    /// keys within half a key width on the rows above and below.
    pub fn qwerty() -> Self {
        let mut adjacency: BTreeMap<char, BTreeSet<char>> = BTreeMap::new();
        let keys: Vec<(char, usize, f64)> = QWERTY_ROWS
            .iter()
            .enumerate()
            .flat_map(|(r, (row, off))| row.chars().enumerate().map(move |(i, c)| (c, r, i as f64 + off)))
            .collect();
        for &(a, ra, xa) in &keys {
            for &(b, rb, xb) in &keys {
                let adjacent = a != b
                    && ((ra == rb && (xa - xb).abs() <= 1.0) || (ra.abs_diff(rb) == 1 && (xa - xb).abs() <= 0.5));
                if adjacent {
                    adjacency.entry(a).or_default().insert(b);
                }
            }
        }
        Self {
            name: "qwerty".into(),
            adjacency,
        }
    }

    pub fn from_adjacency(name: impl Into<String>, adjacency: BTreeMap<char, BTreeSet<char>>) -> Result<Self> {
        let adjacency: BTreeMap<char, BTreeSet<char>> = adjacency
            .into_iter()
            .map(|(k, v)| (lower(k), v.into_iter().map(lower).collect()))
            .collect();
        for (k, ns) in &adjacency {
            if ns.contains(k) {
                return Err(Error::invalid(format!("key {k:?} is adjacent to itself")));
            }
            for n in ns {
                if !adjacency.get(n).is_some_and(|back| back.contains(k)) {
                    return Err(Error::invalid(format!("adjacency is not symmetric: {k:?} -> {n:?}")));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            adjacency,
        })
    }

    /// Reads a layout file with one `{"char": "a", "neighbors": [...]}` per line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let records: Vec<LayoutRecord> = read_jsonl(path)?;
        let mut adjacency = BTreeMap::new();
        for r in records {
            adjacency.insert(r.key, r.neighbors.into_iter().collect());
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_adjacency(name, adjacency)
    }

    pub fn neighbors(&self, c: char) -> Option<&BTreeSet<char>> {
        self.adjacency.get(&lower(c)).filter(|ns| !ns.is_empty())
    }

    pub fn is_adjacent(&self, a: char, b: char) -> bool {
        self.neighbors(a).is_some_and(|ns| ns.contains(&lower(b)))
    }

    pub fn keys(&self) -> impl Iterator<Item = char> + '_ {
        self.adjacency.keys().copied()
    }
}

fn lower(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypoConfig {
    pub p_transpose: f64,
    pub p_omit: f64,
    pub p_repeat: f64,
    pub p_spatial: f64,
    pub max_errors_per_example: usize,
    pub seed: u64,
}

impl Default for TypoConfig {
    fn default() -> Self {
        Self {
            p_transpose: 0.01,
            p_omit: 0.015,
            p_repeat: 0.01,
            p_spatial: 0.02,
            max_errors_per_example: 3,
            seed: 0,
        }
    }
}

impl TypoConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_transpose, self.p_omit, self.p_repeat, self.p_spatial];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("typo rates must be in [0, 1]"));
        }
        if ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::invalid("typo rates must sum to at most 1"));
        }
        if self.max_errors_per_example == 0 {
            return Err(Error::invalid("max_errors_per_example must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypoKind {
    Transpose,
    Omit,
    Repeat,
    Spatial,
}

/// One applied corruption. `position` is a char index into the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypoEvent {
    pub position: usize,
    pub kind: TypoKind,
    pub original: char,
    /// The substituted key for spatial events.
    pub replacement: Option<char>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub corrupted: String,
    pub events: Vec<TypoEvent>,
}

/// Corrupts `text` with the rng seeded from `cfg.seed`.
pub fn corrupt(text: &str, cfg: &TypoConfig, keyboard: &KeyboardModel) -> Corruption {
    let mut rng = rng_for(cfg.seed, "typo");
    corrupt_with(text, cfg, keyboard, &mut rng)
}

fn corrupt_with<R: Rng>(text: &str, cfg: &TypoConfig, keyboard: &KeyboardModel, rng: &mut R) -> Corruption {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 4);
    let mut events = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if events.len() >= cfg.max_errors_per_example {
            out.push(c);
            i += 1;
            continue;
        }
        let u: f64 = rng.gen();
        let mut edge = 0.0;
        let kind = [
            (TypoKind::Transpose, cfg.p_transpose),
            (TypoKind::Omit, cfg.p_omit),
            (TypoKind::Repeat, cfg.p_repeat),
            (TypoKind::Spatial, cfg.p_spatial),
        ]
        .into_iter()
        .find(|(_, p)| {
            edge += p;
            u < edge
        })
        .map(|(k, _)| k);
        let mut step = 1;
        let mut replacement = None;
        let applied = match kind {
            Some(TypoKind::Transpose) if i + 1 < chars.len() => {
                out.push(chars[i + 1]);
                out.push(c);
                step = 2;
                true
            }
            Some(TypoKind::Omit) => true,
            Some(TypoKind::Repeat) => {
                out.push(c);
                out.push(c);
                true
            }
            Some(TypoKind::Spatial) if c.is_alphabetic() => match keyboard.neighbors(c) {
                Some(ns) => {
                    let n = *ns.iter().choose(rng).expect("non-empty neighbours");
                    let n = if c.is_uppercase() { n.to_uppercase().next().unwrap_or(n) } else { n };
                    out.push(n);
                    replacement = Some(n);
                    true
                }
                None => false,
            },
            _ => false,
        };
        if applied {
            events.push(TypoEvent {
                position: i,
                kind: kind.expect("applied implies a kind"),
                original: c,
                replacement,
            });
        } else {
            out.push(c);
        }
        i += step;
    }
    Corruption { corrupted: out, events }
}

/// Per-example seed, independent of dataset order.
pub fn example_seed(cfg_seed: u64, example_id: &str) -> u64 {
    stable_hash_str(cfg_seed, example_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedExample {
    pub example: ECExample,
    pub events: Vec<TypoEvent>,
}

/// Corrupts every source; targets are copied untouched.
pub fn corrupt_dataset(examples: &[ECExample], cfg: &TypoConfig, keyboard: &KeyboardModel) -> Vec<CorruptedExample> {
    examples
        .iter()
        .map(|ex| {
            let mut rng = rng_for(example_seed(cfg.seed, &ex.id), "typo");
            let c = corrupt_with(&ex.source, cfg, keyboard, &mut rng);
            let mut out = ex.clone();
            out.source = c.corrupted;
            CorruptedExample {
                example: out,
                events: c.events,
            }
        })
        .collect()
}

/// Number of positions at which `kind` can fire for `text` under `keyboard`.
pub fn eligible_positions(text: &str, kind: TypoKind, keyboard: &KeyboardModel) -> usize {
    let n = text.chars().count();
    match kind {
        TypoKind::Transpose => n.saturating_sub(1),
        TypoKind::Omit | TypoKind::Repeat => n,
        TypoKind::Spatial => text.chars().filter(|c| c.is_alphabetic() && keyboard.neighbors(*c).is_some()).count(),
    }
}
