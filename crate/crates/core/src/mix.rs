//! Training-set construction: weight filtering, original/synthetic mixing
//! and two-phase continue-training manifests.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ECExample, Provenance};
use crate::error::{Error, Result};
use crate::util::rng_for;

/// Keeps examples with `weight >= threshold` and marks them filtered.
pub fn filter_by_weight(examples: &[ECExample], threshold: f64) -> Result<Vec<ECExample>> {
    let mut kept = Vec::new();
    for ex in examples {
        let w = ex
            .weight
            .ok_or_else(|| Error::invalid(format!("example {:?} has no weight", ex.id)))?;
        if w >= threshold {
            let mut ex = ex.clone();
            ex.provenance = Provenance::SyntheticFiltered;
            kept.push(ex);
        }
    }
    Ok(kept)
}

/// Original-to-synthetic example ratio `a:b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub original: usize,
    pub synthetic: usize,
}

impl Ratio {
    pub fn new(original: usize, synthetic: usize) -> Result<Self> {
        if original == 0 || synthetic == 0 {
            return Err(Error::invalid("ratio components must be at least 1"));
        }
        Ok(Self { original, synthetic })
    }

    pub fn block(&self) -> usize {
        self.original + self.synthetic
    }
}

impl Default for Ratio {
    fn default() -> Self {
        Self {
            original: 1,
            synthetic: 4,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.original, self.synthetic)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("ratio must look like 1:4, got {s:?}")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad ratio component {x:?}")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    #[serde(default)]
    pub ratio: Ratio,
    #[serde(default = "default_threshold")]
    pub filter_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Output length; defaults to enough blocks to use every original once.
    #[serde(default)]
    pub length: Option<usize>,
}

fn default_threshold() -> Option<f64> {
    Some(1.0)
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            ratio: Ratio::default(),
            filter_threshold: default_threshold(),
            seed: 0,
            length: None,
        }
    }
}

/// Draws items in shuffled passes; each pass is a fresh permutation.
struct EpochStream<'a> {
    items: &'a [ECExample],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> EpochStream<'a> {
    fn new(items: &'a [ECExample], rng: ChaCha8Rng) -> Self {
        Self {
            items,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next(&mut self) -> &'a ECExample {
        if self.pos == self.order.len() {
            self.order = (0..self.items.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        &self.items[self.order[self.pos - 1]]
    }
}

/// Interleaves `a` originals and `b` synthetics per block of `a + b`, with
/// positions inside each block shuffled. Both inputs are drawn in shuffled
/// passes, so an input is exhausted before any of its examples repeats.
/// Repeated examples get `#2`, `#3`, ... appended to their id.
pub fn mix_datasets(original: &[ECExample], synthetic: &[ECExample], spec: &MixSpec) -> Result<Vec<ECExample>> {
    if original.is_empty() || synthetic.is_empty() {
        return Err(Error::invalid("both original and synthetic datasets must be non-empty"));
    }
    let r = spec.ratio;
    Ratio::new(r.original, r.synthetic)?;
    let length = spec
        .length
        .unwrap_or_else(|| original.len().div_ceil(r.original) * r.block());
    let mut orig = EpochStream::new(original, rng_for(spec.seed, "mix/original"));
    let mut synth = EpochStream::new(synthetic, rng_for(spec.seed, "mix/synthetic"));
    let mut layout_rng = rng_for(spec.seed, "mix/blocks");

    let mut pattern: Vec<bool> = (0..r.block()).map(|i| i < r.original).collect();
    let mut out = Vec::with_capacity(length);
    let mut seen: HashMap<String, usize> = HashMap::new();
    while out.len() < length {
        pattern.shuffle(&mut layout_rng);
        for &is_orig in &pattern {
            if out.len() == length {
                break;
            }
            let ex = if is_orig { orig.next() } else { synth.next() };
            let count = seen.entry(ex.id.clone()).or_default();
            *count += 1;
            let mut ex = ex.clone();
            if *count > 1 {
                ex.id = format!("{}#{}", ex.id, count);
            }
            out.push(ex);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Continue-training manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ContOrig,
    ContMix,
    ContMixFil,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "contorig" => Ok(Self::ContOrig),
            "contmix" => Ok(Self::ContMix),
            "contmixfil" => Ok(Self::ContMixFil),
            _ => Err(Error::invalid(format!("unknown strategy {s:?}; expected contorig, contmix or contmixfil"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    File {
        path: PathBuf,
    },
    Mix {
        original: PathBuf,
        synthetic: PathBuf,
        ratio: Ratio,
        seed: u64,
    },
}

impl DatasetRef {
    pub fn files(&self) -> Vec<&Path> {
        match self {
            DatasetRef::File { path } => vec![path],
            DatasetRef::Mix { original, synthetic, .. } => vec![original, synthetic],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub dataset: DatasetRef,
    /// Half-open step range `[start, end)`.
    pub start_step: usize,
    pub end_step: usize,
    pub batch_multiplier: u32,
    pub lr_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub strategy: Strategy,
    pub total_steps: usize,
    pub checkpoints: Vec<usize>,
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanPaths {
    pub original: PathBuf,
    pub synthetic: PathBuf,
    pub filtered_synthetic: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub synthetic_steps: usize,
    pub total_steps: usize,
    pub checkpoints: Vec<usize>,
    pub batch_multiplier: u32,
    pub lr_multiplier: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            synthetic_steps: 1000,
            total_steps: 4000,
            checkpoints: vec![600, 1000, 2000, 4000],
            batch_multiplier: 4,
            lr_multiplier: 1.0,
        }
    }
}

/// Phase 1 trains on the full synthetic set; phase 2 continues on the
/// originals, a mixture, or a mixture with filtered synthetic data.
pub fn continue_plan(strategy: Strategy, paths: &PlanPaths, spec: &MixSpec, schedule: &Schedule) -> Result<TrainingManifest> {
    if schedule.synthetic_steps == 0 || schedule.synthetic_steps >= schedule.total_steps {
        return Err(Error::invalid("synthetic phase must be non-empty and shorter than the total"));
    }
    let mix_with = |synthetic: &Path| DatasetRef::Mix {
        original: paths.original.clone(),
        synthetic: synthetic.to_path_buf(),
        ratio: spec.ratio,
        seed: spec.seed,
    };
    let (name, second) = match strategy {
        Strategy::ContOrig => (
            "original",
            DatasetRef::File {
                path: paths.original.clone(),
            },
        ),
        Strategy::ContMix => ("mix", mix_with(&paths.synthetic)),
        Strategy::ContMixFil => {
            let filtered = paths
                .filtered_synthetic
                .as_deref()
                .ok_or_else(|| Error::invalid("ContMixFil needs a filtered synthetic dataset"))?;
            ("mix_filtered", mix_with(filtered))
        }
    };
    let phase = |name: &str, dataset, start, end| Phase {
        name: name.to_owned(),
        dataset,
        start_step: start,
        end_step: end,
        batch_multiplier: schedule.batch_multiplier,
        lr_multiplier: schedule.lr_multiplier,
    };
    let manifest = TrainingManifest {
        strategy,
        total_steps: schedule.total_steps,
        checkpoints: schedule.checkpoints.clone(),
        phases: vec![
            phase(
                "synthetic",
                DatasetRef::File {
                    path: paths.synthetic.clone(),
                },
                0,
                schedule.synthetic_steps,
            ),
            phase(name, second, schedule.synthetic_steps, schedule.total_steps),
        ],
    };
    validate_ranges(&manifest)?;
    Ok(manifest)
}

fn validate_ranges(m: &TrainingManifest) -> Result<()> {
    let mut expected = 0;
    for p in &m.phases {
        if p.start_step != expected || p.end_step <= p.start_step {
            return Err(Error::invalid(format!("phase {:?} does not continue at step {expected}", p.name)));
        }
        expected = p.end_step;
    }
    if expected != m.total_steps {
        return Err(Error::invalid(format!("phases end at {expected}, not {}", m.total_steps)));
    }
    if let Some(c) = m.checkpoints.iter().find(|c| **c == 0 || **c > m.total_steps) {
        return Err(Error::invalid(format!("checkpoint {c} is outside (0, {}]", m.total_steps)));
    }
    Ok(())
}

/// Checks step ranges and that every referenced file exists (relative
/// paths resolve against `base`).
pub fn validate_manifest(m: &TrainingManifest, base: &Path) -> Result<()> {
    validate_ranges(m)?;
    for p in &m.phases {
        for f in p.dataset.files() {
            let full = base.join(f);
            if !full.is_file() {
                return Err(Error::invalid(format!("phase {:?} references missing file {}", p.name, full.display())));
            }
        }
    }
    Ok(())
}
