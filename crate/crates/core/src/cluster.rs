//! Diversity-preserving subsampling: k-means over document embeddings,
//! followed by a fixed quota of documents per cluster.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl, Document};
use crate::error::{Error, Result};
use crate::util::{rng_for, stable_hash_str};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedDoc {
    pub doc_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub doc_id: String,
    pub cluster: usize,
    /// Squared Euclidean distance to the assigned centroid.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// One entry per input document, in input order.
    pub assignments: Vec<ClusterAssignment>,
    pub sizes: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub objective: f64,
    /// Objective after every iteration, ending with the final assignment.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            k: 8,
            seed: 0,
            max_iters: 100,
            tol: 1e-9,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn validate_docs(docs: &[EmbeddedDoc]) -> Result<usize> {
    let first = docs.first().ok_or_else(|| Error::invalid("k-means needs at least one document"))?;
    let dim = first.vector.len();
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be at least 1"));
    }
    let mut seen = HashSet::with_capacity(docs.len());
    for d in docs {
        if d.vector.len() != dim {
            return Err(Error::invalid(format!(
                "document {:?} has dimension {}, expected {dim}",
                d.doc_id,
                d.vector.len()
            )));
        }
        if d.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("document {:?} has a non-finite embedding", d.doc_id)));
        }
        if !seen.insert(d.doc_id.as_str()) {
            return Err(Error::DuplicateId(d.doc_id.clone()));
        }
    }
    Ok(dim)
}

/// k-means++ seeding.
fn init_plus_plus(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            // All remaining points coincide with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// The objective is non-increasing across iterations. Iteration stops when
/// assignments stop changing, when the improvement drops below `tol`, or
/// after `max_iters`. The returned assignments always map every document to
/// its nearest returned centroid.
pub fn kmeans(docs: &[EmbeddedDoc], opts: &KMeansOptions) -> Result<ClusterModel> {
    let dim = validate_docs(docs)?;
    let n = docs.len();
    let k = opts.k;
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the number of documents ({n})")));
    }
    if opts.max_iters == 0 {
        return Err(Error::invalid("max_iters must be positive"));
    }
    if opts.tol.is_nan() || opts.tol < 0.0 {
        return Err(Error::invalid("tol must be non-negative"));
    }

    let points: Vec<&[f64]> = docs.iter().map(|d| d.vector.as_slice()).collect();
    let mut rng = rng_for(opts.seed, "kmeans++");
    let mut centroids = init_plus_plus(&points, k, &mut rng);

    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }

        // Update step: per-cluster means accumulated in input order.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let c = assign[i];
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut cost_old = vec![0.0; k];
        let mut cost_new = vec![0.0; k];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                sums[c].iter_mut().for_each(|s| *s *= inv);
            }
        }
        for (i, p) in points.iter().enumerate() {
            let c = assign[i];
            cost_old[c] += sq_dist(p, &centroids[c]);
            cost_new[c] += sq_dist(p, &sums[c]);
        }
        for c in 0..k {
            // The mean is optimal in exact arithmetic; keep the old centroid
            // when rounding says otherwise so the objective never increases.
            if counts[c] > 0 && cost_new[c] <= cost_old[c] {
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }

        // Reseed empty clusters at the points farthest from their centroid.
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(usize, f64)> = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, sq_dist(p, &centroids[assign[i]])))
                .collect();
            far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (c, (i, _)) in empty.into_iter().zip(far) {
                centroids[c] = points[i].to_vec();
            }
            changed = true;
        }

        let objective: f64 = points
            .iter()
            .enumerate()
            .map(|(i, p)| sq_dist(p, &centroids[assign[i]]))
            .sum();
        let improvement = history.last().map(|prev: &f64| prev - objective);
        history.push(objective);
        if !changed {
            break;
        }
        if let Some(delta) = improvement {
            if delta < opts.tol {
                break;
            }
        }
    }

    let mut assignments = Vec::with_capacity(n);
    let mut sizes = vec![0usize; k];
    let mut objective = 0.0;
    for (doc, p) in docs.iter().zip(&points) {
        let (c, d) = nearest(p, &centroids);
        sizes[c] += 1;
        objective += d;
        assignments.push(ClusterAssignment {
            doc_id: doc.doc_id.clone(),
            cluster: c,
            distance: d,
        });
    }
    history.push(objective);

    Ok(ClusterModel {
        centroids,
        assignments,
        sizes,
        objective,
        objective_history: history,
        iterations,
    })
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_clusters();
        if k == 0 || self.sizes.len() != k {
            return Err(Error::invalid("cluster model has inconsistent cluster count"));
        }
        let mut counts = vec![0usize; k];
        for a in &self.assignments {
            if a.cluster >= k {
                return Err(Error::invalid(format!("document {:?} assigned to unknown cluster {}", a.doc_id, a.cluster)));
            }
            counts[a.cluster] += 1;
        }
        if counts != self.sizes {
            return Err(Error::invalid("cluster sizes disagree with assignments"));
        }
        Ok(())
    }

    /// Member document ids of every cluster, in input order.
    pub fn members(&self) -> Vec<Vec<&str>> {
        let mut out = vec![Vec::new(); self.num_clusters()];
        for a in &self.assignments {
            out[a.cluster].push(a.doc_id.as_str());
        }
        out
    }
}

/// Uniformly samples `min(per_cluster, size)` ids without replacement from
/// every cluster. Output is grouped by cluster; within a cluster ids keep
/// input order.
pub fn quota_sample(model: &ClusterModel, per_cluster: usize, seed: u64) -> Result<Vec<String>> {
    model.validate()?;
    if per_cluster == 0 {
        return Err(Error::invalid("per-cluster quota must be positive"));
    }
    let mut out = Vec::new();
    for (c, members) in model.members().into_iter().enumerate() {
        let take = per_cluster.min(members.len());
        let mut rng = rng_for(seed, &format!("quota/{c}"));
        let mut picked = index::sample(&mut rng, members.len(), take).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| members[i].to_owned()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub num_docs: usize,
    pub num_clusters: usize,
    pub mean_size: f64,
    /// Population standard deviation of cluster sizes.
    pub std_size: f64,
    pub min_size: usize,
    pub max_size: usize,
    /// Equal-width buckets over [min_size, max_size]; `hi` is inclusive.
    pub histogram: Vec<SizeBucket>,
}

pub fn cluster_stats(model: &ClusterModel, buckets: usize) -> ClusterStats {
    let sizes = &model.sizes;
    let k = sizes.len();
    let n: usize = sizes.iter().sum();
    let mean = n as f64 / k as f64;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / k as f64;
    let min = sizes.iter().copied().min().unwrap_or(0);
    let max = sizes.iter().copied().max().unwrap_or(0);

    let buckets = buckets.max(1);
    let span = max - min + 1;
    let width = span.div_ceil(buckets).max(1);
    let mut histogram: Vec<SizeBucket> = (0..span.div_ceil(width))
        .map(|b| SizeBucket {
            lo: min + b * width,
            hi: (min + (b + 1) * width - 1).min(max),
            count: 0,
        })
        .collect();
    for &s in sizes {
        histogram[(s - min) / width].count += 1;
    }

    ClusterStats {
        num_docs: n,
        num_clusters: k,
        mean_size: mean,
        std_size: var.sqrt(),
        min_size: min,
        max_size: max,
        histogram,
    }
}

fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Signed feature hashing of word unigrams and bigrams into `dim`
/// dimensions, L2-normalized. A deterministic stand-in for a learned text
/// embedder.
pub fn hash_embed(docs: &[Document], dim: usize, seed: u64) -> Result<Vec<EmbeddedDoc>> {
    if dim < 8 {
        return Err(Error::invalid(format!("embedding dimension {dim} is below the minimum of 8")));
    }
    Ok(docs
        .iter()
        .map(|doc| EmbeddedDoc {
            doc_id: doc.id.clone(),
            vector: hash_embed_text(&doc.text, dim, seed),
        })
        .collect())
}

pub fn hash_embed_text(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let tokens = word_tokens(text);
    let mut features: Vec<String> = tokens.iter().map(|t| format!("u:{t}")).collect();
    features.extend(tokens.windows(2).map(|w| format!("b:{} {}", w[0], w[1])));
    if features.is_empty() {
        features.push(format!("raw:{}", text.trim()));
    }
    let mut v = vec![0.0; dim];
    for f in &features {
        let h = stable_hash_str(seed, f);
        let slot = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[slot] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every feature cancelled out; fall back to the first feature alone.
        let h = stable_hash_str(seed, &features[0]);
        v[(h % dim as u64) as usize] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddedDoc>> {
    let docs: Vec<EmbeddedDoc> = read_jsonl(path)?;
    if !docs.is_empty() {
        validate_docs(&docs)?;
    }
    Ok(docs)
}

pub fn write_embeddings(docs: &[EmbeddedDoc], path: &Path) -> Result<()> {
    write_jsonl(path, docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn doc(id: &str, v: &[f64]) -> EmbeddedDoc {
        EmbeddedDoc {
            doc_id: id.into(),
            vector: v.to_vec(),
        }
    }

    fn random_docs(n: usize, dim: usize, seed: u64) -> Vec<EmbeddedDoc> {
        let mut rng = rng_for(seed, "docs");
        (0..n)
            .map(|i| doc(&format!("d{i}"), &(0..dim).map(|_| rng.gen::<f64>()).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let docs = random_docs(7, 3, 1);
        let m = kmeans(&docs, &KMeansOptions { k: 7, ..Default::default() }).unwrap();
        assert_eq!(m.objective, 0.0);
        assert!(m.sizes.iter().all(|&s| s == 1));
        for (a, d) in m.assignments.iter().zip(&docs) {
            assert_eq!(m.centroids[a.cluster], d.vector);
        }
    }

    #[test]
    fn two_blobs_are_separated() {
        let mut rng = rng_for(3, "blobs");
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut docs = Vec::new();
        let mut truth = Vec::new();
        for i in 0..100 {
            let (cx, cy, label) = if i % 2 == 0 { (-5.0, 0.0, 0) } else { (5.0, 1.0, 1) };
            docs.push(doc(&format!("p{i}"), &[cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)]));
            truth.push(label);
        }
        let m = kmeans(&docs, &KMeansOptions { k: 2, seed: 11, ..Default::default() }).unwrap();
        // Brute-force oracle: each point's nearest centroid must be the one
        // shared by its blob, and the two blobs must get different clusters.
        let c0 = m.assignments[0].cluster;
        let c1 = m.assignments[1].cluster;
        assert_ne!(c0, c1);
        for (i, a) in m.assignments.iter().enumerate() {
            let expected = if truth[i] == 0 { c0 } else { c1 };
            assert_eq!(a.cluster, expected, "point {i}");
            let brute = (0..2)
                .map(|c| sq_dist(&docs[i].vector, &m.centroids[c]))
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert_eq!(brute, a.cluster);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let docs = random_docs(60, 4, 5);
        let opts = KMeansOptions { k: 6, seed: 9, max_iters: 50, tol: 0.0 };
        assert_eq!(kmeans(&docs, &opts).unwrap(), kmeans(&docs, &opts).unwrap());
    }

    #[test]
    fn objective_monotone_and_fixed_point() {
        for seed in 0..10 {
            let docs = random_docs(80, 5, seed);
            let m = kmeans(&docs, &KMeansOptions { k: 7, seed, max_iters: 100, tol: 0.0 }).unwrap();
            for w in m.objective_history.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {:?}", m.objective_history);
            }
            for (a, d) in m.assignments.iter().zip(&docs) {
                assert_eq!(nearest(&d.vector, &m.centroids).0, a.cluster);
            }
            assert_eq!(m.sizes.iter().sum::<usize>(), docs.len());
        }
    }

    #[test]
    fn errors_on_bad_input() {
        let docs = random_docs(3, 2, 0);
        assert!(kmeans(&docs, &KMeansOptions { k: 4, ..Default::default() }).is_err());
        assert!(kmeans(&[], &KMeansOptions::default()).is_err());
        let bad = vec![doc("a", &[1.0, f64::NAN])];
        assert!(kmeans(&bad, &KMeansOptions { k: 1, ..Default::default() }).is_err());
        let ragged = vec![doc("a", &[1.0, 2.0]), doc("b", &[1.0])];
        assert!(kmeans(&ragged, &KMeansOptions { k: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn duplicate_points_still_yield_k_clusters() {
        let docs: Vec<_> = (0..6).map(|i| doc(&format!("d{i}"), &[1.0, 1.0])).collect();
        let m = kmeans(&docs, &KMeansOptions { k: 3, ..Default::default() }).unwrap();
        assert_eq!(m.num_clusters(), 3);
        assert_eq!(m.objective, 0.0);
    }

    fn model_with_sizes(sizes: &[usize]) -> ClusterModel {
        let mut assignments = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            for i in 0..s {
                assignments.push(ClusterAssignment {
                    doc_id: format!("c{c}-{i}"),
                    cluster: c,
                    distance: 0.0,
                });
            }
        }
        ClusterModel {
            centroids: vec![vec![0.0]; sizes.len()],
            assignments,
            sizes: sizes.to_vec(),
            objective: 0.0,
            objective_history: vec![0.0],
            iterations: 1,
        }
    }

    #[test]
    fn quota_takes_min_of_quota_and_size() {
        let m = model_with_sizes(&[3, 15, 10, 1]);
        let ids = quota_sample(&m, 10, 4).unwrap();
        assert_eq!(ids.len(), 3 + 10 + 10 + 1);
        assert_eq!(ids.iter().filter(|id| id.starts_with("c0-")).count(), 3);
        let distinct: HashSet<_> = ids.iter().collect();
        assert_eq!(distinct.len(), ids.len());
        assert_eq!(ids, quota_sample(&m, 10, 4).unwrap());
    }

    #[test]
    fn quota_one_per_cluster() {
        let m = model_with_sizes(&[5, 5, 5, 5]);
        let ids = quota_sample(&m, 1, 0).unwrap();
        assert_eq!(ids.len(), 4);
        for (c, id) in ids.iter().enumerate() {
            assert!(id.starts_with(&format!("c{c}-")));
        }
    }

    #[test]
    fn full_scale_quota_count() {
        // 20k clusters with a quota of 10 yields 200k documents.
        let m = model_with_sizes(&vec![10; 20_000]);
        assert_eq!(quota_sample(&m, 10, 1).unwrap().len(), 200_000);
    }

    #[test]
    fn stats_of_two_sizes() {
        let s = cluster_stats(&model_with_sizes(&[2, 4]), 10);
        assert_eq!(s.mean_size, 3.0);
        assert_eq!(s.std_size, 1.0);
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<usize>(), 2);
    }

    #[test]
    fn stats_of_equal_sizes() {
        let s = cluster_stats(&model_with_sizes(&[6, 6, 6]), 4);
        assert_eq!(s.mean_size, 6.0);
        assert_eq!(s.std_size, 0.0);
        assert_eq!(s.histogram, vec![SizeBucket { lo: 6, hi: 6, count: 3 }]);
    }

    #[test]
    fn hash_embed_is_normalized_and_deterministic() {
        let docs = vec![
            Document::new("a", "hey are you coming tonight", "web"),
            Document::new("b", "hey are you coming tonight", "web"),
            Document::new("c", "!!!", "web"),
        ];
        let e = hash_embed(&docs, 64, 7).unwrap();
        assert_eq!(e[0].vector, e[1].vector);
        for d in &e {
            let norm: f64 = d.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        assert!(hash_embed(&docs, 4, 0).is_err());
    }

    #[test]
    fn disjoint_vocabulary_is_nearly_orthogonal() {
        // 1k random pairs of sentences over disjoint vocabularies.
        let mut rng = rng_for(2024, "disjoint");
        let vocab: Vec<String> = (0..4000).map(|i| format!("w{i}x")).collect();
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..1000 {
            let len_a = rng.gen_range(4..16);
            let len_b = rng.gen_range(4..16);
            let a: Vec<&str> = (0..len_a).map(|_| vocab[rng.gen_range(0..2000)].as_str()).collect();
            let b: Vec<&str> = (0..len_b).map(|_| vocab[rng.gen_range(2000..4000)].as_str()).collect();
            let va = hash_embed_text(&a.join(" "), 256, 0);
            let vb = hash_embed_text(&b.join(" "), 256, 0);
            let cos: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
            worst = worst.max(cos);
        }
        assert!(worst <= 0.2, "max cosine {worst}");
    }
}
