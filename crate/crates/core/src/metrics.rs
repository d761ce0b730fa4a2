//! Verification and identification metrics over embeddings.
//!
//! Embeddings are L2-normalized before any distance is taken, so every
//! threshold lives in `[0, 2]`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    A,
    B,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(Error::Argument(format!("unknown modality `{other}`"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

/// Embedding vectors with identity labels and a modality tag per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    vectors: Tensor,
    normalized: Tensor,
    labels: Vec<u64>,
    modality: Vec<Modality>,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, labels: Vec<u64>, modality: Vec<Modality>) -> Result<Self> {
        let (n, _) = vectors.dims2()?;
        if labels.len() != n || modality.len() != n {
            return Err(Error::Argument(format!(
                "{n} vectors but {} labels and {} modality tags",
                labels.len(),
                modality.len()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Argument("embeddings must be finite".into()));
        }
        let normalized = l2_normalize_rows(&vectors)?;
        Ok(Self {
            vectors,
            normalized,
            labels,
            modality,
        })
    }

    /// All rows in one modality.
    pub fn single_modality(vectors: Tensor, labels: Vec<u64>, modality: Modality) -> Result<Self> {
        let n = labels.len();
        Self::new(vectors, labels, vec![modality; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Rows of one modality, as a new set.
    pub fn select(&self, m: Modality) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.modality[i] == m).collect();
        if idx.is_empty() {
            return Err(Error::Argument(format!("no rows with modality {m}")));
        }
        Self::new(
            self.vectors.gather_rows(&idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            vec![m; idx.len()],
        )
    }

    /// Euclidean distance between normalized rows `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclid(self.normalized.row(i), self.normalized.row(j))
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Scales every row to unit norm; zero rows stay zero.
pub fn l2_normalize_rows(t: &Tensor) -> Result<Tensor> {
    let (n, d) = t.dims2()?;
    let mut out = t.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(out)
}

/// A verification pair: row indices and whether they share an identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub same: bool,
}

pub fn pair_distances(pairs: &[Pair], set: &EmbeddingSet) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Argument("empty pair list".into()));
    }
    pairs
        .iter()
        .map(|p| {
            if p.i >= set.len() || p.j >= set.len() {
                return Err(Error::Argument(format!(
                    "pair ({}, {}) out of range for {} embeddings",
                    p.i,
                    p.j,
                    set.len()
                )));
            }
            Ok(set.distance(p.i, p.j))
        })
        .collect()
}

fn accuracy_at(pairs: &[Pair], dist: &[f64], threshold: f64) -> f64 {
    let correct = pairs
        .iter()
        .zip(dist)
        .filter(|(p, &d)| (d < threshold) == p.same)
        .count();
    correct as f64 / pairs.len() as f64
}

/// Fraction of pairs classified correctly when "same" means distance below
/// `threshold`.
pub fn verify_pairs(pairs: &[Pair], set: &EmbeddingSet, threshold: f64) -> Result<f64> {
    let dist = pair_distances(pairs, set)?;
    Ok(accuracy_at(pairs, &dist, threshold))
}

/// Candidate thresholds: the smallest distance (accept nothing), midpoints
/// between consecutive distinct distances, and one past the largest
/// (accept everything).
pub fn sweep_thresholds(distances: &[f64]) -> Vec<f64> {
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    d.dedup();
    let mut out = Vec::with_capacity(d.len() + 1);
    if let (Some(&lo), Some(&hi)) = (d.first(), d.last()) {
        out.push(lo);
        out.extend(d.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out.push(hi + 1.0);
    }
    out
}

/// Best accuracy over the swept thresholds, with the first threshold that
/// attains it.
pub fn best_verification(pairs: &[Pair], set: &EmbeddingSet) -> Result<(f64, f64)> {
    let dist = pair_distances(pairs, set)?;
    let mut best = (f64::NAN, -1.0);
    for t in sweep_thresholds(&dist) {
        let acc = accuracy_at(pairs, &dist, t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValAtFar {
    /// True-accept rate; 0 when no threshold meets the bound.
    pub val: f64,
    /// False-accept rate at the chosen threshold.
    pub far: f64,
    pub threshold: Option<f64>,
    /// False when no candidate threshold satisfied the FAR bound.
    pub satisfied: bool,
}

/// Highest true-accept rate among thresholds (each distinct pair distance,
/// accepting `d ≤ t`) whose false-accept rate is at most `far_target`.
pub fn val_at_far(pairs: &[Pair], set: &EmbeddingSet, far_target: f64) -> Result<ValAtFar> {
    let dist = pair_distances(pairs, set)?;
    let n_same = pairs.iter().filter(|p| p.same).count();
    let n_diff = pairs.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(Error::Argument(
            "need at least one same and one different pair".into(),
        ));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));

    let mut best = ValAtFar {
        val: 0.0,
        far: 0.0,
        threshold: None,
        satisfied: false,
    };
    let (mut ta, mut fa) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = dist[order[k]];
        while k < order.len() && dist[order[k]] == t {
            if pairs[order[k]].same {
                ta += 1;
            } else {
                fa += 1;
            }
            k += 1;
        }
        let far = fa as f64 / n_diff as f64;
        let val = ta as f64 / n_same as f64;
        if far <= far_target && (!best.satisfied || val > best.val) {
            best = ValAtFar {
                val,
                far,
                threshold: Some(t),
                satisfied: true,
            };
        }
    }
    Ok(best)
}

/// Fraction of probes whose identity is among their `k` nearest gallery
/// entries; ties in distance go to the lower gallery index.
pub fn rank_k_identification(
    gallery: &EmbeddingSet,
    probes: &EmbeddingSet,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("k must be ≥ 1".into()));
    }
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::Argument(
            "gallery and probes must be non-empty".into(),
        ));
    }
    if gallery.dim() != probes.dim() {
        return Err(crate::error::dim_err(
            "rank_k",
            gallery.vectors.shape(),
            probes.vectors.shape(),
        ));
    }
    let mut hits = 0usize;
    for p in 0..probes.len() {
        let label = probes.labels[p];
        if !gallery.labels.contains(&label) {
            return Err(Error::Argument(format!(
                "probe identity {label} is not in the gallery"
            )));
        }
        let q = probes.normalized.row(p);
        let mut order: Vec<(f64, usize)> = (0..gallery.len())
            .map(|g| (euclid(q, gallery.normalized.row(g)), g))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if order
            .iter()
            .take(k)
            .any(|&(_, g)| gallery.labels[g] == label)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// `count` pairs, half same-identity and half different, drawn with a seeded
/// generator. When both modalities are present every pair crosses them.
pub fn balanced_pairs(set: &EmbeddingSet, count: usize, seed: u64) -> Result<Vec<Pair>> {
    let cross = set.modality.contains(&Modality::A) && set.modality.contains(&Modality::B);
    let mut by_label: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, &l) in set.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let eligible = |i: usize, j: usize| i != j && (!cross || set.modality[i] != set.modality[j]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    let n = set.len();
    let budget = 100 * count.max(1);
    let mut attempts = 0;
    while pairs.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Argument(format!(
                "could not draw {count} balanced pairs; too few same-identity rows across modalities?"
            )));
        }
        let want_same = pairs.len() % 2 == 0;
        let i = rng.random_range(0..n);
        let j = if want_same {
            let peers = &by_label[&set.labels[i]];
            peers[rng.random_range(0..peers.len())]
        } else {
            rng.random_range(0..n)
        };
        let same = set.labels[i] == set.labels[j];
        if eligible(i, j) && same == want_same {
            pairs.push(Pair { i, j, same });
        }
    }
    Ok(pairs)
}

/// Reads `id,modality,v_0..v_{d-1}` rows. The header line and `#` comments
/// are skipped.
pub fn read_embeddings_csv<R: BufRead>(r: R) -> Result<EmbeddingSet> {
    let mut labels = Vec::new();
    let mut modality = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("id") {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        let mut fields = trimmed.split(',');
        let id = fields
            .next()
            .and_then(|f| f.trim().parse::<u64>().ok())
            .ok_or_else(|| bad("identity must be a non-negative integer".into()))?;
        let m = fields
            .next()
            .ok_or_else(|| bad("missing modality".into()))?
            .parse::<Modality>()
            .map_err(|e| bad(e.to_string()))?;
        let row = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        if row.is_empty() || row.iter().any(|v| !v.is_finite()) {
            return Err(bad("expected finite embedding values".into()));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(bad(format!("expected {w} values, got {}", row.len())))
            }
            _ => {}
        }
        labels.push(id);
        modality.push(m);
        values.extend(row);
    }
    let d = width.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "no embedding rows".into(),
    })?;
    EmbeddingSet::new(Tensor::matrix(labels.len(), d, values)?, labels, modality)
}

pub fn write_embeddings_csv<W: Write>(mut w: W, set: &EmbeddingSet) -> Result<()> {
    let cols: Vec<String> = (0..set.dim()).map(|j| format!("v_{j}")).collect();
    writeln!(w, "id,modality,{}", cols.join(","))?;
    for i in 0..set.len() {
        let row: Vec<String> = set.vectors.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", set.labels[i], set.modality[i], row.join(","))?;
    }
    Ok(())
}

/// Reads `i,j,same` rows; `same` is `1`/`0` or `true`/`false`.
pub fn read_pairs_csv<R: BufRead>(r: R) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('i') {
            continue;
        }
        let f: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let bad = || Error::Parse {
            line: lineno,
            msg: "expected `i,j,same`".into(),
        };
        if f.len() != 3 {
            return Err(bad());
        }
        let same = match f[2] {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        };
        pairs.push(Pair {
            i: f[0].parse().map_err(|_| bad())?,
            j: f[1].parse().map_err(|_| bad())?,
            same,
        });
    }
    Ok(pairs)
}
