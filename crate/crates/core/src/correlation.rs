//! Region-pair correlation matrices and the kNN graphs built from them.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::ingest::{write_text, AdjacencySet, RegionRegistry, TripRecord};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_K: usize = 10;

/// Trip counts: entry `(i, j)` is the number of trips from `i` to `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MobilityCounts(pub Array2<u64>);

impl MobilityCounts {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn total(&self) -> u64 {
        self.0.sum()
    }

    /// Distinct `(origin, destination, count)` pairs with nonzero count.
    pub fn weighted_pairs(&self) -> Vec<(usize, usize, u64)> {
        self.0
            .indexed_iter()
            .filter(|(_, &c)| c > 0)
            .map(|((i, j), &c)| (i, j, c))
            .collect()
    }
}

pub fn cooccurrence_counts(trips: &[TripRecord], n: usize) -> MobilityCounts {
    let mut m = Array2::zeros((n, n));
    for t in trips {
        m[[t.origin, t.destination]] += t.count;
    }
    MobilityCounts(m)
}

/// Row-stochastic origin/destination distributions.
///
/// Row `i` of `origin` is the distribution over origins of trips ending at
/// region `i`; row `i` of `destination` is the distribution over destinations
/// of trips starting at `i`. Rows without any trips are all zero and flagged.
#[derive(Clone, Debug)]
pub struct OdDistributions {
    pub origin: Array2<f64>,
    pub destination: Array2<f64>,
    pub origin_zero_mass: Vec<bool>,
    pub destination_zero_mass: Vec<bool>,
}

pub fn od_distributions(counts: &MobilityCounts) -> OdDistributions {
    let c = counts.0.mapv(|v| v as f64);
    let (origin, origin_zero_mass) = normalize_rows(c.t().to_owned());
    let (destination, destination_zero_mass) = normalize_rows(c);
    OdDistributions {
        origin,
        destination,
        origin_zero_mass,
        destination_zero_mass,
    }
}

fn normalize_rows(mut m: Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let mut zero = Vec::with_capacity(m.nrows());
    for mut row in m.rows_mut() {
        let s = row.sum();
        zero.push(s == 0.0);
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    (m, zero)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrelationKind {
    AccessibilityOrigin,
    AccessibilityDestination,
    Accessibility,
    Vicinity,
    Functionality,
}

impl CorrelationKind {
    pub fn tag(self) -> &'static str {
        match self {
            CorrelationKind::AccessibilityOrigin => "AC_o",
            CorrelationKind::AccessibilityDestination => "AC_d",
            CorrelationKind::Accessibility => "AC",
            CorrelationKind::Vicinity => "VC",
            CorrelationKind::Functionality => "FC",
        }
    }
}

/// Symmetric `N × N` similarity matrix. `flagged[i]` marks regions whose
/// underlying vector was zero (their similarities are defined as 0).
#[derive(Clone, Debug)]
pub struct CorrelationMatrix {
    pub kind: CorrelationKind,
    pub values: Array2<f64>,
    pub flagged: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// Upper triangle (diagonal included) as `region_a,region_b,value`.
    pub fn write_csv(&self, path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<()> {
        let mut out = String::from("region_a,region_b,value\n");
        for i in 0..self.n() {
            for j in i..self.n() {
                out.push_str(&format!("{},{},{}\n", reg.id(i), reg.id(j), self.values[[i, j]]));
            }
        }
        write_text(path, &out)
    }
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Pairwise cosine similarity of rows. Zero rows get similarity 0 with
/// everything (themselves included) and are flagged; other diagonals are 1.
pub fn cosine_similarity_rows(m: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let n = m.nrows();
    let norms: Vec<f64> = m.rows().into_iter().map(|r| dot(r, r).sqrt()).collect();
    let zero: Vec<bool> = norms.iter().map(|&v| v == 0.0).collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        if zero[i] {
            continue;
        }
        out[[i, i]] = 1.0;
        for j in i + 1..n {
            if zero[j] {
                continue;
            }
            let c = (dot(m.row(i), m.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[[i, j]] = c;
            out[[j, i]] = c;
        }
    }
    (out, zero)
}

/// `AC = alpha·AC_o + (1 − alpha)·AC_d`, each the row cosine of the
/// corresponding distribution matrix. Returns `(AC_o, AC_d, AC)`.
pub fn accessibility_components(
    od: &OdDistributions,
    alpha: f64,
) -> Result<(CorrelationMatrix, CorrelationMatrix, CorrelationMatrix)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (ac_o, _) = cosine_similarity_rows(&od.origin);
    let (ac_d, _) = cosine_similarity_rows(&od.destination);
    let ac = &ac_o * alpha + &ac_d * (1.0 - alpha);
    let both_zero: Vec<bool> = od
        .origin_zero_mass
        .iter()
        .zip(&od.destination_zero_mass)
        .map(|(&a, &b)| a && b)
        .collect();
    Ok((
        CorrelationMatrix {
            kind: CorrelationKind::AccessibilityOrigin,
            values: ac_o,
            flagged: od.origin_zero_mass.clone(),
        },
        CorrelationMatrix {
            kind: CorrelationKind::AccessibilityDestination,
            values: ac_d,
            flagged: od.destination_zero_mass.clone(),
        },
        CorrelationMatrix {
            kind: CorrelationKind::Accessibility,
            values: ac,
            flagged: both_zero,
        },
    ))
}

pub fn accessibility_correlation(od: &OdDistributions, alpha: f64) -> Result<CorrelationMatrix> {
    accessibility_components(od, alpha).map(|(_, _, ac)| ac)
}

/// Cosine similarity of binary neighborhood indicators with the self bit set.
pub fn vicinity_correlation(adj: &AdjacencySet) -> CorrelationMatrix {
    let n = adj.len();
    let mut ind = Array2::zeros((n, n));
    for i in 0..n {
        ind[[i, i]] = 1.0;
        for j in adj.neighbors(i) {
            ind[[i, j]] = 1.0;
        }
    }
    let (values, flagged) = cosine_similarity_rows(&ind);
    CorrelationMatrix {
        kind: CorrelationKind::Vicinity,
        values,
        flagged,
    }
}

pub fn functionality_correlation(region_vectors: &Array2<f64>) -> CorrelationMatrix {
    let (values, flagged) = cosine_similarity_rows(region_vectors);
    CorrelationMatrix {
        kind: CorrelationKind::Functionality,
        values,
        flagged,
    }
}

/// Directed kNN graph: node `i` points at its `k` most correlated peers.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGraph {
    pub k: usize,
    edges: Vec<Vec<(usize, f64)>>,
}

impl RegionGraph {
    pub fn from_edges(k: usize, edges: Vec<Vec<(usize, f64)>>) -> Self {
        Self { k, edges }
    }

    pub fn n(&self) -> usize {
        self.edges.len()
    }

    pub fn out_edges(&self, i: usize) -> &[(usize, f64)] {
        &self.edges[i]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Row-major `N × N` mask: `j` is visible from `i` if it is an
    /// out-neighbor or `i` itself.
    pub fn attention_mask(&self) -> Vec<bool> {
        let n = self.n();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
            for &(j, _) in &self.edges[i] {
                mask[i * n + j] = true;
            }
        }
        mask
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, reg: &RegionRegistry) -> Result<()> {
        let mut out = String::from("source,target,weight\n");
        for (i, es) in self.edges.iter().enumerate() {
            for &(j, w) in es {
                out.push_str(&format!("{},{},{}\n", reg.id(i), reg.id(j), w));
            }
        }
        write_text(path, &out)
    }
}

/// Each node keeps its `k` highest-correlation peers with positive
/// similarity; ties go to the lower region index.
pub fn knn_graph(corr: &CorrelationMatrix, k: usize) -> Result<RegionGraph> {
    let n = corr.n();
    if k == 0 || k >= n {
        return Err(Error::contract(format!(
            "kNN needs 1 <= k < N, got k = {k} with N = {n}"
        )));
    }
    let edges = (0..n)
        .map(|i| {
            let mut peers: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, corr.values[[i, j]]))
                .filter(|&(_, v)| v > 0.0)
                .collect();
            peers.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            peers.truncate(k);
            peers
        })
        .collect();
    Ok(RegionGraph { k, edges })
}
