//! Zero-shot retrieval evaluation over row-sliced dissimilarity matrices.

use std::ops::Range;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{EncodedSample, Model, PairScorer, PreparedSample, Scoring};

/// Rows `rows` of the query-by-gallery dissimilarity matrix. The query set is the
/// gallery, so each query's own column is excluded from retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySlice {
    pub rows: Range<usize>,
    pub values: Array2<f64>,
}

/// Streams row blocks of the full pairwise `d̂` matrix. Each entry is one pure call
/// of the scorer, so the blocks agree bit-for-bit with any other slicing.
pub struct SlicedSimilarity<'a> {
    samples: &'a [EncodedSample],
    scorer: &'a PairScorer<'a>,
    slice_rows: usize,
    next: usize,
}

impl<'a> SlicedSimilarity<'a> {
    pub fn new(samples: &'a [EncodedSample], scorer: &'a PairScorer<'a>, slice_rows: usize) -> Result<Self> {
        if slice_rows == 0 {
            return Err(Error::config("slice_rows must be at least 1"));
        }
        Ok(Self {
            samples,
            scorer,
            slice_rows,
            next: 0,
        })
    }
}

impl Iterator for SlicedSimilarity<'_> {
    type Item = SimilaritySlice;

    fn next(&mut self) -> Option<SimilaritySlice> {
        let n = self.samples.len();
        if self.next >= n {
            return None;
        }
        let rows = self.next..(self.next + self.slice_rows).min(n);
        self.next = rows.end;
        let (samples, scorer) = (self.samples, self.scorer);
        let flat: Vec<f64> = rows
            .clone()
            .into_par_iter()
            .flat_map_iter(|i| samples.iter().map(move |g| scorer.score(&samples[i], g)))
            .collect();
        let values = Array2::from_shape_vec((rows.len(), n), flat).expect("rows × n entries");
        Some(SimilaritySlice { rows, values })
    }
}

pub fn sliced_similarity<'a>(
    samples: &'a [EncodedSample],
    scorer: &'a PairScorer<'a>,
    slice_rows: usize,
) -> Result<SlicedSimilarity<'a>> {
    SlicedSimilarity::new(samples, scorer, slice_rows)
}

/// Full matrix assembled from its slices.
pub fn similarity_matrix(samples: &[EncodedSample], scorer: &PairScorer<'_>, slice_rows: usize) -> Result<Array2<f64>> {
    let n = samples.len();
    let mut out = Array2::zeros((n, n));
    for s in sliced_similarity(samples, scorer, slice_rows)? {
        out.slice_mut(ndarray::s![s.rows.clone(), ..]).assign(&s.values);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallResult {
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub n_queries: usize,
}

impl RecallResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("recall is always serializable")
    }

    /// Two aligned columns, `K` and `Recall@K` as a percentage.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>6}  {:>9}\n", "K", "Recall@K");
        for (k, r) in self.ks.iter().zip(&self.recalls) {
            out.push_str(&format!("{:>6}  {:>8.2}%\n", k, 100.0 * r));
        }
        out
    }
}

fn check_ks(ks: &[usize], gallery: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::config("at least one K is required"));
    }
    if ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("K values must be positive and strictly ascending"));
    }
    let max = *ks.last().unwrap();
    if max >= gallery {
        return Err(Error::config(format!(
            "K = {max} must be smaller than the gallery size {gallery}"
        )));
    }
    Ok(())
}

/// Zero-based rank of the nearest same-label gallery item for query `q`, self
/// excluded, ordering by `(d, gallery index)`. `None` when the query has no match.
fn first_hit_rank(row: ndarray::ArrayView1<'_, f64>, q: usize, labels: &[u32]) -> Option<usize> {
    let key = |j: usize| (row[j], j);
    let less = |a: (f64, usize), b: (f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).is_lt();
    let best = (0..labels.len())
        .filter(|&j| j != q && labels[j] == labels[q])
        .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))?;
    Some(
        (0..labels.len())
            .filter(|&j| j != q && less(key(j), key(best)))
            .count(),
    )
}

/// Recall@K from a stream of row slices covering every query once.
pub fn recall_at_k(
    slices: impl IntoIterator<Item = SimilaritySlice>,
    labels: &[u32],
    ks: &[usize],
) -> Result<RecallResult> {
    let n = labels.len();
    check_ks(ks, n)?;
    let mut hits = vec![0usize; ks.len()];
    let mut seen = vec![false; n];
    for slice in slices {
        if slice.values.ncols() != n || slice.values.nrows() != slice.rows.len() {
            return Err(Error::shape("similarity slice", n, slice.values.ncols()));
        }
        for (row, q) in slice.values.rows().into_iter().zip(slice.rows.clone()) {
            if q >= n || seen[q] {
                return Err(Error::config(format!("query row {q} repeated or out of range")));
            }
            seen[q] = true;
            if let Some(rank) = first_hit_rank(row, q, labels) {
                for (h, &k) in hits.iter_mut().zip(ks) {
                    if rank < k {
                        *h += 1;
                    }
                }
            }
        }
    }
    if let Some(q) = seen.iter().position(|s| !s) {
        return Err(Error::config(format!("query row {q} missing from the slices")));
    }
    Ok(RecallResult {
        ks: ks.to_vec(),
        recalls: hits.iter().map(|&h| h as f64 / n as f64).collect(),
        n_queries: n,
    })
}

/// Recall@K of a complete dissimilarity matrix.
pub fn recall_from_matrix(dists: &Array2<f64>, labels: &[u32], ks: &[usize]) -> Result<RecallResult> {
    let n = dists.nrows();
    recall_at_k(
        std::iter::once(SimilaritySlice {
            rows: 0..n,
            values: dists.clone(),
        }),
        labels,
        ks,
    )
}

/// Encodes `samples` with `model` and evaluates retrieval under `scoring`.
pub fn evaluate(
    model: &Model,
    samples: &[PreparedSample],
    scoring: Scoring,
    ks: &[usize],
    slice_rows: usize,
) -> Result<RecallResult> {
    check_ks(ks, samples.len())?;
    let encoded = model.encode_all(samples)?;
    let scorer = PairScorer::new(model, scoring)?;
    let labels: Vec<u32> = samples.iter().map(|s| s.label).collect();
    recall_at_k(sliced_similarity(&encoded, &scorer, slice_rows)?, &labels, ks)
}
