//! Retrieval metrics: distance matrices, mAP and CMC.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance used to rank gallery items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(q, g)`.
    Cosine,
}

/// Pairwise `[Q x G]` distances between query and gallery rows.
pub fn distance_matrix(query: &Tensor, gallery: &Tensor, metric: Metric) -> Result<Tensor> {
    let (q, e) = query.dims2()?;
    let (g, e2) = gallery.dims2()?;
    if e != e2 {
        return Err(Error::shape("distance_matrix", query.shape(), gallery.shape()));
    }
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let mut out = Vec::with_capacity(q * g);
    for i in 0..q {
        let qi = query.row(i);
        for j in 0..g {
            let gj = gallery.row(j);
            let d = match metric {
                Metric::Euclidean => libm::sqrt(qi.iter().zip(gj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()),
                Metric::Cosine => {
                    let denom = norm(qi) * norm(gj);
                    let dot: f64 = qi.iter().zip(gj).map(|(a, b)| a * b).sum();
                    if denom > 0.0 {
                        1.0 - dot / denom
                    } else {
                        1.0
                    }
                }
            };
            out.push(d);
        }
    }
    Tensor::new(&[q, g], out)
}

/// Ranking quality of one query set against one gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    /// `[Q x G]`
    pub distances: Tensor,
    pub per_query_ap: Vec<f64>,
    pub map: f64,
    /// `cmc[r - 1]` is the fraction of queries with a match within the top `r`.
    pub cmc: Vec<f64>,
    /// Ranks requested for summary reporting.
    pub ks: Vec<usize>,
}

impl RetrievalReport {
    /// CMC at rank `k`, saturating at the gallery size.
    pub fn cmc_at(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.cmc[k.min(self.cmc.len()) - 1]
    }
}

fn check_labels(dist: &Tensor, q_labels: &[usize], g_labels: &[usize]) -> Result<(usize, usize)> {
    let (q, g) = dist.dims2()?;
    if q_labels.len() != q || g_labels.len() != g {
        return Err(Error::shape("evaluate", dist.shape(), &[q_labels.len(), g_labels.len()]));
    }
    for (i, y) in q_labels.iter().enumerate() {
        if !g_labels.contains(y) {
            return Err(Error::Evaluation(format!("query {i} has no gallery match")));
        }
    }
    Ok((q, g))
}

/// Ranks each query's gallery (ascending distance, ties by gallery index) and
/// computes AP, mAP and the CMC curve.
pub fn evaluate(dist: &Tensor, q_labels: &[usize], g_labels: &[usize], ks: &[usize]) -> Result<RetrievalReport> {
    let (q, g) = check_labels(dist, q_labels, g_labels)?;
    let mut per_query_ap = Vec::with_capacity(q);
    let mut first_hit = vec![0usize; g];
    for i in 0..q {
        let row = dist.row(i);
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevant = g_labels.iter().filter(|&&y| y == q_labels[i]).count();
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &j) in order.iter().enumerate() {
            if g_labels[j] == q_labels[i] {
                if hits == 0 {
                    first_hit[pos] += 1;
                }
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        per_query_ap.push(precision_sum / relevant as f64);
    }
    let mut cmc = Vec::with_capacity(g);
    let mut found = 0usize;
    for count in first_hit {
        found += count;
        cmc.push(found as f64 / q as f64);
    }
    let map = per_query_ap.iter().sum::<f64>() / q as f64;
    Ok(RetrievalReport {
        distances: dist.clone(),
        per_query_ap,
        map,
        cmc,
        ks: ks.to_vec(),
    })
}

/// Independent mAP computation for cross-checking [`evaluate`].
pub mod oracle {
    use super::*;

    /// Explicit rank of every gallery item, by counting the items that precede it.
    fn ranked_list(row: &[f64]) -> Vec<usize> {
        let g = row.len();
        let mut ranked = vec![usize::MAX; g];
        for j in 0..g {
            let ahead = (0..g)
                .filter(|&i| row[i] < row[j] || (row[i] == row[j] && i < j))
                .count();
            ranked[ahead] = j;
        }
        ranked
    }

    /// Average precision of each query, enumerating the full ranked list and
    /// recounting the relevant prefix at every hit.
    pub fn average_precisions(dist: &Tensor, q_labels: &[usize], g_labels: &[usize]) -> Result<Vec<f64>> {
        let (q, _) = check_labels(dist, q_labels, g_labels)?;
        let mut out = Vec::with_capacity(q);
        for i in 0..q {
            let ranked = ranked_list(dist.row(i));
            let is_rel = |j: usize| g_labels[j] == q_labels[i];
            let total_rel = ranked.iter().filter(|&&j| is_rel(j)).count();
            let mut sum = 0.0;
            for r in 0..ranked.len() {
                if is_rel(ranked[r]) {
                    let rel_prefix = ranked[..=r].iter().filter(|&&j| is_rel(j)).count();
                    sum += rel_prefix as f64 / (r + 1) as f64;
                }
            }
            out.push(sum / total_rel as f64);
        }
        Ok(out)
    }

    pub fn map_oracle(dist: &Tensor, q_labels: &[usize], g_labels: &[usize]) -> Result<f64> {
        let aps = average_precisions(dist, q_labels, g_labels)?;
        Ok(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}
