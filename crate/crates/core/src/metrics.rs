//! Top-K ranking metrics, popularity stratification, and inverse item
//! popularity histograms.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::score;
use crate::graph::{AggregationMatrix, InteractionGraph};
use crate::mat::Mat;

/// Recall/NDCG pair for one item stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StratumMetrics {
    pub recall: f64,
    pub ndcg: f64,
}

/// Structured evaluation output.
///
/// The serialized shape is the documented interface; per-user arrays are
/// kept in memory only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub all: StratumMetrics,
    pub niche: StratumMetrics,
    pub popular: StratumMetrics,
    pub iip_histogram: IipHistogram,
    #[serde(skip)]
    pub per_user_recall: Vec<(usize, f64)>,
    #[serde(skip)]
    pub per_user_ndcg: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IipHistogram {
    pub bins: usize,
    pub counts: Vec<u64>,
}

impl IipHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mass in bins whose left edge is at or above `threshold`.
    pub fn mass_above(&self, threshold: f64) -> u64 {
        let start = (threshold * self.bins as f64).ceil() as usize;
        self.counts[start.min(self.bins)..].iter().sum()
    }

    /// CSV rows `bin_left,bin_right,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_left,bin_right,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            let left = i as f64 / self.bins as f64;
            let right = (i + 1) as f64 / self.bins as f64;
            writeln!(w, "{left},{right},{c}")?;
        }
        Ok(())
    }
}

/// Top-k items for a user by pooled-embedding score, excluding masked
/// items. Ties break toward the lower item index, so rankings are stable.
pub fn topk(pooled: &Mat, num_users: usize, user: usize, k: usize, masked: &[bool]) -> Vec<usize> {
    let num_items = masked.len();
    let mut scored: Vec<(f64, usize)> = (0..num_items)
        .filter(|&i| !masked[i])
        .map(|i| (score(pooled, num_users, user, i), i))
        .collect();
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// |top-k hits| / |relevant|. Callers exclude users with empty relevant sets.
pub fn recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// DCG over hit positions (1-based, weight 1/log2(p+1)) divided by the
/// ideal DCG for min(k, |relevant|) hits.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal = k.min(relevant.len());
    let idcg: f64 = (0..ideal).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Pareto split of items with train degree >= 1: the top 20% by degree
/// (ceiling, ties toward the lower index) are popular, the rest niche.
/// Zero-degree items belong to neither stratum.
pub fn popularity_split(graph: &InteractionGraph) -> (Vec<usize>, Vec<usize>) {
    let mut items: Vec<usize> = (0..graph.num_items())
        .filter(|&i| graph.degree(graph.item_node(i)) >= 1)
        .collect();
    items.sort_unstable_by(|&a, &b| {
        graph
            .degree(graph.item_node(b))
            .cmp(&graph.degree(graph.item_node(a)))
            .then(a.cmp(&b))
    });
    let cut = (items.len() as f64 * 0.2).ceil() as usize;
    let popular = items[..cut].to_vec();
    let mut niche = items[cut..].to_vec();
    niche.sort_unstable();
    (popular, niche)
}

/// Inverse item popularity on train degrees: 1 / sqrt(degree).
pub fn iip(graph: &InteractionGraph, item: usize) -> Result<f64> {
    let d = graph.degree(graph.item_node(item));
    if d == 0 {
        return Err(Error::ZeroDegree(graph.item_node(item)));
    }
    Ok(1.0 / (d as f64).sqrt())
}

fn bin_index(value: f64, bins: usize) -> usize {
    // Right-closed equal-width bins over [0, 1]; the first bin keeps 0.
    let clamped = value.clamp(0.0, 1.0);
    let idx = (clamped * bins as f64).ceil() as usize;
    idx.saturating_sub(1).min(bins - 1)
}

/// Histogram of static inverse item popularity over degree >= 1 items.
pub fn iip_histogram(graph: &InteractionGraph, bins: usize) -> IipHistogram {
    let mut counts = vec![0u64; bins];
    for item in 0..graph.num_items() {
        if let Ok(v) = iip(graph, item) {
            counts[bin_index(v, bins)] += 1;
        }
    }
    IipHistogram { bins, counts }
}

/// Effective inverse popularity under the current aggregation weights:
/// for item i, the mean over incident users u of W[u, i] * sqrt(deg(u)).
/// At the initial degree normalization this reduces to 1/sqrt(deg(i)), and
/// it tracks how momentum updates rebalance the weight mass. Values above 1
/// land in the top bin.
pub fn weighted_iip_all(graph: &InteractionGraph, weights: &AggregationMatrix) -> Vec<Option<f64>> {
    let m = graph.num_users();
    let mut acc = vec![0.0f64; graph.num_items()];
    for u in 0..m {
        let su = (graph.degree(u) as f64).sqrt();
        let (cols, vals) = weights.row(u);
        for (&item_node, &w) in cols.iter().zip(vals.iter()) {
            acc[item_node - m] += w * su;
        }
    }
    (0..graph.num_items())
        .map(|i| {
            let d = graph.degree(graph.item_node(i));
            (d > 0).then(|| acc[i] / d as f64)
        })
        .collect()
}

pub fn weighted_iip_histogram(
    graph: &InteractionGraph,
    weights: &AggregationMatrix,
    bins: usize,
) -> IipHistogram {
    let mut counts = vec![0u64; bins];
    for v in weighted_iip_all(graph, weights).into_iter().flatten() {
        counts[bin_index(v, bins)] += 1;
    }
    IipHistogram { bins, counts }
}

/// Mask for ranking: the user's train items plus every item that has no
/// train interaction at all (those are never recommended).
pub fn ranking_mask(graph: &InteractionGraph, user_train_items: &[usize]) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..graph.num_items())
        .map(|i| graph.degree(graph.item_node(i)) == 0)
        .collect();
    for &i in user_train_items {
        mask[i] = true;
    }
    mask
}

/// Mean validation recall@k over users with relevant items; the light call
/// used by the training loop's update condition.
pub fn mean_recall(
    graph: &InteractionGraph,
    pooled: &Mat,
    train_by_user: &[Vec<usize>],
    relevant_by_user: &[Vec<usize>],
    k: usize,
) -> f64 {
    let m = graph.num_users();
    let mut total = 0.0;
    let mut eligible = 0usize;
    for u in 0..m {
        if relevant_by_user[u].is_empty() {
            continue;
        }
        let mask = ranking_mask(graph, &train_by_user[u]);
        let ranked = topk(pooled, m, u, k, &mask);
        let relevant: HashSet<usize> = relevant_by_user[u].iter().copied().collect();
        total += recall_at_k(&ranked, &relevant, k);
        eligible += 1;
    }
    if eligible == 0 {
        0.0
    } else {
        total / eligible as f64
    }
}

/// Full stratified evaluation against `relevant_by_user` (normally the test
/// split). Stratified metrics restrict the relevance set, not the candidate
/// set: rankings always run over all unmasked items and only hits are
/// filtered by stratum. Users whose restricted set is empty are skipped for
/// that stratum.
pub fn evaluate(
    graph: &InteractionGraph,
    pooled: &Mat,
    train_by_user: &[Vec<usize>],
    relevant_by_user: &[Vec<usize>],
    k: usize,
    weights: &AggregationMatrix,
    bins: usize,
) -> EvalReport {
    let m = graph.num_users();
    let (popular, _) = popularity_split(graph);
    let popular_set: HashSet<usize> = popular.into_iter().collect();

    let mut sums = [StratumMetrics::default(); 3]; // all, niche, popular
    let mut counts = [0usize; 3];
    let mut per_user_recall = Vec::new();
    let mut per_user_ndcg = Vec::new();

    for u in 0..m {
        if relevant_by_user[u].is_empty() {
            continue;
        }
        let mask = ranking_mask(graph, &train_by_user[u]);
        let ranked = topk(pooled, m, u, k, &mask);

        let all: HashSet<usize> = relevant_by_user[u].iter().copied().collect();
        // Strata partition the degree >= 1 items; zero-degree relevants drop
        // out of both restricted sets.
        let niche: HashSet<usize> = all
            .iter()
            .copied()
            .filter(|i| !popular_set.contains(i) && graph.degree(graph.item_node(*i)) >= 1)
            .collect();
        let pop: HashSet<usize> = all
            .iter()
            .copied()
            .filter(|i| popular_set.contains(i))
            .collect();

        for (idx, relevant) in [&all, &niche, &pop].into_iter().enumerate() {
            if relevant.is_empty() {
                continue;
            }
            let r = recall_at_k(&ranked, relevant, k);
            let n = ndcg_at_k(&ranked, relevant, k);
            sums[idx].recall += r;
            sums[idx].ndcg += n;
            counts[idx] += 1;
            if idx == 0 {
                per_user_recall.push((u, r));
                per_user_ndcg.push((u, n));
            }
        }
    }

    let avg = |idx: usize| {
        if counts[idx] == 0 {
            StratumMetrics::default()
        } else {
            StratumMetrics {
                recall: sums[idx].recall / counts[idx] as f64,
                ndcg: sums[idx].ndcg / counts[idx] as f64,
            }
        }
    };

    EvalReport {
        k,
        all: avg(0),
        niche: avg(1),
        popular: avg(2),
        iip_histogram: weighted_iip_histogram(graph, weights, bins),
        per_user_recall,
        per_user_ndcg,
    }
}
