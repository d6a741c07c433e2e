//! Embedding propagation backbone: layer-wise aggregation, average pooling,
//! inner-product scoring, and the pairwise ranking loss with its analytic
//! gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AggregationMatrix, InteractionGraph};
use crate::mat::{dot, Mat};
use crate::optim::ParamStore;

/// Initial embeddings drawn from N(0, std^2).
pub fn init_embeddings(num_nodes: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let mut e = Mat::zeros(num_nodes, dim);
    crate::rng::fill_normal(rng, std, e.data_mut());
    e
}

/// Layer-wise propagation: returns `layers + 1` snapshots with the input
/// first and each following snapshot one aggregation step deeper.
pub fn propagate(weights: &AggregationMatrix, e0: &Mat, layers: usize) -> Result<Vec<Mat>> {
    let mut snapshots = Vec::with_capacity(layers + 1);
    snapshots.push(e0.clone());
    for _ in 0..layers {
        let next = weights.spmm(snapshots.last().unwrap())?;
        snapshots.push(next);
    }
    Ok(snapshots)
}

/// Arithmetic mean over layer snapshots.
pub fn pool(snapshots: &[Mat]) -> Result<Mat> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::EmptyInput("pool needs at least one snapshot".into()))?;
    let mut out = first.clone();
    for s in &snapshots[1..] {
        out.axpy(1.0, s)?;
    }
    out.scale(1.0 / snapshots.len() as f64);
    Ok(out)
}

/// Propagate and pool in one call.
pub fn pooled_embeddings(weights: &AggregationMatrix, e0: &Mat, layers: usize) -> Result<Mat> {
    pool(&propagate(weights, e0, layers)?)
}

/// Preference score: inner product of the pooled user row and item row.
pub fn score(pooled: &Mat, num_users: usize, user: usize, item: usize) -> f64 {
    dot(pooled.row(user), pooled.row(num_users + item))
}

/// (user, positive item, negative item) triplets for ranking training.
#[derive(Debug, Clone, Default)]
pub struct BprBatch {
    pub triplets: Vec<(usize, usize, usize)>,
}

impl BprBatch {
    pub fn new(triplets: Vec<(usize, usize, usize)>) -> Self {
        BprBatch { triplets }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Check positives/negatives against the train graph.
    pub fn validate(&self, graph: &InteractionGraph) -> Result<()> {
        for &(u, pos, neg) in &self.triplets {
            if u >= graph.num_users() || pos >= graph.num_items() || neg >= graph.num_items() {
                return Err(Error::Config(format!(
                    "triplet ({u},{pos},{neg}) out of range"
                )));
            }
            if !graph.has_edge(u, graph.item_node(pos)) {
                return Err(Error::Config(format!(
                    "item {pos} is not a positive of user {u}"
                )));
            }
            if graph.has_edge(u, graph.item_node(neg)) {
                return Err(Error::Config(format!(
                    "item {neg} is not a negative of user {u}"
                )));
            }
        }
        Ok(())
    }
}

/// Numerically stable -ln sigmoid(x) = softplus(-x).
fn neg_log_sigmoid(x: f64) -> f64 {
    // softplus(-x) = max(-x, 0) + ln(1 + exp(-|x|))
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Pairwise ranking loss: sum over triplets of -ln sigmoid(s_pos - s_neg)
/// plus gamma * ||Theta||^2 over every registered trainable array.
pub fn bpr_loss(
    batch: &BprBatch,
    pooled: &Mat,
    num_users: usize,
    gamma: f64,
    theta: &ParamStore,
) -> f64 {
    let mut loss = 0.0;
    for &(u, pos, neg) in &batch.triplets {
        let margin = score(pooled, num_users, u, pos) - score(pooled, num_users, u, neg);
        loss += neg_log_sigmoid(margin);
    }
    loss + gamma * theta.norm_sq()
}

/// Analytic gradient of [`bpr_loss`] with respect to the initial embeddings,
/// through pooling and `layers` propagation steps.
///
/// The regularized parameter set here is the embedding table itself, so the
/// `2 gamma E0` term is included.
pub fn bpr_backward(
    batch: &BprBatch,
    e0: &Mat,
    weights: &AggregationMatrix,
    layers: usize,
    num_users: usize,
    gamma: f64,
) -> Result<Mat> {
    let snapshots = propagate(weights, e0, layers)?;
    let pooled = pool(&snapshots)?;

    // d loss / d pooled
    let mut g_pooled = Mat::zeros(pooled.rows(), pooled.cols());
    for &(u, pos, neg) in &batch.triplets {
        let pos_node = num_users + pos;
        let neg_node = num_users + neg;
        let margin = score(&pooled, num_users, u, pos) - score(&pooled, num_users, u, neg);
        // d(-ln sigmoid(m))/dm = sigmoid(m) - 1, computed stably.
        let coeff = -1.0 / (1.0 + margin.exp());
        let (e_u, e_pos, e_neg) = (
            pooled.row(u).to_vec(),
            pooled.row(pos_node).to_vec(),
            pooled.row(neg_node).to_vec(),
        );
        for (g, (p, n)) in g_pooled
            .row_mut(u)
            .iter_mut()
            .zip(e_pos.iter().zip(e_neg.iter()))
        {
            *g += coeff * (p - n);
        }
        for (g, v) in g_pooled.row_mut(pos_node).iter_mut().zip(e_u.iter()) {
            *g += coeff * v;
        }
        for (g, v) in g_pooled.row_mut(neg_node).iter_mut().zip(e_u.iter()) {
            *g -= coeff * v;
        }
    }

    // pooled = (1/(L+1)) sum_l W^l E0, so
    // d loss / d E0 = (1/(L+1)) sum_l (W^T)^l g_pooled.
    let mut grad = g_pooled.clone();
    let mut carried = g_pooled;
    for _ in 0..layers {
        carried = weights.spmm_t(&carried)?;
        grad.axpy(1.0, &carried)?;
    }
    grad.scale(1.0 / (layers + 1) as f64);

    grad.axpy(2.0 * gamma, e0)?;
    Ok(grad)
}
