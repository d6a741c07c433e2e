//! Variational encoder-decoder that estimates per-edge interaction
//! likelihoods and turns them into aggregation weights.
//!
//! For an edge with center `v` and neighbor `x`, the encoder maps the
//! concatenation (e_x || e_v) to a Gaussian posterior (mu, log sigma^2),
//! a latent is drawn by reparameterization, and the decoder reconstructs
//! e_x from (z || e_v). The evidence-bound loss
//!
//!   total = lambda * ||e_x - x_hat||^2 + beta * sum_k (mu^2 + s^2 - ln s^2 - 1) / 2
//!
//! is nonnegative, so `F(v) * exp(-total)` lies in (0, F(v)] and can serve
//! directly as a re-estimated aggregation weight.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{normalizer_f, AggregationMatrix, InteractionGraph};
use crate::mat::{affine_backward_input, affine_backward_params, affine_forward, Mat};
use crate::optim::ParamStore;

const LOG_VAR_CLAMP: f64 = 10.0;

/// One fully-connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    pub fn random(out_dim: usize, in_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut w = Mat::zeros(out_dim, in_dim);
        crate::rng::fill_normal(rng, std, w.data_mut());
        Affine {
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Encoder and decoder parameters for embedding dimension K.
///
/// Encoder: 2K -> 4K -> 2K -> 2K (output splits into mu and log variance).
/// Decoder: 2K -> 4K -> 2K -> K. Rectified-linear units sit between affine
/// layers; outputs are linear. One shared network serves both edge
/// orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub k: usize,
    pub encoder: [Affine; 3],
    pub decoder: [Affine; 3],
}

impl EstimatorParams {
    pub fn zeros(k: usize) -> Self {
        EstimatorParams {
            k,
            encoder: [
                Affine::zeros(4 * k, 2 * k),
                Affine::zeros(2 * k, 4 * k),
                Affine::zeros(2 * k, 2 * k),
            ],
            decoder: [
                Affine::zeros(4 * k, 2 * k),
                Affine::zeros(2 * k, 4 * k),
                Affine::zeros(k, 2 * k),
            ],
        }
    }

    pub fn random(k: usize, std: f64, rng: &mut impl Rng) -> Self {
        EstimatorParams {
            k,
            encoder: [
                Affine::random(4 * k, 2 * k, std, rng),
                Affine::random(2 * k, 4 * k, std, rng),
                Affine::random(2 * k, 2 * k, std, rng),
            ],
            decoder: [
                Affine::random(4 * k, 2 * k, std, rng),
                Affine::random(2 * k, 4 * k, std, rng),
                Affine::random(k, 2 * k, std, rng),
            ],
        }
    }

    fn layers(&self) -> impl Iterator<Item = (&'static str, &Affine)> {
        ENC_NAMES
            .iter()
            .zip(self.encoder.iter())
            .chain(DEC_NAMES.iter().zip(self.decoder.iter()))
            .map(|(n, a)| (*n, a))
    }

    /// Flatten into a ParamStore (weights as-is, biases as column vectors).
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, layer) in self.layers() {
            store
                .register(&format!("{name}_w"), layer.w.clone())
                .expect("unique layer names");
            store
                .register(
                    &format!("{name}_b"),
                    Mat::from_vec(layer.b.len(), 1, layer.b.clone()).unwrap(),
                )
                .expect("unique layer names");
        }
        store
    }

    /// Rebuild from a store produced by [`Self::to_store`].
    pub fn from_store(store: &ParamStore, k: usize) -> Result<Self> {
        let mut out = EstimatorParams::zeros(k);
        for (name, layer) in ENC_NAMES
            .iter()
            .zip(out.encoder.iter_mut())
            .chain(DEC_NAMES.iter().zip(out.decoder.iter_mut()))
        {
            let w = store
                .get(&format!("{name}_w"))
                .ok_or_else(|| Error::Config(format!("missing {name}_w")))?;
            let b = store
                .get(&format!("{name}_b"))
                .ok_or_else(|| Error::Config(format!("missing {name}_b")))?;
            if !w.same_shape(&layer.w) || b.rows() != layer.b.len() || b.cols() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "layer {name} has wrong shape"
                )));
            }
            layer.w = w.clone();
            layer.b = b.data().to_vec();
        }
        Ok(out)
    }

    /// Binary checkpoint via the ParamStore layout.
    pub fn write_binary(&self, path: &std::path::Path) -> Result<()> {
        self.to_store().write_binary(path)
    }

    pub fn read_binary(path: &std::path::Path, k: usize) -> Result<Self> {
        Self::from_store(&ParamStore::read_binary(path)?, k)
    }
}

const ENC_NAMES: [&str; 3] = ["enc0", "enc1", "enc2"];
const DEC_NAMES: [&str; 3] = ["dec0", "dec1", "dec2"];

/// Loss components of one edge evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl ElboTerms {
    pub fn new(recon: f64, kl: f64) -> Self {
        ElboTerms {
            recon,
            kl,
            total: recon + kl,
        }
    }
}

fn relu(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Cached encoder activations for backprop.
struct EncTrace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    raw_out: Vec<f64>,
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

struct DecTrace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    x_hat: Vec<f64>,
}

fn encode_trace(params: &EstimatorParams, e_x: &[f64], e_u: &[f64]) -> EncTrace {
    let k = params.k;
    let input = concat(e_x, e_u);
    let mut pre1 = vec![0.0; 4 * k];
    affine_forward(
        &params.encoder[0].w,
        &params.encoder[0].b,
        &input,
        &mut pre1,
    );
    let mut act1 = pre1.clone();
    relu(&mut act1);
    let mut pre2 = vec![0.0; 2 * k];
    affine_forward(&params.encoder[1].w, &params.encoder[1].b, &act1, &mut pre2);
    let mut act2 = pre2.clone();
    relu(&mut act2);
    let mut raw_out = vec![0.0; 2 * k];
    affine_forward(
        &params.encoder[2].w,
        &params.encoder[2].b,
        &act2,
        &mut raw_out,
    );
    let mu = raw_out[..k].to_vec();
    let log_var: Vec<f64> = raw_out[k..]
        .iter()
        .map(|&v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
        .collect();
    EncTrace {
        input,
        pre1,
        act1,
        pre2,
        act2,
        raw_out,
        mu,
        log_var,
    }
}

fn decode_trace(params: &EstimatorParams, z: &[f64], e_u: &[f64]) -> DecTrace {
    let k = params.k;
    let input = concat(z, e_u);
    let mut pre1 = vec![0.0; 4 * k];
    affine_forward(
        &params.decoder[0].w,
        &params.decoder[0].b,
        &input,
        &mut pre1,
    );
    let mut act1 = pre1.clone();
    relu(&mut act1);
    let mut pre2 = vec![0.0; 2 * k];
    affine_forward(&params.decoder[1].w, &params.decoder[1].b, &act1, &mut pre2);
    let mut act2 = pre2.clone();
    relu(&mut act2);
    let mut x_hat = vec![0.0; k];
    affine_forward(
        &params.decoder[2].w,
        &params.decoder[2].b,
        &act2,
        &mut x_hat,
    );
    DecTrace {
        input,
        pre1,
        act1,
        pre2,
        act2,
        x_hat,
    }
}

/// Posterior parameters for edge (neighbor e_x, center e_u). The log
/// variance comes back clamped to [-10, 10].
pub fn encode(params: &EstimatorParams, e_x: &[f64], e_u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let t = encode_trace(params, e_x, e_u);
    (t.mu, t.log_var)
}

/// z = mu + tau .* exp(log_var / 2)
pub fn reparameterize(mu: &[f64], log_var: &[f64], tau: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(log_var.iter())
        .zip(tau.iter())
        .map(|((m, lv), t)| m + t * (lv / 2.0).exp())
        .collect()
}

/// Reconstruction of the neighbor embedding from (z || e_u).
pub fn decode(params: &EstimatorParams, z: &[f64], e_u: &[f64]) -> Vec<f64> {
    decode_trace(params, z, e_u).x_hat
}

/// beta-scaled KL divergence from N(mu, sigma^2 I) to N(0, I).
pub fn kl_term(mu: &[f64], log_var: &[f64], beta: f64) -> f64 {
    let sum: f64 = mu
        .iter()
        .zip(log_var.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum();
    beta * sum
}

/// lambda * ||e_x - x_hat||^2 (squared Euclidean, no averaging over K).
pub fn recon_term(e_x: &[f64], x_hat: &[f64], lambda: f64) -> f64 {
    let sq: f64 = e_x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    lambda * sq
}

/// Full evidence-bound loss for one edge with an externally supplied noise
/// vector `tau`.
pub fn elbo_loss(
    params: &EstimatorParams,
    e_x: &[f64],
    e_u: &[f64],
    tau: &[f64],
    lambda: f64,
    beta: f64,
) -> ElboTerms {
    let enc = encode_trace(params, e_x, e_u);
    let z = reparameterize(&enc.mu, &enc.log_var, tau);
    let dec = decode_trace(params, &z, e_u);
    ElboTerms::new(
        recon_term(e_x, &dec.x_hat, lambda),
        kl_term(&enc.mu, &enc.log_var, beta),
    )
}

/// Aggregation weight for edge (center, neighbor): F(center) * exp(-total)
/// at the deterministic mean latent (tau = 0).
pub fn edge_weight(
    graph: &InteractionGraph,
    center: usize,
    neighbor: usize,
    pooled: &Mat,
    params: &EstimatorParams,
    lambda: f64,
    beta: f64,
) -> Result<f64> {
    if !graph.has_edge(center, neighbor) {
        return Err(Error::NotANeighbor { center, neighbor });
    }
    let f = normalizer_f(graph, center)?;
    let tau = vec![0.0; params.k];
    let terms = elbo_loss(
        params,
        pooled.row(neighbor),
        pooled.row(center),
        &tau,
        lambda,
        beta,
    );
    Ok(f * (-terms.total).exp())
}

/// Re-estimated weight matrix over the adjacency pattern. Entry (v, x) is
/// the weight for aggregating neighbor x into center v; the two directions
/// of an edge are computed independently, so the result is generally
/// asymmetric. Values are floored at the smallest positive double so the
/// matrix keeps strictly positive entries even when a loss underflows
/// exp(-total) to zero.
pub fn generate_weight_matrix(
    graph: &InteractionGraph,
    pooled: &Mat,
    params: &EstimatorParams,
    lambda: f64,
    beta: f64,
) -> Result<AggregationMatrix> {
    let base = crate::graph::normalized_adjacency(graph);
    let tau = vec![0.0; params.k];
    let mut row_f = vec![0.0; graph.num_nodes()];
    for v in 0..graph.num_nodes() {
        if graph.degree(v) > 0 {
            row_f[v] = normalizer_f(graph, v)?;
        }
    }
    Ok(base.map_with_pattern(|v, x, _| {
        let terms = elbo_loss(params, pooled.row(x), pooled.row(v), &tau, lambda, beta);
        (row_f[v] * (-terms.total).exp()).max(f64::MIN_POSITIVE)
    }))
}

/// Gradients for every encoder/decoder array, shaped like the params.
pub type EstimatorGrads = EstimatorParams;

/// Analytic gradient of the mean edge loss over a batch with respect to the
/// estimator parameters only; the embeddings are treated as constants.
/// `taus[i]` is the frozen noise vector for edge i. Also returns the mean
/// total loss over the batch.
pub fn elbo_backward(
    params: &EstimatorParams,
    edges: &[(usize, usize)],
    pooled: &Mat,
    taus: &[Vec<f64>],
    lambda: f64,
    beta: f64,
) -> Result<(EstimatorGrads, f64)> {
    if edges.len() != taus.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} edges but {} noise vectors",
            edges.len(),
            taus.len()
        )));
    }
    let k = params.k;
    let mut grads = EstimatorParams::zeros(k);
    let mut mean_total = 0.0;
    let scale = if edges.is_empty() {
        0.0
    } else {
        1.0 / edges.len() as f64
    };

    for (&(center, neighbor), tau) in edges.iter().zip(taus.iter()) {
        let e_u = pooled.row(center);
        let e_x = pooled.row(neighbor);
        let enc = encode_trace(params, e_x, e_u);
        let z = reparameterize(&enc.mu, &enc.log_var, tau);
        let dec = decode_trace(params, &z, e_u);
        mean_total +=
            scale * (recon_term(e_x, &dec.x_hat, lambda) + kl_term(&enc.mu, &enc.log_var, beta));

        // d recon / d x_hat = 2 lambda (x_hat - e_x)
        let d_xhat: Vec<f64> = dec
            .x_hat
            .iter()
            .zip(e_x.iter())
            .map(|(xh, ex)| 2.0 * lambda * (xh - ex) * scale)
            .collect();

        // Decoder backward.
        affine_backward_params(
            &mut grads.decoder[2].w,
            &mut grads.decoder[2].b,
            &d_xhat,
            &dec.act2,
        );
        let mut d_act2 = vec![0.0; 2 * k];
        affine_backward_input(&params.decoder[2].w, &d_xhat, &mut d_act2);
        mask_relu(&mut d_act2, &dec.pre2);
        affine_backward_params(
            &mut grads.decoder[1].w,
            &mut grads.decoder[1].b,
            &d_act2,
            &dec.act1,
        );
        let mut d_act1 = vec![0.0; 4 * k];
        affine_backward_input(&params.decoder[1].w, &d_act2, &mut d_act1);
        mask_relu(&mut d_act1, &dec.pre1);
        affine_backward_params(
            &mut grads.decoder[0].w,
            &mut grads.decoder[0].b,
            &d_act1,
            &dec.input,
        );
        let mut d_dec_input = vec![0.0; 2 * k];
        affine_backward_input(&params.decoder[0].w, &d_act1, &mut d_dec_input);

        // d total / d z is the first half of the decoder input gradient; the
        // e_u half is a constant.
        let d_z = &d_dec_input[..k];

        // Through the reparameterization and KL into (mu, log_var).
        let mut d_mu = vec![0.0; k];
        let mut d_lv = vec![0.0; k];
        for i in 0..k {
            let sigma = (enc.log_var[i] / 2.0).exp();
            d_mu[i] = d_z[i] + beta * enc.mu[i] * scale;
            d_lv[i] =
                d_z[i] * tau[i] * 0.5 * sigma + beta * 0.5 * (enc.log_var[i].exp() - 1.0) * scale;
        }
        // Clamp: gradient passes only where the raw output is inside the
        // clamp interval.
        let mut d_raw = vec![0.0; 2 * k];
        d_raw[..k].copy_from_slice(&d_mu);
        for i in 0..k {
            let raw = enc.raw_out[k + i];
            d_raw[k + i] = if raw.abs() < LOG_VAR_CLAMP {
                d_lv[i]
            } else {
                0.0
            };
        }

        // Encoder backward.
        affine_backward_params(
            &mut grads.encoder[2].w,
            &mut grads.encoder[2].b,
            &d_raw,
            &enc.act2,
        );
        let mut d_eact2 = vec![0.0; 2 * k];
        affine_backward_input(&params.encoder[2].w, &d_raw, &mut d_eact2);
        mask_relu(&mut d_eact2, &enc.pre2);
        affine_backward_params(
            &mut grads.encoder[1].w,
            &mut grads.encoder[1].b,
            &d_eact2,
            &enc.act1,
        );
        let mut d_eact1 = vec![0.0; 4 * k];
        affine_backward_input(&params.encoder[1].w, &d_eact2, &mut d_eact1);
        mask_relu(&mut d_eact1, &enc.pre1);
        affine_backward_params(
            &mut grads.encoder[0].w,
            &mut grads.encoder[0].b,
            &d_eact1,
            &enc.input,
        );
    }
    Ok((grads, mean_total))
}

fn mask_relu(grad: &mut [f64], pre: &[f64]) {
    for (g, p) in grad.iter_mut().zip(pre.iter()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::InteractionGraph;
    use crate::optim::finite_diff_check;
    use rand::Rng;

    #[test]
    fn zero_network_encodes_to_zero() {
        let params = EstimatorParams::zeros(3);
        let (mu, lv) = encode(&params, &[0.0; 3], &[0.0; 3]);
        assert_eq!(mu, vec![0.0; 3]);
        assert_eq!(lv, vec![0.0; 3]);
    }

    #[test]
    fn encoder_output_splits_into_two_k_vectors() {
        for k in [1usize, 2, 5, 8] {
            let mut rng = crate::rng::stream(1, "shape", k as u64);
            let params = EstimatorParams::random(k, 0.1, &mut rng);
            let e: Vec<f64> = (0..k).map(|i| 0.1 * i as f64).collect();
            let (mu, lv) = encode(&params, &e, &e);
            assert_eq!(mu.len(), k);
            assert_eq!(lv.len(), k);
            let x_hat = decode(&params, &mu, &e);
            assert_eq!(x_hat.len(), k);
        }
    }

    #[test]
    fn encoder_matches_affine_chain_oracle() {
        let k = 2;
        let mut rng = crate::rng::stream(2, "chain", 0);
        let params = EstimatorParams::random(k, 0.5, &mut rng);
        let e_x = [0.3, -0.7];
        let e_u = [0.1, 0.9];
        let (mu, lv) = encode(&params, &e_x, &e_u);

        // Layer-by-layer hand computation.
        let input = [e_x[0], e_x[1], e_u[0], e_u[1]];
        let step = |layer: &Affine, x: &[f64], rectify: bool| -> Vec<f64> {
            let mut y = vec![0.0; layer.out_dim()];
            for r in 0..layer.out_dim() {
                let mut acc = layer.b[r];
                for c in 0..layer.in_dim() {
                    acc += layer.w.get(r, c) * x[c];
                }
                y[r] = if rectify { acc.max(0.0) } else { acc };
            }
            y
        };
        let h1 = step(&params.encoder[0], &input, true);
        let h2 = step(&params.encoder[1], &h1, true);
        let out = step(&params.encoder[2], &h2, false);
        for i in 0..k {
            assert!((mu[i] - out[i]).abs() <= 1e-12);
            assert!((lv[i] - out[k + i].clamp(-10.0, 10.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_var_clamps_to_ten() {
        let k = 1;
        let mut params = EstimatorParams::zeros(k);
        params.encoder[2].b = vec![0.0, 25.0];
        let (_, lv) = encode(&params, &[0.0], &[0.0]);
        assert_eq!(lv, vec![10.0]);
        params.encoder[2].b = vec![0.0, -25.0];
        let (_, lv) = encode(&params, &[0.0], &[0.0]);
        assert_eq!(lv, vec![-10.0]);
    }

    #[test]
    fn reparameterize_noiseless_is_mean() {
        let z = reparameterize(&[1.0, -2.0], &[0.4, -0.4], &[0.0, 0.0]);
        assert_eq!(z, vec![1.0, -2.0]);
    }

    #[test]
    fn reparameterize_standard_passthrough() {
        let z = reparameterize(&[0.0, 0.0], &[0.0, 0.0], &[0.7, -1.1]);
        assert_eq!(z, vec![0.7, -1.1]);
    }

    #[test]
    fn reparameterize_sample_mean_matches_mu() {
        // Monte Carlo oracle: mean of z over many draws approaches mu within
        // 3 sigma / sqrt(n) per coordinate.
        let mu = [0.8, -0.3];
        let log_var = [0.5, -1.0];
        let n = 100_000;
        let mut rng = crate::rng::stream(3, "mc", 0);
        let mut sums = [0.0f64; 2];
        for _ in 0..n {
            let tau: Vec<f64> = (0..2)
                .map(|_| crate::rng::standard_normal(&mut rng))
                .collect();
            let z = reparameterize(&mu, &log_var, &tau);
            sums[0] += z[0];
            sums[1] += z[1];
        }
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            let sigma = (log_var[i] / 2.0f64).exp();
            let bound = 3.0 * sigma / (n as f64).sqrt();
            assert!(
                (mean - mu[i]).abs() <= bound,
                "coord {i}: {mean} vs {}",
                mu[i]
            );
        }
    }

    #[test]
    fn zero_decode_is_zero() {
        let params = EstimatorParams::zeros(2);
        assert_eq!(decode(&params, &[0.0; 2], &[0.0; 2]), vec![0.0; 2]);
    }

    #[test]
    fn decoder_matches_affine_chain_oracle() {
        let k = 3;
        let mut rng = crate::rng::stream(4, "dec", 0);
        let params = EstimatorParams::random(k, 0.4, &mut rng);
        let z = [0.2, -0.5, 0.8];
        let e_u = [0.6, 0.0, -0.9];
        let got = decode(&params, &z, &e_u);
        let input = concat(&z, &e_u);
        let step = |layer: &Affine, x: &[f64], rectify: bool| -> Vec<f64> {
            let mut y = vec![0.0; layer.out_dim()];
            for r in 0..layer.out_dim() {
                let mut acc = layer.b[r];
                for c in 0..layer.in_dim() {
                    acc += layer.w.get(r, c) * x[c];
                }
                y[r] = if rectify { acc.max(0.0) } else { acc };
            }
            y
        };
        let h1 = step(&params.decoder[0], &input, true);
        let h2 = step(&params.decoder[1], &h1, true);
        let out = step(&params.decoder[2], &h2, false);
        for i in 0..k {
            assert!((got[i] - out[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_zero_at_standard_prior() {
        assert_eq!(kl_term(&[0.0, 0.0], &[0.0, 0.0], 1.0), 0.0);
    }

    #[test]
    fn kl_hand_value_k1() {
        // mu = 1, sigma^2 = 1 -> 0.5 (1 + 1 - 0 - 1) = 0.5
        assert!((kl_term(&[1.0], &[0.0], 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_scales_linearly_in_beta() {
        let (mu, lv) = (vec![0.4, -1.2], vec![0.3, -0.8]);
        let one = kl_term(&mu, &lv, 1.0);
        let two = kl_term(&mu, &lv, 2.0);
        assert!((two - 2.0 * one).abs() < 1e-15);
    }

    #[test]
    fn recon_perfect_and_switched_off() {
        assert_eq!(recon_term(&[0.4, -0.2], &[0.4, -0.2], 1.3), 0.0);
        assert_eq!(recon_term(&[1.0, 2.0], &[0.0, 0.0], 0.0), 0.0);
    }

    #[test]
    fn recon_hand_norm() {
        assert_eq!(recon_term(&[1.0, 0.0], &[0.0, 0.0], 1.0), 1.0);
    }

    #[test]
    fn elbo_switched_off_is_zero() {
        let mut rng = crate::rng::stream(5, "elbo", 0);
        let params = EstimatorParams::random(2, 0.3, &mut rng);
        let t = elbo_loss(&params, &[0.4, 0.2], &[-0.1, 0.7], &[0.3, -0.3], 0.0, 0.0);
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn elbo_zero_network_zero_input() {
        let params = EstimatorParams::zeros(2);
        let t = elbo_loss(&params, &[0.0; 2], &[0.0; 2], &[0.0; 2], 1.0, 1.0);
        assert_eq!((t.recon, t.kl, t.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn elbo_equals_sum_of_components() {
        let mut rng = crate::rng::stream(6, "sum", 0);
        let params = EstimatorParams::random(3, 0.4, &mut rng);
        let e_x = [0.2, -0.6, 0.1];
        let e_u = [0.9, 0.3, -0.2];
        let tau = [0.5, -1.0, 0.25];
        let (lambda, beta) = (0.7, 1.1);
        let t = elbo_loss(&params, &e_x, &e_u, &tau, lambda, beta);
        let (mu, lv) = encode(&params, &e_x, &e_u);
        let z = reparameterize(&mu, &lv, &tau);
        let x_hat = decode(&params, &z, &e_u);
        let recon = recon_term(&e_x, &x_hat, lambda);
        let kl = kl_term(&mu, &lv, beta);
        assert!((t.recon - recon).abs() <= 1e-12);
        assert!((t.kl - kl).abs() <= 1e-12);
        assert!((t.total - (recon + kl)).abs() <= 1e-12);
        assert!(t.recon >= 0.0 && t.kl >= 0.0);
    }

    fn toy_graph() -> InteractionGraph {
        InteractionGraph::from_edges(2, 3, &[(0, 0), (0, 1), (1, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn edge_weight_zero_loss_is_normalizer() {
        let g = toy_graph();
        let params = EstimatorParams::zeros(2);
        let pooled = Mat::zeros(g.num_nodes(), 2);
        let f0 = normalizer_f(&g, 0).unwrap();
        let w = edge_weight(&g, 0, g.item_node(0), &pooled, &params, 0.0, 0.0).unwrap();
        assert_eq!(w, f0);
    }

    #[test]
    fn edge_weight_single_edge_zero_network_is_one() {
        let g = InteractionGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let params = EstimatorParams::zeros(2);
        let pooled = Mat::zeros(2, 2);
        let w = edge_weight(&g, 0, 1, &pooled, &params, 1.0, 1.0).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn edge_weight_bounded_by_normalizer() {
        let g = toy_graph();
        let mut rng = crate::rng::stream(7, "bound", 0);
        let params = EstimatorParams::random(3, 0.5, &mut rng);
        let mut pooled = Mat::zeros(g.num_nodes(), 3);
        pooled
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen::<f64>() - 0.5);
        for v in 0..g.num_nodes() {
            let f = normalizer_f(&g, v).unwrap();
            for &x in g.neighbors(v) {
                let w = edge_weight(&g, v, x, &pooled, &params, 0.8, 0.6).unwrap();
                assert!(w > 0.0 && w <= f, "weight {w} vs F {f}");
            }
        }
    }

    #[test]
    fn edge_weight_rejects_non_neighbor() {
        let g = toy_graph();
        let params = EstimatorParams::zeros(2);
        let pooled = Mat::zeros(g.num_nodes(), 2);
        assert!(matches!(
            edge_weight(&g, 0, g.item_node(2), &pooled, &params, 0.0, 0.0),
            Err(Error::NotANeighbor { .. })
        ));
    }

    #[test]
    fn weight_matrix_has_adjacency_pattern_and_row_bounds() {
        let g = toy_graph();
        let mut rng = crate::rng::stream(8, "wm", 0);
        let params = EstimatorParams::random(2, 0.4, &mut rng);
        let mut pooled = Mat::zeros(g.num_nodes(), 2);
        pooled
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen::<f64>() - 0.5);
        let w = generate_weight_matrix(&g, &pooled, &params, 0.9, 0.3).unwrap();
        assert!(w.same_pattern(&crate::graph::normalized_adjacency(&g)));
        for v in 0..g.num_nodes() {
            if g.degree(v) == 0 {
                continue;
            }
            let f = normalizer_f(&g, v).unwrap();
            let (_, vals) = w.row(v);
            for &x in vals {
                assert!(x > 0.0 && x <= f);
            }
        }
    }

    #[test]
    fn weight_matrix_switched_off_rows_sum_to_degree_times_f() {
        let g = toy_graph();
        let params = EstimatorParams::zeros(2);
        let pooled = Mat::zeros(g.num_nodes(), 2);
        let w = generate_weight_matrix(&g, &pooled, &params, 0.0, 0.0).unwrap();
        for v in 0..g.num_nodes() {
            let f = normalizer_f(&g, v).unwrap();
            let (_, vals) = w.row(v);
            for &x in vals {
                assert_eq!(x, f);
            }
            assert!((w.row_sum(v) - g.degree(v) as f64 * f).abs() <= 1e-12);
        }
    }

    #[test]
    fn weight_matrix_is_deterministic() {
        let g = toy_graph();
        let mut rng = crate::rng::stream(9, "det", 0);
        let params = EstimatorParams::random(2, 0.4, &mut rng);
        let mut pooled = Mat::zeros(g.num_nodes(), 2);
        pooled
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen::<f64>() - 0.5);
        let a = generate_weight_matrix(&g, &pooled, &params, 0.9, 0.3).unwrap();
        let b = generate_weight_matrix(&g, &pooled, &params, 0.9, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_switched_off_gives_zero_gradients() {
        let g = toy_graph();
        let mut rng = crate::rng::stream(10, "zero", 0);
        let params = EstimatorParams::random(2, 0.4, &mut rng);
        let pooled = Mat::zeros(g.num_nodes(), 2);
        let edges = vec![(0, g.item_node(0)), (g.item_node(1), 0)];
        let taus = vec![vec![0.1, -0.2], vec![0.3, 0.4]];
        let (grads, _) = elbo_backward(&params, &edges, &pooled, &taus, 0.0, 0.0).unwrap();
        assert_eq!(grads.to_store().norm_sq(), 0.0);
    }

    #[test]
    fn kl_gradient_wrt_mu_is_beta_mu_at_unit_sigma() {
        // Closed-form check via a one-edge network where the decoder is zero
        // and lambda = 0, so only the KL path is active.
        let k = 2;
        let beta = 0.7;
        let mut params = EstimatorParams::zeros(k);
        // Make the encoder output a nonzero mu directly through biases.
        params.encoder[2].b = vec![0.9, -0.4, 0.0, 0.0];
        let pooled = Mat::zeros(2, k);
        let g = InteractionGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let edges = vec![(0usize, g.item_node(0))];
        let taus = vec![vec![0.0; k]];
        let (grads, _) = elbo_backward(&params, &edges, &pooled, &taus, 0.0, beta).unwrap();
        // d kl / d mu = beta * mu lands on the mu half of the last bias.
        assert!((grads.encoder[2].b[0] - beta * 0.9).abs() <= 1e-12);
        assert!((grads.encoder[2].b[1] - beta * (-0.4)).abs() <= 1e-12);
    }

    #[test]
    fn elbo_gradient_passes_finite_diff() {
        let g = toy_graph();
        let k = 3;
        let mut rng = crate::rng::stream(11, "fd", 0);
        let params = EstimatorParams::random(k, 0.4, &mut rng);
        let mut pooled = Mat::zeros(g.num_nodes(), k);
        pooled
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen::<f64>() - 0.5);
        let edges: Vec<(usize, usize)> = vec![
            (0, g.item_node(0)),
            (g.item_node(1), 1),
            (1, g.item_node(2)),
        ];
        let taus: Vec<Vec<f64>> = (0..edges.len())
            .map(|_| {
                (0..k)
                    .map(|_| crate::rng::standard_normal(&mut rng))
                    .collect()
            })
            .collect();
        let (lambda, beta) = (0.9, 0.5);
        let (grads, _) = elbo_backward(&params, &edges, &pooled, &taus, lambda, beta).unwrap();

        let mut store = params.to_store();
        let analytic = grads.to_store();
        let (edges_ref, taus_ref, pooled_ref) = (&edges, &taus, &pooled);
        let err = finite_diff_check(
            move |s: &ParamStore| {
                let p = EstimatorParams::from_store(s, k).unwrap();
                let mut total = 0.0;
                for (&(c, x), tau) in edges_ref.iter().zip(taus_ref.iter()) {
                    total += elbo_loss(&p, pooled_ref.row(x), pooled_ref.row(c), tau, lambda, beta)
                        .total;
                }
                total / edges_ref.len() as f64
            },
            &mut store,
            &analytic,
            120,
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        // Sample average of log q(z)/p(z) over reparameterized draws.
        let mut rng = crate::rng::stream(12, "klmc", 0);
        let mu = [0.6, -0.9];
        let log_var = [0.4, -0.7];
        let n = 100_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let tau: Vec<f64> = (0..2)
                .map(|_| crate::rng::standard_normal(&mut rng))
                .collect();
            let z = reparameterize(&mu, &log_var, &tau);
            let mut log_ratio = 0.0;
            for i in 0..2 {
                let var = log_var[i].exp();
                let lq = -0.5
                    * ((z[i] - mu[i]).powi(2) / var
                        + log_var[i]
                        + (2.0 * std::f64::consts::PI).ln());
                let lp = -0.5 * (z[i] * z[i] + (2.0 * std::f64::consts::PI).ln());
                log_ratio += lq - lp;
            }
            sum += log_ratio;
            sumsq += log_ratio * log_ratio;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let stderr = (var / n as f64).sqrt();
        let closed = kl_term(&mu, &log_var, 1.0);
        assert!(
            (mean - closed).abs() <= 3.0 * stderr,
            "mc {mean} vs closed {closed} (3se {})",
            3.0 * stderr
        );
    }

    #[test]
    fn negated_elbo_upper_bounds_true_nll_on_gaussian_toy() {
        // Build a network whose decoder is effectively linear (hidden biases
        // keep every rectifier active), so the true marginal p(x|u) is an
        // analytic Gaussian and the bound can be checked directly.
        let k = 2;
        let shift = 50.0;
        let mut rng = crate::rng::stream(13, "toy", 0);
        let mut params = EstimatorParams::zeros(k);
        // Encoder: fixed posterior via output bias (mu, log_var constant).
        params.encoder[2].b = vec![0.3, -0.2, -0.5, 0.1];
        // Decoder: random small weights, large positive hidden biases.
        for (idx, layer) in params.decoder.iter_mut().enumerate() {
            for wv in layer.w.data_mut() {
                *wv = 0.05 * (rng.gen::<f64>() - 0.5);
            }
            if idx < 2 {
                layer.b.iter_mut().for_each(|b| *b = shift);
            }
        }
        let e_u = [0.4, -0.6];
        let e_x = [0.7, 0.2];

        // Effective linear map x_hat = M z + m0 (all rectifiers active).
        let w0 = &params.decoder[0].w;
        let w1 = &params.decoder[1].w;
        let w2 = &params.decoder[2].w;
        let mut m_full = vec![vec![0.0; 2 * k]; k]; // w2 * w1 * w0
        for r in 0..k {
            for c in 0..2 * k {
                let mut acc = 0.0;
                for a in 0..2 * k {
                    for b in 0..4 * k {
                        acc += w2.get(r, a) * w1.get(a, b) * w0.get(b, c);
                    }
                }
                m_full[r][c] = acc;
            }
        }
        // m0 = full affine at z = 0.
        let m0 = decode(&params, &[0.0; 2], &e_u);
        // Verify linearity numerically on a probe z.
        let probe = [0.9, -1.3];
        let direct = decode(&params, &probe, &e_u);
        for r in 0..k {
            let lin: f64 = m0[r] + (0..k).map(|c| m_full[r][c] * probe[c]).sum::<f64>();
            assert!((direct[r] - lin).abs() < 1e-9, "decoder not linear in z");
        }

        // True model: z ~ N(0, I), x | z ~ N(M z + m0, I) with lambda = 1/2.
        // Marginal: x ~ N(m0, M M^T + I); K = 2 so the quadratic form is by
        // hand.
        let m: Vec<Vec<f64>> = (0..k).map(|r| m_full[r][..k].to_vec()).collect();
        let mut cov = [[0.0f64; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                cov[r][c] =
                    (0..2).map(|j| m[r][j] * m[c][j]).sum::<f64>() + if r == c { 1.0 } else { 0.0 };
            }
        }
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let diff = [e_x[0] - m0[0], e_x[1] - m0[1]];
        let quad = (cov[1][1] * diff[0] * diff[0] - 2.0 * cov[0][1] * diff[0] * diff[1]
            + cov[0][0] * diff[1] * diff[1])
            / det;
        let log_px = -0.5 * (quad + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln());

        // Monte Carlo ELBO with the exact Gaussian log-likelihood
        // (lambda = 1/2 plus the constant the simplified loss drops).
        let lambda = 0.5;
        let const_term = (k as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        let n = 100_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let tau: Vec<f64> = (0..k)
                .map(|_| crate::rng::standard_normal(&mut rng))
                .collect();
            let t = elbo_loss(&params, &e_x, &e_u, &tau, lambda, 1.0);
            let elbo_draw = -(t.total + const_term);
            sum += elbo_draw;
            sumsq += elbo_draw * elbo_draw;
        }
        let mean = sum / n as f64;
        let stderr = ((sumsq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
        assert!(
            mean <= log_px + 3.0 * stderr,
            "ELBO {mean} should lower-bound log p(x) {log_px}"
        );
    }

    #[test]
    fn params_store_roundtrip() {
        let mut rng = crate::rng::stream(14, "ser", 0);
        let params = EstimatorParams::random(3, 0.3, &mut rng);
        let back = EstimatorParams::from_store(&params.to_store(), 3).unwrap();
        assert_eq!(params, back);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.bin");
        params.write_binary(&path).unwrap();
        assert_eq!(EstimatorParams::read_binary(&path, 3).unwrap(), params);
    }
}
