//! Two-stage training loop: backbone ranking epochs, validation-gated
//! estimator epochs, and momentum blending of re-estimated weights into the
//! aggregation matrix.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pairs_by_user, IndexedDataset};
use crate::error::{Error, Result};
use crate::estimator::{elbo_backward, generate_weight_matrix, EstimatorParams};
use crate::gcn::{bpr_backward, bpr_loss, init_embeddings, pooled_embeddings, BprBatch};
use crate::graph::{build_graph, normalized_adjacency, AggregationMatrix, InteractionGraph};
use crate::metrics::{evaluate, mean_recall, EvalReport};
use crate::optim::{adam_step, AdamState, ParamStore};
use crate::rng;

/// Training variants; the non-default ones switch off one mechanism each.
/// Serialized names match the CLI vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Full method: two-stage training, update condition, momentum blending.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Estimator pretrained once on converged backbone embeddings, then
    /// frozen; the main run uses it without fine-tuning.
    #[serde(rename = "wo-ts")]
    WithoutTwoStage,
    /// Weight updates run every epoch regardless of validation movement.
    #[serde(rename = "wo-uc")]
    WithoutUpdateCondition,
    /// Generated weights replace the matrix instead of blending in; known
    /// to destabilize training, kept for comparison runs.
    #[serde(rename = "wo-mu")]
    WithoutMomentum,
    /// Backbone only; the aggregation matrix stays at its initialization.
    #[serde(rename = "vanilla")]
    Vanilla,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "wo-ts" => Ok(Variant::WithoutTwoStage),
            "wo-uc" => Ok(Variant::WithoutUpdateCondition),
            "wo-mu" => Ok(Variant::WithoutMomentum),
            "vanilla" => Ok(Variant::Vanilla),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected one of full, wo-ts, wo-uc, wo-mu, vanilla"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutTwoStage => "wo-ts",
            Variant::WithoutUpdateCondition => "wo-uc",
            Variant::WithoutMomentum => "wo-mu",
            Variant::Vanilla => "vanilla",
        }
    }
}

/// Full hyperparameter record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Embedding dimension K.
    pub dim: usize,
    /// Aggregation layers L.
    pub layers: usize,
    /// Backbone learning rate.
    pub eta1: f64,
    /// Estimator learning rate.
    pub eta2: f64,
    /// L2 regularization factor.
    pub gamma: f64,
    /// Reconstruction scale.
    pub lambda: f64,
    /// KL scale.
    pub beta: f64,
    /// Mixture factor for momentum blending.
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Ranking cutoff for validation and reporting.
    pub eval_k: usize,
    /// Bin count for popularity histograms.
    pub iip_bins: usize,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 256,
            layers: 3,
            eta1: 1e-3,
            eta2: 1e-3,
            gamma: 1e-4,
            lambda: 1.0,
            beta: 0.2,
            epsilon: 1e-2,
            batch_size: 2048,
            max_epochs: 500,
            patience: 20,
            seed: 42,
            eval_k: 20,
            iip_bins: 20,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 9] = [
            ("dim must be >= 1", self.dim >= 1),
            ("batch_size must be >= 1", self.batch_size >= 1),
            ("eta1 must be > 0", self.eta1 > 0.0),
            ("eta2 must be > 0", self.eta2 > 0.0),
            ("gamma must be >= 0", self.gamma >= 0.0),
            ("lambda must be >= 0", self.lambda >= 0.0),
            ("beta must be >= 0", self.beta >= 0.0),
            (
                "epsilon must be in (0, 1]",
                self.epsilon > 0.0 && self.epsilon <= 1.0,
            ),
            ("eval_k must be >= 1", self.eval_k >= 1),
        ];
        for (msg, ok) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        if self.iip_bins == 0 {
            return Err(Error::Config("iip_bins must be >= 1".into()));
        }
        Ok(())
    }
}

const EMBED_INIT_STD: f64 = 0.1;
const ESTIMATOR_INIT_STD: f64 = 0.1;
const PRETRAIN_EPOCHS: usize = 20;
const EMBEDDING: &str = "embedding";

/// One line of the progress log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall: f64,
    pub updated: bool,
}

/// Mutable training state.
pub struct TrainState {
    pub weights: AggregationMatrix,
    pub backbone: ParamStore,
    pub estimator: ParamStore,
    pub adam_backbone: AdamState,
    pub adam_estimator: AdamState,
    pub best_val_recall: f64,
    pub epoch: usize,
    pub update_epochs: Vec<usize>,
}

pub struct RunOptions<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub verbose: bool,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            checkpoint_dir: None,
            verbose: false,
        }
    }
}

pub struct RunOutput {
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub report: EvalReport,
}

/// Entrywise convex blend of re-estimated weights into the running matrix.
/// With epsilon 0 the output equals `current` bit for bit; with epsilon 1
/// it equals `incoming`.
pub fn momentum_update(
    current: &AggregationMatrix,
    incoming: &AggregationMatrix,
    epsilon: f64,
) -> Result<AggregationMatrix> {
    if !current.same_pattern(incoming) {
        return Err(Error::PatternMismatch(
            "momentum blend requires identical sparsity patterns".into(),
        ));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut out = current.clone();
    let keep = 1.0 - epsilon;
    for (o, w) in out.values_mut().iter_mut().zip(incoming.values().iter()) {
        *o = keep * *o + epsilon * w;
    }
    Ok(out)
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    graph: InteractionGraph,
    train_pairs: Vec<(usize, usize)>,
    /// Sorted train item lists per user, for negative rejection sampling.
    train_by_user: Vec<Vec<usize>>,
    val_by_user: Vec<Vec<usize>>,
    test_by_user: Vec<Vec<usize>>,
    /// Both orientations of every edge, in node order.
    directed_edges: Vec<(usize, usize)>,
}

impl<'a> Trainer<'a> {
    fn new(config: &'a TrainConfig, dataset: &IndexedDataset) -> Result<Self> {
        config.validate()?;
        let graph = build_graph(dataset)?;
        let mut directed_edges = Vec::with_capacity(2 * graph.edge_count());
        for v in 0..graph.num_nodes() {
            for &x in graph.neighbors(v) {
                directed_edges.push((v, x));
            }
        }
        Ok(Trainer {
            config,
            train_pairs: dataset.train.clone(),
            train_by_user: dataset.train_items_by_user(),
            val_by_user: pairs_by_user(&dataset.validation, dataset.num_users),
            test_by_user: pairs_by_user(&dataset.test, dataset.num_users),
            graph,
            directed_edges,
        })
    }

    fn fresh_backbone(&self, tag: &str) -> (ParamStore, AdamState) {
        let mut store = ParamStore::new();
        let mut init_rng = rng::stream(self.config.seed, tag, 0);
        store
            .register(
                EMBEDDING,
                init_embeddings(
                    self.graph.num_nodes(),
                    self.config.dim,
                    EMBED_INIT_STD,
                    &mut init_rng,
                ),
            )
            .expect("fresh store");
        let adam = AdamState::for_store(&store);
        (store, adam)
    }

    fn init_state(&self) -> TrainState {
        let (backbone, adam_backbone) = self.fresh_backbone("embed_init");
        let estimator = EstimatorParams::random(
            self.config.dim,
            ESTIMATOR_INIT_STD,
            &mut rng::stream(self.config.seed, "estimator_init", 0),
        )
        .to_store();
        let adam_estimator = AdamState::for_store(&estimator);
        TrainState {
            weights: normalized_adjacency(&self.graph),
            backbone,
            estimator,
            adam_backbone,
            adam_estimator,
            best_val_recall: f64::NEG_INFINITY,
            epoch: 0,
            update_epochs: Vec::new(),
        }
    }

    fn sample_negative(&self, user: usize, rng: &mut impl Rng) -> Result<usize> {
        let positives = &self.train_by_user[user];
        let n = self.graph.num_items();
        if positives.len() >= n {
            return Err(Error::Config(format!(
                "user {user} interacted with every item; no negatives exist"
            )));
        }
        for _ in 0..10_000 {
            let j = rng.gen_range(0..n);
            if positives.binary_search(&j).is_err() {
                return Ok(j);
            }
        }
        // Dense user fallback: first item outside the train set.
        Ok((0..n)
            .find(|j| positives.binary_search(j).is_err())
            .expect("checked above"))
    }

    /// Stage 1: one ranking epoch over shuffled train pairs with fresh
    /// uniform negatives. Returns the mean batch loss.
    fn backbone_epoch(&self, state: &mut TrainState, epoch: usize) -> Result<f64> {
        let cfg = self.config;
        let mut order = self.train_pairs.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "bpr_shuffle", epoch as u64));
        let mut neg_rng = rng::stream(cfg.seed, "bpr_neg", epoch as u64);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut triplets = Vec::with_capacity(chunk.len());
            for &(u, i) in chunk {
                triplets.push((u, i, self.sample_negative(u, &mut neg_rng)?));
            }
            let batch = BprBatch::new(triplets);
            let e0 = state.backbone.get(EMBEDDING).expect("registered");
            let pooled = pooled_embeddings(&state.weights, e0, cfg.layers)?;
            let loss = bpr_loss(
                &batch,
                &pooled,
                self.graph.num_users(),
                cfg.gamma,
                &state.backbone,
            );
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite ranking loss in batch {batches}"),
                });
            }
            let grad = bpr_backward(
                &batch,
                e0,
                &state.weights,
                cfg.layers,
                self.graph.num_users(),
                cfg.gamma,
            )?;
            let mut grads = ParamStore::new();
            grads.register(EMBEDDING, grad).expect("fresh store");
            adam_step(
                &mut state.backbone,
                &grads,
                &mut state.adam_backbone,
                cfg.eta1,
            )
            .map_err(|e| diverged(epoch, e))?;
            loss_sum += loss;
            batches += 1;
        }
        Ok(loss_sum / batches.max(1) as f64)
    }

    /// Stage 2: one estimator epoch over shuffled directed edges with one
    /// fresh noise draw per edge visit. The pooled embeddings stay frozen.
    fn estimator_epoch(
        &self,
        state: &mut TrainState,
        epoch: usize,
        pooled: &crate::mat::Mat,
    ) -> Result<f64> {
        let cfg = self.config;
        let mut edges = self.directed_edges.clone();
        edges.shuffle(&mut rng::stream(cfg.seed, "est_shuffle", epoch as u64));
        let mut tau_rng = rng::stream(cfg.seed, "est_tau", epoch as u64);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in edges.chunks(cfg.batch_size) {
            let taus: Vec<Vec<f64>> = chunk
                .iter()
                .map(|_| {
                    (0..cfg.dim)
                        .map(|_| rng::standard_normal(&mut tau_rng))
                        .collect()
                })
                .collect();
            let params = EstimatorParams::from_store(&state.estimator, cfg.dim)?;
            let (grads, mean_loss) =
                elbo_backward(&params, chunk, pooled, &taus, cfg.lambda, cfg.beta)?;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite estimator loss".into(),
                });
            }
            adam_step(
                &mut state.estimator,
                &grads.to_store(),
                &mut state.adam_estimator,
                cfg.eta2,
            )
            .map_err(|e| diverged(epoch, e))?;
            sum += mean_loss * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(sum / count.max(1) as f64)
    }

    fn pooled(&self, state: &TrainState) -> Result<crate::mat::Mat> {
        pooled_embeddings(
            &state.weights,
            state.backbone.get(EMBEDDING).expect("registered"),
            self.config.layers,
        )
    }

    fn validation_recall(&self, pooled: &crate::mat::Mat) -> f64 {
        mean_recall(
            &self.graph,
            pooled,
            &self.train_by_user,
            &self.val_by_user,
            self.config.eval_k,
        )
    }

    /// Strict-improvement update condition over the best recorded validation
    /// recall (always returns true for the variant that drops the check).
    fn update_condition(&self, state: &mut TrainState, current: f64) -> bool {
        let improved = current > state.best_val_recall;
        if improved {
            state.best_val_recall = current;
        }
        match self.config.variant {
            Variant::WithoutUpdateCondition => true,
            _ => improved,
        }
    }

    fn generate_weights(
        &self,
        state: &TrainState,
        pooled: &crate::mat::Mat,
    ) -> Result<AggregationMatrix> {
        let params = EstimatorParams::from_store(&state.estimator, self.config.dim)?;
        generate_weight_matrix(
            &self.graph,
            pooled,
            &params,
            self.config.lambda,
            self.config.beta,
        )
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { context, detail } => Error::Diverged {
            epoch,
            detail: format!("{context}: {detail}"),
        },
        other => other,
    }
}

struct Checkpointer {
    dir: Option<PathBuf>,
    num_users: usize,
    num_items: usize,
}

impl Checkpointer {
    fn snapshot(&self, weights: &AggregationMatrix, epoch: usize) -> Result<()> {
        if let Some(dir) = &self.dir {
            weights.write_snapshot(
                self.num_users,
                self.num_items,
                &dir.join(format!("atilde_e{epoch:04}.bin")),
            )?;
        }
        Ok(())
    }

    fn progress(&self, record: &EpochRecord) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join("progress.jsonl");
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let line = serde_json::to_string(record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn params(&self, state: &TrainState) -> Result<()> {
        if let Some(dir) = &self.dir {
            let mut combined = ParamStore::new();
            for (name, m) in state.backbone.iter().chain(state.estimator.iter()) {
                combined.register(name, m.clone())?;
            }
            combined.write_binary(&dir.join("params.bin"))?;
        }
        Ok(())
    }
}

/// Run the full training loop over a prepared dataset and evaluate the
/// final model on the test split.
pub fn run(config: &TrainConfig, dataset: &IndexedDataset, opts: &RunOptions) -> Result<RunOutput> {
    let trainer = Trainer::new(config, dataset)?;
    let mut state = trainer.init_state();
    let mut history = Vec::new();

    if let Some(dir) = opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // Truncate any previous progress log so reruns are byte-identical.
        let path = dir.join("progress.jsonl");
        fs::write(&path, b"").map_err(|e| Error::io(&path, e))?;
    }
    let ckpt = Checkpointer {
        dir: opts.checkpoint_dir.map(Path::to_path_buf),
        num_users: trainer.graph.num_users(),
        num_items: trainer.graph.num_items(),
    };
    ckpt.snapshot(&state.weights, 0)?;

    match config.variant {
        Variant::WithoutTwoStage => {
            // Phase A: converge a plain backbone.
            run_loop(&trainer, &mut state, &mut history, &ckpt, opts, Stage2::Off)?;
            // Phase B: pretrain the estimator once on the frozen embeddings.
            let pooled = trainer.pooled(&state)?;
            let pretrain_base = state.epoch;
            for p in 1..=PRETRAIN_EPOCHS {
                let mean = trainer.estimator_epoch(&mut state, pretrain_base + p, &pooled)?;
                if opts.verbose {
                    eprintln!("pretrain {p}/{PRETRAIN_EPOCHS}: mean elbo {mean:.6}");
                }
            }
            state.epoch = pretrain_base;
            // Phase C: restart the backbone and run with the frozen estimator.
            let (backbone, adam) = trainer.fresh_backbone("embed_init");
            state.backbone = backbone;
            state.adam_backbone = adam;
            state.weights = normalized_adjacency(&trainer.graph);
            state.best_val_recall = f64::NEG_INFINITY;
            run_loop(
                &trainer,
                &mut state,
                &mut history,
                &ckpt,
                opts,
                Stage2::Frozen,
            )?;
        }
        Variant::Vanilla => {
            run_loop(&trainer, &mut state, &mut history, &ckpt, opts, Stage2::Off)?;
        }
        _ => {
            run_loop(
                &trainer,
                &mut state,
                &mut history,
                &ckpt,
                opts,
                Stage2::Train,
            )?;
        }
    }

    ckpt.params(&state)?;

    let pooled = trainer.pooled(&state)?;
    let report = evaluate(
        &trainer.graph,
        &pooled,
        &trainer.train_by_user,
        &trainer.test_by_user,
        config.eval_k,
        &state.weights,
        config.iip_bins,
    );
    Ok(RunOutput {
        state,
        history,
        report,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Stage2 {
    /// Train the estimator then update weights.
    Train,
    /// Update weights from the frozen estimator.
    Frozen,
    /// No second stage at all.
    Off,
}

fn run_loop(
    trainer: &Trainer,
    state: &mut TrainState,
    history: &mut Vec<EpochRecord>,
    ckpt: &Checkpointer,
    opts: &RunOptions,
    stage2: Stage2,
) -> Result<()> {
    let cfg = trainer.config;
    let mut stale = 0usize;
    let mut best_here = f64::NEG_INFINITY;
    for _ in 0..cfg.max_epochs {
        state.epoch += 1;
        let epoch = state.epoch;
        let train_loss = trainer.backbone_epoch(state, epoch)?;
        let pooled = trainer.pooled(state)?;
        let val_recall = trainer.validation_recall(&pooled);
        if !val_recall.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite validation recall".into(),
            });
        }
        if val_recall > best_here {
            best_here = val_recall;
            stale = 0;
        } else {
            stale += 1;
        }

        let mut updated = false;
        if stage2 != Stage2::Off && trainer.update_condition(state, val_recall) {
            if stage2 == Stage2::Train {
                trainer.estimator_epoch(state, epoch, &pooled)?;
            }
            let incoming = trainer.generate_weights(state, &pooled)?;
            state.weights = match cfg.variant {
                Variant::WithoutMomentum => incoming,
                _ => momentum_update(&state.weights, &incoming, cfg.epsilon)?,
            };
            debug_assert!(state
                .weights
                .values()
                .iter()
                .all(|v| *v > 0.0 && v.is_finite()));
            state.update_epochs.push(epoch);
            updated = true;
            ckpt.snapshot(&state.weights, epoch)?;
        } else if stage2 == Stage2::Off {
            // Track the running best so early stopping still works.
            trainer.update_condition(state, val_recall);
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            val_recall,
            updated,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch}: loss {train_loss:.6} val_recall {val_recall:.6} updated {updated}"
            );
        }
        ckpt.progress(&record)?;
        history.push(record);

        if stale >= cfg.patience {
            break;
        }
    }
    Ok(())
}
