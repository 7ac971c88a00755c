//! Training orchestration: negative sampling, Adam, and the epoch loop
//! alternating discriminator and generator updates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::adversarial::{discriminator_step, draw_noise, generator_step, AdvOpts, GeneratorParams};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{DataError, KnowledgeGraph, FeatureStore, Triple};
use crate::model::{BatchItem, HyperParams, ModelParams};
use crate::rng::SeedStreams;
use crate::tensor::{Tensor, TensorError};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("numeric abort at epoch {epoch}, batch {batch}: {source}")]
    Numeric { epoch: usize, batch: usize, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training setup: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One corrupted triple and which side was replaced.
#[derive(Debug, Clone, Copy)]
pub struct NegSample {
    pub triple: Triple,
    pub head_replaced: bool,
}

/// Draw K corruptions of a positive: a fair coin picks head or tail, the
/// replacement is uniform over entities and never equals the original.
/// Corruptions that happen to be true triples elsewhere are kept; filtering
/// applies only at evaluation time.
pub fn negative_sample(
    positive: &Triple,
    k: usize,
    n_entities: usize,
    rng: &mut impl Rng,
) -> Result<Vec<NegSample>> {
    if n_entities < 2 {
        return Err(TrainError::Invalid(
            "negative sampling needs at least 2 entities".into(),
        ));
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let head_replaced = rng.gen_bool(0.5);
        let original = if head_replaced { positive.head } else { positive.tail };
        let replacement = loop {
            let c = rng.gen_range(0..n_entities as u32);
            if c != original {
                break c;
            }
        };
        let triple = if head_replaced {
            Triple::new(replacement, positive.rel, positive.tail)
        } else {
            Triple::new(positive.head, positive.rel, replacement)
        };
        out.push(NegSample { triple, head_replaced });
    }
    Ok(out)
}

/// Adam with bias correction; one first/second moment pair per parameter
/// tensor (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new_for(tensors: &[Tensor]) -> Self {
        let moments = tensors
            .iter()
            .map(|t| (Tensor::zeros(t.shape().to_vec()), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Slots with `None` gradient are left
    /// untouched (parameters and moments alike).
    pub fn step(
        &mut self,
        tensors: &mut [Tensor],
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> std::result::Result<(), TensorError> {
        assert_eq!(tensors.len(), self.moments.len(), "optimizer/parameter mismatch");
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = &mut self.moments[slot];
            debug_assert_eq!(m.shape(), grad.shape(), "moment/gradient shape mismatch");
            let params = tensors[slot].data_mut();
            for (i, g) in grad.data().iter().enumerate() {
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Options for a training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub hp: HyperParams,
    pub adv: AdvOpts,
    pub seed: u64,
    pub relation_guidance: bool,
    /// Save a checkpoint every N epochs (0 = final only); needs `out_dir`.
    pub save_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            adv: AdvOpts::default(),
            seed: 7,
            relation_guidance: true,
            save_every: 0,
        }
    }
}

/// Trained parameters and per-epoch loss curves.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub generator: Option<GeneratorParams>,
    /// Mean discriminator loss per epoch.
    pub d_losses: Vec<f64>,
    /// Mean generator loss per epoch; `None` when no generator step ran.
    pub g_losses: Vec<Option<f64>>,
}

/// Full training loop. Deterministic given (seed, options, data): every
/// random choice flows through named sub-streams of the seed, with
/// shuffling keyed by seed xor epoch.
pub fn train(
    kg: &KnowledgeGraph,
    store: &FeatureStore,
    opts: &TrainOptions,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    opts.hp.validate().map_err(TrainError::Invalid)?;
    if kg.train.is_empty() {
        return Err(TrainError::Invalid("training split is empty".into()));
    }
    if kg.n_entities() < 2 {
        return Err(TrainError::Invalid("need at least 2 entities".into()));
    }

    let hp = &opts.hp;
    let mut params = ModelParams::init(
        kg.n_entities(),
        kg.n_relations(),
        store.modalities(),
        hp,
        opts.relation_guidance,
        opts.adv.mlp_discriminator,
        opts.seed,
    );
    let mut generator = opts.adv.comat.then(|| {
        GeneratorParams::init(store.modalities().len() + 1, hp.d_e, hp.noise_dim, opts.seed)
    });

    let streams = SeedStreams::new(opts.seed);
    let mut neg_rng = streams.stream("negatives");
    let mut noise_rng = streams.stream("noise");

    let mut adam_d = Adam::new_for(&params.tensors);
    let mut adam_g = generator.as_ref().map(|g| Adam::new_for(&g.tensors));

    let mut d_losses = Vec::with_capacity(hp.epochs);
    let mut g_losses = Vec::with_capacity(hp.epochs);
    let mut batch_counter = 0usize;

    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..kg.train.len()).collect();
        order.shuffle(&mut streams.indexed_stream("shuffle", epoch as u64));

        let mut d_sum = 0.0;
        let mut d_count = 0usize;
        let mut g_sum = 0.0;
        let mut g_count = 0usize;

        for (batch_idx, chunk) in order.chunks(hp.batch_size).enumerate() {
            let numeric = |source: TensorError| TrainError::Numeric {
                epoch,
                batch: batch_idx,
                source,
            };
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| {
                    let positive = kg.train[i];
                    let negatives = negative_sample(
                        &positive,
                        hp.k_negatives,
                        kg.n_entities(),
                        &mut neg_rng,
                    )?
                    .into_iter()
                    .map(|n| n.triple)
                    .collect();
                    Ok(BatchItem { positive, negatives })
                })
                .collect::<Result<_>>()?;

            let noise = generator
                .as_ref()
                .map(|g| draw_noise(&mut noise_rng, batch.len(), g.noise_dim));

            let d_loss = discriminator_step(
                &mut params,
                store,
                generator.as_ref(),
                &batch,
                noise.as_deref(),
                hp,
                &opts.adv,
                &mut adam_d,
            )
            .map_err(numeric)?;
            d_sum += d_loss;
            d_count += 1;
            debug_assert!(params.relation_modulus_error() < 1e-12);

            batch_counter += 1;
            if let (Some(gen), Some(adam_g)) = (generator.as_mut(), adam_g.as_mut()) {
                if batch_counter % hp.n_critic == 0 {
                    let positives: Vec<Triple> = batch.iter().map(|b| b.positive).collect();
                    let fresh = draw_noise(&mut noise_rng, positives.len(), gen.noise_dim);
                    let g_loss = generator_step(
                        &params, store, gen, &positives, &fresh, hp, &opts.adv, adam_g,
                    )
                    .map_err(numeric)?;
                    g_sum += g_loss;
                    g_count += 1;
                }
            }
        }

        d_losses.push(d_sum / d_count as f64);
        g_losses.push((g_count > 0).then(|| g_sum / g_count as f64));

        if let Some(dir) = out_dir {
            if opts.save_every > 0 && (epoch + 1) % opts.save_every == 0 {
                let snap = dir.join("checkpoints").join(format!("epoch_{:05}", epoch + 1));
                checkpoint::save(&snap, &params, generator.as_ref(), hp, &opts.adv)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("checkpoint"), &params, generator.as_ref(), hp, &opts.adv)?;
    }

    Ok(TrainOutcome { params, generator, d_losses, g_losses })
}

/// Write per-epoch losses as `epoch,d_loss,g_loss` rows; the g column is
/// empty for epochs without a generator step.
pub fn write_losses_csv(path: &Path, outcome: &TrainOutcome) -> std::io::Result<()> {
    let mut rows = String::new();
    for (epoch, (d, g)) in outcome.d_losses.iter().zip(&outcome.g_losses).enumerate() {
        let g = g.map(|v| v.to_string()).unwrap_or_default();
        rows.push_str(&format!("{epoch},{d},{g}\n"));
    }
    std::fs::write(path, rows)
}
