//! Adversarial embedding augmentation.
//!
//! A two-layer MLP generator turns (concatenated real per-source
//! embeddings, Gaussian noise) into synthetic per-source embeddings that
//! form a synthetic entity. For each positive (h, r, t) the synthetic set
//! {(h*, r, t), (h, r, t*), (h*, r, t*)} is scored through the same fusion
//! and rotation-distance function, which doubles as the Wasserstein critic;
//! its closed-form input gradient keeps the gradient penalty a first-order
//! expression.
//!
//! Parameter partition: discriminator steps update only the scoring-side
//! tensors, generator steps update only the generator tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureStore, Triple};
use crate::model::{
    kgc_loss, BatchItem, FusedEmbedding, GraphCtx, HyperParams, ModelParams, SlotId,
};
use crate::rng::SeedStreams;
use crate::tensor::{NodeId, Result, Tape, Tensor, TensorError};
use crate::train::Adam;

/// Sign convention for the gradient penalty term added to the generator
/// loss. `Paper` keeps the leading minus of the published objective (the
/// penalty is non-positive); `Standard` uses the usual positive penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GpSign {
    #[default]
    Paper,
    Standard,
}

/// Switches for the adversarial game and its ablation variants.
#[derive(Debug, Clone)]
pub struct AdvOpts {
    /// Master switch; off means no generator, no synthetic triples.
    pub comat: bool,
    /// Replace the Wasserstein objective with log-likelihood GAN losses.
    pub vanilla_gan: bool,
    /// Score synthetic entities with a two-layer MLP instead of the
    /// rotation-distance function. Disables the gradient penalty, whose
    /// closed form exists only for the rotation critic.
    pub mlp_discriminator: bool,
    /// Include the gradient-penalty term in the generator loss.
    pub gradient_penalty: bool,
    pub gp_sign: GpSign,
}

impl Default for AdvOpts {
    fn default() -> Self {
        Self {
            comat: true,
            vanilla_gan: false,
            mlp_discriminator: false,
            gradient_penalty: true,
            gp_sign: GpSign::Paper,
        }
    }
}

/// Generator parameters: a two-layer MLP from (concatenated real
/// embeddings, noise) to concatenated synthetic embeddings.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    /// Number of sources per entity (structural + modalities).
    pub n_sources: usize,
    pub d_e: usize,
    pub noise_dim: usize,
    pub hidden: usize,
    pub tensors: Vec<Tensor>,
    w1: SlotId,
    b1: SlotId,
    w2: SlotId,
    b2: SlotId,
}

impl GeneratorParams {
    /// Output length: one embedding per source.
    pub fn concat_len(&self) -> usize {
        self.n_sources * self.d_e
    }

    pub fn init(n_sources: usize, d_e: usize, noise_dim: usize, seed: u64) -> Self {
        let n_concat = n_sources * d_e;
        let hidden = 2 * n_concat;
        let streams = SeedStreams::new(seed);
        let glorot = |rng: &mut rand_chacha::ChaCha12Rng, rows: usize, cols: usize| {
            let b = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.gen_range(-b..b)).collect(),
            )
        };
        let mut rng = streams.stream("init/gen");
        let tensors = vec![
            glorot(&mut rng, hidden, n_concat + noise_dim),
            Tensor::zeros(vec![hidden]),
            glorot(&mut rng, n_concat, hidden),
            Tensor::zeros(vec![n_concat]),
        ];
        Self { n_sources, d_e, noise_dim, hidden, tensors, w1: 0, b1: 1, w2: 2, b2: 3 }
    }

    pub fn slot_name(&self, slot: SlotId) -> String {
        match slot {
            s if s == self.w1 => "gen_w1".into(),
            s if s == self.b1 => "gen_b1".into(),
            s if s == self.w2 => "gen_w2".into(),
            s if s == self.b2 => "gen_b2".into(),
            other => unreachable!("generator slot {other}"),
        }
    }
}

/// Per-positive noise vectors for the head and tail synthetic entities.
#[derive(Debug, Clone)]
pub struct NoisePair {
    pub head: Vec<f64>,
    pub tail: Vec<f64>,
}

/// Draw standard-normal noise pairs for a batch.
pub fn draw_noise(rng: &mut impl Rng, n_positives: usize, noise_dim: usize) -> Vec<NoisePair> {
    let draw = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..noise_dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
    };
    (0..n_positives).map(|_| NoisePair { head: draw(rng), tail: draw(rng) }).collect()
}

/// Generator leaves bound into one tape.
pub struct GenGraph<'g> {
    pub gen: &'g GeneratorParams,
    leaves: Vec<Option<NodeId>>,
}

impl<'g> GenGraph<'g> {
    pub fn new(gen: &'g GeneratorParams) -> Self {
        Self { gen, leaves: vec![None; gen.tensors.len()] }
    }

    fn leaf(&mut self, tape: &mut Tape, slot: SlotId) -> NodeId {
        if let Some(id) = self.leaves[slot] {
            return id;
        }
        let id = tape.leaf(self.gen.tensors[slot].clone());
        self.leaves[slot] = Some(id);
        id
    }

    /// (slot, leaf) bindings for gradient collection.
    pub fn bindings(&self) -> Vec<(SlotId, NodeId)> {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(slot, leaf)| leaf.map(|l| (slot, l)))
            .collect()
    }

    /// Synthetic per-source embeddings from the concatenated real
    /// embedding and a noise vector: split(MLP2(relu(MLP1([e_real, z])))).
    pub fn generate(
        &mut self,
        ctx: &mut GraphCtx,
        e_real: NodeId,
        noise: &[f64],
    ) -> Result<Vec<NodeId>> {
        if noise.len() != self.gen.noise_dim {
            return Err(TensorError::ShapeMismatch {
                op: "generate",
                lhs: vec![self.gen.noise_dim],
                rhs: vec![noise.len()],
            });
        }
        let z = ctx.tape.leaf(Tensor::vector(noise.to_vec()));
        let input = ctx.tape.concat(&[e_real, z])?;
        let (w1, b1) = (self.leaf(&mut ctx.tape, self.gen.w1), self.leaf(&mut ctx.tape, self.gen.b1));
        let (w2, b2) = (self.leaf(&mut ctx.tape, self.gen.w2), self.leaf(&mut ctx.tape, self.gen.b2));
        let h = ctx.tape.matvec(w1, input)?;
        let h = ctx.tape.add(h, b1)?;
        let h = ctx.tape.relu(h)?;
        let out = ctx.tape.matvec(w2, h)?;
        let out = ctx.tape.add(out, b2)?;
        (0..self.gen.n_sources).map(|i| ctx.tape.slice(out, i * self.gen.d_e, self.gen.d_e)).collect()
    }
}

/// Concatenation of an entity's per-source embeddings in the fixed order
/// (structural, then modalities in manifest order).
pub fn concat_entity_embeddings(ctx: &mut GraphCtx, entity: u32) -> Result<NodeId> {
    let sources = ctx.entity_sources(entity)?;
    ctx.tape.concat(&sources)
}

/// Synthetic head and tail entities for one positive triple, as
/// per-source embedding nodes.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub head_sources: Vec<NodeId>,
    pub tail_sources: Vec<NodeId>,
}

/// Generate synthetic head/tail entities for every positive in a batch.
pub fn synthesize_batch(
    ctx: &mut GraphCtx,
    gen_graph: &mut GenGraph,
    positives: &[Triple],
    noise: &[NoisePair],
) -> Result<Vec<SyntheticPair>> {
    positives
        .iter()
        .zip(noise)
        .map(|(t, z)| {
            let h_real = concat_entity_embeddings(ctx, t.head)?;
            let t_real = concat_entity_embeddings(ctx, t.tail)?;
            Ok(SyntheticPair {
                head_sources: gen_graph.generate(ctx, h_real, &z.head)?,
                tail_sources: gen_graph.generate(ctx, t_real, &z.tail)?,
            })
        })
        .collect()
}

/// Joint embeddings of the synthetic set members for one positive.
struct SyntheticJoints {
    real_h: FusedEmbedding,
    real_t: FusedEmbedding,
    syn_h: FusedEmbedding,
    syn_t: FusedEmbedding,
}

fn synthetic_joints(
    ctx: &mut GraphCtx,
    positive: &Triple,
    pair: &SyntheticPair,
) -> Result<SyntheticJoints> {
    Ok(SyntheticJoints {
        real_h: ctx.fused(positive.head, positive.rel)?,
        real_t: ctx.fused(positive.tail, positive.rel)?,
        syn_h: ctx.fuse_sources(&pair.head_sources, positive.rel)?,
        syn_t: ctx.fuse_sources(&pair.tail_sources, positive.rel)?,
    })
}

/// Wasserstein adversarial loss:
/// sum over positives of -F(h,r,t) + mean of the three synthetic scores,
/// with synthetic entities fused through the same adaptive-fusion path.
pub fn adv_loss(
    ctx: &mut GraphCtx,
    positives: &[Triple],
    synth: &[SyntheticPair],
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(positives.len());
    for (pos, pair) in positives.iter().zip(synth) {
        let j = synthetic_joints(ctx, pos, pair)?;
        let real = ctx.score_joints(j.real_h.node, pos.rel, j.real_t.node)?;
        let s1 = ctx.score_joints(j.syn_h.node, pos.rel, j.real_t.node)?;
        let s2 = ctx.score_joints(j.real_h.node, pos.rel, j.syn_t.node)?;
        let s3 = ctx.score_joints(j.syn_h.node, pos.rel, j.syn_t.node)?;
        let syn_sum = ctx.tape.add_n(&[s1, s2, s3])?;
        let syn_mean = ctx.tape.scale(syn_sum, 1.0 / 3.0)?;
        let neg_real = ctx.tape.neg(real)?;
        terms.push(ctx.tape.add(neg_real, syn_mean)?);
    }
    ctx.tape.add_n(&terms)
}

/// Gradient-penalty for the synthetic sets of a batch: for every synthetic
/// joint embedding appearing in a synthetic triple, a term
/// (||grad F||_2 - 1)^2 on the score gradient w.r.t. that embedding. The
/// `Paper` sign keeps the published leading minus (a non-positive penalty);
/// `Standard` flips it to the usual positive penalty.
pub fn gradient_penalty(
    ctx: &mut GraphCtx,
    positives: &[Triple],
    synth: &[SyntheticPair],
    sign: GpSign,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    for (pos, pair) in positives.iter().zip(synth) {
        let j = synthetic_joints(ctx, pos, pair)?;
        // (h*, r, t): synthetic head side only.
        let (gh, _) = ctx.score_input_grad(j.syn_h.node, pos.rel, j.real_t.node)?;
        terms.push(penalty_term(ctx, gh)?);
        // (h, r, t*): synthetic tail side only.
        let (_, gt) = ctx.score_input_grad(j.real_h.node, pos.rel, j.syn_t.node)?;
        terms.push(penalty_term(ctx, gt)?);
        // (h*, r, t*): both sides are synthetic.
        let (gh, gt) = ctx.score_input_grad(j.syn_h.node, pos.rel, j.syn_t.node)?;
        terms.push(penalty_term(ctx, gh)?);
        terms.push(penalty_term(ctx, gt)?);
    }
    let total = ctx.tape.add_n(&terms)?;
    match sign {
        GpSign::Paper => ctx.tape.neg(total),
        GpSign::Standard => Ok(total),
    }
}

fn penalty_term(ctx: &mut GraphCtx, grad: NodeId) -> Result<NodeId> {
    let norm = ctx.tape.l2_norm(grad)?;
    let dev = ctx.tape.add_const(norm, -1.0)?;
    ctx.tape.mul(dev, dev)
}

/// Probability clamp for the log-likelihood GAN variant.
const PROB_CLAMP: f64 = 1e-7;

fn log_prob(ctx: &mut GraphCtx, score: NodeId) -> Result<NodeId> {
    let p = ctx.tape.sigmoid(score)?;
    let p = ctx.tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    ctx.tape.log(p)
}

fn log_one_minus_prob(ctx: &mut GraphCtx, score: NodeId) -> Result<NodeId> {
    let p = ctx.tape.sigmoid(score)?;
    let neg = ctx.tape.neg(p)?;
    let q = ctx.tape.add_const(neg, 1.0)?;
    let q = ctx.tape.clamp(q, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    ctx.tape.log(q)
}

/// Log-likelihood ("vanilla") discriminator loss:
/// -sum [ log sigmoid(F_real) + (1/3) sum log(1 - sigmoid(F_syn)) ].
pub fn vanilla_disc_loss(
    ctx: &mut GraphCtx,
    positives: &[Triple],
    synth: &[SyntheticPair],
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(positives.len());
    for (pos, pair) in positives.iter().zip(synth) {
        let j = synthetic_joints(ctx, pos, pair)?;
        let real = ctx.score_joints(j.real_h.node, pos.rel, j.real_t.node)?;
        let real_term = log_prob(ctx, real)?;
        let s1 = ctx.score_joints(j.syn_h.node, pos.rel, j.real_t.node)?;
        let s2 = ctx.score_joints(j.real_h.node, pos.rel, j.syn_t.node)?;
        let s3 = ctx.score_joints(j.syn_h.node, pos.rel, j.syn_t.node)?;
        let mut syn_terms = Vec::with_capacity(3);
        for s in [s1, s2, s3] {
            syn_terms.push(log_one_minus_prob(ctx, s)?);
        }
        let syn_sum = ctx.tape.add_n(&syn_terms)?;
        let syn_mean = ctx.tape.scale(syn_sum, 1.0 / 3.0)?;
        terms.push(ctx.tape.add(real_term, syn_mean)?);
    }
    let total = ctx.tape.add_n(&terms)?;
    ctx.tape.neg(total)
}

/// Non-saturating generator counterpart:
/// -sum (1/3) sum log sigmoid(F_syn).
pub fn vanilla_gen_loss(
    ctx: &mut GraphCtx,
    positives: &[Triple],
    synth: &[SyntheticPair],
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(positives.len());
    for (pos, pair) in positives.iter().zip(synth) {
        let j = synthetic_joints(ctx, pos, pair)?;
        let s1 = ctx.score_joints(j.syn_h.node, pos.rel, j.real_t.node)?;
        let s2 = ctx.score_joints(j.real_h.node, pos.rel, j.syn_t.node)?;
        let s3 = ctx.score_joints(j.syn_h.node, pos.rel, j.syn_t.node)?;
        let mut syn_terms = Vec::with_capacity(3);
        for s in [s1, s2, s3] {
            syn_terms.push(log_prob(ctx, s)?);
        }
        let syn_sum = ctx.tape.add_n(&syn_terms)?;
        terms.push(ctx.tape.scale(syn_sum, 1.0 / 3.0)?);
    }
    let total = ctx.tape.add_n(&terms)?;
    ctx.tape.neg(total)
}

/// Two-layer MLP critic over a concatenated embedding (ablation variant).
fn disc_mlp_score(ctx: &mut GraphCtx, x: NodeId) -> Result<NodeId> {
    let slots = ctx.params.disc_mlp_slots().ok_or(TensorError::InvalidShape {
        op: "disc_mlp",
        shape: vec![],
        detail: "model was built without the MLP discriminator".into(),
    })?;
    let (w1, b1, w2, b2) = (
        ctx.slot_leaf(slots.w1),
        ctx.slot_leaf(slots.b1),
        ctx.slot_leaf(slots.w2),
        ctx.slot_leaf(slots.b2),
    );
    let h = ctx.tape.matvec(w1, x)?;
    let h = ctx.tape.add(h, b1)?;
    let h = ctx.tape.relu(h)?;
    let out = ctx.tape.matvec(w2, h)?;
    ctx.tape.add(out, b2)
}

/// Wasserstein loss with the MLP critic scoring concatenated embeddings:
/// sum of -(D(real_h) + D(real_t))/2 + (D(syn_h) + D(syn_t))/2.
pub fn adv_loss_mlp(
    ctx: &mut GraphCtx,
    positives: &[Triple],
    synth: &[SyntheticPair],
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(positives.len());
    for (pos, pair) in positives.iter().zip(synth) {
        let real_h = concat_entity_embeddings(ctx, pos.head)?;
        let real_t = concat_entity_embeddings(ctx, pos.tail)?;
        let syn_h = ctx.tape.concat(&pair.head_sources)?;
        let syn_t = ctx.tape.concat(&pair.tail_sources)?;
        let d_real_h = disc_mlp_score(ctx, real_h)?;
        let d_real_t = disc_mlp_score(ctx, real_t)?;
        let d_syn_h = disc_mlp_score(ctx, syn_h)?;
        let d_syn_t = disc_mlp_score(ctx, syn_t)?;
        let real = ctx.tape.add(d_real_h, d_real_t)?;
        let real = ctx.tape.scale(real, -0.5)?;
        let syn = ctx.tape.add(d_syn_h, d_syn_t)?;
        let syn = ctx.tape.scale(syn, 0.5)?;
        terms.push(ctx.tape.add(real, syn)?);
    }
    ctx.tape.add_n(&terms)
}

/// Adversarial term of the discriminator objective under the active
/// variant flags.
fn adv_term_for_disc(
    ctx: &mut GraphCtx,
    positives: &[Triple],
    synth: &[SyntheticPair],
    opts: &AdvOpts,
) -> Result<NodeId> {
    if opts.mlp_discriminator {
        adv_loss_mlp(ctx, positives, synth)
    } else if opts.vanilla_gan {
        vanilla_disc_loss(ctx, positives, synth)
    } else {
        adv_loss(ctx, positives, synth)
    }
}

/// Full discriminator objective on an existing graph context:
/// L_D = L_kgc + lambda1 * L_adv. With the game disabled or lambda1 = 0 the
/// synthetic graph is skipped entirely, so the resulting gradients are
/// bit-identical to a plain scoring loss.
///
/// `frozen_weights` passes through to the self-adversarial weighting of
/// the scoring loss (used by finite-difference checks).
pub fn discriminator_loss(
    ctx: &mut GraphCtx,
    gen: Option<&GeneratorParams>,
    batch: &[BatchItem],
    noise: Option<&[NoisePair]>,
    hp: &HyperParams,
    opts: &AdvOpts,
    frozen_weights: Option<&[Vec<f64>]>,
) -> Result<NodeId> {
    let l_kgc = kgc_loss(ctx, batch, hp, frozen_weights)?;
    if !(opts.comat && hp.lambda1 != 0.0) {
        return Ok(l_kgc);
    }
    let gen = gen.expect("adversarial step requires a generator");
    let noise = noise.expect("adversarial step requires noise");
    let positives: Vec<Triple> = batch.iter().map(|b| b.positive).collect();
    let mut gen_graph = GenGraph::new(gen);
    let synth = synthesize_batch(ctx, &mut gen_graph, &positives, noise)?;
    let l_adv = adv_term_for_disc(ctx, &positives, &synth, opts)?;
    let weighted = ctx.tape.scale(l_adv, hp.lambda1)?;
    ctx.tape.add(l_kgc, weighted)
}

/// Full generator objective on an existing graph context with already-bound
/// generator leaves: L_G = -L_adv + lambda2 * L_gp (Wasserstein) or the
/// non-saturating log-likelihood variant.
pub fn generator_loss(
    ctx: &mut GraphCtx,
    gen_graph: &mut GenGraph,
    positives: &[Triple],
    noise: &[NoisePair],
    hp: &HyperParams,
    opts: &AdvOpts,
) -> Result<NodeId> {
    let synth = synthesize_batch(ctx, gen_graph, positives, noise)?;
    let base = if opts.vanilla_gan {
        vanilla_gen_loss(ctx, positives, &synth)?
    } else {
        let l_adv = adv_loss(ctx, positives, &synth)?;
        ctx.tape.neg(l_adv)?
    };
    if opts.gradient_penalty && !opts.mlp_discriminator && hp.lambda2 != 0.0 {
        let l_gp = gradient_penalty(ctx, positives, &synth, opts.gp_sign)?;
        let weighted = ctx.tape.scale(l_gp, hp.lambda2)?;
        ctx.tape.add(base, weighted)
    } else {
        Ok(base)
    }
}

/// One discriminator update: gradients applied to the scoring-side
/// parameters only. Returns the loss value.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    params: &mut ModelParams,
    store: &FeatureStore,
    gen: Option<&GeneratorParams>,
    batch: &[BatchItem],
    noise: Option<&[NoisePair]>,
    hp: &HyperParams,
    opts: &AdvOpts,
    adam: &mut Adam,
) -> Result<f64> {
    let (loss_value, updates) = {
        let mut ctx = GraphCtx::new(params, store);
        let loss = discriminator_loss(&mut ctx, gen, batch, noise, hp, opts, None)?;
        let grads = ctx.tape.backward(loss)?;
        let updates: Vec<(SlotId, Tensor)> = ctx
            .bindings()
            .into_iter()
            .map(|(slot, leaf)| {
                (slot, grads.of_or_zeros(leaf, ctx.params.tensors[slot].shape()))
            })
            .collect();
        (ctx.tape.value(loss).item(), updates)
    };
    let mut grad_by_slot: Vec<Option<Tensor>> = vec![None; params.n_slots()];
    for (slot, g) in updates {
        grad_by_slot[slot] = Some(g);
    }
    adam.step(&mut params.tensors, &grad_by_slot, hp.lr_d)?;
    params.wrap_phases();
    Ok(loss_value)
}

/// One generator update: L_G = -L_adv + lambda2 * L_gp (Wasserstein) or the
/// non-saturating log-likelihood loss under `vanilla_gan`. Gradients are
/// applied to the generator parameters only. Returns the loss value.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    params: &ModelParams,
    store: &FeatureStore,
    gen: &mut GeneratorParams,
    positives: &[Triple],
    noise: &[NoisePair],
    hp: &HyperParams,
    opts: &AdvOpts,
    adam: &mut Adam,
) -> Result<f64> {
    let (loss_value, updates) = {
        let mut ctx = GraphCtx::new(params, store);
        let mut gen_graph = GenGraph::new(gen);
        let loss = generator_loss(&mut ctx, &mut gen_graph, positives, noise, hp, opts)?;
        let grads = ctx.tape.backward(loss)?;
        let updates: Vec<(SlotId, Tensor)> = gen_graph
            .bindings()
            .into_iter()
            .map(|(slot, leaf)| (slot, grads.of_or_zeros(leaf, gen.tensors[slot].shape())))
            .collect();
        (ctx.tape.value(loss).item(), updates)
    };
    let mut grad_by_slot: Vec<Option<Tensor>> = vec![None; gen.tensors.len()];
    for (slot, g) in updates {
        grad_by_slot[slot] = Some(g);
    }
    adam.step(&mut gen.tensors, &grad_by_slot, hp.lr_g)?;
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy_setup;

    fn bit_checksum(tensors: &[Tensor]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in tensors {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    #[test]
    fn concat_layout_and_split_round_trip() {
        let d_e = 4;
        let (params, store, _) = toy_setup(3, 1, d_e, &[5], 21);
        let mut ctx = GraphCtx::new(&params, &store);
        // One declared modality plus the structural source: length 2 * d_e.
        let cat = concat_entity_embeddings(&mut ctx, 0).unwrap();
        assert_eq!(ctx.tape.value(cat).shape(), &[8]);

        let sources = ctx.entity_sources(0).unwrap();
        for (i, &src) in sources.iter().enumerate() {
            let slice = ctx.tape.slice(cat, i * d_e, d_e).unwrap();
            let a = ctx.tape.value(slice).data().to_vec();
            let b = ctx.tape.value(src).data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // Two calls produce an identical layout.
        let cat2 = concat_entity_embeddings(&mut ctx, 0).unwrap();
        assert_eq!(ctx.tape.value(cat).data(), ctx.tape.value(cat2).data());
    }

    #[test]
    fn generator_output_shape_and_determinism() {
        let (params, store, hp) = toy_setup(3, 1, 6, &[4, 3], 22);
        let gen = GeneratorParams::init(3, 6, hp.noise_dim, 22);
        assert_eq!(gen.concat_len(), 18);
        let mut ctx = GraphCtx::new(&params, &store);
        let mut gg = GenGraph::new(&gen);
        let e_real = concat_entity_embeddings(&mut ctx, 1).unwrap();
        let noise: Vec<f64> = (0..hp.noise_dim).map(|i| (i as f64) / 10.0 - 0.2).collect();
        let parts = gg.generate(&mut ctx, e_real, &noise).unwrap();
        assert_eq!(parts.len(), 3);
        let total: usize = parts.iter().map(|&p| ctx.tape.value(p).numel()).sum();
        assert_eq!(total, ctx.tape.value(e_real).numel());
        // Deterministic for a fixed (e_real, z, weights).
        let parts2 = gg.generate(&mut ctx, e_real, &noise).unwrap();
        for (&a, &b) in parts.iter().zip(&parts2) {
            assert_eq!(ctx.tape.value(a).data(), ctx.tape.value(b).data());
        }
    }

    #[test]
    fn zero_generator_emits_zero_embeddings() {
        let (params, store, hp) = toy_setup(3, 1, 6, &[4], 23);
        let mut gen = GeneratorParams::init(2, 6, hp.noise_dim, 23);
        for t in gen.tensors.iter_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut ctx = GraphCtx::new(&params, &store);
        let mut gg = GenGraph::new(&gen);
        let e_real = concat_entity_embeddings(&mut ctx, 0).unwrap();
        let parts = gg.generate(&mut ctx, e_real, &vec![0.3; hp.noise_dim]).unwrap();
        for p in parts {
            assert!(ctx.tape.value(p).data().iter().all(|v| *v == 0.0));
        }
    }

    /// Stub generator that returns the real embeddings exactly.
    fn identity_synth(ctx: &mut GraphCtx, positives: &[Triple]) -> Vec<SyntheticPair> {
        positives
            .iter()
            .map(|p| SyntheticPair {
                head_sources: ctx.entity_sources(p.head).unwrap(),
                tail_sources: ctx.entity_sources(p.tail).unwrap(),
            })
            .collect()
    }

    #[test]
    fn copy_generator_is_a_fixed_point_of_adv_loss() {
        let (params, store, _) = toy_setup(6, 2, 8, &[5, 4], 24);
        let mut ctx = GraphCtx::new(&params, &store);
        let positives =
            vec![Triple::new(0, 0, 1), Triple::new(2, 1, 3), Triple::new(4, 0, 5)];
        let synth = identity_synth(&mut ctx, &positives);
        let l = adv_loss(&mut ctx, &positives, &synth).unwrap();
        assert!(ctx.tape.value(l).item().abs() < 1e-9);
    }

    #[test]
    fn adv_loss_single_triple_equals_its_own_mean_and_tracks_sign() {
        let (params, store, hp) = toy_setup(5, 2, 8, &[5], 25);
        let gen = GeneratorParams::init(2, 8, hp.noise_dim, 25);
        let positives = vec![Triple::new(0, 0, 1)];
        let noise = draw_noise(&mut SeedStreams::new(1).stream("noise"), 1, hp.noise_dim);

        let mut ctx = GraphCtx::new(&params, &store);
        let mut gg = GenGraph::new(&gen);
        let synth = synthesize_batch(&mut ctx, &mut gg, &positives, &noise).unwrap();
        let l = adv_loss(&mut ctx, &positives, &synth).unwrap();
        let l = ctx.tape.value(l).item();

        // Recompute the single term by hand: -F(real) + mean of synthetic.
        let j = synthetic_joints(&mut ctx, &positives[0], &synth[0]).unwrap();
        let real = ctx.score_joints(j.real_h.node, 0, j.real_t.node).unwrap();
        let s1 = ctx.score_joints(j.syn_h.node, 0, j.real_t.node).unwrap();
        let s2 = ctx.score_joints(j.real_h.node, 0, j.syn_t.node).unwrap();
        let s3 = ctx.score_joints(j.syn_h.node, 0, j.syn_t.node).unwrap();
        let expect = -ctx.tape.value(real).item()
            + (ctx.tape.value(s1).item() + ctx.tape.value(s2).item() + ctx.tape.value(s3).item())
                / 3.0;
        assert!((l - expect).abs() < 1e-12);

        // Synthetic entities pushed far from the real ones score very
        // negatively and drive the loss down (the critic side is winning).
        let far_synth: Vec<SyntheticPair> = synth
            .iter()
            .map(|p| SyntheticPair {
                head_sources: p
                    .head_sources
                    .iter()
                    .map(|&s| ctx.tape.scale(s, 100.0).unwrap())
                    .collect(),
                tail_sources: p
                    .tail_sources
                    .iter()
                    .map(|&s| ctx.tape.scale(s, 100.0).unwrap())
                    .collect(),
            })
            .collect();
        let far = adv_loss(&mut ctx, &positives, &far_synth).unwrap();
        assert!(ctx.tape.value(far).item() < l);
    }

    #[test]
    fn gradient_penalty_is_near_zero_for_unit_norm_gradients() {
        let (params, store, hp) = toy_setup(6, 2, 8, &[5, 4], 26);
        let gen = GeneratorParams::init(3, 8, hp.noise_dim, 26);
        let positives = vec![Triple::new(0, 0, 1), Triple::new(2, 1, 3)];
        let noise = draw_noise(&mut SeedStreams::new(2).stream("noise"), 2, hp.noise_dim);
        let mut ctx = GraphCtx::new(&params, &store);
        let mut gg = GenGraph::new(&gen);
        let synth = synthesize_batch(&mut ctx, &mut gg, &positives, &noise).unwrap();
        let gp = gradient_penalty(&mut ctx, &positives, &synth, GpSign::Paper).unwrap();
        let v = ctx.tape.value(gp).item();
        // The rotation critic has unit input-gradient norm away from the
        // singularity, so the penalty vanishes up to the epsilon guard.
        assert!(v.abs() < 1e-12, "gp = {v}");
        // Paper sign keeps the term non-positive.
        assert!(v <= 0.0);
        let gp_std = gradient_penalty(&mut ctx, &positives, &synth, GpSign::Standard).unwrap();
        assert!(ctx.tape.value(gp_std).item() >= 0.0);
    }

    #[test]
    fn gradient_penalty_differentiates_through_generator_weights() {
        let (params, store, hp) = toy_setup(3, 1, 6, &[4], 27);
        let mut gen = GeneratorParams::init(2, 6, hp.noise_dim, 27);
        let positives = vec![Triple::new(0, 0, 1)];
        let noise = draw_noise(&mut SeedStreams::new(3).stream("noise"), 1, hp.noise_dim);

        let eval = |g: &GeneratorParams| -> f64 {
            let mut ctx = GraphCtx::new(&params, &store);
            let mut gg = GenGraph::new(g);
            let synth = synthesize_batch(&mut ctx, &mut gg, &positives, &noise).unwrap();
            let gp = gradient_penalty(&mut ctx, &positives, &synth, GpSign::Paper).unwrap();
            ctx.tape.value(gp).item()
        };

        let mut ctx = GraphCtx::new(&params, &store);
        let mut gg = GenGraph::new(&gen);
        let synth = synthesize_batch(&mut ctx, &mut gg, &positives, &noise).unwrap();
        let gp = gradient_penalty(&mut ctx, &positives, &synth, GpSign::Paper).unwrap();
        let grads = ctx.tape.backward(gp).unwrap();
        let bindings = gg.bindings();

        let eps = 1e-5;
        for (slot, leaf) in bindings {
            let g = grads.of_or_zeros(leaf, gen.tensors[slot].shape());
            // Spot-check a handful of coordinates per tensor.
            let n = gen.tensors[slot].numel();
            for i in (0..n).step_by((n / 7).max(1)) {
                let orig = gen.tensors[slot].data()[i];
                gen.tensors[slot].data_mut()[i] = orig + eps;
                let up = eval(&gen);
                gen.tensors[slot].data_mut()[i] = orig - eps;
                let down = eval(&gen);
                gen.tensors[slot].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let err = (g.data()[i] - fd).abs() / fd.abs().max(1.0);
                assert!(err < 1e-3, "slot {slot} coord {i}: {} vs {fd}", g.data()[i]);
            }
        }
    }

    #[test]
    fn vanilla_disc_loss_at_half_probability() {
        // Zero embeddings, no modalities, zero phases: every score is 0,
        // so sigmoid = 0.5 everywhere and each positive contributes
        // log 2 + log 2.
        let (mut params, store, _) = toy_setup(4, 1, 6, &[], 28);
        let ee = params.entity_emb_slot();
        *params.slot_mut(ee) = Tensor::zeros(vec![4, 6]);
        let rp = params.rel_phase_slot();
        *params.slot_mut(rp) = Tensor::zeros(vec![1, 3]);
        let mut ctx = GraphCtx::new(&params, &store);
        let positives = vec![Triple::new(0, 0, 1), Triple::new(2, 0, 3)];
        let synth = identity_synth(&mut ctx, &positives);
        let l = vanilla_disc_loss(&mut ctx, &positives, &synth).unwrap();
        let expect = 2.0 * (2.0f64.ln() + 2.0f64.ln());
        assert!((ctx.tape.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn discriminator_step_with_zero_lambda_matches_pure_kgc_step() {
        let (params, store, mut hp) = toy_setup(6, 2, 8, &[5], 29);
        hp.lambda1 = 0.0;
        let gen = GeneratorParams::init(2, 8, hp.noise_dim, 29);
        let batch = vec![
            BatchItem { positive: Triple::new(0, 0, 1), negatives: vec![Triple::new(0, 0, 2)] },
            BatchItem { positive: Triple::new(3, 1, 4), negatives: vec![Triple::new(3, 1, 5)] },
        ];
        let noise = draw_noise(&mut SeedStreams::new(4).stream("noise"), 2, hp.noise_dim);

        let mut with_gen = params.clone();
        let mut adam1 = Adam::new_for(&with_gen.tensors);
        let opts = AdvOpts::default();
        discriminator_step(
            &mut with_gen,
            &store,
            Some(&gen),
            &batch,
            Some(&noise),
            &hp,
            &opts,
            &mut adam1,
        )
        .unwrap();

        let mut without = params.clone();
        let mut adam2 = Adam::new_for(&without.tensors);
        let opts_off = AdvOpts { comat: false, ..AdvOpts::default() };
        discriminator_step(&mut without, &store, None, &batch, None, &hp, &opts_off, &mut adam2)
            .unwrap();

        for (a, b) in with_gen.tensors.iter().zip(&without.tensors) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn steps_never_touch_the_frozen_parameter_set() {
        let (mut params, store, hp) = toy_setup(6, 2, 8, &[5, 4], 30);
        let mut gen = GeneratorParams::init(3, 8, hp.noise_dim, 30);
        let batch = vec![BatchItem {
            positive: Triple::new(0, 0, 1),
            negatives: vec![Triple::new(0, 0, 2), Triple::new(5, 0, 1)],
        }];
        let positives: Vec<Triple> = batch.iter().map(|b| b.positive).collect();
        let noise = draw_noise(&mut SeedStreams::new(5).stream("noise"), 1, hp.noise_dim);
        let opts = AdvOpts::default();

        let gen_sum_before = bit_checksum(&gen.tensors);
        let model_sum_before = bit_checksum(&params.tensors);
        let mut adam_d = Adam::new_for(&params.tensors);
        let d_loss = discriminator_step(
            &mut params,
            &store,
            Some(&gen),
            &batch,
            Some(&noise),
            &hp,
            &opts,
            &mut adam_d,
        )
        .unwrap();
        assert!(d_loss.is_finite());
        assert_eq!(bit_checksum(&gen.tensors), gen_sum_before, "D step moved the generator");
        assert_ne!(bit_checksum(&params.tensors), model_sum_before, "D step was a no-op");

        let model_sum = bit_checksum(&params.tensors);
        let mut adam_g = Adam::new_for(&gen.tensors);
        let g_loss = generator_step(
            &params, &store, &mut gen, &positives, &noise, &hp, &opts, &mut adam_g,
        )
        .unwrap();
        assert!(g_loss.is_finite());
        assert_eq!(bit_checksum(&params.tensors), model_sum, "G step moved the model");
        assert_ne!(bit_checksum(&gen.tensors), gen_sum_before, "G step was a no-op");
    }

    #[test]
    fn generator_shape_mismatch_is_rejected() {
        let (params, store, hp) = toy_setup(3, 1, 6, &[4], 31);
        let gen = GeneratorParams::init(2, 6, hp.noise_dim, 31);
        let mut ctx = GraphCtx::new(&params, &store);
        let mut gg = GenGraph::new(&gen);
        let e_real = concat_entity_embeddings(&mut ctx, 0).unwrap();
        let err = gg.generate(&mut ctx, e_real, &[0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("generate"));
    }

    #[test]
    fn mlp_discriminator_variant_runs_and_updates_its_own_weights() {
        use crate::data::ModalityMeta;
        let metas = vec![ModalityMeta { name: "m0".into(), dim: 4 }];
        let hp = HyperParams {
            d_e: 6,
            d_r: 3,
            k_negatives: 1,
            noise_dim: 4,
            batch_size: 2,
            ..HyperParams::desk_scale()
        };
        let mut store = crate::data::FeatureStore::new(metas.clone());
        for e in 0..4u32 {
            store.insert(0, e, vec![0.1 * e as f64, -0.2, 0.3, 0.05]);
        }
        let mut params = ModelParams::init(4, 1, &metas, &hp, true, true, 32);
        let gen = GeneratorParams::init(2, 6, hp.noise_dim, 32);
        let batch = vec![BatchItem {
            positive: Triple::new(0, 0, 1),
            negatives: vec![Triple::new(0, 0, 2)],
        }];
        let noise = draw_noise(&mut SeedStreams::new(6).stream("noise"), 1, hp.noise_dim);
        let opts = AdvOpts { mlp_discriminator: true, ..AdvOpts::default() };
        let slots = params.disc_mlp_slots().unwrap();
        let before = bit_checksum(&[params.tensors[slots.w1].clone()]);
        let mut adam = Adam::new_for(&params.tensors);
        let loss = discriminator_step(
            &mut params,
            &store,
            Some(&gen),
            &batch,
            Some(&noise),
            &hp,
            &opts,
            &mut adam,
        )
        .unwrap();
        assert!(loss.is_finite());
        let after = bit_checksum(&[params.tensors[slots.w1].clone()]);
        assert_ne!(before, after, "MLP critic weights did not move");
    }
}
