//! The fusion scoring model: per-modality projection MLPs, relation-guided
//! adaptive fusion of modality embeddings, rotation scoring in complex
//! space, and the self-adversarial negative-sampling loss.
//!
//! Entity representations mix a learnable structural embedding with one
//! projected embedding per declared modality. The mixing weights are a
//! softmax over per-modality logits `dot(V, tanh(e_m))`, sharpened by a
//! per-relation temperature `sigmoid(zeta_r)`, so the same entity fuses
//! differently under different relations.
//!
//! Missing modality entries are materialized as random raw features drawn
//! once per (entity, modality) from a seed-keyed stream and cached, so the
//! fusion layer can learn to down-weight them.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureStore, ModalityMeta, Triple};
use crate::math;
use crate::rng::SeedStreams;
use crate::tensor::{NodeId, Result, Tape, Tensor, TensorError};

/// Epsilon added under the square root when normalizing a score residual,
/// keeping the closed-form score gradient finite at zero residual.
pub const RESIDUAL_EPS: f64 = 1e-12;

/// Learning hyperparameters. Defaults follow the full-scale configuration;
/// tests shrink them to desk scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Entity embedding dimension (even; complex pairs).
    pub d_e: usize,
    /// Relation phase count; must equal `d_e / 2`.
    pub d_r: usize,
    /// Score margin.
    pub gamma: f64,
    /// Self-adversarial temperature for negative weighting.
    pub beta: f64,
    /// Negatives per positive triple.
    pub k_negatives: usize,
    /// Weight of the adversarial term in the discriminator loss.
    pub lambda1: f64,
    /// Weight of the gradient penalty in the generator loss.
    pub lambda2: f64,
    /// Generator noise dimension.
    pub noise_dim: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Discriminator steps per generator step.
    pub n_critic: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            d_e: 250,
            d_r: 125,
            gamma: 12.0,
            beta: 2.0,
            k_negatives: 64,
            lambda1: 1e-3,
            lambda2: 1e-4,
            noise_dim: 64,
            lr_d: 1e-4,
            lr_g: 1e-4,
            batch_size: 1024,
            epochs: 1000,
            n_critic: 1,
        }
    }
}

impl HyperParams {
    /// Small configuration for fast experiments and tests.
    pub fn desk_scale() -> Self {
        Self {
            d_e: 64,
            d_r: 32,
            gamma: 6.0,
            beta: 2.0,
            k_negatives: 16,
            lambda1: 1e-3,
            lambda2: 1e-4,
            noise_dim: 16,
            lr_d: 1e-3,
            lr_g: 1e-3,
            batch_size: 128,
            epochs: 200,
            n_critic: 1,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d_e == 0 || self.d_e % 2 != 0 {
            return Err(format!("d_e must be positive and even, got {}", self.d_e));
        }
        if self.d_r != self.d_e / 2 {
            return Err(format!("d_r must equal d_e/2 = {}, got {}", self.d_e / 2, self.d_r));
        }
        if self.beta <= 0.0 {
            return Err(format!("beta must be positive, got {}", self.beta));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lr_d", self.lr_d),
            ("lr_g", self.lr_g),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [
            ("k_negatives", self.k_negatives),
            ("noise_dim", self.noise_dim),
            ("batch_size", self.batch_size),
            ("n_critic", self.n_critic),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Index of a parameter tensor inside [`ModelParams::tensors`].
pub type SlotId = usize;

/// Projection MLP slots for one modality.
#[derive(Debug, Clone, Copy)]
pub struct ProjSlots {
    pub w1: SlotId,
    pub b1: SlotId,
    pub w2: SlotId,
    pub b2: SlotId,
}

/// Two-layer scoring MLP used by the discriminator-ablation variant.
#[derive(Debug, Clone, Copy)]
pub struct DiscMlpSlots {
    pub w1: SlotId,
    pub b1: SlotId,
    pub w2: SlotId,
    pub b2: SlotId,
}

/// All learnable tensors of the scoring side, plus the cache of random raw
/// features standing in for missing modality entries.
#[derive(Debug)]
pub struct ModelParams {
    pub n_entities: usize,
    pub n_relations: usize,
    pub d_e: usize,
    /// Active modalities in manifest order (structural is implicit).
    pub modalities: Vec<ModalityMeta>,
    /// When false, fusion logits skip the per-relation temperature.
    pub relation_guidance: bool,
    /// Master seed; missing-feature vectors are keyed off it.
    pub seed: u64,
    pub tensors: Vec<Tensor>,
    entity_emb: SlotId,
    rel_phase: SlotId,
    fusion_vec: SlotId,
    rel_temp: SlotId,
    proj: Vec<ProjSlots>,
    disc_mlp: Option<DiscMlpSlots>,
    missing_bank: RwLock<HashMap<(usize, u32), Arc<Vec<f64>>>>,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        Self {
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            d_e: self.d_e,
            modalities: self.modalities.clone(),
            relation_guidance: self.relation_guidance,
            seed: self.seed,
            tensors: self.tensors.clone(),
            entity_emb: self.entity_emb,
            rel_phase: self.rel_phase,
            fusion_vec: self.fusion_vec,
            rel_temp: self.rel_temp,
            proj: self.proj.clone(),
            disc_mlp: self.disc_mlp,
            missing_bank: RwLock::new(self.missing_bank.read().unwrap().clone()),
        }
    }
}

fn uniform_tensor(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn glorot_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let b = (6.0 / (rows + cols) as f64).sqrt();
    uniform_tensor(rng, vec![rows, cols], -b, b)
}

impl ModelParams {
    /// Initialize all tensors from named sub-streams of `seed`.
    pub fn init(
        n_entities: usize,
        n_relations: usize,
        modalities: &[ModalityMeta],
        hp: &HyperParams,
        relation_guidance: bool,
        with_disc_mlp: bool,
        seed: u64,
    ) -> Self {
        let streams = SeedStreams::new(seed);
        let d_e = hp.d_e;
        let mut tensors = Vec::new();
        let mut push = |t: Tensor| -> SlotId {
            tensors.push(t);
            tensors.len() - 1
        };

        let entity_emb = push(uniform_tensor(
            &mut streams.stream("init/entity_emb"),
            vec![n_entities, d_e],
            -0.05,
            0.05,
        ));
        let rel_phase = push(uniform_tensor(
            &mut streams.stream("init/rel_phase"),
            vec![n_relations, hp.d_r],
            -std::f64::consts::PI,
            std::f64::consts::PI,
        ));
        let fusion_vec =
            push(uniform_tensor(&mut streams.stream("init/fusion_vec"), vec![d_e], -0.01, 0.01));
        // Zero temperature parameters put sigmoid(zeta) at mid-range 0.5.
        let rel_temp = push(Tensor::zeros(vec![n_relations]));

        let mut proj = Vec::new();
        for meta in modalities {
            let mut rng = streams.stream(&format!("init/proj/{}", meta.name));
            let w1 = push(glorot_tensor(&mut rng, d_e, meta.dim));
            let b1 = push(Tensor::zeros(vec![d_e]));
            let w2 = push(glorot_tensor(&mut rng, d_e, d_e));
            let b2 = push(Tensor::zeros(vec![d_e]));
            proj.push(ProjSlots { w1, b1, w2, b2 });
        }

        let disc_mlp = if with_disc_mlp {
            let n_concat = (modalities.len() + 1) * d_e;
            let mut rng = streams.stream("init/disc_mlp");
            let w1 = push(glorot_tensor(&mut rng, d_e, n_concat));
            let b1 = push(Tensor::zeros(vec![d_e]));
            let w2 = push(glorot_tensor(&mut rng, 1, d_e));
            let b2 = push(Tensor::zeros(vec![1]));
            Some(DiscMlpSlots { w1, b1, w2, b2 })
        } else {
            None
        };

        Self {
            n_entities,
            n_relations,
            d_e,
            modalities: modalities.to_vec(),
            relation_guidance,
            seed,
            tensors,
            entity_emb,
            rel_phase,
            fusion_vec,
            rel_temp,
            proj,
            disc_mlp,
            missing_bank: RwLock::new(HashMap::new()),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.tensors.len()
    }

    pub fn entity_emb_slot(&self) -> SlotId {
        self.entity_emb
    }

    pub fn rel_phase_slot(&self) -> SlotId {
        self.rel_phase
    }

    pub fn fusion_vec_slot(&self) -> SlotId {
        self.fusion_vec
    }

    pub fn rel_temp_slot(&self) -> SlotId {
        self.rel_temp
    }

    pub fn proj_slots(&self) -> &[ProjSlots] {
        &self.proj
    }

    pub fn disc_mlp_slots(&self) -> Option<DiscMlpSlots> {
        self.disc_mlp
    }

    /// Stable name of a parameter slot, used for checkpoint files.
    pub fn slot_name(&self, slot: SlotId) -> String {
        if slot == self.entity_emb {
            return "entity_embeddings".into();
        }
        if slot == self.rel_phase {
            return "relation_phases".into();
        }
        if slot == self.fusion_vec {
            return "fusion_vector".into();
        }
        if slot == self.rel_temp {
            return "relation_temperatures".into();
        }
        for (meta, p) in self.modalities.iter().zip(&self.proj) {
            for (suffix, s) in [("w1", p.w1), ("b1", p.b1), ("w2", p.w2), ("b2", p.b2)] {
                if slot == s {
                    return format!("proj_{}_{}", meta.name, suffix);
                }
            }
        }
        if let Some(d) = self.disc_mlp {
            for (suffix, s) in [("w1", d.w1), ("b1", d.b1), ("w2", d.w2), ("b2", d.b2)] {
                if slot == s {
                    return format!("disc_{suffix}");
                }
            }
        }
        unreachable!("slot {slot} has no name")
    }

    /// Number of phase angles per relation.
    pub fn d_r(&self) -> usize {
        self.d_e / 2
    }

    pub fn slot_mut(&mut self, slot: SlotId) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    /// Raw feature for a missing (entity, modality) slot: uniform in
    /// [-b, b] with b = 6 / sqrt(d_m + d_e), drawn once from a stream keyed
    /// by (seed, modality, entity) and cached.
    pub fn missing_feature(&self, modality: usize, entity: u32) -> Arc<Vec<f64>> {
        if let Some(f) = self.missing_bank.read().unwrap().get(&(modality, entity)) {
            return Arc::clone(f);
        }
        let meta = &self.modalities[modality];
        let b = 6.0 / ((meta.dim + self.d_e) as f64).sqrt();
        let mut rng =
            SeedStreams::new(self.seed).stream(&format!("init/missing/{}/{}", meta.name, entity));
        let f = Arc::new((0..meta.dim).map(|_| rng.gen_range(-b..b)).collect::<Vec<f64>>());
        self.missing_bank.write().unwrap().insert((modality, entity), Arc::clone(&f));
        f
    }

    /// Raw feature for (entity, modality): stored when present, otherwise
    /// the cached random stand-in.
    pub fn raw_feature(&self, store: &FeatureStore, modality: usize, entity: u32) -> Arc<Vec<f64>> {
        match store.get(modality, entity) {
            Some(f) => Arc::new(f.to_vec()),
            None => self.missing_feature(modality, entity),
        }
    }

    /// Wrap all relation phases into (-pi, pi].
    pub fn wrap_phases(&mut self) {
        for v in self.tensors[self.rel_phase].data_mut() {
            *v = math::wrap_angle(*v);
        }
    }

    /// Max deviation of any relation element from unit modulus,
    /// max |cos^2 + sin^2 - 1|.
    pub fn relation_modulus_error(&self) -> f64 {
        self.tensors[self.rel_phase]
            .data()
            .iter()
            .map(|t| {
                let (s, c) = t.sin_cos();
                (s * s + c * c - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Joint embedding node plus its fusion-weight vector node (softmax over
/// structural + modality sources, in that order).
#[derive(Debug, Clone, Copy)]
pub struct FusedEmbedding {
    pub node: NodeId,
    /// `[1 + n_modalities]` softmax weights.
    pub weights: NodeId,
}

/// Per-batch graph builder. Caches parameter leaves and per-(entity,
/// relation) fusion subgraphs so repeated triples share nodes.
pub struct GraphCtx<'a> {
    pub tape: Tape,
    pub params: &'a ModelParams,
    pub store: &'a FeatureStore,
    slot_leaves: Vec<Option<NodeId>>,
    source_cache: HashMap<u32, Vec<NodeId>>,
    joint_cache: HashMap<(u32, u32), FusedEmbedding>,
    phase_cache: HashMap<u32, NodeId>,
    inv_temp_cache: HashMap<u32, NodeId>,
}

impl<'a> GraphCtx<'a> {
    pub fn new(params: &'a ModelParams, store: &'a FeatureStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            store,
            slot_leaves: vec![None; params.n_slots()],
            source_cache: HashMap::new(),
            joint_cache: HashMap::new(),
            phase_cache: HashMap::new(),
            inv_temp_cache: HashMap::new(),
        }
    }

    /// Leaf node for a parameter slot (one per slot per tape).
    pub fn slot_leaf(&mut self, slot: SlotId) -> NodeId {
        if let Some(id) = self.slot_leaves[slot] {
            return id;
        }
        let id = self.tape.leaf(self.params.tensors[slot].clone());
        self.slot_leaves[slot] = Some(id);
        id
    }

    /// (slot, leaf) bindings created so far, for gradient collection.
    pub fn bindings(&self) -> Vec<(SlotId, NodeId)> {
        self.slot_leaves
            .iter()
            .enumerate()
            .filter_map(|(slot, leaf)| leaf.map(|l| (slot, l)))
            .collect()
    }

    /// Projected embedding of one modality for an entity; missing features
    /// take the cached random stand-in.
    pub fn modality_embedding(&mut self, entity: u32, modality: usize) -> Result<NodeId> {
        if modality >= self.params.modalities.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "modality_embedding",
                index: modality,
                len: self.params.modalities.len(),
            });
        }
        let raw = self.params.raw_feature(self.store, modality, entity);
        let raw_leaf = self.tape.leaf(Tensor::vector(raw.as_ref().clone()));
        let p = self.params.proj_slots()[modality];
        let (w1, b1, w2, b2) =
            (self.slot_leaf(p.w1), self.slot_leaf(p.b1), self.slot_leaf(p.w2), self.slot_leaf(p.b2));
        let h = self.tape.matvec(w1, raw_leaf)?;
        let h = self.tape.add(h, b1)?;
        let h = self.tape.relu(h)?;
        let out = self.tape.matvec(w2, h)?;
        self.tape.add(out, b2)
    }

    /// Embedding nodes for all sources of an entity: structural first,
    /// then each active modality in manifest order. Cached per entity.
    pub fn entity_sources(&mut self, entity: u32) -> Result<Vec<NodeId>> {
        if let Some(s) = self.source_cache.get(&entity) {
            return Ok(s.clone());
        }
        let emb_slot = self.params.entity_emb_slot();
        let emb = self.slot_leaf(emb_slot);
        let mut sources = vec![self.tape.gather(emb, entity as usize)?];
        for m in 0..self.params.modalities.len() {
            sources.push(self.modality_embedding(entity, m)?);
        }
        self.source_cache.insert(entity, sources.clone());
        Ok(sources)
    }

    /// Reciprocal of the relation temperature sigmoid, or 1 when relation
    /// guidance is disabled.
    fn inv_temperature(&mut self, rel: u32) -> Result<NodeId> {
        if let Some(id) = self.inv_temp_cache.get(&rel) {
            return Ok(*id);
        }
        let id = if self.params.relation_guidance {
            let temp_slot = self.params.rel_temp_slot();
            let temps = self.slot_leaf(temp_slot);
            let zeta = self.tape.gather(temps, rel as usize)?;
            let sig = self.tape.sigmoid(zeta)?;
            self.tape.recip(sig)?
        } else {
            self.tape.scalar(1.0)
        };
        self.inv_temp_cache.insert(rel, id);
        Ok(id)
    }

    /// Fusion-weight vector over the given source embeddings under
    /// relation `rel`: softmax of dot(V, tanh(e_m)) / sigmoid(zeta_r).
    pub fn fusion_weights(&mut self, sources: &[NodeId], rel: u32) -> Result<NodeId> {
        if sources.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "fusion_weights",
                shape: vec![],
                detail: "no source embeddings".into(),
            });
        }
        let v_slot = self.params.fusion_vec_slot();
        let v = self.slot_leaf(v_slot);
        let inv_temp = self.inv_temperature(rel)?;
        let mut logits = Vec::with_capacity(sources.len());
        for &src in sources {
            let t = self.tape.tanh(src)?;
            let l = self.tape.dot(v, t)?;
            logits.push(self.tape.mul(l, inv_temp)?);
        }
        let stacked = self.tape.concat(&logits)?;
        self.tape.softmax_last(stacked)
    }

    /// Weighted sum of source embeddings with the adaptive weights.
    pub fn fuse_sources(&mut self, sources: &[NodeId], rel: u32) -> Result<FusedEmbedding> {
        let weights = self.fusion_weights(sources, rel)?;
        let mut terms = Vec::with_capacity(sources.len());
        for (i, &src) in sources.iter().enumerate() {
            let w = self.tape.gather(weights, i)?;
            terms.push(self.tape.mul_scalar(src, w)?);
        }
        let node = self.tape.add_n(&terms)?;
        Ok(FusedEmbedding { node, weights })
    }

    /// Joint embedding of an entity under a relation context. Cached.
    pub fn fused(&mut self, entity: u32, rel: u32) -> Result<FusedEmbedding> {
        if let Some(f) = self.joint_cache.get(&(entity, rel)) {
            return Ok(*f);
        }
        let sources = self.entity_sources(entity)?;
        let fused = self.fuse_sources(&sources, rel)?;
        self.joint_cache.insert((entity, rel), fused);
        Ok(fused)
    }

    /// Phase-angle vector of a relation. Cached.
    pub fn phase(&mut self, rel: u32) -> Result<NodeId> {
        if let Some(id) = self.phase_cache.get(&rel) {
            return Ok(*id);
        }
        let slot = self.params.rel_phase_slot();
        let phases = self.slot_leaf(slot);
        let id = self.tape.gather(phases, rel as usize)?;
        self.phase_cache.insert(rel, id);
        Ok(id)
    }

    /// Rotation-distance score from joint embeddings:
    /// F = -||rotate(h, theta_r) - t||, always <= 0.
    pub fn score_joints(&mut self, h_joint: NodeId, rel: u32, t_joint: NodeId) -> Result<NodeId> {
        let theta = self.phase(rel)?;
        let rotated = self.tape.rotate(h_joint, theta)?;
        let residual = self.tape.sub(rotated, t_joint)?;
        let dist = self.tape.l2_norm(residual)?;
        self.tape.neg(dist)
    }

    /// Score of a real triple through cached fusions.
    pub fn score_triple(&mut self, t: &Triple) -> Result<NodeId> {
        let h = self.fused(t.head, t.rel)?;
        let tl = self.fused(t.tail, t.rel)?;
        self.score_joints(h.node, t.rel, tl.node)
    }

    /// Closed-form score gradient w.r.t. the joint embeddings, expressed
    /// as a first-order graph so it can itself be differentiated:
    /// grad_t F = residual / ||residual||, grad_h F = -rotate(residual,
    /// -theta) / ||residual||, with the norm guarded by [`RESIDUAL_EPS`].
    pub fn score_input_grad(
        &mut self,
        h_joint: NodeId,
        rel: u32,
        t_joint: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let theta = self.phase(rel)?;
        let rotated = self.tape.rotate(h_joint, theta)?;
        let residual = self.tape.sub(rotated, t_joint)?;
        let inv_norm = self.guarded_inv_norm(residual)?;
        let grad_t = self.tape.mul_scalar(residual, inv_norm)?;
        let neg_theta = self.tape.neg(theta)?;
        let back_rotated = self.tape.rotate(residual, neg_theta)?;
        let scaled = self.tape.mul_scalar(back_rotated, inv_norm)?;
        let grad_h = self.tape.neg(scaled)?;
        Ok((grad_h, grad_t))
    }

    /// 1 / sqrt(sum(x^2) + eps) as a differentiable subgraph.
    pub fn guarded_inv_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let sq = self.tape.mul(x, x)?;
        let sum_sq = self.tape.sum(sq)?;
        let guarded = self.tape.add_const(sum_sq, RESIDUAL_EPS)?;
        // 1/sqrt(v) as exp(-log(v)/2); the guard keeps log's input positive.
        let log = self.tape.log(guarded)?;
        let half_neg = self.tape.scale(log, -0.5)?;
        self.tape.exp(half_neg)
    }
}

/// Self-adversarial weights over negative scores: softmax(beta * F). The
/// result is plain values, deliberately detached from the tape so no
/// gradient flows through the weighting.
pub fn self_adv_weights(neg_scores: &[f64], beta: f64) -> Vec<f64> {
    let scaled: Vec<f64> = neg_scores.iter().map(|s| beta * s).collect();
    math::softmax(&scaled)
}

/// A positive triple with its K corrupted triples.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub positive: Triple,
    pub negatives: Vec<Triple>,
}

/// Negative-sampling loss over a batch:
/// sum over positives of -log sigmoid(gamma + F(pos))
/// - sum_i p_i log sigmoid(-F(neg_i) - gamma).
///
/// `frozen_weights`, when given, overrides the self-adversarial weights
/// (one vector per batch item); finite-difference checks pass the weights
/// from the unperturbed point so both routes differentiate the same
/// objective.
pub fn kgc_loss(
    ctx: &mut GraphCtx,
    batch: &[BatchItem],
    hp: &HyperParams,
    frozen_weights: Option<&[Vec<f64>]>,
) -> Result<NodeId> {
    let mut per_positive = Vec::with_capacity(batch.len());
    for (bi, item) in batch.iter().enumerate() {
        let pos_score = ctx.score_triple(&item.positive)?;
        let shifted = ctx.tape.add_const(pos_score, hp.gamma)?;
        let pos_ls = ctx.tape.log_sigmoid(shifted)?;
        let pos_term = ctx.tape.neg(pos_ls)?;

        let neg_nodes: Vec<NodeId> =
            item.negatives.iter().map(|n| ctx.score_triple(n)).collect::<Result<_>>()?;
        let weights = match frozen_weights {
            Some(w) => w[bi].clone(),
            None => {
                let scores: Vec<f64> =
                    neg_nodes.iter().map(|&n| ctx.tape.value(n).item()).collect();
                self_adv_weights(&scores, hp.beta)
            }
        };

        let mut terms = vec![pos_term];
        for (&n, &p) in neg_nodes.iter().zip(&weights) {
            let negated = ctx.tape.neg(n)?;
            let shifted = ctx.tape.add_const(negated, -hp.gamma)?;
            let ls = ctx.tape.log_sigmoid(shifted)?;
            terms.push(ctx.tape.scale(ls, -p)?);
        }
        per_positive.push(ctx.tape.add_n(&terms)?);
    }
    ctx.tape.add_n(&per_positive)
}

/// Forward-only scoring with frozen parameters. Joint embeddings are
/// cached per (entity, relation); instances are cheap and per-thread, so
/// evaluation can shard queries across workers.
pub struct FrozenModel<'a> {
    pub params: &'a ModelParams,
    pub store: &'a FeatureStore,
    source_cache: std::cell::RefCell<HashMap<u32, Arc<Vec<Vec<f64>>>>>,
    joint_cache: std::cell::RefCell<HashMap<(u32, u32), Arc<Vec<f64>>>>,
}

impl<'a> FrozenModel<'a> {
    pub fn new(params: &'a ModelParams, store: &'a FeatureStore) -> Self {
        Self {
            params,
            store,
            source_cache: std::cell::RefCell::new(HashMap::new()),
            joint_cache: std::cell::RefCell::new(HashMap::new()),
        }
    }

    fn slot(&self, s: SlotId) -> &Tensor {
        &self.params.tensors[s]
    }

    fn modality_embedding_values(&self, entity: u32, modality: usize) -> Vec<f64> {
        let raw = self.params.raw_feature(self.store, modality, entity);
        let p = self.params.proj_slots()[modality];
        let d_e = self.params.d_e;
        let meta = &self.params.modalities[modality];
        let mut h = math::matvec(self.slot(p.w1).data(), &raw, d_e, meta.dim);
        for (hv, b) in h.iter_mut().zip(self.slot(p.b1).data()) {
            *hv = (*hv + b).max(0.0);
        }
        let mut out = math::matvec(self.slot(p.w2).data(), &h, d_e, d_e);
        for (ov, b) in out.iter_mut().zip(self.slot(p.b2).data()) {
            *ov += b;
        }
        out
    }

    /// Source embeddings of an entity: structural then modalities.
    pub fn sources(&self, entity: u32) -> Arc<Vec<Vec<f64>>> {
        if let Some(s) = self.source_cache.borrow().get(&entity) {
            return Arc::clone(s);
        }
        let d_e = self.params.d_e;
        let emb = self.slot(self.params.entity_emb_slot());
        let row = emb.data()[entity as usize * d_e..(entity as usize + 1) * d_e].to_vec();
        let mut sources = vec![row];
        for m in 0..self.params.modalities.len() {
            sources.push(self.modality_embedding_values(entity, m));
        }
        let sources = Arc::new(sources);
        self.source_cache.borrow_mut().insert(entity, Arc::clone(&sources));
        sources
    }

    /// Adaptive fusion weights for an entity under a relation.
    pub fn fusion_weight_values(&self, entity: u32, rel: u32) -> Vec<f64> {
        let sources = self.sources(entity);
        self.weights_for_sources(&sources, rel)
    }

    fn weights_for_sources(&self, sources: &[Vec<f64>], rel: u32) -> Vec<f64> {
        let v = self.slot(self.params.fusion_vec_slot()).data();
        let inv_temp = if self.params.relation_guidance {
            let zeta = self.slot(self.params.rel_temp_slot()).data()[rel as usize];
            1.0 / math::sigmoid(zeta)
        } else {
            1.0
        };
        let logits: Vec<f64> = sources
            .iter()
            .map(|s| {
                let tanh: Vec<f64> = s.iter().map(|x| x.tanh()).collect();
                math::dot(v, &tanh) * inv_temp
            })
            .collect();
        math::softmax(&logits)
    }

    /// Joint embedding of an entity under a relation context. Cached.
    pub fn joint(&self, entity: u32, rel: u32) -> Arc<Vec<f64>> {
        if let Some(j) = self.joint_cache.borrow().get(&(entity, rel)) {
            return Arc::clone(j);
        }
        let sources = self.sources(entity);
        let weights = self.weights_for_sources(&sources, rel);
        let mut joint = vec![0.0; self.params.d_e];
        for (w, s) in weights.iter().zip(sources.iter()) {
            for (j, x) in joint.iter_mut().zip(s) {
                *j += x * w;
            }
        }
        let joint = Arc::new(joint);
        self.joint_cache.borrow_mut().insert((entity, rel), Arc::clone(&joint));
        joint
    }

    pub fn phase_values(&self, rel: u32) -> &[f64] {
        let d_r = self.params.d_r();
        &self.slot(self.params.rel_phase_slot()).data()
            [rel as usize * d_r..(rel as usize + 1) * d_r]
    }

    /// Score from explicit joint embeddings.
    pub fn score_joints(&self, h_joint: &[f64], rel: u32, t_joint: &[f64]) -> f64 {
        let rotated = math::rotate(h_joint, self.phase_values(rel));
        let mut residual = rotated;
        for (r, t) in residual.iter_mut().zip(t_joint) {
            *r -= t;
        }
        -math::l2_norm(&residual)
    }

    /// Score of a triple through the cached fusions.
    pub fn score(&self, t: &Triple) -> f64 {
        let h = self.joint(t.head, t.rel);
        let tl = self.joint(t.tail, t.rel);
        self.score_joints(&h, t.rel, &tl)
    }
}

#[cfg(test)]
pub(crate) fn toy_setup(
    n_entities: usize,
    n_relations: usize,
    d_e: usize,
    dims: &[usize],
    seed: u64,
) -> (ModelParams, FeatureStore, HyperParams) {
    let metas: Vec<ModalityMeta> = dims
        .iter()
        .enumerate()
        .map(|(i, d)| ModalityMeta { name: format!("m{i}"), dim: *d })
        .collect();
    let mut store = FeatureStore::new(metas.clone());
    let streams = SeedStreams::new(seed ^ 0xfeed);
    for (mi, d) in dims.iter().enumerate() {
        let mut rng = streams.stream(&format!("feat/{mi}"));
        for e in 0..n_entities as u32 {
            store.insert(mi, e, (0..*d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
    }
    let hp = HyperParams {
        d_e,
        d_r: d_e / 2,
        k_negatives: 2,
        noise_dim: 4,
        batch_size: 2,
        ..HyperParams::desk_scale()
    };
    let params = ModelParams::init(n_entities, n_relations, &metas, &hp, true, false, seed);
    (params, store, hp)
}
