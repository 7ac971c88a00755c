//! Knowledge-graph and modality-feature ingestion, synthetic toy graphs,
//! and the modality-imbalance perturbations.
//!
//! Dataset directory layout (UTF-8, tab-separated):
//! - `entities.tsv` / `relations.tsv`: one name per line, line number = id
//! - `train.tsv` / `valid.tsv` / `test.tsv`: `head<TAB>relation<TAB>tail`
//! - `features/<modality>.tsv`: `entity<TAB>v1 v2 ... v_d` (space-separated)
//! - `manifest.json`: `{"modalities": [{"name": ..., "dim": ...}, ...]}`

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedStreams;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: unknown entity '{name}'")]
    UnknownEntity { file: PathBuf, line: usize, name: String },
    #[error("{file}:{line}: unknown relation '{name}'")]
    UnknownRelation { file: PathBuf, line: usize, name: String },
    #[error("{file}:{line}: expected {expected} feature values, found {found}")]
    DimMismatch { file: PathBuf, line: usize, expected: usize, found: usize },
    #[error("{file}:{line}: {detail}")]
    Parse { file: PathBuf, line: usize, detail: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// An integer-id fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: u32,
    pub rel: u32,
    pub tail: u32,
}

impl Triple {
    pub fn new(head: u32, rel: u32, tail: u32) -> Self {
        Self { head, rel, tail }
    }
}

/// Knowledge graph with vocabularies, splits and the filtered-ranking index.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_ids: HashMap<String, u32>,
    relation_ids: HashMap<String, u32>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    /// (head, rel) -> known tails over train ∪ valid ∪ test.
    tails_of: HashMap<(u32, u32), HashSet<u32>>,
    /// (rel, tail) -> known heads over train ∪ valid ∪ test.
    heads_of: HashMap<(u32, u32), HashSet<u32>>,
}

impl KnowledgeGraph {
    pub fn new(
        entities: Vec<String>,
        relations: Vec<String>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Self {
        let entity_ids = entities.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
        let relation_ids =
            relations.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
        let mut kg = Self {
            entities,
            relations,
            entity_ids,
            relation_ids,
            train,
            valid,
            test,
            tails_of: HashMap::new(),
            heads_of: HashMap::new(),
        };
        kg.rebuild_filter_index();
        kg
    }

    fn rebuild_filter_index(&mut self) {
        self.tails_of.clear();
        self.heads_of.clear();
        for t in self.train.iter().chain(&self.valid).chain(&self.test) {
            self.tails_of.entry((t.head, t.rel)).or_default().insert(t.tail);
            self.heads_of.entry((t.rel, t.tail)).or_default().insert(t.head);
        }
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_name(&self, id: u32) -> &str {
        &self.entities[id as usize]
    }

    pub fn relation_name(&self, id: u32) -> &str {
        &self.relations[id as usize]
    }

    pub fn entity_id(&self, name: &str) -> Option<u32> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<u32> {
        self.relation_ids.get(name).copied()
    }

    pub fn known_tails(&self, head: u32, rel: u32) -> Option<&HashSet<u32>> {
        self.tails_of.get(&(head, rel))
    }

    pub fn known_heads(&self, rel: u32, tail: u32) -> Option<&HashSet<u32>> {
        self.heads_of.get(&(rel, tail))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModalityMeta {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    modalities: Vec<ModalityMeta>,
}

/// Per-modality raw feature vectors with explicit missing-ness: an entity
/// without an entry simply has no feature for that modality, never a
/// silent zero fill.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    modalities: Vec<ModalityMeta>,
    /// Aligned with `modalities`; entity id -> raw feature vector.
    features: Vec<HashMap<u32, Vec<f64>>>,
}

impl FeatureStore {
    pub fn new(modalities: Vec<ModalityMeta>) -> Self {
        let features = modalities.iter().map(|_| HashMap::new()).collect();
        Self { modalities, features }
    }

    pub fn modalities(&self) -> &[ModalityMeta] {
        &self.modalities
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn insert(&mut self, modality: usize, entity: u32, feature: Vec<f64>) {
        debug_assert_eq!(feature.len(), self.modalities[modality].dim);
        self.features[modality].insert(entity, feature);
    }

    pub fn get(&self, modality: usize, entity: u32) -> Option<&[f64]> {
        self.features[modality].get(&entity).map(Vec::as_slice)
    }

    pub fn has(&self, modality: usize, entity: u32) -> bool {
        self.features[modality].contains_key(&entity)
    }

    pub fn present_count(&self, modality: usize) -> usize {
        self.features[modality].len()
    }

    /// True when the entity has an entry for every declared modality.
    pub fn is_complete(&self, entity: u32) -> bool {
        (0..self.modalities.len()).all(|m| self.has(m, entity))
    }

    /// Project the store onto the given modality list, in that order.
    /// Fails when a modality is missing or its dimension differs, so a
    /// checkpoint can only be evaluated against compatible features.
    pub fn aligned_subset(&self, metas: &[ModalityMeta]) -> Result<FeatureStore> {
        let mut out = FeatureStore::new(metas.to_vec());
        for (i, meta) in metas.iter().enumerate() {
            let src = self.modality_index(&meta.name).ok_or_else(|| {
                DataError::Invalid(format!("dataset lacks modality '{}'", meta.name))
            })?;
            if self.modalities[src].dim != meta.dim {
                return Err(DataError::Invalid(format!(
                    "modality '{}' has dim {} but {} expected",
                    meta.name, self.modalities[src].dim, meta.dim
                )));
            }
            out.features[i] = self.features[src].clone();
        }
        Ok(out)
    }

    /// Keep only the named modalities (used by the modality-ablation filter).
    pub fn retain_modalities(&mut self, names: &[String]) {
        let keep: Vec<usize> = self
            .modalities
            .iter()
            .enumerate()
            .filter(|(_, m)| names.contains(&m.name))
            .map(|(i, _)| i)
            .collect();
        self.modalities = keep.iter().map(|&i| self.modalities[i].clone()).collect();
        self.features = keep.iter().map(|&i| std::mem::take(&mut self.features[i])).collect();
    }
}

/// Imbalance level of a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImbalanceLevel {
    /// Drop every modality entry of the selected entities.
    Entity,
    /// Drop entries per modality independently.
    Modality,
}

impl fmt::Display for ImbalanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImbalanceLevel::Entity => write!(f, "entity"),
            ImbalanceLevel::Modality => write!(f, "modality"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImbalanceSpec {
    /// Fraction of modality information to drop, in [0, 1].
    pub eta: f64,
    pub level: ImbalanceLevel,
    pub seed: u64,
}

/// Modality completeness class of a test triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupLabel {
    /// Both endpoints modality-complete.
    Group1,
    /// Exactly one endpoint incomplete.
    Group2,
    /// Both endpoints incomplete.
    Group3,
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupLabel::Group1 => write!(f, "group1"),
            GroupLabel::Group2 => write!(f, "group2"),
            GroupLabel::Group3 => write!(f, "group3"),
        }
    }
}

/// A removed (entity, modality) pair, for drop manifests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DropRecord {
    pub entity: String,
    pub modality: String,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    Ok(read_lines(path)?.into_iter().filter(|l| !l.is_empty()).collect())
}

fn read_triples(
    path: &Path,
    entity_ids: &HashMap<String, u32>,
    relation_ids: &HashMap<String, u32>,
) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (idx, line) in read_lines(path)?.into_iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut parts = line.split('\t');
        let (h, r, t) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(h), Some(r), Some(t), None) => (h, r, t),
            _ => {
                return Err(DataError::Parse {
                    file: path.to_path_buf(),
                    line: lineno,
                    detail: "expected 3 tab-separated fields".into(),
                })
            }
        };
        let head = *entity_ids.get(h).ok_or_else(|| DataError::UnknownEntity {
            file: path.to_path_buf(),
            line: lineno,
            name: h.to_owned(),
        })?;
        let rel = *relation_ids.get(r).ok_or_else(|| DataError::UnknownRelation {
            file: path.to_path_buf(),
            line: lineno,
            name: r.to_owned(),
        })?;
        let tail = *entity_ids.get(t).ok_or_else(|| DataError::UnknownEntity {
            file: path.to_path_buf(),
            line: lineno,
            name: t.to_owned(),
        })?;
        out.push(Triple::new(head, rel, tail));
    }
    Ok(out)
}

/// Load a dataset directory into a graph and a feature store.
pub fn load_dataset(dir: &Path) -> Result<(KnowledgeGraph, FeatureStore)> {
    let entities = read_names(&dir.join("entities.tsv"))?;
    let relations = read_names(&dir.join("relations.tsv"))?;
    if entities.is_empty() || relations.is_empty() {
        return Err(DataError::Invalid("empty entity or relation vocabulary".into()));
    }
    let entity_ids: HashMap<String, u32> =
        entities.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
    if entity_ids.len() != entities.len() {
        return Err(DataError::Invalid("duplicate entity names".into()));
    }
    let relation_ids: HashMap<String, u32> =
        relations.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
    if relation_ids.len() != relations.len() {
        return Err(DataError::Invalid("duplicate relation names".into()));
    }

    let train = read_triples(&dir.join("train.tsv"), &entity_ids, &relation_ids)?;
    let valid = read_triples(&dir.join("valid.tsv"), &entity_ids, &relation_ids)?;
    let test = read_triples(&dir.join("test.tsv"), &entity_ids, &relation_ids)?;

    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|source| DataError::Io { path: manifest_path.clone(), source })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&manifest_text).map_err(|e| DataError::Parse {
            file: manifest_path.clone(),
            line: e.line(),
            detail: e.to_string(),
        })?;

    let mut store = FeatureStore::new(manifest.modalities.clone());
    for (mi, meta) in manifest.modalities.iter().enumerate() {
        let path = dir.join("features").join(format!("{}.tsv", meta.name));
        for (idx, line) in read_lines(&path)?.into_iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (name, values) = line.split_once('\t').ok_or_else(|| DataError::Parse {
                file: path.clone(),
                line: lineno,
                detail: "expected 'entity<TAB>values'".into(),
            })?;
            let entity = *entity_ids.get(name).ok_or_else(|| DataError::UnknownEntity {
                file: path.clone(),
                line: lineno,
                name: name.to_owned(),
            })?;
            let feature: Vec<f64> = values
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|e| DataError::Parse {
                        file: path.clone(),
                        line: lineno,
                        detail: format!("bad float '{v}': {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            if feature.len() != meta.dim {
                return Err(DataError::DimMismatch {
                    file: path.clone(),
                    line: lineno,
                    expected: meta.dim,
                    found: feature.len(),
                });
            }
            store.insert(mi, entity, feature);
        }
    }

    Ok((KnowledgeGraph::new(entities, relations, train, valid, test), store))
}

/// Write a dataset directory (used by the synthetic generator).
pub fn write_dataset(dir: &Path, kg: &KnowledgeGraph, store: &FeatureStore) -> Result<()> {
    let io = |source: std::io::Error, path: &Path| DataError::Io { path: path.to_path_buf(), source };
    fs::create_dir_all(dir.join("features")).map_err(|e| io(e, dir))?;

    let write = |path: PathBuf, content: String| -> Result<()> {
        let mut f = fs::File::create(&path).map_err(|e| io(e, &path))?;
        f.write_all(content.as_bytes()).map_err(|e| io(e, &path))
    };

    let names = |v: &[String]| v.iter().map(|n| format!("{n}\n")).collect::<String>();
    write(dir.join("entities.tsv"), names(&kg.entities))?;
    write(dir.join("relations.tsv"), names(&kg.relations))?;

    let triples = |ts: &[Triple]| {
        ts.iter()
            .map(|t| {
                format!(
                    "{}\t{}\t{}\n",
                    kg.entity_name(t.head),
                    kg.relation_name(t.rel),
                    kg.entity_name(t.tail)
                )
            })
            .collect::<String>()
    };
    write(dir.join("train.tsv"), triples(&kg.train))?;
    write(dir.join("valid.tsv"), triples(&kg.valid))?;
    write(dir.join("test.tsv"), triples(&kg.test))?;

    let manifest = DatasetManifest { modalities: store.modalities.clone() };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(dir.join("manifest.json"), format!("{manifest_json}\n"))?;

    for (mi, meta) in store.modalities.iter().enumerate() {
        let mut rows = String::new();
        for id in 0..kg.n_entities() as u32 {
            if let Some(f) = store.get(mi, id) {
                let values: Vec<String> = f.iter().map(|v| format!("{v}")).collect();
                rows.push_str(&format!("{}\t{}\n", kg.entity_name(id), values.join(" ")));
            }
        }
        write(dir.join("features").join(format!("{}.tsv", meta.name)), rows)?;
    }
    Ok(())
}

/// Options for the synthetic toy generator.
#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub n_entities: usize,
    pub n_relations: usize,
    /// (modality name, feature dimension) pairs.
    pub modalities: Vec<(String, usize)>,
    pub n_clusters: usize,
    pub triples_per_entity: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_entities: 100,
            n_relations: 10,
            modalities: vec![("img".into(), 16), ("txt".into(), 16)],
            n_clusters: 10,
            triples_per_entity: 6,
            seed: 7,
        }
    }
}

/// Radius of the centroid circle.
const SYNTH_CENTROID_RADIUS: f64 = 3.0;

/// Per-coordinate noise half-width, sized so the worst-case noise radius
/// (half-width times sqrt(dim)) stays under 45% of the minimum pairwise
/// centroid distance. Every noisy feature then sits within noise radius of
/// exactly one centroid, for any cluster count and dimension.
pub fn synth_noise_width(n_clusters: usize, dim: usize) -> f64 {
    let min_dist = 2.0 * SYNTH_CENTROID_RADIUS * (std::f64::consts::PI / n_clusters as f64).sin();
    (0.45 * min_dist / (dim as f64).sqrt()).min(0.25)
}

/// Cluster id of a synthetic entity.
pub fn synth_cluster(entity: u32, n_clusters: usize) -> usize {
    entity as usize % n_clusters
}

/// Centroid for (cluster, modality dim): on a circle in the first two
/// coordinates, so clusters stay far apart relative to the noise.
pub fn synth_centroid(cluster: usize, n_clusters: usize, dim: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * cluster as f64 / n_clusters as f64;
    let mut c = vec![0.0; dim];
    c[0] = SYNTH_CENTROID_RADIUS * angle.cos();
    c[1] = SYNTH_CENTROID_RADIUS * angle.sin();
    c
}

/// Generate a planted-structure toy multi-modal KG in memory.
///
/// Entities are assigned to clusters round-robin; each relation links one
/// cluster pair, and features are the entity's cluster centroid plus small
/// uniform noise, so modality features are informative of link structure.
pub fn generate_synthetic(opts: &SynthOptions) -> Result<(KnowledgeGraph, FeatureStore)> {
    if opts.n_entities < 10 {
        return Err(DataError::Invalid(format!(
            "need at least 10 entities, got {}",
            opts.n_entities
        )));
    }
    if opts.n_relations == 0 || opts.n_clusters < 2 || opts.triples_per_entity == 0 {
        return Err(DataError::Invalid("degenerate synthetic sizes".into()));
    }
    for (name, dim) in &opts.modalities {
        if *dim < 2 {
            return Err(DataError::Invalid(format!("modality '{name}' needs dim >= 2, got {dim}")));
        }
    }

    let streams = SeedStreams::new(opts.seed);
    let entities: Vec<String> = (0..opts.n_entities).map(|i| format!("e{i:04}")).collect();
    let relations: Vec<String> = (0..opts.n_relations).map(|i| format!("r{i:02}")).collect();

    // Members per cluster.
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); opts.n_clusters];
    for e in 0..opts.n_entities as u32 {
        members[synth_cluster(e, opts.n_clusters)].push(e);
    }
    if members.iter().any(|m| m.len() < 2) {
        return Err(DataError::Invalid("clusters need at least 2 entities each".into()));
    }

    // Each relation links a fixed cluster pair.
    let mut structure_rng = streams.stream("synth/structure");
    let pairs: Vec<(usize, usize)> = (0..opts.n_relations)
        .map(|_| {
            (structure_rng.gen_range(0..opts.n_clusters), structure_rng.gen_range(0..opts.n_clusters))
        })
        .collect();

    let target = opts.n_entities * opts.triples_per_entity;
    let mut triple_rng = streams.stream("synth/triples");
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(target);
    let mut attempts = 0usize;
    while triples.len() < target && attempts < 100 * target {
        attempts += 1;
        let rel = triple_rng.gen_range(0..opts.n_relations);
        let (ca, cb) = pairs[rel];
        let head = members[ca][triple_rng.gen_range(0..members[ca].len())];
        let tail = members[cb][triple_rng.gen_range(0..members[cb].len())];
        if head == tail {
            continue;
        }
        let t = Triple::new(head, rel as u32, tail);
        if seen.insert(t) {
            triples.push(t);
        }
    }

    let mut shuffle_rng = streams.stream("synth/shuffle");
    triples.shuffle(&mut shuffle_rng);
    let n = triples.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let train = triples[..n_train].to_vec();
    let valid = triples[n_train..n_train + n_valid].to_vec();
    let test = triples[n_train + n_valid..].to_vec();

    let metas: Vec<ModalityMeta> = opts
        .modalities
        .iter()
        .map(|(name, dim)| ModalityMeta { name: name.clone(), dim: *dim })
        .collect();
    let mut store = FeatureStore::new(metas);
    for (mi, (name, dim)) in opts.modalities.iter().enumerate() {
        let mut feat_rng = streams.stream(&format!("synth/features/{name}"));
        let width = synth_noise_width(opts.n_clusters, *dim);
        for e in 0..opts.n_entities as u32 {
            let centroid = synth_centroid(synth_cluster(e, opts.n_clusters), opts.n_clusters, *dim);
            let feature: Vec<f64> =
                centroid.iter().map(|c| c + feat_rng.gen_range(-width..width)).collect();
            store.insert(mi, e, feature);
        }
    }

    Ok((KnowledgeGraph::new(entities, relations, train, valid, test), store))
}

fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// Apply an imbalance perturbation, returning the perturbed store and the
/// removed (entity, modality) pairs. Removed entries become missing; any
/// random re-initialization happens downstream at encoding time.
pub fn perturb(
    store: &FeatureStore,
    kg: &KnowledgeGraph,
    spec: &ImbalanceSpec,
) -> Result<(FeatureStore, Vec<DropRecord>)> {
    if !(0.0..=1.0).contains(&spec.eta) {
        return Err(DataError::Invalid(format!("eta must be in [0, 1], got {}", spec.eta)));
    }
    if store.modalities.is_empty() {
        return Err(DataError::Invalid("feature store declares no modalities".into()));
    }
    let streams = SeedStreams::new(spec.seed);
    let mut out = store.clone();
    let mut drops = Vec::new();

    match spec.level {
        ImbalanceLevel::Entity => {
            let k = round_half_away(spec.eta * kg.n_entities() as f64);
            let mut ids: Vec<u32> = (0..kg.n_entities() as u32).collect();
            ids.shuffle(&mut streams.stream("perturb/entity"));
            for &e in ids.iter().take(k) {
                for (mi, meta) in store.modalities.iter().enumerate() {
                    if out.features[mi].remove(&e).is_some() {
                        drops.push(DropRecord {
                            entity: kg.entity_name(e).to_owned(),
                            modality: meta.name.clone(),
                        });
                    }
                }
            }
        }
        ImbalanceLevel::Modality => {
            for (mi, meta) in store.modalities.iter().enumerate() {
                let mut present: Vec<u32> = store.features[mi].keys().copied().collect();
                present.sort_unstable();
                let k = round_half_away(spec.eta * present.len() as f64);
                present.shuffle(&mut streams.stream(&format!("perturb/modality/{}", meta.name)));
                for &e in present.iter().take(k) {
                    out.features[mi].remove(&e);
                    drops.push(DropRecord {
                        entity: kg.entity_name(e).to_owned(),
                        modality: meta.name.clone(),
                    });
                }
            }
        }
    }
    Ok((out, drops))
}

/// Label each test triple by the modality completeness of its endpoints.
pub fn group_split(kg: &KnowledgeGraph, store: &FeatureStore) -> Result<Vec<GroupLabel>> {
    if kg.test.is_empty() {
        return Err(DataError::Invalid("test split is empty".into()));
    }
    Ok(kg
        .test
        .iter()
        .map(|t| {
            let complete =
                store.is_complete(t.head) as usize + store.is_complete(t.tail) as usize;
            match complete {
                2 => GroupLabel::Group1,
                1 => GroupLabel::Group2,
                _ => GroupLabel::Group3,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn toy_dataset(dir: &Path) {
        fs::create_dir_all(dir.join("features")).unwrap();
        fs::write(dir.join("entities.tsv"), "a\nb\nc\n").unwrap();
        fs::write(dir.join("relations.tsv"), "likes\n").unwrap();
        fs::write(dir.join("train.tsv"), "a\tlikes\tb\nb\tlikes\tc\n").unwrap();
        fs::write(dir.join("valid.tsv"), "a\tlikes\tc\n").unwrap();
        fs::write(dir.join("test.tsv"), "c\tlikes\ta\n").unwrap();
        fs::write(
            dir.join("manifest.json"),
            r#"{"modalities": [{"name": "img", "dim": 2}]}"#,
        )
        .unwrap();
        fs::write(dir.join("features/img.tsv"), "a\t0.5 1.5\nb\t-1 2\n").unwrap();
    }

    #[test]
    fn load_counts_match() {
        let tmp = TempDir::new().unwrap();
        toy_dataset(tmp.path());
        let (kg, store) = load_dataset(tmp.path()).unwrap();
        assert_eq!(kg.n_entities(), 3);
        assert_eq!(kg.n_relations(), 1);
        assert_eq!(kg.train.len(), 2);
        assert_eq!(kg.valid.len(), 1);
        assert_eq!(kg.test.len(), 1);
        assert_eq!(store.present_count(0), 2);
        assert!(store.has(0, 0) && store.has(0, 1) && !store.has(0, 2));
    }

    #[test]
    fn load_rejects_dim_mismatch() {
        let tmp = TempDir::new().unwrap();
        toy_dataset(tmp.path());
        fs::write(tmp.path().join("features/img.tsv"), "a\t1 2 3 4 5\nb\t1 2 3 4\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("img.tsv") && msg.contains("expected 2"), "{msg}");
    }

    #[test]
    fn load_rejects_unknown_entity_with_location() {
        let tmp = TempDir::new().unwrap();
        toy_dataset(tmp.path());
        fs::write(tmp.path().join("features/img.tsv"), "a\t1 2\nghost\t3 4\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ghost") && msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn empty_test_split_loads() {
        let tmp = TempDir::new().unwrap();
        toy_dataset(tmp.path());
        fs::write(tmp.path().join("test.tsv"), "").unwrap();
        let (kg, _) = load_dataset(tmp.path()).unwrap();
        assert_eq!(kg.test.len(), 0);
    }

    #[test]
    fn filter_index_round_trip() {
        let tmp = TempDir::new().unwrap();
        toy_dataset(tmp.path());
        let (kg, _) = load_dataset(tmp.path()).unwrap();
        for t in kg.train.iter().chain(&kg.valid).chain(&kg.test) {
            assert!(kg.known_tails(t.head, t.rel).unwrap().contains(&t.tail));
            assert!(kg.known_heads(t.rel, t.tail).unwrap().contains(&t.head));
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_partitions() {
        let opts = SynthOptions { n_entities: 60, ..Default::default() };
        let (kg1, s1) = generate_synthetic(&opts).unwrap();
        let (kg2, s2) = generate_synthetic(&opts).unwrap();
        assert_eq!(kg1.train, kg2.train);
        assert_eq!(kg1.test, kg2.test);
        assert_eq!(s1.get(0, 5), s2.get(0, 5));
        let total = kg1.train.len() + kg1.valid.len() + kg1.test.len();
        assert_eq!(total, 60 * opts.triples_per_entity);
    }

    #[test]
    fn synthetic_write_is_byte_identical() {
        let opts = SynthOptions { n_entities: 40, triples_per_entity: 5, ..Default::default() };
        let mk = || {
            let tmp = TempDir::new().unwrap();
            let (kg, store) = generate_synthetic(&opts).unwrap();
            write_dataset(tmp.path(), &kg, &store).unwrap();
            tmp
        };
        let (a, b) = (mk(), mk());
        for f in ["entities.tsv", "train.tsv", "test.tsv", "manifest.json", "features/img.tsv"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn synthetic_features_identify_their_cluster() {
        let opts = SynthOptions::default();
        let (_, store) = generate_synthetic(&opts).unwrap();
        for (mi, (_, dim)) in opts.modalities.iter().enumerate() {
            let radius = synth_noise_width(opts.n_clusters, *dim) * (*dim as f64).sqrt();
            for e in 0..opts.n_entities as u32 {
                let f = store.get(mi, e).unwrap();
                let mut within = Vec::new();
                for c in 0..opts.n_clusters {
                    let centroid = synth_centroid(c, opts.n_clusters, *dim);
                    let d: f64 = f
                        .iter()
                        .zip(&centroid)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if d <= radius {
                        within.push(c);
                    }
                }
                assert_eq!(within, vec![synth_cluster(e, opts.n_clusters)]);
            }
        }
    }

    #[test]
    fn synthetic_round_trips_through_files() {
        let tmp = TempDir::new().unwrap();
        let (kg, store) = generate_synthetic(&SynthOptions::default()).unwrap();
        write_dataset(tmp.path(), &kg, &store).unwrap();
        let (kg2, store2) = load_dataset(tmp.path()).unwrap();
        assert_eq!(kg.train, kg2.train);
        assert_eq!(kg.valid, kg2.valid);
        assert_eq!(kg.test, kg2.test);
        for mi in 0..2 {
            for e in 0..kg.n_entities() as u32 {
                assert_eq!(store.get(mi, e), store2.get(mi, e));
            }
        }
    }

    fn loaded_toy() -> (KnowledgeGraph, FeatureStore) {
        generate_synthetic(&SynthOptions { n_entities: 50, ..Default::default() }).unwrap()
    }

    #[test]
    fn perturb_eta_zero_is_identity() {
        let (kg, store) = loaded_toy();
        let spec = ImbalanceSpec { eta: 0.0, level: ImbalanceLevel::Entity, seed: 3 };
        let (out, drops) = perturb(&store, &kg, &spec).unwrap();
        assert!(drops.is_empty());
        for mi in 0..2 {
            assert_eq!(out.present_count(mi), store.present_count(mi));
        }
    }

    #[test]
    fn perturb_eta_one_entity_level_drops_everything() {
        let (kg, store) = loaded_toy();
        let spec = ImbalanceSpec { eta: 1.0, level: ImbalanceLevel::Entity, seed: 3 };
        let (out, _) = perturb(&store, &kg, &spec).unwrap();
        for mi in 0..2 {
            assert_eq!(out.present_count(mi), 0);
        }
    }

    #[test]
    fn perturb_counts_are_exact() {
        let (kg, store) = loaded_toy();
        let spec = ImbalanceSpec { eta: 0.5, level: ImbalanceLevel::Entity, seed: 3 };
        let (out, _) = perturb(&store, &kg, &spec).unwrap();
        let complete = (0..kg.n_entities() as u32).filter(|&e| out.is_complete(e)).count();
        assert_eq!(complete, 25);

        let spec = ImbalanceSpec { eta: 0.3, level: ImbalanceLevel::Modality, seed: 3 };
        let (out, _) = perturb(&store, &kg, &spec).unwrap();
        for mi in 0..2 {
            let expected = store.present_count(mi) - (0.3f64 * store.present_count(mi) as f64).round() as usize;
            assert_eq!(out.present_count(mi), expected);
        }
    }

    #[test]
    fn perturb_is_deterministic() {
        let (kg, store) = loaded_toy();
        let spec = ImbalanceSpec { eta: 0.4, level: ImbalanceLevel::Modality, seed: 99 };
        let (a, da) = perturb(&store, &kg, &spec).unwrap();
        let (b, db) = perturb(&store, &kg, &spec).unwrap();
        assert_eq!(da, db);
        for mi in 0..2 {
            for e in 0..kg.n_entities() as u32 {
                assert_eq!(a.get(mi, e), b.get(mi, e));
            }
        }
    }

    #[test]
    fn groups_partition_the_test_set() {
        let (kg, store) = loaded_toy();
        let labels = group_split(&kg, &store).unwrap();
        assert_eq!(labels.len(), kg.test.len());
        assert!(labels.iter().all(|l| *l == GroupLabel::Group1));

        let spec = ImbalanceSpec { eta: 1.0, level: ImbalanceLevel::Entity, seed: 1 };
        let (dropped, _) = perturb(&store, &kg, &spec).unwrap();
        let labels = group_split(&kg, &dropped).unwrap();
        assert!(labels.iter().all(|l| *l == GroupLabel::Group3));

        let spec = ImbalanceSpec { eta: 0.5, level: ImbalanceLevel::Entity, seed: 1 };
        let (half, _) = perturb(&store, &kg, &spec).unwrap();
        let labels = group_split(&kg, &half).unwrap();
        let (mut g1, mut g2, mut g3) = (0, 0, 0);
        for l in &labels {
            match l {
                GroupLabel::Group1 => g1 += 1,
                GroupLabel::Group2 => g2 += 1,
                GroupLabel::Group3 => g3 += 1,
            }
        }
        assert_eq!(g1 + g2 + g3, kg.test.len());
        // Verify one labeled triple against the definition.
        for (t, l) in kg.test.iter().zip(&labels) {
            let complete =
                half.is_complete(t.head) as usize + half.is_complete(t.tail) as usize;
            let expect = match complete {
                2 => GroupLabel::Group1,
                1 => GroupLabel::Group2,
                _ => GroupLabel::Group3,
            };
            assert_eq!(*l, expect);
        }
    }
}
