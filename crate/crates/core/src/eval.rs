//! Filtered link-prediction evaluation: rank the ground-truth entity of
//! each head and tail query against all entities, excluding candidates
//! that complete a known-true triple in any split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FeatureStore, GroupLabel, KnowledgeGraph, Triple};
use crate::model::{FrozenModel, ModelParams};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("triple references entity {entity} outside the vocabulary of {n_entities}")]
    UnknownEntity { entity: u32, n_entities: usize },
    #[error("group labels ({labels}) do not match the split size ({split})")]
    GroupMismatch { labels: usize, split: usize },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which side of the triple is being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySide {
    /// (?, r, t)
    Head,
    /// (h, r, ?)
    Tail,
}

/// Filtered rank of the ground truth for one query, in [1, |E|].
///
/// Candidates forming a known-true triple (other than the ground truth
/// itself) are removed. Ties use the mean-rank convention
/// `1 + #strictly_greater + floor(#ties / 2)`, so a constant scorer cannot
/// claim rank 1.
pub fn rank_query(
    frozen: &FrozenModel,
    kg: &KnowledgeGraph,
    query: &Triple,
    side: QuerySide,
) -> Result<usize> {
    let n = kg.n_entities();
    for e in [query.head, query.tail] {
        if e as usize >= n {
            return Err(EvalError::UnknownEntity { entity: e, n_entities: n });
        }
    }
    let gt_score = frozen.score(query);
    let (gt, known) = match side {
        QuerySide::Tail => (query.tail, kg.known_tails(query.head, query.rel)),
        QuerySide::Head => (query.head, kg.known_heads(query.rel, query.tail)),
    };
    let mut greater = 0usize;
    let mut ties = 0usize;
    for c in 0..n as u32 {
        if c == gt {
            continue;
        }
        if known.is_some_and(|k| k.contains(&c)) {
            continue;
        }
        let candidate = match side {
            QuerySide::Tail => Triple::new(query.head, query.rel, c),
            QuerySide::Head => Triple::new(c, query.rel, query.tail),
        };
        let s = frozen.score(&candidate);
        if s > gt_score {
            greater += 1;
        } else if s == gt_score {
            ties += 1;
        }
    }
    Ok(1 + greater + ties / 2)
}

/// Hits@K buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Hits {
    #[serde(rename = "1")]
    pub at1: f64,
    #[serde(rename = "3")]
    pub at3: f64,
    #[serde(rename = "10")]
    pub at10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubReport {
    pub mrr: f64,
    pub hits: Hits,
    pub n_queries: usize,
}

/// Rank-based metrics over a split; per-group sub-reports when labels are
/// supplied. Wall-clock seconds stay out of the serialized form so reports
/// from identical runs are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hits: Hits,
    pub n_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<BTreeMap<String, SubReport>>,
    #[serde(skip, default)]
    pub seconds: f64,
}

#[derive(Default, Clone, Copy)]
struct Sums {
    rr: f64,
    h1: usize,
    h3: usize,
    h10: usize,
    n: usize,
}

impl Sums {
    fn add_rank(&mut self, rank: usize) {
        self.rr += 1.0 / rank as f64;
        self.h1 += usize::from(rank <= 1);
        self.h3 += usize::from(rank <= 3);
        self.h10 += usize::from(rank <= 10);
        self.n += 1;
    }

    fn merge(&mut self, other: &Sums) {
        self.rr += other.rr;
        self.h1 += other.h1;
        self.h3 += other.h3;
        self.h10 += other.h10;
        self.n += other.n;
    }

    fn report(&self) -> SubReport {
        let n = self.n as f64;
        SubReport {
            mrr: self.rr / n,
            hits: Hits {
                at1: self.h1 as f64 / n,
                at3: self.h3 as f64 / n,
                at10: self.h10 as f64 / n,
            },
            n_queries: self.n,
        }
    }
}

#[derive(Default)]
struct ShardSums {
    total: Sums,
    by_group: BTreeMap<GroupLabel, Sums>,
}

fn eval_shard(
    params: &ModelParams,
    store: &FeatureStore,
    kg: &KnowledgeGraph,
    triples: &[(Triple, Option<GroupLabel>)],
) -> Result<ShardSums> {
    // Per-worker model view; the fusion caches are thread-local.
    let frozen = FrozenModel::new(params, store);
    let mut sums = ShardSums::default();
    for (t, label) in triples {
        for side in [QuerySide::Head, QuerySide::Tail] {
            let rank = rank_query(&frozen, kg, t, side)?;
            sums.total.add_rank(rank);
            if let Some(l) = label {
                sums.by_group.entry(*l).or_default().add_rank(rank);
            }
        }
    }
    Ok(sums)
}

/// Evaluate both head and tail queries for every triple of the split.
/// Work is sharded over `threads` workers; shard results merge in shard
/// order, so the outcome does not depend on scheduling.
pub fn evaluate(
    split: &[Triple],
    params: &ModelParams,
    store: &FeatureStore,
    kg: &KnowledgeGraph,
    groups: Option<&[GroupLabel]>,
    threads: usize,
) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if let Some(labels) = groups {
        if labels.len() != split.len() {
            return Err(EvalError::GroupMismatch { labels: labels.len(), split: split.len() });
        }
    }
    let started = std::time::Instant::now();
    let tagged: Vec<(Triple, Option<GroupLabel>)> = split
        .iter()
        .enumerate()
        .map(|(i, t)| (*t, groups.map(|g| g[i])))
        .collect();

    let threads = threads.max(1).min(tagged.len());
    let chunk = tagged.len().div_ceil(threads);
    let shards: Vec<ShardSums> = if threads == 1 {
        vec![eval_shard(params, store, kg, &tagged)?]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = tagged
                .chunks(chunk)
                .map(|shard| scope.spawn(move || eval_shard(params, store, kg, shard)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect::<Vec<Result<ShardSums>>>()
        })
        .into_iter()
        .collect::<Result<_>>()?
    };

    let mut total = Sums::default();
    let mut by_group: BTreeMap<GroupLabel, Sums> = BTreeMap::new();
    for shard in &shards {
        total.merge(&shard.total);
        for (label, sums) in &shard.by_group {
            by_group.entry(*label).or_default().merge(sums);
        }
    }

    let group_reports = groups.map(|_| {
        by_group.iter().map(|(label, sums)| (label.to_string(), sums.report())).collect()
    });
    let report = total.report();
    Ok(MetricsReport {
        mrr: report.mrr,
        hits: report.hits,
        n_queries: report.n_queries,
        groups: group_reports,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Mean reciprocal rank of uniform random scoring over `n` candidates:
/// (sum of 1/i for i in 1..=n) / n.
pub fn random_baseline_mrr(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64
}

pub fn write_metrics_json(path: &std::path::Path, report: &MetricsReport) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, format!("{json}\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthOptions};
    use crate::model::toy_setup;

    /// Independent ranking oracle: materialize every unfiltered candidate
    /// score, sort descending, and take the floored mean position of the
    /// ground truth's tie block.
    fn oracle_rank(
        frozen: &FrozenModel,
        kg: &KnowledgeGraph,
        query: &Triple,
        side: QuerySide,
    ) -> usize {
        let gt = match side {
            QuerySide::Tail => query.tail,
            QuerySide::Head => query.head,
        };
        let known = match side {
            QuerySide::Tail => kg.known_tails(query.head, query.rel),
            QuerySide::Head => kg.known_heads(query.rel, query.tail),
        };
        let mut scored: Vec<(u32, f64)> = (0..kg.n_entities() as u32)
            .filter(|&c| c == gt || !known.is_some_and(|k| k.contains(&c)))
            .map(|c| {
                let t = match side {
                    QuerySide::Tail => Triple::new(query.head, query.rel, c),
                    QuerySide::Head => Triple::new(c, query.rel, query.tail),
                };
                (c, frozen.score(&t))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let gt_score = scored.iter().find(|(c, _)| *c == gt).unwrap().1;
        let first = scored.iter().position(|(_, s)| *s == gt_score).unwrap() + 1;
        let last = scored.len() - scored.iter().rev().position(|(_, s)| *s == gt_score).unwrap();
        (first + last) / 2
    }

    #[test]
    fn ranks_match_the_brute_force_oracle() {
        let (kg, store) =
            generate_synthetic(&SynthOptions { n_entities: 40, ..Default::default() }).unwrap();
        let hp = crate::model::HyperParams {
            d_e: 16,
            d_r: 8,
            ..crate::model::HyperParams::desk_scale()
        };
        let params = ModelParams::init(
            kg.n_entities(),
            kg.n_relations(),
            store.modalities(),
            &hp,
            true,
            false,
            7,
        );
        let frozen = FrozenModel::new(&params, &store);
        for t in &kg.test {
            for side in [QuerySide::Head, QuerySide::Tail] {
                let fast = rank_query(&frozen, &kg, t, side).unwrap();
                let slow = oracle_rank(&frozen, &kg, t, side);
                assert_eq!(fast, slow, "triple {t:?} side {side:?}");
                assert!((1..=kg.n_entities()).contains(&fast));
            }
        }
    }

    #[test]
    fn known_true_competitors_are_filtered_out() {
        // Entity 2 outranks the ground truth on raw scores, but (0, r, 2)
        // is a known triple, so the filtered query (0, r, ?) must not count
        // it. The reflexive candidate (0, r, 0) scores perfectly under a
        // zero phase and is a known triple too.
        let (mut params, store, _) = toy_setup(3, 1, 4, &[], 60);
        *params.slot_mut(params.rel_phase_slot()) = crate::tensor::Tensor::zeros(vec![1, 2]);
        let e = params.entity_emb_slot();
        *params.slot_mut(e) = crate::tensor::Tensor::matrix(
            3,
            4,
            vec![
                0.0, 0.0, 0.0, 0.0, // query head
                1.0, 0.0, 0.0, 0.0, // ground-truth tail, distance 1
                0.1, 0.0, 0.0, 0.0, // close competitor, distance 0.1
            ],
        );
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let rels: Vec<String> = vec!["r".into()];
        let frozen = FrozenModel::new(&params, &store);

        let filtered = KnowledgeGraph::new(
            names.clone(),
            rels.clone(),
            vec![Triple::new(0, 0, 2), Triple::new(0, 0, 0)],
            vec![],
            vec![Triple::new(0, 0, 1)],
        );
        let rank = rank_query(&frozen, &filtered, &filtered.test[0], QuerySide::Tail).unwrap();
        assert_eq!(rank, 1);

        // Without (0, r, 2) in any split the competitor counts and pushes
        // the truth down.
        let unfiltered = KnowledgeGraph::new(
            names,
            rels,
            vec![Triple::new(0, 0, 0)],
            vec![],
            vec![Triple::new(0, 0, 1)],
        );
        let rank =
            rank_query(&frozen, &unfiltered, &unfiltered.test[0], QuerySide::Tail).unwrap();
        assert_eq!(rank, 2);
    }

    #[test]
    fn singleton_candidate_set_ranks_first() {
        let (params, store, _) = toy_setup(1, 1, 4, &[], 61);
        let kg = KnowledgeGraph::new(
            vec!["only".into()],
            vec!["r".into()],
            vec![],
            vec![],
            vec![Triple::new(0, 0, 0)],
        );
        let frozen = FrozenModel::new(&params, &store);
        assert_eq!(rank_query(&frozen, &kg, &kg.test[0], QuerySide::Tail).unwrap(), 1);
    }

    #[test]
    fn constant_scorer_cannot_claim_rank_one() {
        let (mut params, store, _) = toy_setup(9, 1, 4, &[], 62);
        let e = params.entity_emb_slot();
        *params.slot_mut(e) = crate::tensor::Tensor::zeros(vec![9, 4]);
        *params.slot_mut(params.rel_phase_slot()) = crate::tensor::Tensor::zeros(vec![1, 2]);
        let kg = KnowledgeGraph::new(
            (0..9).map(|i| format!("e{i}")).collect(),
            vec!["r".into()],
            vec![],
            vec![],
            vec![Triple::new(0, 0, 1)],
        );
        let frozen = FrozenModel::new(&params, &store);
        // All nine candidates tie: rank = 1 + 0 + floor(8 / 2) = 5.
        assert_eq!(rank_query(&frozen, &kg, &kg.test[0], QuerySide::Tail).unwrap(), 5);
    }

    #[test]
    fn metrics_from_known_ranks() {
        // Perfect model: every query ranks 1.
        let (mut params, store, _) = toy_setup(4, 1, 4, &[], 63);
        *params.slot_mut(params.rel_phase_slot()) = crate::tensor::Tensor::zeros(vec![1, 2]);
        let e = params.entity_emb_slot();
        *params.slot_mut(e) = crate::tensor::Tensor::matrix(
            4,
            4,
            vec![
                0.0, 0.0, 0.0, 0.0,
                0.0, 0.0, 0.0, 0.0,
                5.0, 0.0, 0.0, 0.0,
                6.0, 0.0, 0.0, 0.0,
            ],
        );
        let kg = KnowledgeGraph::new(
            (0..4).map(|i| format!("e{i}")).collect(),
            vec!["r".into()],
            vec![],
            vec![],
            vec![Triple::new(0, 0, 1)],
        );
        let report =
            evaluate(&kg.test, &params, &store, &kg, None, 1).unwrap();
        assert_eq!(report.mrr, 1.0);
        assert_eq!(report.hits.at1, 1.0);
        assert_eq!(report.hits.at10, 1.0);
        assert_eq!(report.n_queries, 2);
    }

    #[test]
    fn mrr_of_mixed_ranks() {
        // Ranks {1, 2, 4} give MRR (1 + 1/2 + 1/4) / 3 = 7/12.
        let mut sums = Sums::default();
        for r in [1, 2, 4] {
            sums.add_rank(r);
        }
        let rep = sums.report();
        assert!((rep.mrr - 7.0 / 12.0).abs() < 1e-15);
        assert!((rep.hits.at1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((rep.hits.at3 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rep.hits.at10, 1.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_monotone() {
        let (kg, store) =
            generate_synthetic(&SynthOptions { n_entities: 30, ..Default::default() }).unwrap();
        let hp = crate::model::HyperParams {
            d_e: 8,
            d_r: 4,
            ..crate::model::HyperParams::desk_scale()
        };
        let params = ModelParams::init(
            kg.n_entities(),
            kg.n_relations(),
            store.modalities(),
            &hp,
            true,
            false,
            3,
        );
        let labels = crate::data::group_split(&kg, &store).unwrap();
        let a = evaluate(&kg.test, &params, &store, &kg, Some(&labels), 1).unwrap();
        let b = evaluate(&kg.test, &params, &store, &kg, Some(&labels), 1).unwrap();
        assert_eq!(a.mrr.to_bits(), b.mrr.to_bits());
        assert!(a.hits.at1 <= a.hits.at3 && a.hits.at3 <= a.hits.at10 && a.hits.at10 <= 1.0);
        assert!(a.mrr >= a.hits.at1);
        assert!(a.mrr >= 1.0 / kg.n_entities() as f64 && a.mrr <= 1.0);
        // Group query counts partition the total.
        let total: usize = a.groups.unwrap().values().map(|g| g.n_queries).sum();
        assert_eq!(total, a.n_queries);
    }

    #[test]
    fn sharded_evaluation_matches_single_thread() {
        let (kg, store) =
            generate_synthetic(&SynthOptions { n_entities: 30, ..Default::default() }).unwrap();
        let hp = crate::model::HyperParams {
            d_e: 8,
            d_r: 4,
            ..crate::model::HyperParams::desk_scale()
        };
        let params = ModelParams::init(
            kg.n_entities(),
            kg.n_relations(),
            store.modalities(),
            &hp,
            true,
            false,
            3,
        );
        let one = evaluate(&kg.test, &params, &store, &kg, None, 1).unwrap();
        let four = evaluate(&kg.test, &params, &store, &kg, None, 4).unwrap();
        assert_eq!(one.n_queries, four.n_queries);
        assert!((one.mrr - four.mrr).abs() < 1e-12);
        assert_eq!(one.hits, four.hits);
    }

    #[test]
    fn empty_split_is_an_error() {
        let (params, store, _) = toy_setup(3, 1, 4, &[], 64);
        let kg = KnowledgeGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["r".into()],
            vec![Triple::new(0, 0, 1)],
            vec![],
            vec![],
        );
        assert!(matches!(
            evaluate(&kg.test, &params, &store, &kg, None, 1),
            Err(EvalError::EmptySplit)
        ));
    }

    #[test]
    fn random_baseline_formula() {
        // Harmonic(100)/100.
        let h100: f64 = (1..=100).map(|i| 1.0 / i as f64).sum();
        assert!((random_baseline_mrr(100) - h100 / 100.0).abs() < 1e-15);
        assert!((random_baseline_mrr(100) - 0.0519).abs() < 1e-4);
    }
}
