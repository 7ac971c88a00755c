//! Model introspection reports: the per-relation temperature dump and the
//! mean fusion-weight summary over a sample of training triples.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{FeatureStore, KnowledgeGraph};
use crate::math;
use crate::model::{FrozenModel, ModelParams};
use crate::rng::SeedStreams;

/// `relation,zeta,sigmoid_zeta` rows, one per relation.
pub fn write_temperatures_csv(
    path: &Path,
    params: &ModelParams,
    kg: &KnowledgeGraph,
) -> std::io::Result<()> {
    let temps = params.tensors[params.rel_temp_slot()].data();
    let mut rows = String::new();
    for (r, zeta) in temps.iter().enumerate() {
        rows.push_str(&format!(
            "{},{},{}\n",
            kg.relation_name(r as u32),
            zeta,
            math::sigmoid(*zeta)
        ));
    }
    std::fs::write(path, rows)
}

/// Mean fusion weight per source, per relation, over a seeded sample of
/// training triples (head and tail fusions both counted). Header row names
/// the sources; every data row sums to 1.
pub fn write_weight_summary_csv(
    path: &Path,
    params: &ModelParams,
    store: &FeatureStore,
    kg: &KnowledgeGraph,
    sample_cap: usize,
) -> std::io::Result<()> {
    let frozen = FrozenModel::new(params, store);
    let n_sources = params.modalities.len() + 1;

    let mut indices: Vec<usize> = (0..kg.train.len()).collect();
    if indices.len() > sample_cap {
        indices.shuffle(&mut SeedStreams::new(params.seed).stream("report/sample"));
        indices.truncate(sample_cap);
        indices.sort_unstable();
    }

    let mut sums = vec![vec![0.0f64; n_sources]; kg.n_relations()];
    let mut counts = vec![0usize; kg.n_relations()];
    for &i in &indices {
        let t = kg.train[i];
        for w in [
            frozen.fusion_weight_values(t.head, t.rel),
            frozen.fusion_weight_values(t.tail, t.rel),
        ] {
            for (acc, v) in sums[t.rel as usize].iter_mut().zip(&w) {
                *acc += v;
            }
            counts[t.rel as usize] += 1;
        }
    }

    let mut out = String::from("relation,S");
    for meta in &params.modalities {
        out.push(',');
        out.push_str(&meta.name);
    }
    out.push('\n');
    for r in 0..kg.n_relations() {
        if counts[r] == 0 {
            continue;
        }
        out.push_str(kg.relation_name(r as u32));
        for s in &sums[r] {
            out.push_str(&format!(",{}", s / counts[r] as f64));
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthOptions};
    use crate::model::{HyperParams, ModelParams};
    use tempfile::TempDir;

    fn fixture() -> (KnowledgeGraph, FeatureStore, ModelParams) {
        let (kg, store) =
            generate_synthetic(&SynthOptions { n_entities: 30, ..Default::default() }).unwrap();
        let hp = HyperParams { d_e: 8, d_r: 4, ..HyperParams::desk_scale() };
        let params = ModelParams::init(
            kg.n_entities(),
            kg.n_relations(),
            store.modalities(),
            &hp,
            true,
            false,
            5,
        );
        (kg, store, params)
    }

    #[test]
    fn temperature_rows_cover_every_relation_at_half_sigmoid() {
        let (kg, _, params) = fixture();
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("temperatures.csv");
        write_temperatures_csv(&path, &params, &kg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), kg.n_relations());
        for row in rows {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols.len(), 3);
            // Freshly initialized zeta is 0, so sigmoid is exactly 0.5.
            assert_eq!(cols[1], "0");
            assert_eq!(cols[2], "0.5");
        }
    }

    #[test]
    fn weight_summary_rows_sum_to_one() {
        let (kg, store, params) = fixture();
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("modality_weights.csv");
        write_weight_summary_csv(&path, &params, &store, &kg, 200).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, "relation,S,img,txt");
        let mut data_rows = 0;
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 4);
            let sum: f64 = cols[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {line} sums to {sum}");
            data_rows += 1;
        }
        assert!(data_rows > 0);
    }

    #[test]
    fn weight_summary_is_deterministic_under_sampling() {
        let (kg, store, params) = fixture();
        let tmp = TempDir::new().unwrap();
        let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
        write_weight_summary_csv(&a, &params, &store, &kg, 10).unwrap();
        write_weight_summary_csv(&b, &params, &store, &kg, 10).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
