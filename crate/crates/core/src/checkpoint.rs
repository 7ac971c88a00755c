//! Checkpoint directory format: `manifest.json` describing the model plus
//! one binary file per parameter tensor.
//!
//! Tensor file layout: magic `NKGT`, u32 LE rank, u32 LE dims, then the
//! f64 LE values row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{AdvOpts, GeneratorParams, GpSign};
use crate::data::ModalityMeta;
use crate::model::{HyperParams, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NKGT";

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Serialized run settings carried inside the manifest so evaluation and
/// reporting reconstruct the exact model behavior.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSnapshot {
    pub seed: u64,
    pub relation_guidance: bool,
    pub comat: bool,
    pub vanilla_gan: bool,
    pub mlp_discriminator: bool,
    pub gradient_penalty: bool,
    pub gp_sign: GpSign,
    #[serde(flatten)]
    pub hp: HyperParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub d_e: usize,
    pub modalities: Vec<ModalityMeta>,
    pub n_entities: usize,
    pub n_relations: usize,
    pub hyperparams: HyperSnapshot,
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf =
        Vec::with_capacity(4 + 4 + 4 * t.shape().len() + 8 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let fail = |detail: &str| CheckpointError::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(fail("missing NKGT magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated dimension header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 8 * numel {
        return Err(fail(&format!(
            "expected {} data bytes, found {}",
            8 * numel,
            bytes.len() - header
        )));
    }
    let data: Vec<f64> = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data))
}

/// Write a checkpoint directory with the manifest and all tensors.
pub fn save(
    dir: &Path,
    params: &ModelParams,
    generator: Option<&GeneratorParams>,
    hp: &HyperParams,
    adv: &AdvOpts,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = CheckpointManifest {
        d_e: params.d_e,
        modalities: params.modalities.clone(),
        n_entities: params.n_entities,
        n_relations: params.n_relations,
        hyperparams: HyperSnapshot {
            seed: params.seed,
            relation_guidance: params.relation_guidance,
            comat: adv.comat,
            vanilla_gan: adv.vanilla_gan,
            mlp_discriminator: adv.mlp_discriminator,
            gradient_penalty: adv.gradient_penalty,
            gp_sign: adv.gp_sign,
            hp: hp.clone(),
        },
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    fs::write(&manifest_path, format!("{json}\n")).map_err(io_err(&manifest_path))?;

    for (slot, t) in params.tensors.iter().enumerate() {
        write_tensor(&dir.join(format!("{}.nkgt", params.slot_name(slot))), t)?;
    }
    if let Some(gen) = generator {
        for (slot, t) in gen.tensors.iter().enumerate() {
            write_tensor(&dir.join(format!("{}.nkgt", gen.slot_name(slot))), t)?;
        }
    }
    Ok(())
}

/// Load a checkpoint directory back into model and generator parameters.
pub fn load(dir: &Path) -> Result<(ModelParams, Option<GeneratorParams>, CheckpointManifest)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let snap = &manifest.hyperparams;
    snap.hp.validate().map_err(CheckpointError::Manifest)?;

    let mut params = ModelParams::init(
        manifest.n_entities,
        manifest.n_relations,
        &manifest.modalities,
        &snap.hp,
        snap.relation_guidance,
        snap.mlp_discriminator,
        snap.seed,
    );
    for slot in 0..params.n_slots() {
        let path = dir.join(format!("{}.nkgt", params.slot_name(slot)));
        let t = read_tensor(&path)?;
        if t.shape() != params.tensors[slot].shape() {
            return Err(CheckpointError::Format {
                path,
                detail: format!(
                    "shape {:?} does not match manifest-implied {:?}",
                    t.shape(),
                    params.tensors[slot].shape()
                ),
            });
        }
        params.tensors[slot] = t;
    }

    let generator = if snap.comat {
        let mut gen = GeneratorParams::init(
            manifest.modalities.len() + 1,
            manifest.d_e,
            snap.hp.noise_dim,
            snap.seed,
        );
        for slot in 0..gen.tensors.len() {
            let path = dir.join(format!("{}.nkgt", gen.slot_name(slot)));
            let t = read_tensor(&path)?;
            if t.shape() != gen.tensors[slot].shape() {
                return Err(CheckpointError::Format {
                    path,
                    detail: "generator tensor shape mismatch".into(),
                });
            }
            gen.tensors[slot] = t;
        }
        Some(gen)
    } else {
        None
    };

    Ok((params, generator, manifest))
}

/// Reconstruct the adversarial options stored in a manifest.
pub fn adv_opts_of(manifest: &CheckpointManifest) -> AdvOpts {
    let s = &manifest.hyperparams;
    AdvOpts {
        comat: s.comat,
        vanilla_gan: s.vanilla_gan,
        mlp_discriminator: s.mlp_discriminator,
        gradient_penalty: s.gradient_penalty,
        gp_sign: s.gp_sign,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy_setup;
    use tempfile::TempDir;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("t.nkgt");
        let t = Tensor::matrix(2, 3, vec![1.5, -0.0, f64::MIN_POSITIVE, 3.25e300, -7.0, 0.1]);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn read_rejects_bad_magic() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("bad.nkgt");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&path), Err(CheckpointError::Format { .. })));
    }

    #[test]
    fn model_round_trip() {
        let tmp = TempDir::new().unwrap();
        let (params, _, hp) = toy_setup(5, 2, 8, &[4, 3], 50);
        let gen = GeneratorParams::init(3, 8, hp.noise_dim, 50);
        let adv = AdvOpts::default();
        save(tmp.path(), &params, Some(&gen), &hp, &adv).unwrap();
        let (loaded, loaded_gen, manifest) = load(tmp.path()).unwrap();
        assert_eq!(manifest.n_entities, 5);
        assert_eq!(manifest.d_e, 8);
        for (a, b) in params.tensors.iter().zip(&loaded.tensors) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let lg = loaded_gen.unwrap();
        for (a, b) in gen.tensors.iter().zip(&lg.tensors) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Missing-feature draws reproduce after reload (seed travels).
        assert_eq!(*params.missing_feature(0, 4), *loaded.missing_feature(0, 4));
    }

    #[test]
    fn save_is_deterministic_on_disk() {
        let (params, _, hp) = toy_setup(4, 2, 8, &[3], 51);
        let adv = AdvOpts { comat: false, ..AdvOpts::default() };
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        save(a.path(), &params, None, &hp, &adv).unwrap();
        save(b.path(), &params, None, &hp, &adv).unwrap();
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let x = fs::read(a.path().join(&name)).unwrap();
            let y = fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "{name:?} differs");
        }
    }
}
