//! Checkpoint container: magic "KRCK", a version word, the training seed, a
//! TOML metadata snapshot, then length-prefixed named parameter blocks stored
//! at 64-bit. Unknown blocks are skipped with a warning, so newer writers
//! stay readable.

use super::tensorfile::{read_tensor_from, write_tensor_to, Dtype};
use crate::elbo::{ModelCheckpoint, Readout};
use crate::error::{KrcError, Result};
use crate::nets::{Ensemble, EnsembleConfig, ModelDims};
use crate::rng::Streams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"KRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub img_h: usize,
    pub img_w: usize,
    pub d_a: usize,
    pub d_b: usize,
    pub d_z: usize,
    pub d_u: usize,
    pub k: usize,
    pub enc_hidden: [usize; 2],
    pub dec_hidden: [usize; 2],
    pub dpn_hidden: usize,
    pub sigma_x2: f64,
    pub has_readout: bool,
    pub ensemble_members: usize,
    pub ensemble_hidden: usize,
    pub ensemble_trained: bool,
    /// free-form snapshot of the run configuration
    pub config_snapshot: String,
}

impl CheckpointMeta {
    fn dims(&self) -> ModelDims {
        ModelDims {
            img_h: self.img_h,
            img_w: self.img_w,
            d_a: self.d_a,
            d_b: self.d_b,
            d_z: self.d_z,
            d_u: self.d_u,
            k: self.k,
            enc_hidden: (self.enc_hidden[0], self.enc_hidden[1]),
            dec_hidden: (self.dec_hidden[0], self.dec_hidden[1]),
            dpn_hidden: self.dpn_hidden,
        }
    }
}

fn block(out: &mut Vec<u8>, name: &str, tensor: &Tensor) -> Result<()> {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let mut payload = Vec::new();
    write_tensor_to(&mut payload, tensor, Dtype::F64)?;
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &ModelCheckpoint) -> Result<()> {
    let ens = model.ensemble.as_ref();
    let meta = CheckpointMeta {
        img_h: model.dims.img_h,
        img_w: model.dims.img_w,
        d_a: model.dims.d_a,
        d_b: model.dims.d_b,
        d_z: model.dims.d_z,
        d_u: model.dims.d_u,
        k: model.dims.k,
        enc_hidden: [model.dims.enc_hidden.0, model.dims.enc_hidden.1],
        dec_hidden: [model.dims.dec_hidden.0, model.dims.dec_hidden.1],
        dpn_hidden: model.dims.dpn_hidden,
        sigma_x2: model.sigma_x2,
        has_readout: model.readout.is_some(),
        ensemble_members: ens.map(|e| e.members()).unwrap_or(0),
        ensemble_hidden: ens.map(|e| e.config.hidden).unwrap_or(0),
        ensemble_trained: ens.map(|e| e.trained).unwrap_or(false),
        config_snapshot: model.config_snapshot.clone(),
    };
    let meta_text = toml::to_string(&meta).expect("meta serializes");

    let mut blocks: Vec<(String, Tensor)> = Vec::new();
    for (name, value) in model.store.iter() {
        blocks.push((name.to_string(), value.clone()));
    }
    if let Some(r) = &model.readout {
        blocks.push(("readout.matrix".to_string(), r.matrix.clone()));
        blocks.push(("readout.bias".to_string(), r.bias.clone()));
    }
    if let Some(e) = ens {
        for store in e.stores() {
            for (name, value) in store.iter() {
                blocks.push((format!("ensemble.{name}"), value.clone()));
            }
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&(meta_text.len() as u64).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, tensor) in &blocks {
        block(&mut out, name, tensor)?;
    }
    crate::io::atomic_write(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| KrcError::Format { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut r = bytes.as_slice();
    let ferr = |detail: String| KrcError::Format { path: path.to_path_buf(), detail };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| ferr(e.to_string()))?;
    if &magic != MAGIC {
        return Err(ferr(format!("bad magic {magic:?}")));
    }
    let mut w32 = [0u8; 4];
    r.read_exact(&mut w32).map_err(|e| ferr(e.to_string()))?;
    let version = u32::from_le_bytes(w32);
    if version > VERSION {
        return Err(ferr(format!("checkpoint version {version} newer than supported {VERSION}")));
    }
    let mut w64 = [0u8; 8];
    r.read_exact(&mut w64).map_err(|e| ferr(e.to_string()))?;
    let seed = u64::from_le_bytes(w64);
    r.read_exact(&mut w64).map_err(|e| ferr(e.to_string()))?;
    let meta_len = u64::from_le_bytes(w64) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(|e| ferr(e.to_string()))?;
    let meta: CheckpointMeta = toml::from_str(std::str::from_utf8(&meta_bytes).map_err(|e| ferr(e.to_string()))?)
        .map_err(|e| ferr(format!("meta parse: {e}")))?;
    r.read_exact(&mut w32).map_err(|e| ferr(e.to_string()))?;
    let n_blocks = u32::from_le_bytes(w32) as usize;

    let mut model = ModelCheckpoint::init(meta.dims(), meta.sigma_x2, seed, meta.config_snapshot.clone());
    let mut ensemble = if meta.ensemble_members > 0 {
        let cfg = EnsembleConfig { members: meta.ensemble_members, hidden: meta.ensemble_hidden, ..Default::default() };
        let mut e = Ensemble::init(meta.d_z, meta.d_u, cfg, &Streams::new(seed));
        e.trained = meta.ensemble_trained;
        Some(e)
    } else {
        None
    };
    let mut readout_matrix: Option<Tensor> = None;
    let mut readout_bias: Option<Tensor> = None;

    for _ in 0..n_blocks {
        r.read_exact(&mut w32).map_err(|e| ferr(e.to_string()))?;
        let name_len = u32::from_le_bytes(w32) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| ferr(e.to_string()))?;
        let name = String::from_utf8(name_bytes).map_err(|e| ferr(e.to_string()))?;
        r.read_exact(&mut w64).map_err(|e| ferr(e.to_string()))?;
        let payload_len = u64::from_le_bytes(w64) as usize;
        if payload_len > r.len() {
            return Err(ferr(format!("block {name} truncated")));
        }
        let (payload, rest) = r.split_at(payload_len);
        r = rest;
        let tensor = read_tensor_from(&mut &payload[..], path)?;

        if name == "readout.matrix" {
            readout_matrix = Some(tensor);
        } else if name == "readout.bias" {
            readout_bias = Some(tensor);
        } else if let Some(member_name) = name.strip_prefix("ensemble.") {
            if let Some(e) = ensemble.as_mut() {
                let mut placed = false;
                for store in e.stores_mut() {
                    if let Some(id) = store.id_by_name(member_name) {
                        if store.value(id).shape() != tensor.shape() {
                            return Err(ferr(format!(
                                "ensemble block {member_name}: stored shape {:?} vs current {:?}",
                                tensor.shape(),
                                store.value(id).shape()
                            )));
                        }
                        *store.value_mut(id) = tensor.clone();
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    eprintln!("warning: skipping unknown checkpoint block '{name}'");
                }
            }
        } else if let Some(id) = model.store.id_by_name(&name) {
            if model.store.value(id).shape() != tensor.shape() {
                return Err(ferr(format!(
                    "block {name}: stored shape {:?} vs current model {:?}",
                    tensor.shape(),
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = tensor;
        } else {
            eprintln!("warning: skipping unknown checkpoint block '{name}'");
        }
    }

    if meta.has_readout {
        match (readout_matrix, readout_bias) {
            (Some(matrix), Some(bias)) => model.readout = Some(Readout { matrix, bias }),
            _ => return Err(ferr("readout blocks missing".to_string())),
        }
    }
    model.ensemble = ensemble;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EnsembleConfig;

    fn tiny_model() -> ModelCheckpoint {
        let dims = ModelDims {
            img_h: 4,
            img_w: 4,
            d_a: 2,
            d_b: 2,
            d_z: 3,
            d_u: 2,
            k: 2,
            enc_hidden: (6, 4),
            dec_hidden: (4, 6),
            dpn_hidden: 5,
        };
        let mut m = ModelCheckpoint::init(dims, 0.01, 9, "snapshot".to_string());
        m.readout = Some(Readout::identity(3));
        let mut e = Ensemble::init(3, 2, EnsembleConfig { members: 2, hidden: 4, ..Default::default() }, &Streams::new(1));
        e.trained = true;
        m.ensemble = Some(e);
        m
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let model = tiny_model();
        let dir = std::env::temp_dir().join("krc_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.krck");
        save_checkpoint(&p, &model).unwrap();
        let back = load_checkpoint(&p).unwrap();
        for ((n1, v1), (n2, v2)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(n1, n2);
            for (a, b) in v1.data().iter().zip(v2.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "param {n1}");
            }
        }
        assert!(back.ensemble.as_ref().unwrap().trained);
        assert_eq!(back.seed, 9);
        assert_eq!(back.config_snapshot, "snapshot");
        // saving the loaded model reproduces identical bytes
        let p2 = dir.join("m2.krck");
        save_checkpoint(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn unknown_blocks_are_skipped() {
        let model = tiny_model();
        let dir = std::env::temp_dir().join("krc_ckpt_fwd");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.krck");
        save_checkpoint(&p, &model).unwrap();

        // append a synthetic extra block and bump the count
        let mut bytes = std::fs::read(&p).unwrap();
        let meta_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let count_off = 24 + meta_len;
        let n = u32::from_le_bytes(bytes[count_off..count_off + 4].try_into().unwrap());
        bytes[count_off..count_off + 4].copy_from_slice(&(n + 1).to_le_bytes());
        let extra = Tensor::vector(vec![1.0, 2.0]);
        let name = "future.block";
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        let mut payload = Vec::new();
        write_tensor_to(&mut payload, &extra, Dtype::F64).unwrap();
        bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&payload);
        let p3 = dir.join("m3.krck");
        std::fs::write(&p3, bytes).unwrap();

        let back = load_checkpoint(&p3).unwrap();
        assert_eq!(back.seed, 9);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        // a checkpoint whose metadata declares different layer sizes than its
        // stored blocks must fail loudly with both shapes in the message
        let model = tiny_model();
        let dir = std::env::temp_dir().join("krc_ckpt_shape");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.krck");
        save_checkpoint(&p, &model).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let meta_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let meta_text = String::from_utf8(bytes[24..24 + meta_len].to_vec()).unwrap();
        let tampered = meta_text.replace("enc_hidden = [6, 4]", "enc_hidden = [7, 4]");
        assert_ne!(meta_text, tampered, "meta layout changed; update the test");
        assert_eq!(meta_text.len(), tampered.len());
        bytes[24..24 + meta_len].copy_from_slice(tampered.as_bytes());
        let p4 = dir.join("m4.krck");
        std::fs::write(&p4, bytes).unwrap();
        match load_checkpoint(&p4) {
            Err(KrcError::Format { detail, .. }) => {
                assert!(detail.contains("stored shape") && detail.contains("current"), "{detail}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
