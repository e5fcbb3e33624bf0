//! Model checkpoint container: a JSON manifest followed by the parameter
//! arrays as f32 little-endian in manifest order.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{GateParams, ModelDims, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IDFC";
const VERSION: u8 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub d: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub best_epoch: usize,
    pub best_val_recall20: f64,
    pub arrays: Vec<ArrayMeta>,
    /// Prepared-dataset directory the model was trained on, for commands
    /// that only receive a checkpoint.
    pub data_dir: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        params: ModelParams<f32>,
        n_users: usize,
        n_items: usize,
        best_epoch: usize,
        best_val_recall20: f64,
        data_dir: Option<String>,
    ) -> Self {
        let arrays = params
            .named()
            .iter()
            .map(|(name, t)| ArrayMeta {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                config: config.clone(),
                config_hash: config.hash(),
                text_dim: params.dims.text_dim,
                visual_dim: params.dims.visual_dim,
                d: params.dims.d,
                n_users,
                n_items,
                best_epoch,
                best_val_recall20,
                arrays,
                data_dir,
            },
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let named = self.params.named();
        let total: usize = named.iter().map(|(_, t)| t.len()).sum();
        let mut buf = Vec::with_capacity(9 + manifest.len() + 4 * total);
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        buf.extend_from_slice(&manifest);
        for (_, t) in named {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ctx = path.display().to_string();
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(ctx.clone(), e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)
            .map_err(|e| Error::io(ctx.clone(), e))?;
        if buf.len() < 9 || &buf[0..4] != MAGIC {
            return Err(Error::Data(format!("{ctx}: not a checkpoint container")));
        }
        if buf[4] != VERSION {
            return Err(Error::Data(format!("{ctx}: unsupported checkpoint version {}", buf[4])));
        }
        let mlen = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
        if buf.len() < 9 + mlen {
            return Err(Error::Data(format!("{ctx}: truncated manifest")));
        }
        let manifest: Manifest = serde_json::from_slice(&buf[9..9 + mlen])?;
        let mut off = 9 + mlen;

        let mut read_array = |meta: &ArrayMeta| -> Result<Tensor<f32>> {
            let count = meta.rows * meta.cols;
            let need = 4 * count;
            if buf.len() < off + need {
                return Err(Error::Data(format!("{ctx}: truncated array {}", meta.name)));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in buf[off..off + need].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            off += need;
            Tensor::from_vec(meta.rows, meta.cols, data)
        };

        let mut arrays = std::collections::BTreeMap::new();
        for meta in &manifest.arrays {
            arrays.insert(meta.name.clone(), read_array(meta)?);
        }
        if off != buf.len() {
            return Err(Error::Data(format!("{ctx}: trailing bytes after arrays")));
        }
        let mut take = |name: &str| -> Result<Tensor<f32>> {
            arrays
                .remove(name)
                .ok_or_else(|| Error::Data(format!("{ctx}: missing array {name}")))
        };
        let params = ModelParams {
            dims: ModelDims {
                text_dim: manifest.text_dim,
                visual_dim: manifest.visual_dim,
                d: manifest.d,
            },
            w_text: take("w_text")?,
            b_text: take("b_text")?,
            w_visual: take("w_visual")?,
            b_visual: take("b_visual")?,
            ln_gain_text: take("ln_gain_text")?,
            ln_shift_text: take("ln_shift_text")?,
            ln_gain_visual: take("ln_gain_visual")?,
            ln_shift_visual: take("ln_shift_visual")?,
            gate_user: GateParams {
                w0: take("gate_user_w0")?,
                w1: take("gate_user_w1")?,
                b0: take("gate_user_b0")?,
                b1: take("gate_user_b1")?,
            },
            gate_item: GateParams {
                w0: take("gate_item_w0")?,
                w1: take("gate_item_w1")?,
                b0: take("gate_item_b0")?,
                b1: take("gate_item_b1")?,
            },
        };
        Ok(Checkpoint { manifest, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_params_and_manifest() {
        let dims = ModelDims {
            text_dim: 6,
            visual_dim: 4,
            d: 8,
        };
        let params = ModelParams::<f32>::init(dims, 99);
        let cfg = TrainConfig::default();
        let ckpt = Checkpoint::new(&cfg, params.clone(), 10, 7, 3, 0.42, Some("data".into()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.idfc");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.manifest.best_epoch, 3);
        assert_eq!(back.manifest.config_hash, cfg.hash());
        assert_eq!(back.manifest.n_users, 10);
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idfc");
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dims = ModelDims {
            text_dim: 3,
            visual_dim: 3,
            d: 4,
        };
        let params = ModelParams::<f32>::init(dims, 7);
        let cfg = TrainConfig::default();
        let ckpt = Checkpoint::new(&cfg, params, 5, 5, 1, 0.1, None);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.idfc");
        let b = dir.path().join("b.idfc");
        ckpt.save(&a).unwrap();
        ckpt.save(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
