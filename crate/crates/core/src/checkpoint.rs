//! Binary archive shared by checkpoints and embedding exports.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SAVS1"
//! u32 header_len, header (UTF-8 `key = value` lines)
//! u32 entry_count
//! entry_count × { u32 name_len, name, u8 dtype (0 = f32), u32 ndim, ndim × u32 dim }
//! payloads in entry order, f32 each
//! ```

use std::fs;
use std::path::Path;

use crate::decoder::SavsModel;
use crate::error::{Result, SavsError};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 5] = b"SAVS1";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub header: String,
    pub tensors: Vec<Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| SavsError::Archive(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| SavsError::Archive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SavsError::Archive("name is not UTF-8".into()))
    }
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, self.header.len())?;
        out.extend_from_slice(self.header.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(SavsError::Archive(format!(
                    "{}: shape {:?} vs {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            put_u32(&mut out, t.shape.len())?;
            for &d in &t.shape {
                put_u32(&mut out, d)?;
            }
        }
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(SavsError::Archive("bad magic".into()));
        }
        let n = r.u32()?;
        let header = r.string(n)?;
        let count = r.u32()?;
        let mut manifest = Vec::new();
        for _ in 0..count {
            let n = r.u32()?;
            let name = r.string(n)?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(SavsError::Archive(format!("{name}: unsupported dtype {dtype}")));
            }
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| SavsError::Archive("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(SavsError::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| SavsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SavsError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| SavsError::Archive(format!("{}: {e}", path.display())))
    }

    /// Value of a `key = value` header line.
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.lines().find_map(|l| {
            let (k, v) = l.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

const META_KEYS: [&str; 2] = ["kind", "num_classes"];

/// Model parameters plus the training configuration that produced them.
pub fn checkpoint_archive(model: &SavsModel, cfg: &TrainConfig) -> Archive {
    let header = format!(
        "kind = checkpoint\nnum_classes = {}\n{}",
        model.num_classes(),
        cfg.to_text()
    );
    let tensors = model
        .params()
        .into_iter()
        .map(|p| Tensor {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().map(|&v| v as f32).collect(),
        })
        .collect();
    Archive { header, tensors }
}

pub fn save_checkpoint(path: &Path, model: &SavsModel, cfg: &TrainConfig) -> Result<()> {
    checkpoint_archive(model, cfg).save(path)
}

/// Rebuilds the model described by a checkpoint archive.
pub fn model_from_archive(archive: &Archive) -> Result<(SavsModel, TrainConfig)> {
    if archive.header_value("kind") != Some("checkpoint") {
        return Err(SavsError::Archive("not a checkpoint archive".into()));
    }
    let num_classes: usize = archive
        .header_value("num_classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| SavsError::Archive("checkpoint lacks num_classes".into()))?;
    let config_text: String = archive
        .header
        .lines()
        .filter(|l| !META_KEYS.iter().any(|k| l.split('=').next().map(str::trim) == Some(k)))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = TrainConfig::parse(&config_text)?;
    let mut model = SavsModel::zeroed(&cfg.model_config(num_classes))?;
    let expected = model.params().len();
    if archive.tensors.len() != expected {
        return Err(SavsError::Archive(format!(
            "checkpoint has {} tensors, `{}` model needs {expected}",
            archive.tensors.len(),
            cfg.ablation
        )));
    }
    for p in model.params_mut() {
        let t = archive
            .tensor(&p.name)
            .ok_or_else(|| SavsError::Archive(format!("missing tensor {}", p.name)))?;
        if t.shape != p.shape {
            return Err(SavsError::Archive(format!(
                "{}: shape {:?}, expected {:?}",
                p.name, t.shape, p.shape
            )));
        }
        p.data = t.data.iter().map(|&v| v as f64).collect();
    }
    Ok((model, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(SavsModel, TrainConfig)> {
    model_from_archive(&Archive::load(path)?)
}

/// Embeddings keyed by image path, stored in the checkpoint layout.
pub fn embeddings_archive(rows: &[(String, Vec<f64>)]) -> Archive {
    let dim = rows.first().map_or(0, |r| r.1.len());
    Archive {
        header: format!("kind = embeddings\ndim = {dim}\n"),
        tensors: rows
            .iter()
            .map(|(path, v)| Tensor {
                name: path.clone(),
                shape: vec![v.len()],
                data: v.iter().map(|&x| x as f32).collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Ablation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(ablation: Ablation) -> TrainConfig {
        let mut cfg = TrainConfig {
            ablation,
            reduction: 4,
            ..TrainConfig::default()
        };
        cfg.set("layers", "k4s4c4,k4s2c8").unwrap();
        cfg
    }

    #[test]
    fn archive_roundtrip_and_corruption() {
        let a = Archive {
            header: "kind = embeddings\n".into(),
            tensors: vec![
                Tensor {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -2.5, 3.0, 0.0],
                },
                Tensor {
                    name: "b/é.png".into(),
                    shape: vec![0],
                    data: vec![],
                },
            ],
        };
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"SAVS1");
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), a);
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Archive::from_bytes(&bad).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        for ablation in [Ablation::Baseline, Ablation::Hsa, Ablation::HsaVcs] {
            let cfg = small_cfg(ablation);
            let model = SavsModel::new(&cfg.model_config(5), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.savs");
            save_checkpoint(&path, &model, &cfg).unwrap();
            let (loaded, lcfg) = load_checkpoint(&path).unwrap();
            assert_eq!(lcfg, cfg);
            assert_eq!(loaded.ablation(), ablation);
            for (a, b) in model.params().iter().zip(loaded.params()) {
                assert_eq!(a.name, b.name);
                let want: Vec<f64> = a.data.iter().map(|&v| v as f32 as f64).collect();
                assert_eq!(want, b.data);
            }
        }
    }

    #[test]
    fn baseline_checkpoint_has_no_attention_groups() {
        let cfg = small_cfg(Ablation::Baseline);
        let model = SavsModel::new(&cfg.model_config(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = checkpoint_archive(&model, &cfg);
        assert!(a
            .tensors
            .iter()
            .all(|t| t.name.starts_with("backbone.") || t.name.starts_with("classifier.")));
    }

    #[test]
    fn mismatched_tensors_are_rejected() {
        let cfg = small_cfg(Ablation::Hsa);
        let model = SavsModel::new(&cfg.model_config(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut a = checkpoint_archive(&model, &cfg);
        a.tensors.pop();
        assert!(model_from_archive(&a).is_err());
        let mut b = checkpoint_archive(&model, &cfg);
        b.tensors[0].shape = vec![b.tensors[0].data.len()];
        assert!(model_from_archive(&b).is_err());
        assert!(model_from_archive(&embeddings_archive(&[])).is_err());
    }
}
