//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "CSEG" | version u32 | entry count u32 |
//!   per entry: name length u32 | UTF-8 name | rank u32 | extents u64 x rank | f64 payload
//! ```
//!
//! Besides the parameters, entries under `meta.` record the model
//! configuration so a checkpoint can be evaluated on its own.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::nn::TransformerConfig;
use crate::synth::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSEG";
pub const VERSION: u32 = 1;

/// Serializes named tensors in the given order.
pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(4)
        .map_err(|_| Error::Checkpoint("file too short for a checkpoint header".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| {
                Error::Checkpoint(format!("entry `{name}` has implausible extents {shape:?}"))
            })?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

fn meta_entries(cfg: &ModelConfig) -> Vec<(String, Tensor)> {
    let as_f64 = |v: &[usize]| Tensor::from_vec(v.iter().map(|&x| x as f64).collect());
    let t = &cfg.transformer;
    vec![
        (
            "meta.input_channels".into(),
            Tensor::scalar(cfg.input_channels as f64),
        ),
        (
            "meta.channels_per_level".into(),
            as_f64(&cfg.channels_per_level),
        ),
        (
            "meta.image_size".into(),
            Tensor::scalar(cfg.image_size as f64),
        ),
        (
            "meta.transformer".into(),
            as_f64(&[t.patch, t.heads, t.layers]),
        ),
        ("meta.simam_lambda".into(), Tensor::scalar(cfg.simam_lambda)),
        (
            "meta.use_dac".into(),
            Tensor::scalar(if cfg.use_dac { 1.0 } else { 0.0 }),
        ),
    ]
}

fn config_from_meta(entries: &[(String, Tensor)]) -> Result<ModelConfig> {
    let get = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data())
            .ok_or_else(|| Error::Checkpoint(format!("missing `{name}` entry")))
    };
    let ints = |name: &str| -> Result<Vec<usize>> {
        get(name)?
            .iter()
            .map(|&v| {
                (v >= 0.0 && v.fract() == 0.0)
                    .then_some(v as usize)
                    .ok_or_else(|| Error::Checkpoint(format!("`{name}` holds a non-integer {v}")))
            })
            .collect()
    };
    let one = |name: &str| -> Result<usize> {
        match ints(name)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Checkpoint(format!("`{name}` must hold one value"))),
        }
    };
    let channels_per_level = ints("meta.channels_per_level")?;
    let transformer = match ints("meta.transformer")?.as_slice() {
        &[patch, heads, layers] => TransformerConfig {
            patch,
            heads,
            layers,
        },
        _ => {
            return Err(Error::Checkpoint(
                "`meta.transformer` must hold 3 values".into(),
            ))
        }
    };
    Ok(ModelConfig {
        input_channels: one("meta.input_channels")?,
        num_levels: channels_per_level.len(),
        channels_per_level,
        transformer,
        simam_lambda: get("meta.simam_lambda")?[0],
        image_size: one("meta.image_size")?,
        use_dac: get("meta.use_dac")?[0] != 0.0,
    })
}

/// Configuration entries followed by every parameter, sorted by name.
pub fn model_entries(model: &Model) -> Vec<(String, Tensor)> {
    let mut params: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.detached()))
        .collect();
    params.sort_by(|a, b| a.0.cmp(&b.0));
    let mut entries = meta_entries(&model.cfg);
    entries.extend(params);
    entries
}

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    encode(&model_entries(model))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let entries = decode(bytes)?;
    let cfg = config_from_meta(&entries).map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(other.to_string()),
    })?;
    let mut model = build_model(&cfg, 0)
        .map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))?;
    let mut stored: std::collections::BTreeMap<String, Tensor> = entries
        .into_iter()
        .filter(|(n, _)| !n.starts_with("meta."))
        .collect();
    for (name, param) in model.named_params_mut() {
        let t = stored
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != param.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                param.shape()
            )));
        }
        param.data_mut().copy_from_slice(t.data());
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            use_dac: false,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg, 11).unwrap();
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.cfg, model.cfg);
        for ((na, a), (nb, b)) in model.named_params().iter().zip(back.named_params()) {
            assert_eq!(na, &nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn raw_entries_round_trip() {
        let entries = vec![
            ("a".to_string(), Tensor::scalar(-0.0)),
            (
                "b.c".to_string(),
                Tensor::new(
                    &[2, 1, 3],
                    vec![1.5, f64::MIN_POSITIVE, 3.0, -4.0, 5.0, 6.0],
                )
                .unwrap(),
            ),
        ];
        let bytes = encode(&entries);
        assert_eq!(&bytes[..4], b"CSEG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, entries);
        assert_eq!(back[0].1.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn incompatible_files_are_rejected() {
        let bytes = encode(&[("x".to_string(), Tensor::scalar(1.0))]);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Checkpoint(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"CS").is_err());
        let mut huge = encode(&[("x".to_string(), Tensor::from_vec(vec![1.0]))]);
        let at = 4 + 4 + 4 + 4 + 1 + 4;
        huge[at..at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cseg");
        let model = build_model(&ModelConfig::default(), 2).unwrap();
        save(&model, &path).unwrap();
        assert_eq!(load(&path).unwrap(), model);
    }
}
