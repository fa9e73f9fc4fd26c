//! Portable checkpoint format.
//!
//! Layout: a UTF-8 manifest of `key=value` lines, a tensor table with one
//! `name shape dtype offset` line per tensor, a blank line, the raw payload
//! (little-endian f32, row-major, in table order), and a trailing 64-bit
//! checksum of the payload (the first eight bytes of its SHA-256).
//!
//! The manifest records the config, the step counter, the freeze mask, and
//! the training RNG state, so a loaded checkpoint resumes training
//! bit-identically. Optimizer moments ride along as `opt.m.*` / `opt.v.*`
//! tensors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

use super::{FreezePolicy, ModelConfig, ModelError, ModelState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "harf-checkpoint";

impl ModelState {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.save_with_meta(path, &[])
    }

    /// Saves with extra `meta.<key>=<value>` manifest entries (e.g. the
    /// training phase that produced the checkpoint).
    pub fn save_with_meta(&self, path: &Path, meta: &[(&str, &str)]) -> Result<(), ModelError> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        manifest.push_str(&format!("format_version={CHECKPOINT_VERSION}\n"));
        let c = &self.config;
        manifest.push_str(&format!(
            "vocab_size={}\nd_model={}\nn_heads={}\nenc_layers={}\ndec_layers={}\nffn_dim={}\nmax_len={}\ndropout_rate={:?}\nseed={}\n",
            c.vocab_size, c.d_model, c.n_heads, c.enc_layers, c.dec_layers, c.ffn_dim, c.max_len, c.dropout_rate, c.seed
        ));
        manifest.push_str(&format!("step={}\n", self.step));
        let policy = match self.freeze_policy {
            FreezePolicy::None => "none",
            FreezePolicy::MlmPolicy => "mlm_policy",
        };
        manifest.push_str(&format!("freeze_policy={policy}\n"));
        manifest.push_str(&format!("frozen={}\n", self.frozen_names().join(",")));
        let seed_hex: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        manifest.push_str(&format!("rng_seed={seed_hex}\n"));
        manifest.push_str(&format!("rng_word_pos={}\n", self.rng.get_word_pos()));
        manifest.push_str(&format!("rng_stream={}\n", self.rng.get_stream()));
        for (k, v) in meta {
            manifest.push_str(&format!("meta.{k}={v}\n"));
        }

        // tensor table and payload: parameters, then first and second moments
        let mut table = String::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            entries.push((name.clone(), &self.tensors[i]));
        }
        for (i, name) in self.names.iter().enumerate() {
            entries.push((format!("opt.m.{name}"), &self.opt_m[i]));
        }
        for (i, name) in self.names.iter().enumerate() {
            entries.push((format!("opt.v.{name}"), &self.opt_v[i]));
        }
        manifest.push_str(&format!("tensor_count={}\n", entries.len()));
        for (name, tensor) in &entries {
            let shape: Vec<String> = tensor.shape.iter().map(|d| d.to_string()).collect();
            table.push_str(&format!("{name} {} f32 {}\n", shape.join("x"), payload.len()));
            payload.extend_from_slice(&tensor.to_f32_bytes());
        }

        let mut bytes = Vec::with_capacity(manifest.len() + table.len() + 1 + payload.len() + 8);
        bytes.extend_from_slice(manifest.as_bytes());
        bytes.extend_from_slice(table.as_bytes());
        bytes.push(b'\n');
        bytes.extend_from_slice(&payload);
        bytes.extend_from_slice(&checksum(&payload).to_le_bytes());
        fs::write(path, bytes).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::load_with_meta(path).map(|(m, _)| m)
    }

    pub fn load_with_meta(path: &Path) -> Result<(Self, HashMap<String, String>), ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })?;
        let header_end = find_blank_line(&bytes).ok_or_else(|| ModelError::BadCheckpoint("no header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| ModelError::BadCheckpoint("header is not UTF-8".into()))?;
        if bytes.len() < header_end + 2 + 8 {
            return Err(ModelError::BadCheckpoint("truncated payload".into()));
        }
        let payload = &bytes[header_end + 2..bytes.len() - 8];
        let stored_sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(ModelError::BadCheckpoint("missing magic line".into()));
        }
        let mut kv: HashMap<&str, &str> = HashMap::new();
        let mut table: Vec<(&str, Vec<usize>, usize)> = Vec::new();
        let mut meta = HashMap::new();
        let mut in_table = false;
        for line in lines {
            if !in_table {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| ModelError::BadCheckpoint(format!("bad manifest line {line:?}")))?;
                if let Some(mk) = k.strip_prefix("meta.") {
                    meta.insert(mk.to_string(), v.to_string());
                } else {
                    kv.insert(k, v);
                }
                if k == "tensor_count" {
                    in_table = true;
                }
            } else {
                let fields: Vec<&str> = line.split(' ').collect();
                if fields.len() != 4 || fields[2] != "f32" {
                    return Err(ModelError::BadCheckpoint(format!("bad table line {line:?}")));
                }
                let shape: Result<Vec<usize>, _> = fields[1].split('x').map(str::parse).collect();
                let shape = shape.map_err(|_| ModelError::BadCheckpoint(format!("bad shape in {line:?}")))?;
                let offset: usize =
                    fields[3].parse().map_err(|_| ModelError::BadCheckpoint(format!("bad offset in {line:?}")))?;
                table.push((fields[0], shape, offset));
            }
        }

        let version: u32 = parse_kv(&kv, "format_version")?;
        if version > CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch { found: version, supported: CHECKPOINT_VERSION });
        }
        if checksum(payload) != stored_sum {
            return Err(ModelError::ChecksumMismatch);
        }
        let expected_count: usize = parse_kv(&kv, "tensor_count")?;
        if table.len() != expected_count {
            return Err(ModelError::BadCheckpoint(format!(
                "tensor table has {} entries, manifest says {expected_count}",
                table.len()
            )));
        }

        let config = ModelConfig {
            vocab_size: parse_kv(&kv, "vocab_size")?,
            d_model: parse_kv(&kv, "d_model")?,
            n_heads: parse_kv(&kv, "n_heads")?,
            enc_layers: parse_kv(&kv, "enc_layers")?,
            dec_layers: parse_kv(&kv, "dec_layers")?,
            ffn_dim: parse_kv(&kv, "ffn_dim")?,
            max_len: parse_kv(&kv, "max_len")?,
            dropout_rate: parse_kv(&kv, "dropout_rate")?,
            seed: parse_kv(&kv, "seed")?,
        };

        let mut state = ModelState::init(config)?;
        state.step = parse_kv(&kv, "step")?;
        state.freeze_policy = match kv.get("freeze_policy").copied() {
            Some("none") | None => FreezePolicy::None,
            Some("mlm_policy") => FreezePolicy::MlmPolicy,
            Some(other) => return Err(ModelError::BadCheckpoint(format!("unknown freeze policy {other:?}"))),
        };
        state.frozen.clear();
        if let Some(frozen) = kv.get("frozen") {
            for name in frozen.split(',').filter(|s| !s.is_empty()) {
                let i = *state
                    .index
                    .get(name)
                    .ok_or_else(|| ModelError::BadCheckpoint(format!("frozen tensor {name:?} not in model")))?;
                state.frozen.insert(i);
            }
        }

        // restore the training RNG
        let seed_hex = kv.get("rng_seed").ok_or_else(|| ModelError::BadCheckpoint("missing rng_seed".into()))?;
        let seed = parse_hex32(seed_hex)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse_kv(&kv, "rng_stream")?);
        rng.set_word_pos(parse_kv::<u128>(&kv, "rng_word_pos")?);
        state.rng = rng;

        // read tensors
        for (name, shape, offset) in table {
            let len: usize = shape.iter().product();
            let end = offset + len * 4;
            if end > payload.len() {
                return Err(ModelError::BadCheckpoint("truncated payload".into()));
            }
            let tensor = Tensor::from_f32_bytes(&shape, &payload[offset..end])
                .ok_or_else(|| ModelError::BadCheckpoint(format!("bad tensor bytes for {name}")))?;
            let (target, base) = if let Some(n) = name.strip_prefix("opt.m.") {
                (&mut state.opt_m, n)
            } else if let Some(n) = name.strip_prefix("opt.v.") {
                (&mut state.opt_v, n)
            } else {
                (&mut state.tensors, name)
            };
            let i = *state
                .index
                .get(base)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("unknown tensor {name:?}")))?;
            if target[i].shape != tensor.shape {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape, target[i].shape
                )));
            }
            target[i] = tensor;
        }

        Ok((state, meta))
    }
}

fn checksum(payload: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(payload);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Offset of the first byte of the `\n\n` header terminator.
fn find_blank_line(bytes: &[u8]) -> Option<usize> {
    bytes.windows(2).position(|w| w == b"\n\n")
}

fn parse_kv<T: std::str::FromStr>(kv: &HashMap<&str, &str>, key: &str) -> Result<T, ModelError> {
    kv.get(key)
        .ok_or_else(|| ModelError::BadCheckpoint(format!("missing manifest key {key:?}")))?
        .parse()
        .map_err(|_| ModelError::BadCheckpoint(format!("bad value for {key:?}")))
}

fn parse_hex32(hex: &str) -> Result<[u8; 32], ModelError> {
    if hex.len() != 64 {
        return Err(ModelError::BadCheckpoint("rng_seed must be 32 bytes of hex".into()));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in hex.as_bytes().chunks_exact(2).enumerate() {
        let s = std::str::from_utf8(chunk).map_err(|_| ModelError::BadCheckpoint("bad hex".into()))?;
        out[i] = u8::from_str_radix(s, 16).map_err(|_| ModelError::BadCheckpoint("bad hex".into()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_backward, GradStore, Mode, OptimizerConfig};
    use crate::tokenizer::{EncodedSequence, LangTag};

    fn tiny() -> ModelState {
        ModelState::init(ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 16,
            max_len: 12,
            dropout_rate: 0.1,
            seed: 5,
        })
        .unwrap()
    }

    fn seq(ids: Vec<u32>, content: usize) -> EncodedSequence {
        let mut mask = vec![1u8; content];
        mask.resize(ids.len(), 0);
        EncodedSequence { ids, attention_mask: mask, lang: LangTag::urdu() }
    }

    fn trained_model() -> ModelState {
        let mut m = tiny();
        m.set_freeze(crate::model::FreezePolicy::MlmPolicy).unwrap();
        let src = seq(vec![7, 8, 2, 0], 3);
        let tgt = seq(vec![5, 7, 8, 2], 4);
        for _ in 0..3 {
            let mut grads = GradStore::zeros_like(&m);
            forward_backward(&mut m, &src, &tgt, Mode::Train, &mut grads).unwrap();
            m.step(&grads.mean(), &OptimizerConfig::default()).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save_with_meta(&path, &[("phase", "mlm")]).unwrap();
        let (loaded, meta) = ModelState::load_with_meta(&path).unwrap();

        assert_eq!(meta.get("phase").map(String::as_str), Some("mlm"));
        assert_eq!(loaded.step, m.step);
        assert_eq!(loaded.config, m.config);
        assert_eq!(loaded.freeze_policy(), m.freeze_policy());
        assert_eq!(loaded.frozen_names(), m.frozen_names());
        assert_eq!(loaded.rng, m.rng);
        for name in m.tensor_names() {
            assert_eq!(loaded.tensor(name).unwrap(), m.tensor(name).unwrap(), "{name}");
            assert_eq!(loaded.moment(name).unwrap(), m.moment(name).unwrap(), "moments of {name}");
        }
    }

    #[test]
    fn training_through_a_checkpoint_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let src = seq(vec![7, 8, 2, 0], 3);
        let tgt = seq(vec![5, 7, 8, 2], 4);
        let opt = OptimizerConfig::default();

        let train_step = |m: &mut ModelState| {
            let mut grads = GradStore::zeros_like(m);
            forward_backward(m, &src, &tgt, Mode::Train, &mut grads).unwrap();
            m.step(&grads.mean(), &opt).unwrap();
        };

        let mut a = tiny();
        train_step(&mut a);
        a.save(&path).unwrap();
        train_step(&mut a);

        let mut b = ModelState::load(&path).unwrap();
        train_step(&mut b);

        for name in a.tensor_names() {
            assert_eq!(a.tensor(name).unwrap(), b.tensor(name).unwrap(), "{name} diverged after resume");
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let header_end = find_blank_line(&bytes).unwrap();
        bytes[header_end + 10] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(ModelState::load(&path), Err(ModelError::ChecksumMismatch)));
    }

    #[test]
    fn future_version_is_rejected() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]).to_string();
        assert!(text.contains("format_version=1"));
        let patched = bytes
            .windows("format_version=1".len())
            .position(|w| w == b"format_version=1")
            .unwrap();
        let mut bytes = bytes.clone();
        bytes[patched + "format_version=".len()] = b'9';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            ModelState::load(&path),
            Err(ModelError::VersionMismatch { found: 9, supported: 1 })
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = ModelState::load(&path).unwrap_err();
        assert!(
            matches!(err, ModelError::BadCheckpoint(_) | ModelError::ChecksumMismatch),
            "unexpected error {err}"
        );
    }
}
