//! Checkpoint file format.
//!
//! Layout: magic `MAEM`, format version (u32 LE), header length (u64 LE),
//! a JSON header blob, then repeated tensor records until end of file:
//! name length (u32 LE), name bytes, rank (u32 LE), extents (u64 LE each),
//! raw little-endian 32-bit float values. The format is seekable and
//! language-neutral; saving the same logical content always produces
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::MaeConfig;
use crate::nn::ParamSet;

pub const MAGIC: [u8; 4] = *b"MAEM";
pub const VERSION: u32 = 1;

/// JSON header stored after the magic and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// "pretrain" or "finetune".
    pub kind: String,
    pub model: MaeConfig,
    /// Label count of the classification head (fine-tune checkpoints).
    pub num_labels: Option<usize>,
    /// Hidden width of the classification head (fine-tune checkpoints).
    pub head_hidden: Option<usize>,
    /// Completed epochs at save time.
    pub epoch: u64,
    /// Master seed; all RNG streams are derived from it, so this is the
    /// complete RNG state needed for exact resumption.
    pub seed: u64,
    /// Optimizer step count when optimizer state is included.
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A parsed checkpoint: header plus named tensors in file order. Model
/// parameters come first; optimizer state uses the `opt.` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensors that are model parameters (not optimizer state).
    pub fn model_tensors(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter().filter(|t| !t.name.starts_with("opt."))
    }

    /// Snapshots a parameter set into named tensors (in registration order).
    pub fn collect_params(params: &ParamSet<f32>) -> Vec<NamedTensor> {
        params
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect()
    }

    /// Copies stored values into an existing parameter set. Every parameter
    /// must be present with a matching shape; mismatches are reported as a
    /// structured diff.
    pub fn load_into(&self, params: &ParamSet<f32>) -> Result<()> {
        let mut diff = Vec::new();
        for (name, tensor) in params.iter() {
            match self.get(name) {
                Some(stored) if stored.shape == tensor.shape() => {
                    tensor.data_mut().copy_from_slice(&stored.data);
                }
                Some(stored) => diff.push((
                    name.to_string(),
                    format!("{:?}", stored.shape),
                    format!("{:?}", tensor.shape()),
                )),
                None => diff.push((name.to_string(), "absent".to_string(), "present".to_string())),
            }
        }
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diff))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &e in &t.shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let header_len = read_u64(&mut r)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

        let mut tensors = Vec::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read_exact(&mut len_buf) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len_buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Checkpoint { header, tensors })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Field-by-field comparison of two model configs; empty when compatible.
pub fn config_diff(stored: &MaeConfig, requested: &MaeConfig) -> Vec<(String, String, String)> {
    let mut diff = Vec::new();
    let mut push = |field: &str, a: String, b: String| {
        if a != b {
            diff.push((field.to_string(), a, b));
        }
    };
    push("image_size", stored.image_size.to_string(), requested.image_size.to_string());
    push("patch_size", stored.patch_size.to_string(), requested.patch_size.to_string());
    push("channels", stored.channels.to_string(), requested.channels.to_string());
    push("enc_depth", stored.enc_depth.to_string(), requested.enc_depth.to_string());
    push("enc_dim", stored.enc_dim.to_string(), requested.enc_dim.to_string());
    push("enc_heads", stored.enc_heads.to_string(), requested.enc_heads.to_string());
    push("dec_depth", stored.dec_depth.to_string(), requested.dec_depth.to_string());
    push("dec_dim", stored.dec_dim.to_string(), requested.dec_dim.to_string());
    push("dec_heads", stored.dec_heads.to_string(), requested.dec_heads.to_string());
    push("mlp_ratio", stored.mlp_ratio.to_string(), requested.mlp_ratio.to_string());
    diff
}
