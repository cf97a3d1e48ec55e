//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//! `"VTECBNN1"`, u32 version, then three length-prefixed UTF-8 strings
//! (architecture, encoding id, provenance), u32 input dim, the normalizer
//! (input means, input stds, target mean, target std) and u32 parameter count
//! followed by the flat parameter vector.

use thiserror::Error;

use crate::bnn::{parse_architecture, BnnError, Network};
use crate::dataset::{Normalizer, ENCODING_ID};

const MAGIC: &[u8; 8] = b"VTECBNN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("checkpoint string is not UTF-8")]
    Utf8,
    #[error("checkpoint uses input encoding {0:?}, expected {ENCODING_ID:?}")]
    Encoding(String),
    #[error("checkpoint architecture: {0}")]
    Architecture(#[from] BnnError),
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
}

/// A trained network with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: Network,
    pub normalizer: Normalizer,
    pub provenance: String,
}

impl Model {
    pub fn new(network: Network, normalizer: Normalizer, provenance: impl Into<String>) -> Result<Self, CheckpointError> {
        if normalizer.input_dim() != network.input_dim() {
            return Err(CheckpointError::Inconsistent(format!(
                "normalizer has {} inputs, network {}",
                normalizer.input_dim(),
                network.input_dim()
            )));
        }
        Ok(Model {
            network,
            normalizer,
            provenance: provenance.into(),
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_model(model: &Model) -> Vec<u8> {
    let net = &model.network;
    let norm = &model.normalizer;
    let mut out = Vec::with_capacity(64 + 8 * (net.param_count() + 2 * norm.input_dim() + 2));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &net.spec().to_string());
    put_str(&mut out, ENCODING_ID);
    put_str(&mut out, &model.provenance);
    out.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
    put_f64s(&mut out, &norm.input_mean);
    put_f64s(&mut out, &norm.input_std);
    put_f64s(&mut out, &[norm.target_mean, norm.target_std]);
    out.extend_from_slice(&(net.param_count() as u32).to_le_bytes());
    put_f64s(&mut out, net.params());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Utf8)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_model(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let architecture = r.string()?;
    let encoding = r.string()?;
    if encoding != ENCODING_ID {
        return Err(CheckpointError::Encoding(encoding));
    }
    let provenance = r.string()?;
    let input_dim = r.u32()? as usize;
    let input_mean = r.f64s(input_dim)?;
    let input_std = r.f64s(input_dim)?;
    let target = r.f64s(2)?;
    let param_count = r.u32()? as usize;
    let params = r.f64s(param_count)?;
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Trailing(r.bytes.len()));
    }
    if input_std.iter().any(|s| !(*s > 0.0)) || !(target[1] > 0.0) {
        return Err(CheckpointError::Inconsistent("non-positive normalizer std".into()));
    }
    let mut network = Network::zeros(parse_architecture(&architecture, input_dim)?);
    if network.param_count() != param_count {
        return Err(CheckpointError::Inconsistent(format!(
            "{architecture} needs {} parameters, file has {param_count}",
            network.param_count()
        )));
    }
    network.set_params(params)?;
    let normalizer = Normalizer {
        input_mean,
        input_std,
        target_mean: target[0],
        target_std: target[1],
    };
    Model::new(network, normalizer, provenance)
}
