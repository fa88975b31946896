//! Binary model checkpoints: an 8-byte magic, a little-endian u32 format
//! version, a u32 header length, a JSON header describing the networks, then
//! every parameter as a little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::MlpSpec;
use super::model::{EncoderModel, TwoTowerModel};
use super::structured::StructuredModel;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"GXENNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    mu_hat: f64,
    genotype: MlpSpec,
    environment: MlpSpec,
    embedding_dim: usize,
    n_params: [usize; 3],
}

pub fn encode_checkpoint(m: &StructuredModel) -> Result<Vec<u8>> {
    let header = Header {
        mu_hat: m.mu_hat,
        genotype: m.f_g.spec().clone(),
        environment: m.f_e.spec().clone(),
        embedding_dim: m.f_ge.embedding_dim(),
        n_params: [m.f_g.n_params(), m.f_e.n_params(), m.f_ge.n_params()],
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * header.n_params.iter().sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in m.f_g.params.iter().chain(&m.f_e.params).chain(&m.f_ge.params) {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::invalid(format!("bad checkpoint: {}", msg.into()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<StructuredModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let h: Header = serde_json::from_slice(body).map_err(|e| corrupt(e.to_string()))?;
    let data = &bytes[16 + hlen..];
    let total: usize = h.n_params.iter().sum();
    if data.len() != 8 * total {
        return Err(corrupt(format!("{} parameter bytes, expected {}", data.len(), 8 * total)));
    }
    let mut params = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| params.by_ref().take(n).collect::<Vec<f64>>();
    let g = take(h.n_params[0]);
    let e = take(h.n_params[1]);
    let ge = take(h.n_params[2]);
    Ok(StructuredModel {
        mu_hat: h.mu_hat,
        f_ge: TwoTowerModel::from_params(h.genotype.clone(), h.environment.clone(), h.embedding_dim, ge)?,
        f_g: EncoderModel::from_params(h.genotype, g)?,
        f_e: EncoderModel::from_params(h.environment, e)?,
    })
}

pub fn save_checkpoint(path: &Path, m: &StructuredModel) -> Result<()> {
    std::fs::write(path, encode_checkpoint(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<StructuredModel> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::{build_env_encoder, build_genotype_encoder, EncoderConfig, Profile};

    fn model() -> StructuredModel {
        let f_g = build_genotype_encoder(7, &EncoderConfig::genotype(Profile::Desk), 1).unwrap();
        let f_e = build_env_encoder(4, &EncoderConfig::environment(Profile::Desk), 2).unwrap();
        let f_ge = TwoTowerModel::from_encoders(&f_g, &f_e, 8, 3).unwrap();
        StructuredModel {
            mu_hat: 9.25,
            f_g,
            f_e,
            f_ge,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&p, &m).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint(&model()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(decode_checkpoint(&b).is_err());
        let mut b = bytes;
        b[8] = 9;
        assert!(decode_checkpoint(&b).is_err());
    }
}
