//! JSON checkpoint format:
//! `{"format_version":1,"arch":{..,"block_active":[..]},"params":[{"name","shape","data"}],"rng_seed":n}`
//! with every float written to 17 significant digits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{EpsilonNet, NetArch};
use super::tensor::Tensor;
use crate::{io, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchRecord {
    pub input_dim: usize,
    pub time_embed_dim: usize,
    pub hidden_width: usize,
    pub n_blocks: usize,
    pub block_active: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: ArchRecord,
    pub params: Vec<ParamRecord>,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn from_net(net: &EpsilonNet) -> Self {
        let a = net.arch();
        Checkpoint {
            format_version: FORMAT_VERSION,
            arch: ArchRecord {
                input_dim: a.input_dim,
                time_embed_dim: a.time_embed_dim,
                hidden_width: a.hidden_width,
                n_blocks: a.n_blocks,
                block_active: net.block_active().to_vec(),
            },
            params: net
                .named_params()
                .into_iter()
                .map(|(name, t)| ParamRecord {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            rng_seed: net.rng_seed(),
        }
    }

    pub fn into_net(self) -> Result<EpsilonNet> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let arch = NetArch {
            input_dim: self.arch.input_dim,
            time_embed_dim: self.arch.time_embed_dim,
            hidden_width: self.arch.hidden_width,
            n_blocks: self.arch.n_blocks,
        };
        let template = EpsilonNet::new(arch, 0)?;
        let expected: Vec<String> = template.named_params().into_iter().map(|(n, _)| n).collect();
        let mut tensors = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.into_iter().enumerate() {
            if expected.get(i) != Some(&p.name) {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: unexpected name `{}`",
                    p.name
                )));
            }
            tensors.push(Tensor::new(p.shape, p.data)?);
        }
        EpsilonNet::from_parts(arch, tensors, self.arch.block_active, self.rng_seed)
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_line(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Writes `net` to `path` and returns the SHA-256 of the written bytes.
pub fn save(net: &EpsilonNet, path: &Path) -> Result<String> {
    let mut s = Checkpoint::from_net(net).to_json()?;
    s.push('\n');
    io::write_file(path, s.as_bytes())?;
    Ok(io::sha256_hex(s.as_bytes()))
}

pub fn load(path: &Path) -> Result<EpsilonNet> {
    let s = io::read_to_string(path)?;
    Checkpoint::from_json(&s)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .into_net()
}

/// Hash of the serialized checkpoint, identical to what [`save`] returns.
pub fn checkpoint_hash(net: &EpsilonNet) -> Result<String> {
    let mut s = Checkpoint::from_net(net).to_json()?;
    s.push('\n');
    Ok(io::sha256_hex(s.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetPreset;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = EpsilonNet::from_preset(NetPreset::BaseStudent, 11).unwrap();
        net.set_block_active(0, false).unwrap();
        net.perturb(0.01, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let h = save(&net, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.state_hash(), net.state_hash());
        assert_eq!(io::hash_file(&path).unwrap(), h);
        assert_eq!(checkpoint_hash(&back).unwrap(), h);
    }

    #[test]
    fn document_shape() {
        let net = EpsilonNet::from_preset(NetPreset::BaseStudent, 1).unwrap();
        let s = Checkpoint::from_net(&net).to_json().unwrap();
        assert!(s.starts_with(r#"{"format_version":1,"arch":{"input_dim":2,"time_embed_dim":16,"hidden_width":32,"n_blocks":2,"block_active":[true,true]},"params":[{"name":"input.weight","shape":[18,32],"data":["#));
        assert!(s.ends_with(r#""rng_seed":1}"#));
    }

    #[test]
    fn rejects_wrong_names_and_versions() {
        let net = EpsilonNet::from_preset(NetPreset::BaseStudent, 1).unwrap();
        let mut c = Checkpoint::from_net(&net);
        c.params[0].name = "bogus".into();
        assert!(c.clone().into_net().is_err());
        let mut c = Checkpoint::from_net(&net);
        c.format_version = 2;
        assert!(c.into_net().is_err());
    }
}
