//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DIFFINFO"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen     UTF-8 JSON (kind, dimensions, component count, layer widths, vocabularies)
//! count    u64      number of f64 values in the payload
//! payload  count*8  IEEE-754 little-endian doubles
//! ```
//!
//! Every real-valued parameter lives in the payload, so a save/load cycle is
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gmm::{Component, ConditionEntry, GmmSpec};
use super::mlp::{Layer, MlpDenoiser};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIFFINFO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Gmm(GmmSpec),
    Mlp(MlpDenoiser),
}

#[derive(Debug, Serialize, Deserialize)]
struct MapEntry {
    label: String,
    context: Vec<String>,
    components: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Header {
    Gmm {
        dim: usize,
        n_components: usize,
        condition_map: Vec<MapEntry>,
        explicit_probs: bool,
    },
    Mlp {
        dim: usize,
        layer_widths: Vec<usize>,
        frequencies: usize,
        labels: Vec<String>,
        context_tokens: Vec<String>,
        activation: String,
    },
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, payload) = match self {
            Checkpoint::Gmm(spec) => {
                spec.validate()?;
                let d = spec.dim();
                let mut payload = Vec::new();
                payload.extend(spec.components.iter().map(|c| c.weight));
                for c in &spec.components {
                    payload.extend(&c.mean);
                }
                for c in &spec.components {
                    for row in &c.covariance {
                        payload.extend(row);
                    }
                }
                let explicit = spec.condition_map.iter().any(|e| e.prob.is_some());
                if explicit {
                    payload.extend(spec.condition_map.iter().map(|e| e.prob.unwrap_or(0.0)));
                }
                let header = Header::Gmm {
                    dim: d,
                    n_components: spec.n_components(),
                    condition_map: spec
                        .condition_map
                        .iter()
                        .map(|e| MapEntry {
                            label: e.label.clone(),
                            context: e.context.clone(),
                            components: e.components.clone(),
                        })
                        .collect(),
                    explicit_probs: explicit,
                };
                (header, payload)
            }
            Checkpoint::Mlp(net) => {
                let mut payload = Vec::with_capacity(net.n_parameters());
                for l in &net.layers {
                    payload.extend(&l.weights);
                    payload.extend(&l.bias);
                }
                let header = Header::Mlp {
                    dim: net.dim,
                    layer_widths: net.layer_widths(),
                    frequencies: net.n_frequencies,
                    labels: net.labels.clone(),
                    context_tokens: net.context_tokens.clone(),
                    activation: "silu".into(),
                };
                (header, payload)
            }
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(28 + header.len() + 8 * payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut bytes, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = read_u64(&mut bytes)? as usize;
        if hlen > bytes.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&bytes[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        bytes = &bytes[hlen..];
        let count = read_u64(&mut bytes)? as usize;
        if bytes.len() != count * 8 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header promises {count} values",
                bytes.len()
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(Error::Checkpoint("payload too short".into()))
            }
        };

        match header {
            Header::Gmm {
                dim,
                n_components,
                condition_map,
                explicit_probs,
            } => {
                let weights = take(n_components)?;
                let means = take(n_components * dim)?;
                let covs = take(n_components * dim * dim)?;
                let probs = if explicit_probs {
                    Some(take(condition_map.len())?)
                } else {
                    None
                };
                let components = (0..n_components)
                    .map(|k| Component {
                        weight: weights[k],
                        mean: means[k * dim..(k + 1) * dim].to_vec(),
                        covariance: (0..dim)
                            .map(|i| covs[k * dim * dim + i * dim..k * dim * dim + (i + 1) * dim].to_vec())
                            .collect(),
                    })
                    .collect();
                let condition_map = condition_map
                    .into_iter()
                    .enumerate()
                    .map(|(i, e)| ConditionEntry {
                        label: e.label,
                        context: e.context,
                        components: e.components,
                        prob: probs.as_ref().map(|p| p[i]),
                    })
                    .collect();
                Ok(Checkpoint::Gmm(GmmSpec::new(components, condition_map)?))
            }
            Header::Mlp {
                dim,
                layer_widths,
                frequencies,
                labels,
                context_tokens,
                activation,
            } => {
                if activation != "silu" {
                    return Err(Error::Checkpoint(format!("unknown activation {activation}")));
                }
                let expected = MlpDenoiser::input_width(dim, frequencies, labels.len(), context_tokens.len());
                if layer_widths.len() < 2 || layer_widths[0] != expected || *layer_widths.last().unwrap() != dim {
                    return Err(Error::Checkpoint(format!("inconsistent layer widths {layer_widths:?}")));
                }
                let mut layers = Vec::new();
                for w in layer_widths.windows(2) {
                    let weights = take(w[0] * w[1])?;
                    let bias = take(w[1])?;
                    layers.push(Layer {
                        inputs: w[0],
                        outputs: w[1],
                        weights,
                        bias,
                    });
                }
                Ok(Checkpoint::Mlp(MlpDenoiser {
                    dim,
                    n_frequencies: frequencies,
                    labels,
                    context_tokens,
                    layers,
                }))
            }
        }
    }
}

fn read_exact(bytes: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    bytes
        .read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u64(bytes: &mut &[u8]) -> Result<u64> {
    let mut b8 = [0u8; 8];
    read_exact(bytes, &mut b8)?;
    Ok(u64::from_le_bytes(b8))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{train_mlp, Sample, TrainConfig};
    use crate::noise_channel::LogSnrSampler;
    use proptest::prelude::*;

    fn labeled_spec(w: f64, m: f64, v: f64) -> GmmSpec {
        GmmSpec::new(
            vec![
                Component {
                    weight: w,
                    mean: vec![m, -m / 3.0],
                    covariance: vec![vec![v, 0.1 * v], vec![0.1 * v, v]],
                },
                Component::isotropic(1.0 - w, vec![0.1, 1.0 / 3.0], 0.7),
            ],
            vec![
                ConditionEntry::new("a", vec![0]).in_context(["ctx"]),
                ConditionEntry::new("b", vec![1]).in_context(["ctx"]),
            ],
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn gmm_round_trip_is_bit_exact(w in 0.05f64..0.95, m in -10.0f64..10.0, v in 0.01f64..5.0) {
            let ck = Checkpoint::Gmm(labeled_spec(w, m, v));
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn mlp_round_trip_is_bit_exact() {
        let data: Vec<Sample> = (0..32)
            .map(|i| {
                Sample::new(
                    format!("{i}"),
                    vec![i as f64 / 7.0, -(i as f64) / 9.0],
                    Some(crate::denoisers::Condition::with_context(
                        if i % 2 == 0 { "p" } else { "q" },
                        ["c"],
                    )),
                )
            })
            .collect();
        let cfg = TrainConfig {
            hidden: vec![8],
            steps: 20,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let net = train_mlp(&data, &LogSnrSampler::default(), &cfg).unwrap().denoiser;
        let ck = Checkpoint::Mlp(net);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
    }

    #[test]
    fn header_is_json_with_dimensions() {
        let bytes = Checkpoint::Gmm(labeled_spec(0.5, 1.0, 1.0)).to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        assert_eq!(header["kind"], "gmm");
        assert_eq!(header["dim"], 2);
        assert_eq!(header["n_components"], 2);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = Checkpoint::Gmm(labeled_spec(0.5, 1.0, 1.0)).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }
}
