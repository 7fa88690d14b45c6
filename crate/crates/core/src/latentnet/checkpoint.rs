use std::fs;
use std::path::Path;

use super::{LatentError, NetConfig, NetworkParams, Tensor};
use crate::container::{self, Entry, TensorData};

fn err(msg: impl Into<String>) -> LatentError {
    LatentError::Checkpoint(msg.into())
}

/// Every tensor as `f32`, in layer-table order.
pub fn write_checkpoint(params: &NetworkParams<f32>) -> Vec<u8> {
    let entries: Vec<Entry> = params
        .tensors
        .iter()
        .map(|t| Entry { name: t.name.clone(), shape: t.shape.clone(), data: TensorData::F32(t.data.clone()) })
        .collect();
    container::encode(&entries)
}

/// Parses a checkpoint without interpreting tensor names.
pub fn read_tensors(bytes: &[u8]) -> Result<Vec<Tensor<f32>>, LatentError> {
    container::decode(bytes)
        .map_err(|e| err(e.0))?
        .into_iter()
        .map(|e| match e.data {
            TensorData::F32(data) => Ok(Tensor { name: e.name, shape: e.shape, data }),
            TensorData::F64(_) => Err(err(format!("{}: expected f32", e.name))),
        })
        .collect()
}

/// Parses a checkpoint and checks it against the layer table of `config`.
pub fn read_checkpoint(bytes: &[u8], config: &NetConfig) -> Result<NetworkParams<f32>, LatentError> {
    config.validate()?;
    let tensors = read_tensors(bytes)?;
    let table = config.layer_table();
    if tensors.len() != table.len() {
        return Err(err(format!("{} tensors, expected {}", tensors.len(), table.len())));
    }
    for (t, (name, shape)) in tensors.iter().zip(&table) {
        if t.name != *name || t.shape != *shape {
            return Err(err(format!("found {} {:?}, expected {name} {shape:?}", t.name, t.shape)));
        }
    }
    Ok(NetworkParams { config: *config, tensors })
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams<f32>) -> Result<(), LatentError> {
    fs::write(path, write_checkpoint(params)).map_err(|e| err(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path, config: &NetConfig) -> Result<NetworkParams<f32>, LatentError> {
    let bytes = fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = NetConfig::with_latent_dim(10);
        let mut p = NetworkParams::<f32>::init(cfg, 17).unwrap();
        p.tensors[1].data[0] = f32::MIN_POSITIVE / 3.0;
        p.tensors[3].data[0] = -0.0;
        let bytes = write_checkpoint(&p);
        let back = read_checkpoint(&bytes, &cfg).unwrap();
        for (a, b) in p.tensors.iter().zip(&back.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let abits: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn manifest_layout() {
        let cfg = NetConfig::default();
        let bytes = write_checkpoint(&NetworkParams::<f32>::zeros(cfg).unwrap());
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("enc.conv1.w f32 16,1,5,5 0\nenc.conv1.b f32 16 1600\n"));
    }

    #[test]
    fn mismatches_are_reported() {
        let cfg = NetConfig::with_latent_dim(10);
        let bytes = write_checkpoint(&NetworkParams::<f32>::zeros(cfg).unwrap());
        assert!(read_checkpoint(&bytes, &NetConfig::with_latent_dim(20)).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1], &cfg).is_err());
    }
}
