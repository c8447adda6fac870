//! Binary checkpoints: `"SDCK"`, version, JSON config, then named `f32`
//! tensors. All integers are little-endian `u32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::ByteReader;
use crate::nn::model::{DenoiserConfig, DenoiserModel};
use crate::nn::params::ParamStore;

const MAGIC: &[u8; 4] = b"SDCK";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn checkpoint_bytes(model: &DenoiserModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    let config = serde_json::to_vec(model.config())?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    let p = &model.params;
    for id in p.ids() {
        let name = p.name(id).as_bytes();
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name);
        put_u32(&mut out, p.shape(id).len())?;
        for &d in p.shape(id) {
            put_u32(&mut out, d)?;
        }
        for &v in p.value(id) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<DenoiserModel> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let config: DenoiserConfig = serde_json::from_slice(r.take(len)?)?;
    config.validate()?;
    let mut params = ParamStore::new();
    while r.remaining() > 0 {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        params.insert(name, &shape, values)?;
    }
    DenoiserModel::from_params(config, params)
}

pub fn save_checkpoint(model: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::Backbone;

    #[test]
    fn round_trip_is_exact() {
        let mut m = DenoiserModel::new(DenoiserConfig::toy(), 9).unwrap();
        let id = m.params.ids().nth(3).unwrap();
        m.params.value_mut(id)[0] = 0.1f32 as f64;
        let back = model_from_bytes(&checkpoint_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let m = DenoiserModel::new(DenoiserConfig::toy(), 9).unwrap();
        let mut bytes = checkpoint_bytes(&m).unwrap();
        // Swap the embedded config for the conv backbone.
        let conv = DenoiserConfig {
            backbone: Backbone::Conv,
            ..DenoiserConfig::toy()
        };
        let old_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let new = serde_json::to_vec(&conv).unwrap();
        let mut patched = bytes[..8].to_vec();
        patched.extend_from_slice(&(new.len() as u32).to_le_bytes());
        patched.extend_from_slice(&new);
        patched.extend_from_slice(&bytes[12 + old_len..]);
        assert!(matches!(model_from_bytes(&patched), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 2);
        assert!(model_from_bytes(&bytes).is_err());
        assert!(model_from_bytes(b"SDMB\x01\0\0\0").is_err());
    }
}
