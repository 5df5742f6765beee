//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MGEH" | version u32 | config_len u32 | config bytes ("key=value\n" lines)
//! | param_count u32 | param_count × (name_len u32 | name | rank u32 | rank × dim u32 | f32 data)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::binio::{atomic_write, read_file, ByteReader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGEH";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture configuration plus named `f32` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut cfg = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Usage(format!("config entry `{k}` cannot be encoded")));
            }
            cfg.push_str(k);
            cfg.push('=');
            cfg.push_str(v);
            cfg.push('\n');
        }
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32("config length")? as usize;
        let cfg_at = r.offset();
        let cfg = r.utf8(cfg_len, "config block")?;
        let mut config = BTreeMap::new();
        for line in cfg.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(cfg_at, format!("malformed config line `{line}`")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.offset();
            let name_len = r.u32("name length")? as usize;
            let name = r.utf8(name_len, "parameter name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::format(at, "parameter size overflow"))?;
            let data = r.f32s(n, "parameter data")?;
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            params.insert(name, t).map_err(|e| Error::format(at, e.to_string()))?;
        }
        if !r.is_at_end() {
            return Err(Error::format(r.offset(), "trailing bytes after last parameter"));
        }
        Ok(Checkpoint { config, params })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    atomic_write(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .insert("w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25 - 0.3))
            .unwrap();
        params.insert("b", Tensor::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 7.5]).unwrap()).unwrap();
        let mut config = BTreeMap::new();
        config.insert("d_model".into(), "3".into());
        Checkpoint { config, params }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MGEH");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let a: Vec<u32> = t1.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = t2.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }
}
