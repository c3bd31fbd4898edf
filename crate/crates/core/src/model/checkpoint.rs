//! Checkpoint format: `CVAECKPT`, a `u32` version, a length-prefixed JSON
//! header, then named blobs (`u16` name length, name, `u8` rank, `u64`
//! dims, little-endian `f64` values).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CorrVae, ModelSpec};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::numcore::{Rng, Tensor};
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVAECKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    #[serde(default)]
    extra: Value,
}

fn put_blob<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::format("checkpoint", "truncated"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl<T: Scalar> CorrVae<T> {
    fn state_blobs(&self) -> Vec<(String, Tensor<T>)> {
        let mut blobs = Vec::new();
        self.visit("", &mut |name, t| blobs.push((name, t.clone())));
        blobs.push(("mask.tau".into(), Tensor::scalar(self.mask.tau)));
        for (i, l) in self.head.layers.iter().enumerate() {
            blobs.push((format!("head.{i}.power.left"), l.power.left.clone()));
            blobs.push((format!("head.{i}.power.right"), l.power.right.clone()));
            blobs.push((format!("head.{i}.sigma_hat"), Tensor::scalar(l.sigma_hat)));
        }
        blobs
    }

    pub fn to_bytes(&self, extra: &Value) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            spec: self.spec.clone(),
            extra: extra.clone(),
        })
        .expect("header serializes");
        let blobs = self.state_blobs();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, t) in &blobs {
            put_blob(&mut out, name, t);
        }
        out
    }

    /// Rebuilds a model and returns the free-form `extra` header value.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Value)> {
        let mut r = Reader(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()? as usize;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format("checkpoint", "blob name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.u64().map(|b| T::of(f64::from_bits(b))))
                .collect::<Result<Vec<_>>>()?;
            blobs.insert(name, Tensor::new(shape, data)?);
        }
        if !r.0.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }

        let mut model = Self::new(header.spec, &mut Rng::new(0))?;
        let mut take = |name: &str, target: &mut Tensor<T>| -> Result<()> {
            let t = blobs
                .remove(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing blob `{name}`")))?;
            if t.shape() != target.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("blob `{name}` has shape {:?}, expected {:?}", t.shape(), target.shape()),
                ));
            }
            *target = t;
            Ok(())
        };
        let mut status = Ok(());
        model.visit_mut("", &mut |name, t| {
            if status.is_ok() {
                status = take(&name, t);
            }
        });
        status?;
        let mut tau = Tensor::scalar(T::zero());
        take("mask.tau", &mut tau)?;
        model.mask.tau = tau.item();
        for (i, l) in model.head.layers.iter_mut().enumerate() {
            take(&format!("head.{i}.power.left"), &mut l.power.left)?;
            take(&format!("head.{i}.power.right"), &mut l.power.right)?;
            let mut s = Tensor::scalar(T::zero());
            take(&format!("head.{i}.sigma_hat"), &mut s)?;
            l.sigma_hat = s.item();
        }
        if let Some(name) = blobs.keys().next() {
            return Err(Error::format("checkpoint", format!("unexpected blob `{name}`")));
        }
        Ok((model, header.extra))
    }

    pub fn save(&self, path: &Path, extra: &Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(extra)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Value)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_spec;
    use super::*;
    use crate::config::MaskMode;

    #[test]
    fn roundtrip_is_exact() {
        let mut model = CorrVae::<f64>::new(tiny_spec(MaskMode::Learned), &mut Rng::new(4)).unwrap();
        model.mask.logits.set(0, 0, 1.25);
        model.mask.tau = 0.3;
        let extra = serde_json::json!({"epochs": 3});
        let bytes = model.to_bytes(&extra);
        let (back, e) = CorrVae::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(e, extra);
        assert_eq!(back.to_bytes(&extra), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let model = CorrVae::<f64>::new(tiny_spec(MaskMode::Learned), &mut Rng::new(4)).unwrap();
        let bytes = model.to_bytes(&Value::Null);
        assert!(CorrVae::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CorrVae::<f64>::from_bytes(&bad).is_err());
    }
}
