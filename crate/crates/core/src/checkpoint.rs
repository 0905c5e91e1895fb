//! Versioned binary checkpoints: the resolved training config, step counter,
//! every named parameter, Adam moments and rolling loss means.
//!
//! Layout (little endian): magic, `u32` version, `u8` scalar width, config
//! TOML, `u64` step, rolling means, then per parameter its name, shape and
//! values, followed by the Adam first/second moments and per-parameter step
//! counts.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{RollingMeans, TrainConfig};

pub const MAGIC: &[u8; 8] = b"DFLTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub rolling: RollingMeans,
    pub params: Vec<NamedTensor<T>>,
    pub adam_first: Vec<Tensor<T>>,
    pub adam_second: Vec<Tensor<T>>,
    pub adam_steps: Vec<u64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(config: &TrainConfig, step: u64, rolling: &RollingMeans, store: &ParamStore<T>, adam: &Adam<T>) -> Self {
        let (first, second, steps) = adam.moments();
        Self {
            config: config.clone(),
            step,
            rolling: rolling.clone(),
            params: store.iter().map(|(_, p)| NamedTensor { name: p.name.clone(), value: (*p.value).clone() }).collect(),
            adam_first: first.to_vec(),
            adam_second: second.to_vec(),
            adam_steps: steps.to_vec(),
        }
    }

    /// Copies parameters into `store`, matching by name and shape.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameters in checkpoint, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for ((id, name, shape), saved) in ids.into_iter().zip(&self.params) {
            if saved.name != name || saved.value.shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name} {shape:?} vs saved {} {:?}",
                    saved.name,
                    saved.value.shape()
                )));
            }
            store.set(id, saved.value.clone());
        }
        Ok(())
    }

    pub fn restore_adam(&self, adam: &mut Adam<T>) -> Result<()> {
        let (first, _, _) = adam.moments();
        let n = first.len();
        if self.adam_first.len() != n || self.adam_second.len() != n || self.adam_steps.len() != n {
            return Err(Error::CheckpointMismatch("optimizer state size differs from the model".into()));
        }
        adam.restore(self.adam_first.clone(), self.adam_second.clone(), self.adam_steps.clone());
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        w.push(std::mem::size_of::<T>() as u8);
        put_bytes(&mut w, self.config.to_toml().as_bytes());
        put_u64(&mut w, self.step);
        put_f64s(&mut w, &self.rolling.total_g);
        put_f64s(&mut w, &self.rolling.adv_d);
        put_u64(&mut w, self.params.len() as u64);
        for p in &self.params {
            put_bytes(&mut w, p.name.as_bytes());
            put_tensor(&mut w, &p.value);
        }
        for t in self.adam_first.iter().chain(&self.adam_second) {
            put_tensor(&mut w, t);
        }
        for &s in &self.adam_steps {
            put_u64(&mut w, s);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        let text = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| Error::format("checkpoint", e))?;
        let config = TrainConfig::from_toml(&text)?;
        let step = r.u64()?;
        let rolling = RollingMeans { total_g: r.f64s()?, adv_d: r.f64s()? };
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| Error::format("checkpoint", e))?;
            params.push(NamedTensor { name, value: r.tensor(width)? });
        }
        let adam_first = (0..n).map(|_| r.tensor(width)).collect::<Result<Vec<_>>>()?;
        let adam_second = (0..n).map(|_| r.tensor(width)).collect::<Result<Vec<_>>>()?;
        let adam_steps = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { config, step, rolling, params, adam_first, adam_second, adam_steps })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(b);
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    put_u64(w, v.len() as u64);
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_tensor<T: Scalar>(w: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(w, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(w, d as u64);
    }
    for &v in t.data() {
        if std::mem::size_of::<T>() == 4 {
            w.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            w.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))).collect()
    }

    fn tensor<T: Scalar>(&mut self, width: usize) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(width).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        let data = match width {
            4 => raw.chunks(4).map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            8 => raw.chunks(8).map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
            _ => return Err(Error::format("checkpoint", format!("unsupported scalar width {width}"))),
        };
        Ok(Tensor::new(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::params::AdamConfig;

    #[test]
    fn round_trip_and_corruption() {
        let config = TrainConfig { model: ModelConfig::micro(), ..TrainConfig::default() };
        let model = Model::<f32>::new(config.model.clone(), 3).unwrap();
        let adam = Adam::new(&model.store, AdamConfig::default());
        let rolling = RollingMeans { total_g: vec![1.0, 2.0], adv_d: vec![-0.5] };
        let ck = Checkpoint::capture(&config, 17, &rolling, &model.store, &adam);
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.config, config);
        assert_eq!(back.rolling, rolling);
        let mut other = Model::<f32>::new(config.model.clone(), 4).unwrap();
        back.restore_params(&mut other.store).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(other.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut wider = Model::<f32>::new(ModelConfig { embed_dim: 8, ..ModelConfig::micro() }, 3).unwrap();
        assert!(matches!(back.restore_params(&mut wider.store), Err(Error::CheckpointMismatch(_))));
    }
}
