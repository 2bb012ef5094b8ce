//! SODM named-array checkpoints.
//!
//! Little-endian: magic `SODM`, u32 version, u32 array count, then per array
//! u16 name length, UTF-8 name, u8 ndims, u32 dims, f64 row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::gda::GdaModel;
use crate::gmodel::TransformParams;
use crate::numcore::nn::{Linear, Mlp};
use crate::numcore::{Adam, Tensor};
use crate::training::{Predictor, TrainState};

pub const MAGIC: &[u8; 4] = b"SODM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a SODM checkpoint")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no array `{0}`")]
    Missing(String),
    #[error("array `{name}` is invalid: {msg}")]
    Array { name: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    arrays: Vec<(String, Tensor)>,
}

fn split_u64(v: u64) -> Tensor {
    Tensor::vector(vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]).expect("two finite entries")
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `meta.seed` and `meta.config_hash`, each stored as `[hi32, lo32]`.
    pub fn with_meta(seed: u64, config_hash: u64) -> Self {
        let mut c = Self::new();
        c.push("meta.seed", split_u64(seed));
        c.push("meta.config_hash", split_u64(config_hash));
        c
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(name, Tensor::scalar(v));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: u64) {
        self.push(name, split_u64(v));
    }

    pub fn arrays(&self) -> &[(String, Tensor)] {
        &self.arrays
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(CheckpointError::Array { name: name.into(), msg: "expected a scalar".into() });
        }
        Ok(t.data()[0])
    }

    pub fn u64(&self, name: &str) -> Result<u64, CheckpointError> {
        let t = self.get(name)?;
        let bad = || CheckpointError::Array { name: name.into(), msg: "expected [hi32, lo32]".into() };
        if t.len() != 2 {
            return Err(bad());
        }
        let part = |v: f64| {
            if v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(bad())
            }
        };
        Ok(part(t.data()[0])? << 32 | part(t.data()[1])?)
    }

    pub fn seed(&self) -> Result<u64, CheckpointError> {
        self.u64("meta.seed")
    }

    pub fn config_hash(&self) -> Result<u64, CheckpointError> {
        self.u64("meta.config_hash")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.shape().len() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?
                .to_string();
            let nd = r.take(1)?[0] as usize;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Array { name: name.clone(), msg: e.to_string() })?;
            arrays.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arrays })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut b = Vec::new();
        r.read_to_end(&mut b)?;
        Self::from_bytes(&b)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn put_linear(&mut self, prefix: &str, l: &Linear) {
        self.push(format!("{prefix}.weight"), l.weight.clone());
        self.push(format!("{prefix}.bias"), l.bias.clone());
    }

    pub fn linear(&self, prefix: &str) -> Result<Linear, CheckpointError> {
        let w = self.get(&format!("{prefix}.weight"))?.clone();
        let b = self.get(&format!("{prefix}.bias"))?.clone();
        Linear::new(w, b).map_err(|e| CheckpointError::Array { name: prefix.into(), msg: e.to_string() })
    }

    /// Layers as `{prefix}.{i}.weight` / `.bias`, plus `{prefix}.output_tanh`.
    pub fn put_mlp(&mut self, prefix: &str, m: &Mlp) {
        for (i, l) in m.layers().iter().enumerate() {
            self.put_linear(&format!("{prefix}.{i}"), l);
        }
        self.push_scalar(format!("{prefix}.output_tanh"), if m.output_tanh() { 1.0 } else { 0.0 });
    }

    pub fn mlp(&self, prefix: &str) -> Result<Mlp, CheckpointError> {
        let mut layers = Vec::new();
        while self.contains(&format!("{prefix}.{}.weight", layers.len())) {
            layers.push(self.linear(&format!("{prefix}.{}", layers.len()))?);
        }
        let tanh = self.scalar(&format!("{prefix}.output_tanh"))? != 0.0;
        Mlp::from_layers(layers, tanh).map_err(|e| CheckpointError::Array { name: prefix.into(), msg: e.to_string() })
    }

    pub fn put_gda(&mut self, prefix: &str, gda: &GdaModel) {
        let d = gda.dim();
        for (k, c) in gda.classes().iter().enumerate() {
            self.push(format!("{prefix}.{k}.mean"), Tensor::from_parts(vec![d], c.mean.clone()));
            self.push(format!("{prefix}.{k}.cov"), Tensor::from_parts(vec![d, d], c.cov.clone()));
            self.push_scalar(format!("{prefix}.{k}.eps"), c.eps);
            self.push_scalar(format!("{prefix}.{k}.prior"), c.prior);
        }
    }

    pub fn gda(&self, prefix: &str) -> Result<GdaModel, CheckpointError> {
        let mut parts = Vec::new();
        while self.contains(&format!("{prefix}.{}.mean", parts.len())) {
            let k = parts.len();
            parts.push((
                self.get(&format!("{prefix}.{k}.mean"))?.data().to_vec(),
                self.get(&format!("{prefix}.{k}.cov"))?.data().to_vec(),
                self.scalar(&format!("{prefix}.{k}.eps"))?,
                self.scalar(&format!("{prefix}.{k}.prior"))?,
            ));
        }
        GdaModel::from_parts(parts).map_err(|e| CheckpointError::Array { name: prefix.into(), msg: e.to_string() })
    }

    pub fn put_transform(&mut self, g: &TransformParams) {
        self.put_mlp("g.es", &g.es);
        self.put_mlp("g.ev", &g.ev);
        self.put_mlp("g.dec", &g.dec);
        self.put_linear("g.head", &g.head);
    }

    pub fn transform(&self) -> Result<TransformParams, CheckpointError> {
        TransformParams::from_parts(self.mlp("g.es")?, self.mlp("g.ev")?, self.mlp("g.dec")?, self.linear("g.head")?)
            .map_err(|e| CheckpointError::Array { name: "g".into(), msg: e.to_string() })
    }

    pub fn put_predictor(&mut self, p: &Predictor) {
        self.put_mlp("p.g", &p.g);
        self.put_linear("p.h", &p.h);
    }

    pub fn predictor(&self) -> Result<Predictor, CheckpointError> {
        Predictor::from_parts(self.mlp("p.g")?, self.linear("p.h")?)
            .map_err(|e| CheckpointError::Array { name: "p".into(), msg: e.to_string() })
    }

    /// Predictor, multipliers, counters and Adam moments.
    pub fn put_train_state(&mut self, s: &TrainState) {
        self.put_predictor(&s.predictor);
        self.push_scalar("state.beta1", s.beta1);
        self.push_scalar("state.beta2", s.beta2);
        self.push_u64("state.epoch", s.epoch as u64);
        self.push_u64("state.step", s.step as u64);
        self.push_scalar("adam.lr", s.adam.lr);
        self.push_u64("adam.t", s.adam.step_count());
        let shapes: Vec<Vec<usize>> = s.predictor.params().iter().map(|p| p.shape().to_vec()).collect();
        for (i, (m, shape)) in s.adam.first_moments().iter().zip(&shapes).enumerate() {
            self.push(format!("adam.m.{i}"), Tensor::from_parts(shape.clone(), m.clone()));
        }
        for (i, (v, shape)) in s.adam.second_moments().iter().zip(&shapes).enumerate() {
            self.push(format!("adam.v.{i}"), Tensor::from_parts(shape.clone(), v.clone()));
        }
    }

    pub fn train_state(&self) -> Result<TrainState, CheckpointError> {
        let predictor = self.predictor()?;
        let n = predictor.params().len();
        let moments = |tag: &str| -> Result<Vec<Vec<f64>>, CheckpointError> {
            (0..n).map(|i| Ok(self.get(&format!("adam.{tag}.{i}"))?.data().to_vec())).collect()
        };
        let adam = Adam::from_parts(self.scalar("adam.lr")?, self.u64("adam.t")?, moments("m")?, moments("v")?)
            .map_err(|e| CheckpointError::Array { name: "adam".into(), msg: e.to_string() })?;
        Ok(TrainState {
            predictor,
            beta1: self.scalar("state.beta1")?,
            beta2: self.scalar("state.beta2")?,
            adam,
            epoch: self.u64("state.epoch")? as usize,
            step: self.u64("state.step")? as usize,
        })
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            CheckpointError::Malformed(format!("need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gda::Shrinkage;
    use crate::rng;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.push("ab", Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"SODM");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 2);
        assert_eq!(&b[14..16], b"ab");
        assert_eq!(b[16], 2);
        assert_eq!(b.len(), 16 + 1 + 8 + 16);
        assert_eq!(f64::from_le_bytes(b[25..33].try_into().unwrap()), 1.0);
    }

    #[test]
    fn meta_round_trip() {
        let c = Checkpoint::with_meta(u64::MAX - 5, 0x0123_4567_89ab_cdef);
        let d = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(d.seed().unwrap(), u64::MAX - 5);
        assert_eq!(d.config_hash().unwrap(), 0x0123_4567_89ab_cdef);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new();
        c.push_scalar("x", 1.0);
        let b = c.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(CheckpointError::Malformed(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Magic)));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(9))));
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn models_round_trip_byte_identically() {
        let mut r = rng::stream(4, 0);
        let g = TransformParams::init(6, 2, 2, 3, &[5, 4], &mut r);
        let p = Predictor::init(6, &[7], 3, 3, &mut r);
        let x = Tensor::matrix(8, 2, (0..16).map(|i| ((i * 7) % 5) as f64 + 0.1 * i as f64).collect()).unwrap();
        let gda = GdaModel::fit(&x, &[0, 0, 0, 1, 1, 1, 1, 0], 2, Shrinkage::default()).unwrap();
        let mut c = Checkpoint::with_meta(1, 2);
        c.put_transform(&g);
        c.put_predictor(&p);
        c.put_gda("gda", &gda);
        let bytes = c.to_bytes();
        let d = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(d.transform().unwrap(), g);
        assert_eq!(d.predictor().unwrap(), p);
        let gda2 = d.gda("gda").unwrap();
        assert_eq!(gda2.log_density(&[0.3, 1.0], 1).unwrap(), gda.log_density(&[0.3, 1.0], 1).unwrap());

        let mut e = Checkpoint::with_meta(1, 2);
        e.put_transform(&d.transform().unwrap());
        e.put_predictor(&d.predictor().unwrap());
        e.put_gda("gda", &gda2);
        assert_eq!(e.to_bytes(), bytes);
    }
}
