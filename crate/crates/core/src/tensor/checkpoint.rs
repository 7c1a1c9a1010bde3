//! Binary weight checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "MSCC1"
//! u32 meta_count   { str key, str value }*
//! u32 tensor_count { str name, u32 ndim, u64 dim*, f64 value* }*
//! u8  has_optimizer
//!     [f64 lr, f64 beta1, f64 beta2, f64 epsilon, u64 t,
//!      u32 count { str name, u64 len, f64 m*, f64 v* }*]
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes. Values are always
//! stored as f64 regardless of the in-memory scalar type.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{Adam, AdamConfig, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 5] = b"MSCC1";

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    /// Per parameter: name, first moment, second moment.
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn capture<T: Real>(adam: &Adam<T>, names: &[String]) -> Self {
        let to64 = |v: &Vec<T>| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        Self {
            config: *adam.config(),
            step: adam.step_count(),
            moments: names
                .iter()
                .zip(adam.first_moments().iter().zip(adam.second_moments()))
                .map(|(n, (m, v))| (n.clone(), to64(m), to64(v)))
                .collect(),
        }
    }

    pub fn restore<T: Real>(&self) -> Result<Adam<T>> {
        let conv = |v: &Vec<f64>| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let m = self.moments.iter().map(|(_, m, _)| conv(m)).collect();
        let v = self.moments.iter().map(|(_, _, v)| conv(v)).collect();
        Adam::from_parts(self.config, m, v, self.step)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(&mut w, self.meta.len())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        write_u32(&mut w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            write_u32(&mut w, t.shape().len())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_f64s(&mut w, t.data())?;
        }
        match &self.optimizer {
            None => w.write_all(&[0]),
            Some(opt) => {
                w.write_all(&[1])?;
                for x in [opt.config.lr, opt.config.beta1, opt.config.beta2, opt.config.epsilon] {
                    w.write_all(&x.to_le_bytes())?;
                }
                w.write_all(&opt.step.to_le_bytes())?;
                write_u32(&mut w, opt.moments.len())?;
                for (name, m, v) in &opt.moments {
                    write_str(&mut w, name)?;
                    w.write_all(&(m.len() as u64).to_le_bytes())?;
                    write_f64s(&mut w, m)?;
                    write_f64s(&mut w, v)?;
                }
                Ok(())
            }
        }
    }

    pub fn read_from(mut r: impl Read) -> io::Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "missing MSCC1 header"));
        }
        let mut meta = Vec::new();
        for _ in 0..read_u32(&mut r)? {
            meta.push((read_str(&mut r)?, read_str(&mut r)?));
        }
        let mut tensors = Vec::new();
        for _ in 0..read_u32(&mut r)? {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)?;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let data = read_f64s(&mut r, len)?;
            let t = Tensor::new(shape, data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            tensors.push((name, t));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let optimizer = match flag[0] {
            0 => None,
            1 => {
                let mut cfg = [0.0; 4];
                for c in &mut cfg {
                    *c = read_f64(&mut r)?;
                }
                let step = read_u64(&mut r)?;
                let mut moments = Vec::new();
                for _ in 0..read_u32(&mut r)? {
                    let name = read_str(&mut r)?;
                    let len = read_u64(&mut r)? as usize;
                    let m = read_f64s(&mut r, len)?;
                    let v = read_f64s(&mut r, len)?;
                    moments.push((name, m, v));
                }
                Some(OptimizerState {
                    config: AdamConfig {
                        lr: cfg[0],
                        beta1: cfg[1],
                        beta2: cfg[2],
                        epsilon: cfg[3],
                    },
                    step,
                    moments,
                })
            }
            other => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("bad optimizer flag {other}"),
                ))
            }
        };
        Ok(Self {
            meta,
            tensors,
            optimizer,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "count exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn write_f64s<T: Real>(w: &mut impl Write, values: &[T]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_str(r: &mut impl Read) -> io::Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn read_f64s(r: &mut impl Read, len: usize) -> io::Result<Vec<f64>> {
    let mut b = vec![0u8; len * 8];
    r.read_exact(&mut b)?;
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer() {
        let ckpt = Checkpoint {
            meta: vec![("arch".into(), "b3".into())],
            tensors: vec![
                ("conv.kernel".into(), Tensor::from_fn([2, 1, 3, 3], |i| i as f64 / 7.0)),
                ("conv.bias".into(), Tensor::new([2], vec![-0.0, 1e-300]).unwrap()),
            ],
            optimizer: Some(OptimizerState {
                config: AdamConfig::default(),
                step: 12,
                moments: vec![("conv.kernel".into(), vec![0.5; 18], vec![0.25; 18])],
            }),
        };
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..5], b"MSCC1");
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta_value("arch"), Some("b3"));
    }

    #[test]
    fn rejects_foreign_and_truncated_input() {
        assert!(Checkpoint::read_from(&b"MSCC0\0\0\0\0"[..]).is_err());
        let bytes = Checkpoint::default().to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(Checkpoint::read_from(bytes.as_slice()).unwrap(), Checkpoint::default());
    }
}
