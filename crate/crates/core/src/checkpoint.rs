//! Versioned binary checkpoint archive: named parameter groups, optimizer
//! state, step counter, and a config snapshot. Tensors are raw
//! little-endian `f64`, so save → load → save is byte-identical.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::nn::AdamW;

const MAGIC: &[u8; 4] = b"SDCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: IndexMap<String, ArrayD<f64>>,
    pub v: IndexMap<String, ArrayD<f64>>,
}

impl OptimizerState {
    pub fn from_adamw(opt: &AdamW) -> Self {
        Self {
            step: opt.step,
            m: opt.m.clone(),
            v: opt.v.clone(),
        }
    }

    pub fn apply_to(&self, opt: &mut AdamW) {
        opt.step = self.step;
        opt.m = self.m.clone();
        opt.v = self.v.clone();
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config: Config,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

fn write_tensor_map(w: &mut impl Write, map: &IndexMap<String, ArrayD<f64>>) -> Result<()> {
    w.write_all(&(map.len() as u32).to_le_bytes())?;
    for (name, tensor) in map {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensor_map(r: &mut impl Read) -> Result<IndexMap<String, ArrayD<f64>>> {
    let mut map = IndexMap::new();
    let count = read_u32(r)?;
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = read_u8(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        map.insert(
            name,
            ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
                .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?,
        );
    }
    Ok(map)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}
fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;

        let config_json = serde_json::to_vec(&self.config)?;
        w.write_all(&(config_json.len() as u32).to_le_bytes())?;
        w.write_all(&config_json)?;

        let params: IndexMap<String, ArrayD<f64>> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        write_tensor_map(&mut w, &params)?;

        match &self.optimizer {
            Some(opt) => {
                w.write_all(&[1u8])?;
                w.write_all(&opt.step.to_le_bytes())?;
                write_tensor_map(&mut w, &opt.m)?;
                write_tensor_map(&mut w, &opt.v)?;
            }
            None => w.write_all(&[0u8])?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint archive",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {version}"
            )));
        }
        let step = read_u64(&mut r)?;
        let config_len = read_u32(&mut r)? as usize;
        let mut config_json = vec![0u8; config_len];
        r.read_exact(&mut config_json)?;
        let config: Config = serde_json::from_slice(&config_json)?;

        let raw_params = read_tensor_map(&mut r)?;
        let mut params = ParamStore::new();
        for (name, tensor) in raw_params {
            params.insert(name, tensor);
        }

        let optimizer = match read_u8(&mut r)? {
            0 => None,
            1 => {
                let opt_step = read_u64(&mut r)?;
                let m = read_tensor_map(&mut r)?;
                let v = read_tensor_map(&mut r)?;
                Some(OptimizerState { step: opt_step, m, v })
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "bad optimizer flag byte {other}"
                )))
            }
        };
        Ok(Self {
            step,
            config,
            params,
            optimizer,
        })
    }

    /// Write `path`'s file name into the directory's `latest` pointer.
    pub fn write_latest(dir: &Path, filename: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("latest"), format!("{filename}\n"))?;
        Ok(())
    }

    pub fn latest_path(dir: &Path) -> Result<PathBuf> {
        let name = std::fs::read_to_string(dir.join("latest"))?;
        Ok(dir.join(name.trim()))
    }

    /// Group → (tensor count, element count), for `inspect-checkpoint`.
    pub fn group_summary(&self) -> Vec<(String, usize, usize)> {
        let mut groups: IndexMap<String, (usize, usize)> = IndexMap::new();
        for (name, tensor) in self.params.iter() {
            let group = name.split('.').next().unwrap_or("?").to_string();
            let entry = groups.entry(group).or_insert((0, 0));
            entry.0 += 1;
            entry.1 += tensor.len();
        }
        groups
            .into_iter()
            .map(|(g, (n, e))| (g, n, e))
            .collect()
    }
}
