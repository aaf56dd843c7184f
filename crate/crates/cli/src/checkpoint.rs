//! Binary checkpoint: magic, version, step counter, the RunConfig snapshot
//! as TOML, then every parameter tensor as little-endian f32 with its name
//! and shape. Save -> load -> save reproduces identical bytes.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use phsa_core::numeric::Matrix;
use phsa_core::trainer::ClassifierParams;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 8] = b"PHSACKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 4;

pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ClassifierParams<Matrix<f32>>,
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    step: u64,
    params: &ClassifierParams<Matrix<f32>>,
) -> CliResult<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());

    let config_text = config.to_toml()?;
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());

    let mut n_tensors: u32 = 0;
    params.for_each(|_, _| n_tensors += 1);
    out.extend_from_slice(&n_tensors.to_le_bytes());
    params.for_each(|name, m| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });

    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> CliResult<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Usage("checkpoint truncated".to_string()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };

    if r.take(8)? != MAGIC {
        return Err(CliError::Usage("not a checkpoint file".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Usage(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let step = r.u64()?;
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| CliError::Usage("checkpoint config is not utf-8".to_string()))?
        .to_string();
    let config = RunConfig::from_toml(&config_text)?;

    let n_tensors = r.u32()? as usize;
    let mut tensors: HashMap<String, Matrix<f32>> = HashMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CliError::Usage("tensor name is not utf-8".to_string()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CliError::Usage(format!(
                "tensor {name}: unsupported dtype tag {dtype}"
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        let m = Matrix::new(rows, cols, data).map_err(CliError::from)?;
        tensors.insert(name, m);
    }

    // rebuild the parameter tree for this config, then fill it by name
    let model_cfg = config.classifier_config();
    let mut params =
        ClassifierParams::<Matrix<f32>>::init(&model_cfg).map_err(CliError::from)?;
    let mut missing = Vec::new();
    params.for_each_mut(|name, slot| match tensors.remove(&name) {
        Some(m) if m.shape() == slot.shape() => *slot = m,
        Some(m) => missing.push(format!(
            "{name}: shape {:?} does not match expected {:?}",
            m.shape(),
            slot.shape()
        )),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(CliError::Usage(format!(
            "checkpoint does not match its config: {}",
            missing.join("; ")
        )));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.keys().cloned().collect();
        return Err(CliError::Usage(format!(
            "checkpoint has unknown tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(Checkpoint {
        config,
        step,
        params,
    })
}
