//! Versioned checkpoint container: model config echo plus every named
//! tensor (learnable weights and batch-norm buffers) as raw float64.
//! Save -> load -> save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MuGNetParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MGCKP\x00\x00\x01";
/// Guards against absurd allocation requests from corrupt headers.
const MAX_SANE_FIELD: usize = 1 << 20;
const MAX_SANE_ELEMENTS: usize = 1 << 28;

pub fn save_checkpoint(params: &MuGNetParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    let config_text = params.config.to_text();
    w.write_all(&(config_text.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(config_text.as_bytes()).map_err(io_err)?;

    let named = params.named();
    w.write_all(&(named.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    for (name, tensor) in named {
        w.write_all(&(name.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&[tensor.requires_grad as u8]).map_err(io_err)?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())
            .map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<MuGNetParams> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let corrupt = |msg: String| Error::Corrupt {
        kind: "checkpoint",
        path: path.display().to_string(),
        msg,
    };
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic or unsupported version".into()));
    }
    let config_len = read_u64(&mut r).map_err(io_err)? as usize;
    if config_len > MAX_SANE_FIELD {
        return Err(corrupt(format!("implausible config length {config_len}")));
    }
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes).map_err(io_err)?;
    let config_text =
        String::from_utf8(config_bytes).map_err(|_| corrupt("config is not utf-8".into()))?;
    let config = ModelConfig::parse(&config_text)?;

    // Structure comes from the config; the stored tensors fill it in.
    let mut params = MuGNetParams::init(&config, 0)?;
    let count = read_u64(&mut r).map_err(io_err)? as usize;
    let mut loaded: std::collections::HashMap<String, Tensor> =
        std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r).map_err(io_err)? as usize;
        if name_len > MAX_SANE_FIELD {
            return Err(corrupt(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| corrupt("name is not utf-8".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io_err)?;
        let rank = read_u64(&mut r).map_err(io_err)? as usize;
        if rank > 8 {
            return Err(corrupt(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(io_err)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > MAX_SANE_ELEMENTS {
            return Err(corrupt(format!("implausible tensor size {numel}")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io_err)?;
            data.push(f64::from_le_bytes(b));
        }
        let mut tensor = Tensor::new(data, &shape)?;
        tensor.requires_grad = flag[0] != 0;
        loaded.insert(name, tensor);
    }

    for (name, slot) in params.named_mut() {
        let stored = loaded
            .remove(&name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if stored.shape() != slot.shape() {
            return Err(corrupt(format!(
                "tensor {name}: stored shape {:?} vs expected {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        let keep_grad_flag = slot.requires_grad;
        *slot = stored;
        slot.requires_grad = keep_grad_flag;
        slot.grad = None;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(params)
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
