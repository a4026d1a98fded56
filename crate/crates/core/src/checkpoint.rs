//! Flat binary checkpoint format for model parameters.
//!
//! Layout (all integers u64 little-endian, floats f64 little-endian):
//!   magic "FSCKPT01" | group count | per group:
//!     name length | UTF-8 name | tensor count | per tensor:
//!       rank | shape... | row-major payload
//!
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerGroup, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSCKPT01";

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(params.num_layers() as u64).to_le_bytes())?;
    for group in params.layers() {
        w.write_all(&(group.name.len() as u64).to_le_bytes())?;
        w.write_all(group.name.as_bytes())?;
        w.write_all(&(group.tensors.len() as u64).to_le_bytes())?;
        for t in &group.tensors {
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let groups = read_u64(&mut r)? as usize;
    let mut layers = Vec::with_capacity(groups);
    for _ in 0..groups {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("layer name is not UTF-8".to_string()))?;
        let tensor_count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        layers.push(LayerGroup { name, tensors });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last group".to_string()));
    }
    ModelParams::from_layers(layers)
}
