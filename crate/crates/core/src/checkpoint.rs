//! Binary checkpoint format.
//!
//! ```text
//! "SEBN"  u32 version
//! u32 len, model config text (model.* lines)
//! u32 len, SE placement tag
//! u32 entry count, then per entry:
//!   u32 len, name   u8 trainable   u8 dtype   u8 rank   u32 dims[rank]   payload
//! ```
//!
//! All integers and floats are little-endian. Parameters use dtype 0
//! (`f32`). Batch-norm running statistics are stored as
//! `<layer>.running_mean` / `<layer>.running_var` (dtype 0) and
//! `<layer>.num_batches_tracked` (dtype 2, one `u64`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autograd::BnStats;
use crate::error::{Error, Result};
use crate::model::net::SE_PLACEMENT;
use crate::model::{ModelConfig, ParameterStore};
use crate::tensor::{Element, Tensor};

/// Buffered running mean, variance and batch count for one BN layer.
type PartialStats = (Option<Vec<f32>>, Option<Vec<f32>>, Option<u64>);

pub const MAGIC: &[u8; 4] = b"SEBN";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = <f32 as Element>::DTYPE_CODE;
const DTYPE_U64: u8 = 2;
const MAX_RANK: u8 = 8;

const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";
const COUNT_SUFFIX: &str = ".num_batches_tracked";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub se_placement: String,
    pub params: ParameterStore<f32>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParameterStore<f32>) -> Self {
        Self {
            model,
            se_placement: SE_PLACEMENT.to_string(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_str(w, &self.model.to_text())?;
        write_str(w, &self.se_placement)?;
        let n_entries = self.params.len() + 3 * self.params.bn_layers().count();
        w.write_u32::<LittleEndian>(len_u32(n_entries)?)?;
        for (name, t) in self.params.iter() {
            write_header(w, name, t.requires_grad(), DTYPE_F32, t.shape())?;
            write_f32s(w, t.data())?;
        }
        for (layer, st) in self.params.bn_layers() {
            let c = [st.channels()];
            write_header(w, &format!("{layer}{MEAN_SUFFIX}"), false, DTYPE_F32, &c)?;
            write_f32s(w, &st.mean)?;
            write_header(w, &format!("{layer}{VAR_SUFFIX}"), false, DTYPE_F32, &c)?;
            write_f32s(w, &st.var)?;
            write_header(w, &format!("{layer}{COUNT_SUFFIX}"), false, DTYPE_U64, &[1])?;
            w.write_u64::<LittleEndian>(st.num_batches)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt_err("file too short for a checkpoint header"))?;
        if &magic != MAGIC {
            return Err(fmt_err("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(fmt_err(&format!(
                "unsupported checkpoint version {version} (reader supports {VERSION})"
            )));
        }
        let model = ModelConfig::from_text(&read_str(r)?).map_err(|e| fmt_err(&format!("bad model config: {e}")))?;
        let se_placement = read_str(r)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut params = ParameterStore::new();
        let mut partial: indexmap::IndexMap<String, PartialStats> = indexmap::IndexMap::new();
        for _ in 0..n {
            let name = read_str(r)?;
            let trainable = match r.read_u8()? {
                0 => false,
                1 => true,
                f => return Err(fmt_err(&format!("{name}: bad trainable flag {f}"))),
            };
            let dtype = r.read_u8()?;
            let rank = r.read_u8()?;
            if rank == 0 || rank > MAX_RANK {
                return Err(fmt_err(&format!("{name}: bad rank {rank}")));
            }
            let dims: Vec<usize> = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<_>>()?;
            let count: usize = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| fmt_err(&format!("{name}: dims overflow")))?;
            if let Some(layer) = name.strip_suffix(COUNT_SUFFIX) {
                if dtype != DTYPE_U64 || count != 1 {
                    return Err(fmt_err(&format!("{name}: expected a single u64")));
                }
                partial.entry(layer.to_string()).or_default().2 = Some(r.read_u64::<LittleEndian>()?);
                continue;
            }
            if dtype != DTYPE_F32 {
                return Err(fmt_err(&format!("{name}: unsupported dtype {dtype}")));
            }
            let data = read_f32s(r, count)?;
            if let Some(layer) = name.strip_suffix(MEAN_SUFFIX) {
                partial.entry(layer.to_string()).or_default().0 = Some(data);
            } else if let Some(layer) = name.strip_suffix(VAR_SUFFIX) {
                partial.entry(layer.to_string()).or_default().1 = Some(data);
            } else {
                let t = Tensor::new(dims, data)
                    .map_err(|e| fmt_err(&format!("{name}: {e}")))?
                    .with_requires_grad(trainable);
                params.insert(name, t).map_err(|e| fmt_err(&e.to_string()))?;
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(fmt_err("trailing bytes after the last entry"));
        }
        for (layer, parts) in partial {
            let (Some(mean), Some(var), Some(num_batches)) = parts else {
                return Err(fmt_err(&format!("incomplete running statistics for {layer}")));
            };
            if mean.len() != var.len() {
                return Err(fmt_err(&format!("{layer}: mean and variance lengths differ")));
            }
            params
                .insert_bn(layer, BnStats { mean, var, num_batches })
                .map_err(|e| fmt_err(&e.to_string()))?;
        }
        Ok(Self {
            model,
            se_placement,
            params,
        })
    }
}

fn fmt_err(msg: &str) -> Error {
    Error::Format(format!("checkpoint: {msg}"))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| fmt_err("length exceeds 32 bits"))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(len_u32(s.len())?)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 1 << 20 {
        return Err(fmt_err("string field too long"));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| fmt_err("string field is not UTF-8"))
}

fn write_header(w: &mut impl Write, name: &str, trainable: bool, dtype: u8, dims: &[usize]) -> Result<()> {
    write_str(w, name)?;
    w.write_u8(u8::from(trainable))?;
    w.write_u8(dtype)?;
    w.write_u8(u8::try_from(dims.len()).map_err(|_| fmt_err("rank too large"))?)?;
    for &d in dims {
        w.write_u32::<LittleEndian>(len_u32(d)?)?;
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)?;
    Ok(out)
}
