//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "EVTF" | u32 version | u32 len | config text
//! u32 count | count × (u32 len | name | u32 ndim | ndim × u32 | f32 values)
//! u8 has_optimizer | [f64 lr | f64 momentum | f32 buffers in parameter order]
//! u64 epoch | u64 seed
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EVTF";
const MAX_NAME: usize = 4096;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    /// Number of completed epochs.
    pub epoch: u64,
    pub seed: u64,
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let text = ck.model.config().to_canonical();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let params = &ck.model.params;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_values(w, t.data())?;
    }
    match &ck.optimizer {
        None => w.write_all(&[0])?,
        Some(opt) => {
            w.write_all(&[1])?;
            w.write_all(&opt.lr.to_le_bytes())?;
            w.write_all(&opt.momentum.to_le_bytes())?;
            for b in &opt.buffers {
                write_values(w, b.data())?;
            }
        }
    }
    w.write_all(&ck.epoch.to_le_bytes())?;
    w.write_all(&ck.seed.to_le_bytes())?;
    Ok(())
}

fn write_values(w: &mut impl Write, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, max: usize) -> Result<String> {
        let len = self.u32()? as usize;
        if len > max {
            return Err(Error::Checkpoint(format!("string of {len} bytes exceeds limit")));
        }
        String::from_utf8(self.bytes(len)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut rd = Reader { inner: r };
    if &rd.array::<4>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let text = rd.string(1 << 16)?;
    let config = ModelConfig::from_canonical(&text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut model = Model::<f32>::new(&config, 0)?;
    let count = rd.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, configuration needs {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name = rd.string(MAX_NAME)?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let ndim = rd.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != model.params.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                model.params.get(id).shape()
            )));
        }
        let values = rd.values(shape.iter().product())?;
        model.params.set(id, Tensor::new(&shape, values)?)?;
        seen[id.index()] = true;
    }
    if seen.contains(&false) {
        return Err(Error::Checkpoint("duplicate tensor names".into()));
    }
    let optimizer = match rd.array::<1>()?[0] {
        0 => None,
        1 => {
            let lr = rd.f64()?;
            let momentum = rd.f64()?;
            let mut buffers = Vec::with_capacity(count);
            for (_, _, t) in model.params.iter() {
                buffers.push(Tensor::new(t.shape(), rd.values(t.len())?)?);
            }
            Some(OptimizerState { momentum, lr, buffers })
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    let epoch = rd.u64()?;
    let seed = rd.u64()?;
    let mut rest = Vec::new();
    rd.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { model, optimizer, epoch, seed })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path)?;
    read_checkpoint(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.channels = 4;
        c.attention.spconv_channels = vec![4];
        c.head_widths = vec![8];
        c
    }

    fn bytes(ck: &Checkpoint) -> Vec<u8> {
        let mut v = Vec::new();
        write_checkpoint(&mut v, ck).unwrap();
        v
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let model = Model::<f32>::new(&small(), 9).unwrap();
        let opt = OptimizerState::new(&model.params, 0.01, 0.9);
        let ck = Checkpoint { model, optimizer: Some(opt), epoch: 3, seed: 9 };
        let b = bytes(&ck);
        let back = read_checkpoint(&mut b.as_slice()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.seed, 9);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f32>::new(&small(), 1).unwrap();
        let b = bytes(&Checkpoint { model, optimizer: None, epoch: 0, seed: 1 });
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::CheckpointVersion { found: 2, .. })));
        assert!(read_checkpoint(&mut &b[..b.len() - 3]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(read_checkpoint(&mut long.as_slice()).is_err());
    }
}
