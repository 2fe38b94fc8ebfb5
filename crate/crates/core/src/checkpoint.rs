//! Checkpoint archive: one binary file holding every parameter and buffer
//! tensor keyed by module path, the optimizer moments, the training position
//! and the run configuration text. Little-endian, format stable across runs.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::autodiff::Arr;
use crate::error::{Error, Result};
use crate::trainer::{TrainPosition, Trainer};

const MAGIC: &[u8; 8] = b"CCREID01";

#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub num_identities: usize,
    pub config_text: String,
}

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.u32(b.len() as u32)?;
        self.w.write_all(b)
    }
    fn tensor(&mut self, a: &Arr) -> std::io::Result<()> {
        self.u32(a.ndim() as u32)?;
        for &d in a.shape() {
            self.u32(d as u32)?;
        }
        for &v in a.as_standard_layout().iter() {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn bytes(&mut self) -> std::io::Result<Vec<u8>> {
        let n = self.u32()? as usize;
        let mut b = vec![0u8; n];
        self.r.read_exact(&mut b)?;
        Ok(b)
    }
    fn tensor(&mut self) -> std::io::Result<Arr> {
        let ndim = self.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            self.r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        Ok(Arr::from_shape_vec(IxDyn(&dims), data).unwrap())
    }
}

/// Serializes the trainer's model, buffers and optimizer state.
pub fn save(
    path: &Path,
    trainer: &Trainer,
    num_identities: usize,
    config_text: &str,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer {
        w: std::io::BufWriter::new(file),
    };
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.w.write_all(MAGIC).map_err(io_err)?;
    w.u64(trainer.seed).map_err(io_err)?;
    w.u64(trainer.position.epoch as u64).map_err(io_err)?;
    w.u64(trainer.position.step_in_epoch as u64)
        .map_err(io_err)?;
    w.u64(num_identities as u64).map_err(io_err)?;
    w.bytes(config_text.as_bytes()).map_err(io_err)?;

    w.u32(trainer.store.param_count() as u32).map_err(io_err)?;
    for (_, name, value) in trainer.store.iter_params() {
        w.bytes(name.as_bytes()).map_err(io_err)?;
        w.tensor(value).map_err(io_err)?;
    }
    let buffers: Vec<_> = trainer.store.iter_buffers().collect();
    w.u32(buffers.len() as u32).map_err(io_err)?;
    for (_, name, value) in buffers {
        w.bytes(name.as_bytes()).map_err(io_err)?;
        w.tensor(value).map_err(io_err)?;
    }
    w.u64(trainer.optim.t).map_err(io_err)?;
    for i in 0..trainer.store.param_count() {
        let (m, v) = trainer.optim.moments(i);
        w.tensor(m).map_err(io_err)?;
        w.tensor(v).map_err(io_err)?;
    }
    w.w.flush().map_err(io_err)?;
    Ok(())
}

/// Reads only the metadata header (enough to rebuild the model shell).
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        r: std::io::BufReader::new(file),
    };
    read_meta_from(&mut r, path)
}

fn read_meta_from<R: Read>(r: &mut Reader<R>, path: &Path) -> Result<CheckpointMeta> {
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: "not a checkpoint file (bad magic)".to_string(),
        });
    }
    let seed = r.u64().map_err(io_err)?;
    let epoch = r.u64().map_err(io_err)? as usize;
    let step_in_epoch = r.u64().map_err(io_err)? as usize;
    let num_identities = r.u64().map_err(io_err)? as usize;
    let config_text =
        String::from_utf8(r.bytes().map_err(io_err)?).map_err(|_| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: "config text is not valid UTF-8".to_string(),
        })?;
    Ok(CheckpointMeta {
        seed,
        epoch,
        step_in_epoch,
        num_identities,
        config_text,
    })
}

/// Restores parameters, buffers, optimizer state and position into a trainer
/// built with the same configuration. Tensors are matched by name; any
/// mismatch is an error.
pub fn restore(path: &Path, trainer: &mut Trainer) -> Result<CheckpointMeta> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        r: std::io::BufReader::new(file),
    };
    let io_err = |e: std::io::Error| Error::io(path, e);
    let meta = read_meta_from(&mut r, path)?;

    let n_params = r.u32().map_err(io_err)? as usize;
    if n_params != trainer.store.param_count() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!(
                "checkpoint has {n_params} parameters, model has {}",
                trainer.store.param_count()
            ),
        });
    }
    let mut saved_param_order = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes().map_err(io_err)?).unwrap_or_default();
        let value = r.tensor().map_err(io_err)?;
        let id = trainer
            .store
            .set_param_by_name(&name, value)
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("unknown parameter `{name}` in checkpoint"),
            })?;
        saved_param_order.push(id);
    }
    let n_buffers = r.u32().map_err(io_err)? as usize;
    for _ in 0..n_buffers {
        let name = String::from_utf8(r.bytes().map_err(io_err)?).unwrap_or_default();
        let value = r.tensor().map_err(io_err)?;
        trainer
            .store
            .set_buffer_by_name(&name, value)
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("unknown buffer `{name}` in checkpoint"),
            })?;
    }
    let t = r.u64().map_err(io_err)?;
    let mut m = vec![None; n_params];
    let mut v = vec![None; n_params];
    for &id in &saved_param_order {
        let idx = id_index(id);
        m[idx] = Some(r.tensor().map_err(io_err)?);
        v[idx] = Some(r.tensor().map_err(io_err)?);
    }
    trainer.optim.set_state(
        t,
        m.into_iter().map(Option::unwrap).collect(),
        v.into_iter().map(Option::unwrap).collect(),
    );
    trainer.position = TrainPosition {
        epoch: meta.epoch,
        step_in_epoch: meta.step_in_epoch,
    };
    trainer.seed = meta.seed;
    Ok(meta)
}

fn id_index(id: crate::autodiff::ParamId) -> usize {
    // ParamId is an index into the store's parameter list
    let crate::autodiff::ParamId(i) = id;
    i
}
