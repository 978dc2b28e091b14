//! Versioned binary checkpoint: magic "S2SF0001", a JSON config snapshot,
//! the step counter, named tensor records (rank, dims, little-endian f32
//! payload), and optional optimizer moments. Every model parameter appears
//! exactly once under its canonical name; loading into a mismatched
//! configuration is an error.

use std::io::{Read, Write};
use std::path::Path;

use seqlab_core::arch::{Model, ModelConfig, TensorBundle};
use seqlab_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"S2SF0001";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    /// (beta-corrected step, per-tensor (m, v) moments) when saved.
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Debug, Clone)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Checkpoint {
        Checkpoint { config: model.config.clone(), step, tensors: model.param_bundle(), optimizer: None }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| CliError::Io(format!("config serialization: {e}")))?;
        write_u32(&mut buf, config_json.len() as u32);
        buf.extend_from_slice(&config_json);
        write_u64(&mut buf, self.step);
        write_u32(&mut buf, self.tensors.len() as u32);
        for (name, tensor) in &self.tensors {
            write_tensor(&mut buf, name, tensor);
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                write_u64(&mut buf, opt.step);
                write_u32(&mut buf, opt.moments.len() as u32);
                for (name, m, v) in &opt.moments {
                    write_tensor(&mut buf, name, m);
                    write_tensor(&mut buf, name, v);
                }
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
        }
        let mut file = std::fs::File::create(path)
            .map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))?;
        file.write_all(&buf)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let mut cursor = &bytes[..];
        let mut magic = [0u8; 8];
        read_exact(&mut cursor, &mut magic)?;
        if &magic != MAGIC {
            return Err(CliError::Core(seqlab_core::Error::CheckpointIncompatible(format!(
                "bad magic in {}",
                path.display()
            ))));
        }
        let config_len = read_u32(&mut cursor)? as usize;
        let mut config_json = vec![0u8; config_len];
        read_exact(&mut cursor, &mut config_json)?;
        let config: ModelConfig = serde_json::from_slice(&config_json).map_err(|e| {
            CliError::Core(seqlab_core::Error::CheckpointIncompatible(format!(
                "config snapshot unreadable: {e}"
            )))
        })?;
        let step = read_u64(&mut cursor)?;
        let n = read_u32(&mut cursor)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            tensors.push(read_tensor(&mut cursor)?);
        }
        let mut flag = [0u8; 1];
        read_exact(&mut cursor, &mut flag)?;
        let optimizer = if flag[0] == 1 {
            let opt_step = read_u64(&mut cursor)?;
            let count = read_u32(&mut cursor)? as usize;
            let mut moments = Vec::with_capacity(count);
            for _ in 0..count {
                let (name, m) = read_tensor(&mut cursor)?;
                let (_, v) = read_tensor(&mut cursor)?;
                moments.push((name, m, v));
            }
            Some(OptimizerSnapshot { step: opt_step, moments })
        } else {
            None
        };
        Ok(Checkpoint { config, step, tensors, optimizer })
    }

    /// Rebuild the model this checkpoint describes. Hybrid columns come from
    /// the snapshot itself, so no separate pretrained source is needed.
    pub fn instantiate(&self) -> Result<Model> {
        let mut model = Model::build_unloaded(&self.config, 0).map_err(CliError::Core)?;
        model.load_bundle(&self.tensors).map_err(CliError::Core)?;
        Ok(model)
    }

    pub fn bundle(&self) -> TensorBundle {
        self.tensors.iter().cloned().collect()
    }
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    write_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    write_u32(buf, tensor.rank() as u32);
    for &d in &tensor.shape {
        write_u32(buf, d as u32);
    }
    for &x in &tensor.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn read_exact(cursor: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if cursor.len() < out.len() {
        return Err(CliError::Core(seqlab_core::Error::CheckpointIncompatible(
            "truncated checkpoint".into(),
        )));
    }
    out.copy_from_slice(&cursor[..out.len()]);
    *cursor = &cursor[out.len()..];
    Ok(())
}

fn read_u32(cursor: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cursor, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cursor: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cursor, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(cursor: &mut &[u8]) -> Result<(String, Tensor)> {
    let name_len = read_u32(cursor)? as usize;
    let mut name_bytes = vec![0u8; name_len];
    read_exact(cursor, &mut name_bytes)?;
    let name = String::from_utf8(name_bytes).map_err(|_| {
        CliError::Core(seqlab_core::Error::CheckpointIncompatible("non-utf8 tensor name".into()))
    })?;
    let rank = read_u32(cursor)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(cursor)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut b = [0u8; 4];
        read_exact(cursor, &mut b)?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    let tensor = Tensor::new(shape, data).map_err(|_| {
        CliError::Core(seqlab_core::Error::CheckpointIncompatible("bad tensor shape".into()))
    })?;
    Ok((name, tensor))
}
