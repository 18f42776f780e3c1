//! Checkpoint persistence: magic `DRSL`, a 32-bit version, a JSON config
//! snapshot, a length-prefixed name table, then all tensor payloads as
//! 32-bit IEEE-754 little-endian values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{ConfigSnapshot, DynRslModel};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DRSL";
pub const VERSION: u32 = 1;

struct Counter<W: Write> {
    inner: W,
    written: u64,
}

impl<W: Write> Counter<W> {
    fn new(inner: W) -> Self {
        Counter { inner, written: 0 }
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }

    fn put_u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }
}

struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            detail: format!("truncated while reading {what} ({n} bytes)"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn take_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Serialize named tensors (f64 in memory, f32 on disk) and the config
/// snapshot. Byte-identical output for identical state.
pub fn write_checkpoint<W: Write>(
    w: W,
    snapshot: &ConfigSnapshot,
    params: &[(String, crate::tensor::Tensor)],
) -> Result<()> {
    let mut w = Counter::new(w);
    w.put(&MAGIC)?;
    w.put_u32(VERSION)?;
    let cfg = serde_json::to_string(snapshot).map_err(|e| Error::Config {
        what: format!("config snapshot serialization failed: {e}"),
    })?;
    w.put_u32(cfg.len() as u32)?;
    w.put(cfg.as_bytes())?;
    w.put_u32(params.len() as u32)?;
    for (name, t) in params {
        w.put_u32(name.len() as u32)?;
        w.put(name.as_bytes())?;
        let shape = t.shape();
        w.put_u32(shape.len() as u32)?;
        for &d in shape {
            w.put_u32(d as u32)?;
        }
    }
    for (_, t) in params {
        for v in t.data().iter() {
            w.put(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// A parsed checkpoint: the config snapshot plus named f32 payloads.
pub struct CheckpointData {
    pub snapshot: ConfigSnapshot,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<CheckpointData> {
    let mut r = Reader::new(r);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.take_u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let cfg_len = r.take_u32("config length")? as usize;
    let cfg_off = r.offset;
    let cfg_bytes = r.take(cfg_len, "config snapshot")?;
    let snapshot: ConfigSnapshot = serde_json::from_slice(&cfg_bytes).map_err(|e| Error::Format {
        offset: cfg_off,
        detail: format!("config snapshot is not valid JSON: {e}"),
    })?;
    let n = r.take_u32("tensor count")? as usize;
    let mut names = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.take_u32("name length")? as usize;
        let name_off = r.offset;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: name_off,
            detail: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.take_u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.take_u32("dimension")? as usize);
        }
        names.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(n);
    for (name, shape) in names {
        let count: usize = shape.iter().product();
        let bytes = r.take(count * 4, &format!("payload of {name}"))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, values));
    }
    Ok(CheckpointData { snapshot, tensors })
}

pub fn save_checkpoint(path: &Path, model: &DynRslModel) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, &model.cfg.snapshot(), &model.named_params())
}

/// Restore parameters into an existing model. Every stored tensor must
/// match the model's parameter set and shapes exactly.
pub fn load_checkpoint(path: &Path, model: &DynRslModel) -> Result<()> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let data = read_checkpoint(f)?;
    apply_checkpoint(&data, model)
}

pub fn apply_checkpoint(data: &CheckpointData, model: &DynRslModel) -> Result<()> {
    let params = model.named_params();
    if data.tensors.len() != params.len() {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "checkpoint holds {} tensors, model has {}",
                data.tensors.len(),
                params.len()
            ),
        });
    }
    for ((name, shape, values), (want_name, p)) in data.tensors.iter().zip(&params) {
        if name != want_name {
            return Err(Error::Format {
                offset: 0,
                detail: format!("tensor {name:?} does not match expected {want_name:?}"),
            });
        }
        if shape != p.shape() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                detail: format!("{name}: stored {shape:?} vs model {:?}", p.shape()),
            });
        }
        let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        p.set_data(&wide)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::harness::model::ModelConfig;
    use crate::harness::scene::caption_vocab;
    use crate::patchify::PatchifyConfig;

    fn tiny(seed: u64, d_model: usize) -> DynRslModel {
        let mut enc = EncoderConfig::new(caption_vocab());
        enc.d_model = d_model;
        enc.n_layers = 1;
        enc.n_heads = 4;
        enc.d_ff = 2 * d_model;
        enc.max_text_len = 16;
        enc.max_stream_tokens = 32;
        let patchify = PatchifyConfig {
            global_side: 16,
            region_side: 8,
            patch_px: 8,
            token_budget: 64,
        };
        let mut cfg = ModelConfig::new(enc, patchify);
        cfg.d_proj = 8;
        cfg.init_seed = seed;
        DynRslModel::new(cfg).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny(1, 16);
        let mut first = Vec::new();
        write_checkpoint(&mut first, &model.cfg.snapshot(), &model.named_params()).unwrap();
        let data = read_checkpoint(first.as_slice()).unwrap();
        // perturb, then restore
        for (_, p) in model.named_params() {
            let bumped: Vec<f64> = p.to_vec().iter().map(|v| v + 0.25).collect();
            p.set_data(&bumped).unwrap();
        }
        apply_checkpoint(&data, &model).unwrap();
        let mut second = Vec::new();
        write_checkpoint(&mut second, &model.cfg.snapshot(), &model.named_params()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let model = tiny(2, 16);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model.cfg.snapshot(), &model.named_params()).unwrap();
        bytes[0] = b'X';
        match read_checkpoint(bytes.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = tiny(3, 16);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model.cfg.snapshot(), &model.named_params()).unwrap();
        bytes[4] = 99;
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_reports_an_offset() {
        let model = tiny(4, 16);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model.cfg.snapshot(), &model.named_params()).unwrap();
        bytes.truncate(bytes.len() - 3);
        match read_checkpoint(bytes.as_slice()) {
            Err(Error::Format { offset, detail }) => {
                assert!(offset > 0, "{detail}");
            }
            other => panic!("expected format error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn mismatched_width_is_a_shape_error() {
        let small = tiny(5, 16);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &small.cfg.snapshot(), &small.named_params()).unwrap();
        let data = read_checkpoint(bytes.as_slice()).unwrap();
        let wide = tiny(6, 32);
        assert!(matches!(
            apply_checkpoint(&data, &wide),
            Err(Error::Shape { .. })
        ));
    }
}
