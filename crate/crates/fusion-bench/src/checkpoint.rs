//! Versioned checkpoint container: the model config as JSON followed by
//! every named parameter with shape metadata and a float32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::nn::ParamSet;

const MAGIC: &[u8; 7] = b"FBCKPT1";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format(format!("{}: {}", path.display(), reason.into()))
}

/// Write the model to `path` in FBCKPT1 format. Parameters are stored
/// in name order as float32, which is the precision the feature files
/// use; reloading quantizes accordingly.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;

    let config = serde_json::to_vec(&model.config)?;
    let len = u32::try_from(config.len())
        .map_err(|_| Error::Format("config JSON exceeds u32 length".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&config)?;

    let count = u32::try_from(model.params.iter().count())
        .map_err(|_| Error::Format("parameter count exceeds u32".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, param) in model.params.iter() {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name {name} exceeds u32 length")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(param.is_bias)])?;
        let dims = param.value.shape();
        let ndim = u32::try_from(dims.len())
            .map_err(|_| Error::Format(format!("parameter {name} rank exceeds u32")))?;
        w.write_all(&ndim.to_le_bytes())?;
        for &d in dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("parameter {name} dim exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in param.value.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a, R: Read> {
    reader: R,
    path: &'a Path,
}

impl<'a, R: Read> Cursor<'a, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.reader
            .read_exact(&mut buf)
            .map_err(|e| format_err(self.path, format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
}

/// Load a checkpoint and rebuild the model with its stored parameters.
/// The parameter inventory must match what the stored config builds:
/// same names, same shapes, same bias flags.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut c = Cursor {
        reader: BufReader::new(file),
        path,
    };
    if c.bytes(MAGIC.len())? != MAGIC {
        return Err(format_err(path, "bad magic, expected FBCKPT1"));
    }
    let config_len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(&c.bytes(config_len)?)
        .map_err(|e| format_err(path, format!("config block: {e}")))?;

    let mut params = ParamSet::new();
    let count = c.u32()? as usize;
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.bytes(name_len)?)
            .map_err(|e| format_err(path, format!("parameter name: {e}")))?;
        let is_bias = match c.u8()? {
            0 => false,
            1 => true,
            other => return Err(format_err(path, format!("bad bias flag {other} for {name}"))),
        };
        let ndim = c.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = c.bytes(4 * n)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(format_err(path, format!("non-finite value in parameter {name}")));
        }
        let value = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| format_err(path, format!("parameter {name}: {e}")))?;
        if params.get(&name).is_some() {
            return Err(format_err(path, format!("duplicate parameter {name}")));
        }
        params.insert(name, value, is_bias);
    }
    let mut trailer = [0u8; 1];
    if c.reader.read(&mut trailer)? != 0 {
        return Err(format_err(path, "trailing bytes after last parameter"));
    }

    // an untrained model with this config defines the expected inventory
    let reference = build_model(&config, 0)?;
    {
        let (mut have, mut want) = (params.iter(), reference.params.iter());
        loop {
            match (have.next(), want.next()) {
                (None, None) => break,
                (Some((hn, hp)), Some((wn, wp))) => {
                    if hn != wn {
                        return Err(format_err(
                            path,
                            format!("parameter inventory mismatch: found {hn}, config expects {wn}"),
                        ));
                    }
                    if hp.value.shape() != wp.value.shape() {
                        return Err(format_err(
                            path,
                            format!(
                                "parameter {hn} has shape {:?}, config expects {:?}",
                                hp.value.shape(),
                                wp.value.shape()
                            ),
                        ));
                    }
                    if hp.is_bias != wp.is_bias {
                        return Err(format_err(path, format!("parameter {hn} bias flag mismatch")));
                    }
                }
                (Some((hn, _)), None) => {
                    return Err(format_err(path, format!("unexpected extra parameter {hn}")))
                }
                (None, Some((wn, _))) => {
                    return Err(format_err(path, format!("missing parameter {wn}")))
                }
            }
        }
    }

    Ok(Model { config, params })
}
