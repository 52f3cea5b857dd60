//! Binary checkpoint format.
//!
//! Layout: the magic string `TRLAB`, a format version, the architecture
//! header, then every tensor in declared order as `(name, rows, cols,
//! little-endian f64 data)`. Values round-trip bit-exactly. Files are
//! written to a temporary sibling and renamed into place so a failed
//! save never leaves a partial checkpoint behind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

use super::{CtcHeadKind, ModelConfig, ModelParameters, TransducerMode};

const MAGIC: &[u8; 5] = b"TRLAB";
const VERSION: u32 = 1;

fn write_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

impl ModelParameters {
    /// Serialize parameters and architecture to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument("checkpoint path has no file name".into()))?;
        let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
        let result = (|| -> Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            write_u32(&mut w, VERSION)?;
            let cfg = &self.config;
            w.write_all(&[
                match cfg.mode {
                    TransducerMode::Rnnt => 0,
                    TransducerMode::Hat => 1,
                },
                match cfg.ctc_head {
                    CtcHeadKind::None => 0,
                    CtcHeadKind::Ctc => 1,
                    CtcHeadKind::Fctc => 2,
                    CtcHeadKind::Iam => 3,
                },
                cfg.causal as u8,
            ])?;
            for v in [
                cfg.feature_dim,
                cfg.hidden_dim,
                cfg.vocab_size,
                cfg.blank_id,
                cfg.stride,
                cfg.encoder_layers,
            ] {
                write_u32(&mut w, v as u32)?;
            }
            let mut count = 0u32;
            self.visit_tensors(&mut |_, _, _, _| count += 1);
            write_u32(&mut w, count)?;
            let mut io_err: Option<std::io::Error> = None;
            self.visit_tensors(&mut |name, rows, cols, data| {
                if io_err.is_some() {
                    return;
                }
                let res = (|| -> std::io::Result<()> {
                    write_u16(&mut w, name.len() as u16)?;
                    w.write_all(name.as_bytes())?;
                    write_u32(&mut w, rows as u32)?;
                    write_u32(&mut w, cols as u32)?;
                    for &v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    Ok(())
                })();
                if let Err(e) = res {
                    io_err = Some(e);
                }
            });
            if let Some(e) = io_err {
                return Err(e.into());
            }
            w.flush()?;
            Ok(())
        })();
        match result {
            Ok(()) => {
                std::fs::rename(&tmp, path)?;
                Ok(())
            }
            Err(e) => {
                let _ = std::fs::remove_file(&tmp);
                Err(e)
            }
        }
    }

    /// Load a checkpoint written by [`Self::save`]. Values round-trip
    /// bit-exactly; malformed files report a format error.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mode = match read_u8(&mut r)? {
            0 => TransducerMode::Rnnt,
            1 => TransducerMode::Hat,
            m => return Err(Error::Format(format!("unknown transducer mode byte {m}"))),
        };
        let ctc_head = match read_u8(&mut r)? {
            0 => CtcHeadKind::None,
            1 => CtcHeadKind::Ctc,
            2 => CtcHeadKind::Fctc,
            3 => CtcHeadKind::Iam,
            m => return Err(Error::Format(format!("unknown head kind byte {m}"))),
        };
        let causal = match read_u8(&mut r)? {
            0 => false,
            1 => true,
            m => return Err(Error::Format(format!("bad causal flag byte {m}"))),
        };
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let config = ModelConfig {
            mode,
            ctc_head,
            feature_dim: dims[0],
            hidden_dim: dims[1],
            vocab_size: dims[2],
            blank_id: dims[3],
            stride: dims[4],
            causal,
            encoder_layers: dims[5],
        };
        let mut params = ModelParameters::zeros_for_config(config).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Format(format!("bad architecture header: {m}")),
            other => other,
        })?;

        let count = read_u32(&mut r)? as usize;
        let mut expected = Vec::new();
        params.visit_tensors(&mut |name, rows, cols, _| {
            expected.push((name.to_string(), rows, cols));
        });
        if count != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint stores {count} tensors, architecture needs {}",
                expected.len()
            )));
        }
        let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(count);
        for (name, rows, cols) in &expected {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(truncated)?;
            let stored = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if &stored != name {
                return Err(Error::Format(format!(
                    "tensor order mismatch: found `{stored}`, expected `{name}`"
                )));
            }
            let stored_rows = read_u32(&mut r)? as usize;
            let stored_cols = read_u32(&mut r)? as usize;
            if stored_rows != *rows || stored_cols != *cols {
                return Err(Error::Format(format!(
                    "tensor `{stored}` has shape {stored_rows}x{stored_cols}, expected {rows}x{cols}"
                )));
            }
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf).map_err(truncated)?;
                *v = f64::from_le_bytes(buf);
            }
            tensors.push(data);
        }
        let mut extra = [0u8; 1];
        match r.read(&mut extra) {
            Ok(0) => {}
            Ok(_) => return Err(Error::Format("trailing bytes after tensors".into())),
            Err(e) => return Err(e.into()),
        }

        let mut cursor = 0;
        params.visit_tensors_mut(&mut |_, data| {
            data.copy_from_slice(&tensors[cursor]);
            cursor += 1;
        });
        Ok(params)
    }
}
