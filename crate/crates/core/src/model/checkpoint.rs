//! Self-describing checkpoint files.
//!
//! ```text
//! FEDHFT1\n
//! <key>=<value>\n            metadata, keys in sorted order
//! tensor=<name> <rows> <cols>\n   one line per tensor, in payload order
//! end\n
//! <payload>                  each tensor's entries as little-endian f64,
//!                            row-major, in declaration order
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{param, Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &str = "FEDHFT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k == "tensor" || k == "end" {
                return param(format!("checkpoint key/value not encodable: {k:?}"));
            }
            writeln!(out, "{k}={v}")?;
        }
        for (name, m) in &self.tensors {
            if name.contains([' ', '\n']) {
                return param(format!("tensor name not encodable: {name:?}"));
            }
            writeln!(out, "tensor={name} {} {}", m.rows(), m.cols())?;
        }
        writeln!(out, "end")?;
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let bad = |line: usize, msg: &str| Error::Parse {
            row: line,
            column: 0,
            message: msg.to_string(),
        };
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(bad(1, "missing FEDHFT1 magic"));
        }
        let mut meta = BTreeMap::new();
        let mut shapes = Vec::new();
        let mut lineno = 1;
        loop {
            line.clear();
            lineno += 1;
            if reader.read_line(&mut line)? == 0 {
                return Err(bad(lineno, "header not terminated by `end`"));
            }
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| bad(lineno, "expected key=value"))?;
            if k == "tensor" {
                let parts: Vec<&str> = v.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad(lineno, "tensor line needs name rows cols"));
                }
                let rows = parts[1].parse().map_err(|_| bad(lineno, "bad rows"))?;
                let cols = parts[2].parse().map_err(|_| bad(lineno, "bad cols"))?;
                shapes.push((parts[0].to_string(), rows, cols));
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut buf = [0u8; 8];
        for (name, rows, cols) in shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| bad(lineno, "payload truncated"))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Matrix::new(rows, cols, data)?));
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(lineno, "trailing bytes after payload"));
        }
        Ok(Self { meta, tensors })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}
