//! Checkpoint container: a text header followed by named binary arrays.
//!
//! ```text
//! TGIF-CHECKPOINT
//! version = 1
//! config_hash = <sha256 hex>
//! stage = 1
//! step = 500
//! arrays = N
//! config_lines = M
//! <M lines of resolved config>
//! end
//! ```
//! Each array then follows as: name length (u32), UTF-8 name, rank (u32),
//! extents (u32 each), row-major f64 values; all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::DenseArray;
use crate::objective::Stage;

pub const CHECKPOINT_MAGIC: &str = "TGIF-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub stage: Stage,
    /// Optimizer steps completed in `stage`.
    pub step: usize,
    pub arrays: Vec<(String, DenseArray)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let lines: Vec<&str> = self.config_text.lines().collect();
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\nversion = {CHECKPOINT_VERSION}\nconfig_hash = {}\nstage = {}\nstep = {}\narrays = {}\nconfig_lines = {}\n",
            self.config_hash,
            self.stage,
            self.step,
            self.arrays.len(),
            lines.len()
        )
        .into_bytes();
        for l in lines {
            out.extend_from_slice(l.as_bytes());
            out.push(b'\n');
        }
        out.extend_from_slice(b"end\n");
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
            for &e in a.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for x in a.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut pos = 0;
        let mut line = || -> Result<&str> {
            let rest = &bytes[pos.min(bytes.len())..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
        };
        if line()? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let l = line()?;
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(" = "))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected '{key} = …', got '{l}'")))
        };
        let int = |s: String, what: &str| -> Result<u64> { s.parse().map_err(|_| bad(format!("bad {what} '{s}'"))) };
        let version = int(field("version")?, "version")?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = field("config_hash")?;
        let stage = Stage::from_number(int(field("stage")?, "stage")?).map_err(|e| bad(e.to_string()))?;
        let step = int(field("step")?, "step")? as usize;
        let n_arrays = int(field("arrays")?, "array count")? as usize;
        let n_lines = int(field("config_lines")?, "line count")? as usize;
        let mut config_text = String::new();
        for _ in 0..n_lines {
            config_text.push_str(line()?);
            config_text.push('\n');
        }
        if line()? != "end" {
            return Err(bad("missing header terminator".into()));
        }

        let mut cur = Cursor { bytes, pos };
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name_len = cur.u32().ok_or_else(|| bad("truncated array name".into()))? as usize;
            let name = cur
                .take(name_len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| bad("bad array name".into()))?
                .to_string();
            let rank = cur.u32().ok_or_else(|| bad(format!("{name}: truncated rank")))? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|e| e as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("{name}: truncated extents")))?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 8).ok_or_else(|| bad(format!("{name}: truncated data")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let a = DenseArray::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            arrays.push((name, a));
        }
        if cur.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self {
            config_hash,
            config_text,
            stage,
            step,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4-byte chunk")))
    }
}
