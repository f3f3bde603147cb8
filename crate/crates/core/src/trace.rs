//! Top-K page selection traces and the `FXTK` binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FXTK"  u32 version=1  u32 D  u16 L  u16 H  u16 K
//! per step:  u32 N_s  then L*H records of K u32 page indices
//! ```
//!
//! Records are in `(layer, head)` order. A head that selected fewer than `K`
//! pages (pool smaller than the budget) pads its record with [`PAD`].

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::types::HeadId;

pub const MAGIC: &[u8; 4] = b"FXTK";
pub const VERSION: u32 = 1;
/// Filler for unused slots of a record.
pub const PAD: u32 = u32::MAX;
const HEADER_LEN: u64 = 4 + 4 + 4 + 2 + 2 + 2;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("offset 0: bad magic {0:?}, expected \"FXTK\"")]
    BadMagic([u8; 4]),
    #[error("offset 4: unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("offset {offset}: malformed header: {reason}")]
    BadHeader { offset: u64, reason: &'static str },
    #[error("offset {offset}: truncated trace")]
    Truncated { offset: u64 },
    #[error("offset {offset}: trailing bytes after last step")]
    TrailingBytes { offset: u64 },
    #[error("offset {offset}: index exceeds pool ({index} >= {pool})")]
    IndexExceedsPool { offset: u64, index: u32, pool: u32 },
    #[error("offset {offset}: duplicate page index {index}")]
    DuplicateIndex { offset: u64, index: u32 },
    #[error("offset {offset}: candidate pool shrank from {prev} to {now}")]
    PoolShrank { offset: u64, prev: u32, now: u32 },
    #[error("offset {offset}: page index after padding")]
    MisplacedPadding { offset: u64 },
    #[error("record for step {step} has {got} heads, expected {expected}")]
    ShapeMismatch {
        step: usize,
        got: usize,
        expected: usize,
    },
    #[error("selection of {got} pages exceeds K={k}")]
    TooManyPages { got: usize, k: u16 },
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-step top-K page selections of every head, shape `[D, L, H, K]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKTrace {
    pub sample_id: String,
    layers: u16,
    heads: u16,
    k: u16,
    pools: Vec<u32>,
    // D * L * H * K, PAD-filled
    data: Vec<u32>,
}

fn record_len(layers: u16, heads: u16, k: u16) -> usize {
    layers as usize * heads as usize * k as usize
}

fn step_offset(layers: u16, heads: u16, k: u16, step: usize) -> u64 {
    HEADER_LEN + step as u64 * (4 + 4 * record_len(layers, heads, k) as u64)
}

impl TopKTrace {
    pub fn new(sample_id: impl Into<String>, layers: u16, heads: u16, k: u16) -> Self {
        assert!(
            layers > 0 && heads > 0 && k > 0,
            "trace dimensions must be positive"
        );
        Self {
            sample_id: sample_id.into(),
            layers,
            heads,
            k,
            pools: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn layers(&self) -> u16 {
        self.layers
    }

    pub fn heads_per_layer(&self) -> u16 {
        self.heads
    }

    pub fn k(&self) -> u16 {
        self.k
    }

    pub fn steps(&self) -> usize {
        self.pools.len()
    }

    pub fn pool_at(&self, step: usize) -> u32 {
        self.pools[step]
    }

    pub fn pools(&self) -> &[u32] {
        &self.pools
    }

    /// The pages selected by `head` at `step`, without padding.
    pub fn selection(&self, step: usize, head: HeadId) -> &[u32] {
        let k = self.k as usize;
        let base = (step * self.layers as usize * self.heads as usize + head.flat(self.heads)) * k;
        let rec = &self.data[base..base + k];
        let len = rec.iter().position(|&p| p == PAD).unwrap_or(k);
        &rec[..len]
    }

    /// Append one decode step. `selections` is in flat `(layer, head)` order.
    pub fn push_step(&mut self, pool: u32, selections: &[Vec<u32>]) -> Result<(), TraceError> {
        let step = self.steps();
        let offset = step_offset(self.layers, self.heads, self.k, step);
        let expected = self.layers as usize * self.heads as usize;
        if selections.len() != expected {
            return Err(TraceError::ShapeMismatch {
                step,
                got: selections.len(),
                expected,
            });
        }
        if let Some(&prev) = self.pools.last() {
            if pool < prev {
                return Err(TraceError::PoolShrank {
                    offset,
                    prev,
                    now: pool,
                });
            }
        }
        let mut record = Vec::with_capacity(record_len(self.layers, self.heads, self.k));
        let mut seen = HashSet::new();
        for (h, sel) in selections.iter().enumerate() {
            if sel.len() > self.k as usize {
                return Err(TraceError::TooManyPages {
                    got: sel.len(),
                    k: self.k,
                });
            }
            seen.clear();
            for (j, &p) in sel.iter().enumerate() {
                let at = offset + 4 + 4 * (h * self.k as usize + j) as u64;
                if p >= pool {
                    return Err(TraceError::IndexExceedsPool {
                        offset: at,
                        index: p,
                        pool,
                    });
                }
                if !seen.insert(p) {
                    return Err(TraceError::DuplicateIndex {
                        offset: at,
                        index: p,
                    });
                }
            }
            record.extend_from_slice(sel);
            record.resize((h + 1) * self.k as usize, PAD);
        }
        self.pools.push(pool);
        self.data.extend_from_slice(&record);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), TraceError> {
        let mut w = BufWriter::new(w);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.steps() as u32).to_le_bytes())?;
        w.write_all(&self.layers.to_le_bytes())?;
        w.write_all(&self.heads.to_le_bytes())?;
        w.write_all(&self.k.to_le_bytes())?;
        let rec = record_len(self.layers, self.heads, self.k);
        for (s, &pool) in self.pools.iter().enumerate() {
            w.write_all(&pool.to_le_bytes())?;
            for &p in &self.data[s * rec..(s + 1) * rec] {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parse and validate a trace. `sample_id` is not stored in the container.
    pub fn read_from<R: Read>(r: R, sample_id: impl Into<String>) -> Result<Self, TraceError> {
        let mut r = Counting {
            inner: BufReader::new(r),
            pos: 0,
        };
        let mut magic = [0u8; 4];
        r.take(&mut magic)?;
        if &magic != MAGIC {
            return Err(TraceError::BadMagic(magic));
        }
        let mut b4 = [0u8; 4];
        let mut b2 = [0u8; 2];
        r.take(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(TraceError::UnsupportedVersion(version));
        }
        r.take(&mut b4)?;
        let steps = u32::from_le_bytes(b4) as usize;
        r.take(&mut b2)?;
        let layers = u16::from_le_bytes(b2);
        r.take(&mut b2)?;
        let heads = u16::from_le_bytes(b2);
        r.take(&mut b2)?;
        let k = u16::from_le_bytes(b2);
        if layers == 0 || heads == 0 || k == 0 {
            return Err(TraceError::BadHeader {
                offset: 12,
                reason: "L, H and K must be positive",
            });
        }

        let mut trace = TopKTrace::new(sample_id, layers, heads, k);
        let n_heads = layers as usize * heads as usize;
        let mut raw = vec![0u8; 4 * record_len(layers, heads, k)];
        let mut selections = vec![Vec::with_capacity(k as usize); n_heads];
        for _ in 0..steps {
            r.take(&mut b4)?;
            let pool = u32::from_le_bytes(b4);
            let rec_start = r.pos;
            r.take(&mut raw)?;
            for (h, sel) in selections.iter_mut().enumerate() {
                sel.clear();
                let mut padded = false;
                for j in 0..k as usize {
                    let i = h * k as usize + j;
                    let p = u32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap());
                    if p == PAD {
                        padded = true;
                    } else if padded {
                        return Err(TraceError::MisplacedPadding {
                            offset: rec_start + 4 * i as u64,
                        });
                    } else {
                        sel.push(p);
                    }
                }
            }
            trace.push_step(pool, &selections)?;
        }
        let mut extra = [0u8; 1];
        if r.inner.read(&mut extra)? != 0 {
            return Err(TraceError::TrailingBytes { offset: r.pos });
        }
        Ok(trace)
    }
}

struct Counting<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Counting<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<(), TraceError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => TraceError::Truncated { offset: self.pos },
            _ => TraceError::Io(e),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }
}

/// Write `trace` to `path` in the `FXTK` format.
pub fn save_trace(trace: &TopKTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let f = std::fs::File::create(path)?;
    trace.write_to(f)
}

/// Read and validate an `FXTK` file. The sample id is the file stem.
pub fn load_trace(path: impl AsRef<Path>) -> Result<TopKTrace, TraceError> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TopKTrace::read_from(std::fs::File::open(path)?, id)
}
