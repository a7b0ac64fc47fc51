//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TMIL" | version u32 | input_dim, model_dim, heads, landmarks, classes (u32 each)
//! then 22 tensors in parameter order, each:
//! rank u32 | extents u32 × rank | payload f64 × numel
//! ```
//!
//! Parameter order is [`BagClassifier::parameters`]: reducer, class token,
//! first attention layer, conv kernels, second attention layer, head.
//! `f64` payloads round-trip bit-exactly. Knobs that shape no tensor
//! (`pinv_iters`, `pos_encoding`) are not stored; the loader fills in the
//! defaults and callers may override them on the loaded config.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use super::{BagClassifier, ModelConfig, PosEncoding, DEFAULT_PINV_ITERS};
use crate::tensor::TensorError;

pub const MAGIC: [u8; 4] = *b"TMIL";
pub const VERSION: u32 = 1;

/// Names for the 22 parameters, in serialisation order; used in errors.
const PARAM_NAMES: [&str; 22] = [
    "reducer_w",
    "reducer_b",
    "class_token",
    "layer1.w_q",
    "layer1.w_k",
    "layer1.w_v",
    "layer1.w_o",
    "layer1.ln_gamma",
    "layer1.ln_beta",
    "ppeg.k3",
    "ppeg.k5",
    "ppeg.k7",
    "layer2.w_q",
    "layer2.w_k",
    "layer2.w_v",
    "layer2.w_o",
    "layer2.ln_gamma",
    "layer2.ln_beta",
    "head_gamma",
    "head_beta",
    "head_w",
    "head_b",
];

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    /// Malformed bytes; `offset` is where reading went wrong.
    Format { offset: usize, why: String },
    Shape(TensorError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::Format { offset, why } => {
                write!(f, "malformed checkpoint at byte {offset}: {why}")
            }
            CheckpointError::Shape(e) => write!(f, "checkpoint shapes: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io(e) => Some(e),
            CheckpointError::Shape(e) => Some(e),
            CheckpointError::Format { .. } => None,
        }
    }
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<TensorError> for CheckpointError {
    fn from(e: TensorError) -> Self {
        CheckpointError::Shape(e)
    }
}

/// Writes `model` to `path`, replacing any existing file.
pub fn save(model: &BagClassifier, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [cfg.input_dim, cfg.model_dim, cfg.heads, cfg.landmarks, cfg.classes] {
        out.extend_from_slice(&encode_extent(dim).to_le_bytes());
    }
    for t in model.parameters() {
        out.extend_from_slice(&encode_extent(t.shape().len()).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&encode_extent(e).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn encode_extent(x: usize) -> u32 {
    u32::try_from(x).expect("tensor extent exceeds the checkpoint format")
}

/// Reads a model from `path`. `pinv_iters` and `pos_encoding` are set to
/// the defaults ([`DEFAULT_PINV_ITERS`], grid convolution).
pub fn load(path: impl AsRef<Path>) -> Result<BagClassifier, CheckpointError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::Format {
            offset: 0,
            why: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Format {
            offset: at,
            why: format!("unsupported version {version}, expected {VERSION}"),
        });
    }

    let mut dims = [0usize; 5];
    for (d, what) in dims.iter_mut().zip(["input_dim", "model_dim", "heads", "landmarks", "classes"]) {
        *d = r.u32(what)? as usize;
    }
    let config = ModelConfig {
        input_dim: dims[0],
        model_dim: dims[1],
        heads: dims[2],
        landmarks: dims[3],
        pinv_iters: DEFAULT_PINV_ITERS,
        classes: dims[4],
        pos_encoding: PosEncoding::Ppeg,
    };
    let mut model = BagClassifier::zeros(config)?;

    for (name, tensor) in PARAM_NAMES.iter().zip(model.parameters_mut()) {
        let at = r.pos;
        let rank = r.u32(name)? as usize;
        if rank == 0 || rank > 4 {
            return Err(CheckpointError::Format {
                offset: at,
                why: format!("{name}: implausible rank {rank}"),
            });
        }
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u32(name)? as usize);
        }
        if extents != tensor.shape() {
            return Err(CheckpointError::Format {
                offset: at,
                why: format!("{name}: stored shape {extents:?} does not match expected {:?}", tensor.shape()),
            });
        }
        let data = tensor.data_mut();
        for slot in data.iter_mut() {
            *slot = r.f64(name)?;
        }
    }

    if r.pos != buf.len() {
        return Err(CheckpointError::Format {
            offset: r.pos,
            why: format!("{} trailing bytes after the last parameter", buf.len() - r.pos),
        });
    }
    Ok(model)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format {
                offset: self.pos,
                why: format!("file ends inside {what}"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}
