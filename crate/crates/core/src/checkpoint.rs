//! Binary checkpoints: a versioned header describing the model shape,
//! followed by every tensor as little-endian f64 blocks.
//!
//! ```text
//! magic    8 bytes  "IAHASHCK"
//! version  u32
//! kind     u8       0 = full, 1 = flat baseline
//! c d b q in_channels hidden pyramid_channels   u64 each
//! levels   u64 count, then u64 per level
//! config   32 bytes (sha256 of the run config, zeros if unknown)
//! tensors  10 x (rows u64, cols u64, rows*cols f64)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{ConvStack, PyramidConfig};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelParams, ModelShape};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"IAHASHCK";
pub const VERSION: u32 = 1;

/// Parameters plus the hash of the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_hash: [u8; 32],
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

/// Canonical byte encoding.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let s = &p.shape;
    let mut out = Vec::with_capacity(128 + 8 * p.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(p.kind.tag());
    for v in [s.categories, s.dim(), s.bits, s.semantic_bits, s.in_channels, s.hidden, s.pyramid.channels] {
        put_u64(&mut out, v);
    }
    put_u64(&mut out, s.pyramid.levels.len());
    for &g in &s.pyramid.levels {
        put_u64(&mut out, g);
    }
    out.extend_from_slice(&ckpt.config_hash);
    for (_, m) in p.tensors() {
        put_u64(&mut out, m.rows());
        put_u64(&mut out, m.cols());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Invalid(format!("checkpoint truncated while reading {what}"))),
        }
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Invalid(format!("checkpoint field {what} out of range")))
    }
}

fn mismatch(field: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::CheckpointMismatch {
        field,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(mismatch("magic", String::from_utf8_lossy(MAGIC), String::from_utf8_lossy(magic)));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(mismatch("version", VERSION, version));
    }
    let tag = r.take(1, "kind")?[0];
    let kind = ModelKind::from_tag(tag).ok_or_else(|| mismatch("kind", "0 or 1", tag))?;
    let categories = r.u64("categories")?;
    let dim = r.u64("dim")?;
    let bits = r.u64("bits")?;
    let semantic_bits = r.u64("semantic_bits")?;
    let in_channels = r.u64("in_channels")?;
    let hidden = r.u64("hidden")?;
    let channels = r.u64("pyramid.channels")?;
    let nlevels = r.u64("pyramid.levels")?;
    if nlevels > 64 {
        return Err(Error::Invalid(format!("checkpoint declares {nlevels} pyramid levels")));
    }
    let levels = (0..nlevels).map(|_| r.u64("pyramid.levels")).collect::<Result<Vec<_>>>()?;
    let shape = ModelShape {
        categories,
        bits,
        semantic_bits,
        in_channels,
        hidden,
        pyramid: PyramidConfig { levels, channels },
    };
    shape.validate()?;
    if shape.dim() != dim {
        return Err(mismatch("dim", shape.dim(), dim));
    }
    let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");

    let expected = ModelParams::expected_shapes(kind, &shape);
    let mut tensors = Vec::with_capacity(10);
    for (k, &(er, ec)) in expected.iter().enumerate() {
        let rows = r.u64("tensor rows")?;
        let cols = r.u64("tensor cols")?;
        if (rows, cols) != (er, ec) {
            return Err(mismatch(TENSOR_NAMES[k], format!("{er}x{ec}"), format!("{rows}x{cols}")));
        }
        let raw = r.take(rows * cols * 8, TENSOR_NAMES[k])?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Matrix::new(rows, cols, values)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Invalid(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("ten tensors");
    let backbone = ConvStack {
        conv1_w: next(),
        conv1_b: next(),
        conv2_w: next(),
        conv2_b: next(),
    };
    let params = ModelParams {
        kind,
        shape,
        backbone,
        cls_w: next(),
        cls_b: next(),
        hash_w: next(),
        hash_b: next(),
        sem_w: next(),
        sem_b: next(),
    };
    Ok(Checkpoint { params, config_hash })
}

const TENSOR_NAMES: [&str; 10] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "cls_w", "cls_b", "hash_w", "hash_b", "sem_w", "sem_b",
];

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads and checks the stored shape against `expected`, naming the first
/// field that differs.
pub fn load_expecting(path: &Path, expected: &ModelShape) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    check_shape(&ckpt.params.shape, expected)?;
    Ok(ckpt)
}

pub fn check_shape(found: &ModelShape, expected: &ModelShape) -> Result<()> {
    let fields: [(&'static str, usize, usize); 6] = [
        ("categories", expected.categories, found.categories),
        ("bits", expected.bits, found.bits),
        ("semantic_bits", expected.semantic_bits, found.semantic_bits),
        ("in_channels", expected.in_channels, found.in_channels),
        ("hidden", expected.hidden, found.hidden),
        ("pyramid.channels", expected.pyramid.channels, found.pyramid.channels),
    ];
    for (field, e, f) in fields {
        if e != f {
            return Err(mismatch(field, e, f));
        }
    }
    if expected.pyramid.levels != found.pyramid.levels {
        return Err(mismatch(
            "pyramid.levels",
            format!("{:?}", expected.pyramid.levels),
            format!("{:?}", found.pyramid.levels),
        ));
    }
    Ok(())
}

/// Hex sha256 of the canonical encoding.
pub fn checkpoint_hash(ckpt: &Checkpoint) -> String {
    hex::encode(Sha256::digest(to_bytes(ckpt)))
}
