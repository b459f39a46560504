//! Binary checkpoints: encoder weights plus optimizer state, checksummed.
//!
//! Layout: magic, format version, layer-size header, little-endian f64 blobs
//! (parameters, then first and second moments), optimizer step count and
//! hyper-parameters, and a trailing FNV-1a checksum over everything before it.

use std::io::{Read, Write};
use std::path::Path;

use crate::diffmath::Matrix;
use crate::encoder::Encoder;
use crate::optim::{AdamW, AdamWConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CYCLENC\0";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_matrices(buf: &mut Vec<u8>, mats: &[&Matrix]) {
    for m in mats {
        push_f64s(buf, m.data());
    }
}

pub fn save_checkpoint(path: &Path, encoder: &Encoder, optimizer: &AdamW) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let sizes = encoder.sizes();
    buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    buf.extend_from_slice(&optimizer.step_count().to_le_bytes());
    let oc = optimizer.config();
    push_f64s(&mut buf, &[oc.beta1, oc.beta2, oc.eps, oc.weight_decay]);
    push_matrices(&mut buf, &encoder.params());
    let (first, second) = optimizer.moments();
    push_matrices(&mut buf, &first.iter().collect::<Vec<_>>());
    push_matrices(&mut buf, &second.iter().collect::<Vec<_>>());
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Matrix::new(rows, cols, data)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Encoder, AdamW)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let n_sizes = r.u32()? as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(Error::Checkpoint(format!("implausible layer count {n_sizes}")));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(r.u32()? as usize);
    }
    let step_count = r.u64()?;
    let oc = AdamWConfig {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        weight_decay: r.f64()?,
    };

    let mut shapes: Vec<(usize, usize)> = Vec::new();
    for w in sizes.windows(2) {
        shapes.push((w[1], w[0]));
        shapes.push((w[1], 1));
    }
    let read_set = |r: &mut Reader| -> Result<Vec<Matrix>> {
        shapes.iter().map(|&(rows, cols)| r.matrix(rows, cols)).collect()
    };
    let params = read_set(&mut r)?;
    let first = read_set(&mut r)?;
    let second = read_set(&mut r)?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter blob".into()));
    }

    let mut encoder = Encoder::new(&sizes, 0)?;
    encoder.set_params(&params)?;
    let optimizer = AdamW::restore(oc, first, second, step_count);
    Ok((encoder, optimizer))
}
