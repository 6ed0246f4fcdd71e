//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LRCF"  u16 version
//! u32 arch length, arch TOML bytes
//! u32 block count, then per block:
//!   u8 role (0 conv, 1 group, 2 join, 3 dense, 4 whitening)
//!   u32 layer, u32 group, 4 x u32 dims
//!   u64 weight count, u64 bias count, f64 weights, f64 biases
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use super::zca::Zca;
use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Role};

pub const MAGIC: &[u8; 4] = b"LRCF";
pub const VERSION: u16 = 1;

const ROLE_WHITEN: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub params: ModelParams,
    /// Input whitening fitted during training, if any.
    pub zca: Option<Zca>,
}

fn role_tag(r: Role) -> (u8, u32) {
    match r {
        Role::Conv => (0, 0),
        Role::Group(i) => (1, i as u32),
        Role::Join => (2, 0),
        Role::Dense => (3, 0),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, tag: u8, layer: usize, group: u32, dims: [usize; 4], w: &[f64], b: &[f64]) {
    out.push(tag);
    put_u32(out, layer);
    out.extend(group.to_le_bytes());
    for d in dims {
        put_u32(out, d);
    }
    out.extend((w.len() as u64).to_le_bytes());
    out.extend((b.len() as u64).to_le_bytes());
    for v in w.iter().chain(b) {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.params.check(&ck.arch)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let arch = ck.arch.to_toml()?;
    put_u32(&mut out, arch.len());
    out.extend(arch.as_bytes());
    let blocks = ck.params.blocks();
    put_u32(&mut out, blocks.len() + usize::from(ck.zca.is_some()));
    for b in &blocks {
        let (tag, group) = role_tag(b.role);
        put_block(&mut out, tag, b.layer, group, b.dims, b.weights, b.bias);
    }
    if let Some(z) = &ck.zca {
        let d = z.dim();
        // eps rides along as the single trailing bias value.
        let mut bias = z.mean.clone();
        bias.push(z.eps);
        put_block(&mut out, ROLE_WHITEN, 0, 0, [d, d, 1, 1], &z.whiten, &bias);
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.err("count overflows"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("count overflows"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses a checkpoint. The checksum is verified before anything else is
/// interpreted.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |offset: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic (not a checkpoint)"));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(fail(body, "checksum mismatch"));
    }
    let mut r = Reader {
        bytes: &bytes[..body],
        pos: 4,
        path,
    };
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(fail(4, &format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| fail(10, "architecture is not UTF-8"))?;
    let arch = ArchSpec::from_toml(text)?;
    let mut params = ModelParams::zeros(&arch)?;
    let expected: Vec<(u8, usize, u32, [usize; 4])> = params
        .blocks()
        .iter()
        .map(|b| {
            let (t, g) = role_tag(b.role);
            (t, b.layer, g, b.dims)
        })
        .collect();
    let count = r.u32()?;
    if count != expected.len() && count != expected.len() + 1 {
        return Err(r.err(format!("{count} blocks, architecture needs {}", expected.len())));
    }
    let mut zca = None;
    let mut slots = params.blocks_mut().into_iter();
    for k in 0..count {
        let at = r.pos;
        let tag = r.u8()?;
        let layer = r.u32()?;
        let group = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let mut dims = [0; 4];
        for d in &mut dims {
            *d = r.u32()?;
        }
        let (nw, nb) = (r.u64()?, r.u64()?);
        let w = r.floats(nw)?;
        let b = r.floats(nb)?;
        if k == expected.len() {
            if tag != ROLE_WHITEN || dims[0] != dims[1] || nw != dims[0] * dims[0] || nb != dims[0] + 1 {
                return Err(fail(at, "malformed whitening block"));
            }
            let mut mean = b;
            let eps = mean.pop().expect("nb >= 1");
            zca = Some(Zca { mean, whiten: w, eps });
            continue;
        }
        if (tag, layer, group, dims) != expected[k] {
            return Err(fail(at, &format!("block {k} does not match the architecture")));
        }
        let (sw, sb) = slots.next().expect("counted");
        if sw.len() != nw || sb.len() != nb {
            return Err(fail(at, &format!("block {k} has wrong element counts")));
        }
        *sw = w;
        *sb = b;
    }
    if r.pos != body {
        return Err(r.err("trailing bytes before checksum"));
    }
    Ok(Checkpoint { arch, params, zca })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
