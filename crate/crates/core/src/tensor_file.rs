//! Binary container for named tensors.
//!
//! Layout: the magic `FACPA1\n`, one line of JSON metadata terminated by
//! `\n`, then for each tensor until end of file:
//! name length (`u32` LE), UTF-8 name, rank (`u32` LE), each dimension
//! (`u32` LE), and the `f32` LE values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"FACPA1\n";

/// Decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    /// The metadata line without its trailing newline.
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(header: &str, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    if header.contains('\n') {
        return Err(Error::Invalid("tensor file header must be a single line".into()));
    }
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 1 + tensors.iter().map(|(_, t)| 4 * t.len() + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what}: need {n} bytes at offset {}, {} left", self.pos, self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        detail: "unterminated header line".into(),
    })?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|e| Error::Header {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_string();

    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len() + nl + 1,
        path,
    };
    let mut tensors = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec()).map_err(|e| Error::Header {
            path: path.to_path_buf(),
            detail: format!("tensor name: {e}"),
        })?;
        let rank = cur.u32(&format!("rank of `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32(&format!("dims of `{name}`"))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(4 * n, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Header {
            path: path.to_path_buf(),
            detail: format!("tensor `{name}`: {e}"),
        })?;
        tensors.push((name, t));
    }
    Ok(TensorFile { header, tensors })
}

pub fn write(path: &Path, header: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(header, tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
