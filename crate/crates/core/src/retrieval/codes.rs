//! Packed binary codes. Bit `j` of a code lives in byte `j / 8` at position
//! `j % 8` (LSB first); a set bit means +1. Padding bits are always zero.
//!
//! Code file: `CHNB`, u32 version, u32 N, u32 K, then N records of
//! (u32 id index, u32 label, ceil(K/8) code bytes), then the id table:
//! N entries of u32 byte length followed by UTF-8.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{ensure_arg, Error, Result};

pub const CODE_MAGIC: &[u8; 4] = b"CHNB";
pub const CODE_VERSION: u32 = 1;

pub fn bytes_for(bits: usize) -> usize {
    bits.div_ceil(8)
}

/// Packs a ±1 vector (sign taken, ties to +1).
pub fn pack_signs(signs: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; bytes_for(signs.len())];
    for (j, &s) in signs.iter().enumerate() {
        if s >= 0.0 {
            out[j / 8] |= 1 << (j % 8);
        }
    }
    out
}

pub fn unpack_signs(bytes: &[u8], bits: usize) -> Vec<i8> {
    (0..bits)
        .map(|j| {
            if bytes[j / 8] >> (j % 8) & 1 == 1 {
                1
            } else {
                -1
            }
        })
        .collect()
}

fn padding_mask(bits: usize) -> u8 {
    match bits % 8 {
        0 => 0xFF,
        r => (1u8 << r) - 1,
    }
}

/// Hamming distance of two packed codes of `bits` bits.
pub fn hamming_packed(a: &[u8], b: &[u8], bits: usize) -> u32 {
    let n = bytes_for(bits);
    let mut d: u32 = a[..n.saturating_sub(1)]
        .iter()
        .zip(&b[..n.saturating_sub(1)])
        .map(|(x, y)| (x ^ y).count_ones())
        .sum();
    if n > 0 {
        d += ((a[n - 1] ^ b[n - 1]) & padding_mask(bits)).count_ones();
    }
    d
}

/// A single packed code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    bits: usize,
    bytes: Vec<u8>,
}

impl BinaryCode {
    pub fn from_signs(signs: &[f64]) -> Self {
        Self {
            bits: signs.len(),
            bytes: pack_signs(signs),
        }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_signs(&self) -> Vec<i8> {
        unpack_signs(&self.bytes, self.bits)
    }

    pub fn hamming(&self, other: &BinaryCode) -> Result<u32> {
        ensure_arg!(
            self.bits == other.bits,
            "code length mismatch: {} vs {} bits",
            self.bits,
            other.bits
        );
        Ok(hamming_packed(&self.bytes, &other.bytes, self.bits))
    }
}

/// Codes of a set of videos, packed contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBook {
    ids: Vec<String>,
    labels: Vec<u32>,
    bits: usize,
    packed: Vec<u8>,
}

impl CodeBook {
    pub fn new(bits: usize) -> Self {
        Self {
            ids: Vec::new(),
            labels: Vec::new(),
            bits,
            packed: Vec::new(),
        }
    }

    /// Builds a code book from an N×K matrix whose signs are the codes.
    pub fn from_signs(ids: Vec<String>, labels: Vec<u32>, codes: ArrayView2<f64>) -> Result<Self> {
        ensure_arg!(
            ids.len() == codes.nrows() && labels.len() == codes.nrows(),
            "{} ids, {} labels for {} codes",
            ids.len(),
            labels.len(),
            codes.nrows()
        );
        let mut book = Self::new(codes.ncols());
        for ((id, label), row) in ids.into_iter().zip(labels).zip(codes.rows()) {
            book.push(id, label, &row.to_vec())?;
        }
        Ok(book)
    }

    pub fn push(&mut self, id: String, label: u32, signs: &[f64]) -> Result<()> {
        ensure_arg!(
            signs.len() == self.bits,
            "code has {} bits, book holds {}-bit codes",
            signs.len(),
            self.bits
        );
        self.packed.extend(pack_signs(signs));
        self.ids.push(id);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn code_bytes(&self, i: usize) -> &[u8] {
        let n = bytes_for(self.bits);
        &self.packed[i * n..(i + 1) * n]
    }

    pub fn code(&self, i: usize) -> BinaryCode {
        BinaryCode {
            bits: self.bits,
            bytes: self.code_bytes(i).to_vec(),
        }
    }

    /// Serialized code file contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CODE_MAGIC);
        for v in [CODE_VERSION, self.len() as u32, self.bits as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            out.extend_from_slice(self.code_bytes(i));
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4).ok_or_else(|| bad("truncated header".into()))?;
        if magic != CODE_MAGIC {
            return Err(bad("not a code file".into()));
        }
        let u32_at = |cur: &mut Cursor, what: &str| {
            cur.u32().ok_or_else(|| bad(format!("truncated {what}")))
        };
        let version = u32_at(&mut cur, "header")?;
        if version != CODE_VERSION {
            return Err(bad(format!("unsupported code file version {version}")));
        }
        let n = u32_at(&mut cur, "header")? as usize;
        let bits = u32_at(&mut cur, "header")? as usize;
        let nb = bytes_for(bits);
        let mut index = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut packed = Vec::with_capacity(n * nb);
        for _ in 0..n {
            let idx = u32_at(&mut cur, "record")? as usize;
            let label = u32_at(&mut cur, "record")?;
            let code = cur.take(nb).ok_or_else(|| bad("truncated record".into()))?;
            if nb > 0 && code[nb - 1] & !padding_mask(bits) != 0 {
                return Err(bad("nonzero padding bits".into()));
            }
            index.push(idx);
            labels.push(label);
            packed.extend_from_slice(code);
        }
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32_at(&mut cur, "id table")? as usize;
            let raw = cur
                .take(len)
                .ok_or_else(|| bad("truncated id table".into()))?;
            let id = std::str::from_utf8(raw).map_err(|_| bad("id is not UTF-8".into()))?;
            table.push(id.to_string());
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after id table".into()));
        }
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(n);
        for &i in &index {
            if i >= n || !seen.insert(i) {
                return Err(bad(format!("invalid or repeated id index {i}")));
            }
            ids.push(table[i].clone());
        }
        Ok(Self {
            ids,
            labels,
            bits,
            packed,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(fs::File::create(path)?);
            w.write_all(&self.to_bytes())?;
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
