//! Little-endian primitives with byte-offset diagnostics.

use crate::error::{Error, Result};
use crate::numerics::Array;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn f32s(&mut self, data: &[f32]) {
        self.buf.reserve(data.len() * 4);
        for v in data {
            self.bytes(&v.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format { offset: self.offset(), detail: detail.into() }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "truncated {what}: expected {n} bytes, found {}",
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            self.pos -= 4;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.offset();
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.remaining())
            .ok_or(Error::Format { offset: at, detail: format!("{what} length {n} exceeds the file") })
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let at = self.offset();
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Format { offset: at, detail: format!("{what} is not UTF-8") })
    }

    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| self.err(format!("{what} of {count} floats overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.err(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) const DTYPE_F32: u8 = 0;

/// Dtype tag, rank, extents and payload of one array.
pub(crate) fn write_array(w: &mut Writer, a: &Array<f32>) {
    w.u8(DTYPE_F32);
    w.u32(a.shape().len() as u32);
    for &e in a.shape() {
        w.u64(e as u64);
    }
    w.f32s(a.data());
}

pub(crate) fn read_extents(r: &mut Reader<'_>, what: &str) -> Result<Vec<usize>> {
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(r.err(format!("{what}: unsupported dtype tag {dtype}")));
    }
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(r.err(format!("{what}: unsupported rank {rank}")));
    }
    (0..rank)
        .map(|_| {
            let e = r.u64("extent")?;
            usize::try_from(e).ok().filter(|&e| e > 0).ok_or_else(|| r.err(format!("{what}: bad extent {e}")))
        })
        .collect()
}

pub(crate) fn read_array(r: &mut Reader<'_>, what: &str) -> Result<Array<f32>> {
    let shape = read_extents(r, what)?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| r.err(format!("{what}: element count overflows")))?;
    let data = r.f32s(count, what)?;
    Array::new(shape, data)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub(crate) fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
