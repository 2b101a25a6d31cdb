//! Little-endian binary helpers shared by the versioned file formats.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("format error at byte {offset}: {message}")]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Default, Clone)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        for x in v {
            self.u64(*x as u64);
        }
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.usizes(t.shape());
        for x in t.data() {
            self.f64(*x);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

type R<T> = std::result::Result<T, FormatError>;

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error(&self, message: impl Into<String>) -> FormatError {
        FormatError {
            offset: self.pos,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> R<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.error(format!(
                "unexpected end of file: need {n} bytes, {} left",
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8]) -> R<()> {
        let at = self.pos;
        let got = self.take(expected.len())?;
        if got != expected {
            return Err(FormatError {
                offset: at,
                message: format!(
                    "bad magic: expected {:?}",
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> R<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> R<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> R<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> R<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A length prefix, bounded so that corrupt files cannot request huge
    /// allocations.
    pub fn len_prefix(&mut self, elem_size: usize) -> R<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(elem_size.max(1) as u64) > left {
            return Err(FormatError {
                offset: at,
                message: format!("length {n} exceeds remaining {left} bytes"),
            });
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self) -> R<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> R<String> {
        let n = self.len_prefix(1)?;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| FormatError {
            offset: at,
            message: "invalid utf-8".into(),
        })
    }

    pub fn usize(&mut self) -> R<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| FormatError {
            offset: at,
            message: "integer overflow".into(),
        })
    }

    pub fn usizes(&mut self) -> R<Vec<usize>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn tensor(&mut self) -> R<Tensor> {
        let at = self.pos;
        let shape = self.usizes()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| self.error("tensor size overflow"))?;
        if count.saturating_mul(8) > self.data.len() - self.pos {
            return Err(FormatError {
                offset: at,
                message: format!("tensor of {count} values exceeds file"),
            });
        }
        let data = (0..count).map(|_| self.f64()).collect::<R<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| FormatError {
            offset: at,
            message: e.to_string(),
        })
    }

    pub fn finish(&self) -> R<()> {
        if self.pos != self.data.len() {
            return Err(self.error(format!(
                "{} trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
