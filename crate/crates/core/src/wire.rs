//! Little-endian, bounds-checked primitives shared by the file formats.

use std::io::{Read, Seek, SeekFrom, Write};

use crate::error::{Error, Result};

pub(crate) struct WireReader<R> {
    inner: R,
    pos: u64,
    len: u64,
}

impl<R: Read + Seek> WireReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        Ok(Self { inner, pos: 0, len })
    }
}

impl<R: Read> WireReader<R> {
    pub fn pos(&self) -> u64 {
        self.pos
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn remaining(&self) -> u64 {
        self.len - self.pos
    }

    fn ensure(&self, n: u64) -> Result<()> {
        if n > self.remaining() {
            return Err(Error::Truncated { offset: self.pos, needed: n, available: self.remaining() });
        }
        Ok(())
    }

    pub fn bytes(&mut self, n: u64) -> Result<Vec<u8>> {
        self.ensure(n)?;
        let mut buf = vec![0u8; n as usize];
        self.inner.read_exact(&mut buf)?;
        self.pos += n;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        self.ensure(N as u64)?;
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        self.pos += N as u64;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

impl<R: Read + Seek> WireReader<R> {
    pub fn skip(&mut self, n: u64) -> Result<()> {
        self.ensure(n)?;
        self.inner.seek(SeekFrom::Current(n as i64))?;
        self.pos += n;
        Ok(())
    }
}

pub(crate) fn expect_magic<R: Read>(r: &mut WireReader<R>, magic: &[u8; 4], what: &str) -> Result<()> {
    let got = r.bytes(4).map_err(|_| Error::format(format!("file too short for {what} magic")))?;
    if got != magic {
        return Err(Error::format(format!("bad {what} magic {got:02x?}")));
    }
    Ok(())
}

pub(crate) fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}
