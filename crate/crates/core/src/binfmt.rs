//! Little-endian helpers shared by the on-disk formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) const FORMAT_VERSION: u32 = 1;

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn finish<W: Write>(mut w: W, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Maps a short read to a format error and everything else to an I/O error.
pub(crate) fn read_err(path: &Path, what: &str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("{}: truncated while reading {what}", path.display()))
    } else {
        Error::io(path, e)
    }
}

pub(crate) fn read_header<R: Read>(r: &mut R, path: &Path, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)
        .map_err(|e| read_err(path, "magic", e))?;
    if &got != magic {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r, path, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    Ok(())
}

pub(crate) fn write_header<W: Write>(w: &mut W, path: &Path, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic).map_err(|e| Error::io(path, e))?;
    write_u32(w, path, FORMAT_VERSION)
}

pub(crate) fn read_u32<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|e| read_err(path, what, e))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<u64> {
    r.read_u64::<LittleEndian>()
        .map_err(|e| read_err(path, what, e))
}

pub(crate) fn write_u32<W: Write>(w: &mut W, path: &Path, v: u32) -> Result<()> {
    w.write_u32::<LittleEndian>(v)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_u64<W: Write>(w: &mut W, path: &Path, v: u64) -> Result<()> {
    w.write_u64::<LittleEndian>(v)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, path: &Path, what: &str, n: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|e| read_err(path, what, e))?;
    Ok(out)
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, path: &Path, values: &[f32]) -> Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Narrows to f32 for storage.
pub(crate) fn write_f64s_as_f32<W: Write>(w: &mut W, path: &Path, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v as f32)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub(crate) fn read_f32s_as_f64<R: Read>(
    r: &mut R,
    path: &Path,
    what: &str,
    n: usize,
) -> Result<Vec<f64>> {
    Ok(read_f32s(r, path, what, n)?
        .into_iter()
        .map(f64::from)
        .collect())
}

pub(crate) fn expect_eof<R: Read>(r: &mut R, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}
