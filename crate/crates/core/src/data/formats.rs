use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_IMAGES_4D: u32 = 0x0000_0804;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::format(None, format!("cannot read {}: {e}", path.display())))
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(Some(at as u64), format!("truncated IDX header ({what})")))
}

fn payload(buf: &[u8], at: usize, len: usize) -> Result<&[u8]> {
    if buf.len() < at + len {
        return Err(Error::format(
            Some(buf.len() as u64),
            format!("truncated IDX payload: expected {len} bytes from offset {at}"),
        ));
    }
    if buf.len() > at + len {
        return Err(Error::format(Some((at + len) as u64), "trailing bytes after IDX payload"));
    }
    Ok(&buf[at..at + len])
}

/// Parses an IDX image file: `(count, (C, H, W), pixels)`. Three-dimensional
/// files (magic `0x803`) are single-channel; `0x804` carries a channel axis.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, (usize, usize, usize), Vec<u8>)> {
    let buf = read(path.as_ref())?;
    let magic = be_u32(&buf, 0, "magic")?;
    let (dims, header) = match magic {
        IDX_IMAGES => (3, 16),
        IDX_IMAGES_4D => (4, 20),
        m => return Err(Error::format(Some(0), format!("bad IDX image magic {m:#010x}"))),
    };
    let d: Vec<usize> = (0..dims)
        .map(|i| be_u32(&buf, 4 + 4 * i, "dims").map(|v| v as usize))
        .collect::<Result<_>>()?;
    let (n, chw) = if dims == 3 { (d[0], (1, d[1], d[2])) } else { (d[0], (d[1], d[2], d[3])) };
    let len = n * chw.0 * chw.1 * chw.2;
    Ok((n, chw, payload(&buf, header, len)?.to_vec()))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let buf = read(path.as_ref())?;
    let magic = be_u32(&buf, 0, "magic")?;
    if magic != IDX_LABELS {
        return Err(Error::format(Some(0), format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(&buf, 4, "count")? as usize;
    Ok(payload(&buf, 8, n)?.to_vec())
}

/// Loads an IDX image file and its label file.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, name: &str, split: Split) -> Result<Dataset> {
    let (n, chw, pixels) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::data(format!("{n} images but {} labels", labels.len())));
    }
    Dataset::new(name, split, chw, pixels, labels.into_iter().map(u16::from).collect())
}

pub fn write_idx_images(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(20 + ds.pixels().len());
    if ds.channels == 1 {
        out.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    } else {
        out.extend_from_slice(&IDX_IMAGES_4D.to_be_bytes());
    }
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    if ds.channels != 1 {
        out.extend_from_slice(&(ds.channels as u32).to_be_bytes());
    }
    out.extend_from_slice(&(ds.height as u32).to_be_bytes());
    out.extend_from_slice(&(ds.width as u32).to_be_bytes());
    out.extend_from_slice(ds.pixels());
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in ds.labels() {
        out.push(u8::try_from(l).map_err(|_| Error::data(format!("label {l} does not fit a byte")))?);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a CIFAR-10 binary batch: records of one label byte followed by the
/// red, green and blue 32×32 planes.
pub fn load_cifar10_bin(path: impl AsRef<Path>, name: &str, split: Split) -> Result<Dataset> {
    let buf = read(path.as_ref())?;
    if buf.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            Some((buf.len() / CIFAR_RECORD * CIFAR_RECORD) as u64),
            format!("CIFAR file length {} is not a multiple of {CIFAR_RECORD}", buf.len()),
        ));
    }
    let n = buf.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in buf.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::data(format!("record {i} has label {} (must be < 10)", rec[0])));
        }
        labels.push(rec[0] as u16);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(name, split, (3, 32, 32), pixels, labels)
}

pub fn write_cifar10_bin(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if (ds.channels, ds.height, ds.width) != (3, 32, 32) {
        return Err(Error::shape("CIFAR records are 3×32×32"));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        let l = ds.label(i);
        if l >= 10 {
            return Err(Error::data(format!("label {l} must be < 10")));
        }
        out.push(l as u8);
        out.extend_from_slice(ds.image(i));
    }
    fs::write(path, out)?;
    Ok(())
}
