//! Binary volume files.
//!
//! `BAV1`: 4-byte magic, three little-endian `u32` dims `(d, h, w)`, then
//! `d * h * w` little-endian `f32` values in z-major order. `BAL1` is the
//! same layout with `u16` labels.

use std::fs;
use std::path::Path;

use anymod_core::volume::{LabelVolume, Shape3, Volume};
use anymod_core::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"BAV1";
pub const LABEL_MAGIC: &[u8; 4] = b"BAL1";
const HEADER: usize = 16;

fn header(magic: &[u8; 4], s: Shape3) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER);
    out.extend_from_slice(magic);
    for d in [s.d, s.h, s.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 4], elem: usize) -> Result<(Shape3, &'a [u8])> {
    if bytes.len() < HEADER {
        return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", &bytes[..4], std::str::from_utf8(magic).unwrap_or("?"))));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = Shape3 { d: dim(0), h: dim(1), w: dim(2) };
    let need = shape.voxels() * elem;
    let payload = &bytes[HEADER..];
    if payload.len() < need {
        return Err(Error::Truncated(format!("payload has {} bytes, dims need {need}", payload.len())));
    }
    if payload.len() > need {
        return Err(Error::Format(format!("{} trailing bytes after payload", payload.len() - need)));
    }
    Ok((shape, payload))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(VOLUME_MAGIC, v.shape);
    out.reserve(v.data.len() * 4);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (shape, payload) = parse_header(bytes, VOLUME_MAGIC, 4)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Volume::new(shape, data)
}

pub fn encode_labels(v: &LabelVolume) -> Vec<u8> {
    let mut out = header(LABEL_MAGIC, v.shape);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelVolume> {
    let (shape, payload) = parse_header(bytes, LABEL_MAGIC, 2)?;
    let data = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    LabelVolume::new(shape, data)
}

pub fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| io_error(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path).map_err(|e| io_error(path, e))?)
}

pub fn write_labels(path: &Path, v: &LabelVolume) -> Result<()> {
    fs::write(path, encode_labels(v)).map_err(|e| io_error(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    decode_labels(&fs::read(path).map_err(|e| io_error(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let shape = Shape3 { d: 2, h: 3, w: 4 };
        let v = Volume::new(shape, (0..24).map(|i| i as f32 / 24.0).collect()).unwrap();
        let bytes = encode_volume(&v);
        assert_eq!(bytes.len(), 16 + 24 * 4);
        assert_eq!(decode_volume(&bytes).unwrap(), v);
        assert!(matches!(decode_volume(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::Format(_))));

        let l = LabelVolume::new(shape, (0..24).map(|i| (i % 5) as u16).collect()).unwrap();
        assert_eq!(decode_labels(&encode_labels(&l)).unwrap(), l);
    }
}
