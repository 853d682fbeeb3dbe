//! IDX file reader/writer (the MNIST container format).
//!
//! Header: two zero bytes, a type byte (0x08 = unsigned byte), a dimension
//! count byte, then one big-endian `u32` per dimension. Files ending in `.gz`
//! are transparently (de)compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Dataset;
use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;

/// Dimensions and raw bytes of an unsigned-byte IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut raw)
            .map_err(|e| Error::format(path, format!("gzip stream is corrupt: {e}")))?;
    } else {
        BufReader::new(file).read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    }
    parse_idx(&raw, path)
}

pub fn parse_idx(raw: &[u8], path: &Path) -> Result<IdxArray> {
    if raw.len() < 4 {
        return Err(Error::format(path, "file shorter than the 4-byte magic number"));
    }
    if raw[0] != 0 || raw[1] != 0 {
        return Err(Error::format(path, format!("bad magic {:02x}{:02x}{:02x}{:02x}", raw[0], raw[1], raw[2], raw[3])));
    }
    if raw[2] != UBYTE {
        return Err(Error::format(path, format!("unsupported IDX element type 0x{:02x}", raw[2])));
    }
    let ndim = raw[3] as usize;
    if ndim == 0 {
        return Err(Error::format(path, "IDX file declares zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if raw.len() < header {
        return Err(Error::format(path, "truncated dimension header"));
    }
    let dims: Vec<usize> =
        raw[4..header].chunks_exact(4).map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize).collect();
    let expected: usize = dims.iter().product();
    let body = &raw[header..];
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("header declares {dims:?} ({expected} bytes) but the payload holds {} bytes", body.len()),
        ));
    }
    Ok(IdxArray { dims, data: body.to_vec() })
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len());
    buf.extend_from_slice(&[0, 0, UBYTE, arr.dims.len() as u8]);
    for &d in &arr.dims {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend_from_slice(&arr.data);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&buf).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&buf).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Loads an image file (`N x H x W` or `N x C x H x W`) and its label file.
/// Pixels are scaled to `[0, 1]`; images become `1 x H x W` when no channel
/// axis is present.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(Error::format(labels, format!("label file must be 1-D, got dims {:?}", lab.dims)));
    }
    let item_shape = match img.dims[..] {
        [_, h, w] => vec![1, h, w],
        [_, c, h, w] => vec![c, h, w],
        _ => return Err(Error::format(images, format!("image file must be 3-D or 4-D, got dims {:?}", img.dims))),
    };
    if img.dims[0] != lab.dims[0] {
        return Err(Error::format(
            labels,
            format!("{} labels for {} images in {}", lab.dims[0], img.dims[0], images.display()),
        ));
    }
    let labels_vec: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let class_count = labels_vec.iter().max().map_or(0, |m| m + 1);
    Dataset::new(item_shape, img.data.iter().map(|&b| b as f64 / 255.0).collect(), labels_vec, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["imgs.idx", "imgs.idx.gz"] {
            let p = dir.path().join(name);
            let arr = IdxArray { dims: vec![3, 2, 2], data: (0..12).map(|i| i * 20).collect() };
            write_idx(&p, &arr).unwrap();
            assert_eq!(read_idx(&p).unwrap(), arr);
        }
    }

    #[test]
    fn dataset_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        write_idx(&ip, &IdxArray { dims: vec![3, 2, 2], data: vec![0, 255, 51, 102, 0, 0, 0, 0, 255, 255, 255, 255] })
            .unwrap();
        write_idx(&lp, &IdxArray { dims: vec![3], data: vec![2, 0, 1] }).unwrap();
        let d = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.item_shape(), &[1, 2, 2]);
        assert_eq!(d.class_count(), 3);
        assert_eq!(d.item(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.labels(), &[2, 0, 1]);
    }

    #[test]
    fn declared_count_mismatch_faults() {
        let mut raw = vec![0, 0, 8, 1];
        raw.extend_from_slice(&5u32.to_be_bytes());
        raw.extend_from_slice(&[1, 2, 3]);
        let err = parse_idx(&raw, Path::new("labels.idx")).unwrap_err();
        assert!(err.to_string().contains("labels.idx"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation_fault() {
        assert!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0], Path::new("x")).is_err());
        assert!(parse_idx(&[0, 0, 8, 2, 0, 0], Path::new("x")).is_err());
        assert!(parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0], Path::new("x")).is_err());
    }

    #[test]
    fn image_label_count_mismatch_faults() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        write_idx(&ip, &IdxArray { dims: vec![2, 1, 1], data: vec![0, 1] }).unwrap();
        write_idx(&lp, &IdxArray { dims: vec![3], data: vec![0, 1, 1] }).unwrap();
        assert!(load_idx_dataset(&ip, &lp).is_err());
    }
}
