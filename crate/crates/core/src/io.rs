//! On-disk formats: grayscale PNG slices and masks, JSON metadata and
//! `.npy` arrays.
//!
//! An instance directory holds `bscan_0001.png`, `bscan_0002.png`, ...
//! (16-bit intensities scaled by 65535), optional `mask_0001.png`, ...
//! (8-bit class labels) and `meta.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{AnnotationMask, BScan, Grid, InstanceMeta, OctInstance};

pub const META_FILE: &str = "meta.json";

pub fn bscan_file(slice: usize) -> String {
    format!("bscan_{slice:04}.png")
}

pub fn mask_file(slice: usize) -> String {
    format!("mask_{slice:04}.png")
}

fn encode_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    encoder.set_compression(png::Compression::Fast);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = encoder.write_header().map_err(fail)?;
    writer.write_image_data(bytes).map_err(fail)?;
    writer.finish().map_err(fail)
}

pub fn write_png_u8(path: &Path, grid: &Grid<u8>) -> Result<()> {
    encode_png(path, grid.cols(), grid.rows(), png::BitDepth::Eight, grid.as_slice())
}

pub fn write_png_u16(path: &Path, grid: &Grid<u16>) -> Result<()> {
    let bytes: Vec<u8> = grid.as_slice().iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_png(path, grid.cols(), grid.rows(), png::BitDepth::Sixteen, &bytes)
}

fn decode_png(path: &Path, depth: png::BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != depth {
        return Err(Error::format(
            path,
            format!("expected {depth:?}-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn read_png_u8(path: &Path) -> Result<Grid<u8>> {
    let (rows, cols, buf) = decode_png(path, png::BitDepth::Eight)?;
    Grid::from_vec(rows, cols, buf)
}

pub fn read_png_u16(path: &Path) -> Result<Grid<u16>> {
    let (rows, cols, buf) = decode_png(path, png::BitDepth::Sixteen)?;
    let data = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Grid::from_vec(rows, cols, data)
}

/// Intensities in `[0,1]` to 16-bit codes.
pub fn to_u16(pixels: &Grid<f32>) -> Grid<u16> {
    pixels.map(|v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
}

pub fn from_u16(codes: &Grid<u16>) -> Grid<f32> {
    codes.map(|v| (v as f64 / 65535.0) as f32)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes slices, optional masks and metadata into `dir`, creating it.
pub fn write_instance(dir: &Path, instance: &OctInstance, masks: Option<&[AnnotationMask]>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(m) = masks {
        if m.len() != instance.len() {
            return Err(Error::shape("masks per instance", instance.len().to_string(), m.len().to_string()));
        }
    }
    for (i, scan) in instance.bscans().iter().enumerate() {
        write_png_u16(&dir.join(bscan_file(i + 1)), &to_u16(&scan.pixels))?;
        if let Some(m) = masks {
            write_png_u8(&dir.join(mask_file(i + 1)), m[i].labels())?;
        }
    }
    write_json(&dir.join(META_FILE), &instance.meta)
}

fn numbered_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut numbers = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name
            .strip_prefix(prefix)
            .and_then(|s| s.strip_suffix(".png"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            numbers.push(n);
        }
    }
    numbers.sort_unstable();
    for (i, &n) in numbers.iter().enumerate() {
        if n != i + 1 {
            return Err(Error::format(dir, format!("{prefix} files are not numbered 1..{}: missing {}", numbers.len(), i + 1)));
        }
    }
    Ok(numbers.iter().map(|&n| dir.join(format!("{prefix}{n:04}.png"))).collect())
}

/// Reads an instance directory. Masks are returned when every slice has one.
pub fn read_instance(dir: &Path) -> Result<(OctInstance, Option<Vec<AnnotationMask>>)> {
    let meta: InstanceMeta = read_json(&dir.join(META_FILE))?;
    let scans = numbered_files(dir, "bscan_")?;
    if scans.is_empty() {
        return Err(Error::format(dir, "no bscan_NNNN.png slices"));
    }
    let bscans = scans
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(BScan::new(from_u16(&read_png_u16(p)?), i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let mask_paths = numbered_files(dir, "mask_")?;
    let masks = if mask_paths.is_empty() {
        None
    } else if mask_paths.len() != scans.len() {
        return Err(Error::format(
            dir,
            format!("{} masks for {} slices", mask_paths.len(), scans.len()),
        ));
    } else {
        Some(
            mask_paths
                .iter()
                .map(|p| AnnotationMask::new(read_png_u8(p)?).map_err(|e| Error::format(p, e.to_string())))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let instance = OctInstance::new(bscans, meta).map_err(|e| Error::format(dir, e.to_string()))?;
    Ok((instance, masks))
}

/// Little-endian `f64` array in NumPy's `.npy` v1.0 layout.
pub fn write_npy(path: &Path, grid: &Grid<f64>) -> Result<()> {
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        grid.rows(),
        grid.cols()
    );
    // Magic (6) + version (2) + length (2) + header + newline, padded to 64.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.next_multiple_of(64) - unpadded));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 8 * grid.as_slice().len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in grid.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads back a file written by [`write_npy`].
pub fn read_npy(path: &Path) -> Result<Grid<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(Error::format(path, "not a version 1.0 .npy file"));
    }
    let len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + len).ok_or_else(|| Error::format(path, "truncated header"))?)
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;
    if !header.contains("'descr': '<f8'") || !header.contains("'fortran_order': False") {
        return Err(Error::format(path, "only C-ordered little-endian f64 arrays are supported"));
    }
    let shape = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::format(path, "missing shape"))?;
    let dims: Vec<usize> = shape
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::format(path, format!("bad dimension {s}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::format(path, format!("expected a 2-D array, found shape {dims:?}")));
    };
    let data: Vec<f64> = bytes[10 + len..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Grid::from_vec(rows, cols, data).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PresentationLabel;

    fn meta() -> InstanceMeta {
        InstanceMeta {
            subject_id: "s1".into(),
            finger_id: "f1".into(),
            session: 1,
            label: PresentationLabel::Bonafide,
        }
    }

    #[test]
    fn instance_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scans: Vec<BScan> = (0..3)
            .map(|i| BScan::new(Grid::from_fn(5, 7, |r, c| ((r * 7 + c + i) % 11) as f32 / 10.0), i + 1))
            .collect();
        let masks: Vec<AnnotationMask> = (0..3)
            .map(|i| AnnotationMask::new(Grid::from_fn(5, 7, |r, _| ((r + i) % 4) as u8)).unwrap())
            .collect();
        let inst = OctInstance::new(scans, meta()).unwrap();
        write_instance(dir.path(), &inst, Some(&masks)).unwrap();
        let (back, back_masks) = read_instance(dir.path()).unwrap();
        assert_eq!(back_masks.unwrap(), masks);
        assert_eq!(back.meta, inst.meta);
        for (a, b) in back.bscans().iter().zip(inst.bscans()) {
            for (x, y) in a.pixels.as_slice().iter().zip(b.pixels.as_slice()) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-7);
            }
        }
    }

    #[test]
    fn missing_or_corrupt_slice_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let scans = (0..2).map(|i| BScan::new(Grid::filled(4, 4, 0.5f32), i + 1)).collect();
        write_instance(dir.path(), &OctInstance::new(scans, meta()).unwrap(), None).unwrap();
        std::fs::write(dir.path().join(bscan_file(2)), b"garbage").unwrap();
        let err = read_instance(dir.path()).unwrap_err().to_string();
        assert!(err.contains("bscan_0002.png"), "{err}");
        std::fs::remove_file(dir.path().join(bscan_file(1))).unwrap();
        assert!(read_instance(dir.path()).is_err());
    }

    #[test]
    fn npy_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let g = Grid::from_fn(3, 4, |r, c| r as f64 * 0.5 - c as f64);
        write_npy(&path, &g).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes.len(), 10 + header_len + 12 * 8);
        assert_eq!(read_npy(&path).unwrap(), g);
    }

    #[test]
    fn u16_codes_cover_the_range() {
        let g = Grid::from_vec(1, 3, vec![0.0f32, 1.0, 2.0]).unwrap();
        assert_eq!(to_u16(&g).as_slice(), &[0, 65535, 65535]);
    }
}
