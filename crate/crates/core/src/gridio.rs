//! Flat binary files for images and label maps, plus PGM previews.
//!
//! ```text
//! magic    6 bytes "ISGRID"
//! version  u16 LE  (1)
//! dtype    u8      0 = f64 intensities, 1 = u8 labels
//! rank     u8      2 or 3
//! dims     rank × u32 LE
//! labels   u8      label count (label files only)
//! payload  volume × f64 LE | volume × u8
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SegError};
use crate::grid::{Dims, Image, LabelMap};

pub const MAGIC: &[u8; 6] = b"ISGRID";
pub const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

fn write_header<W: Write>(w: &mut W, dtype: u8, dims: &Dims) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype, dims.rank() as u8])?;
    for &d in dims.as_slice() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(SegError::Format("truncated grid file".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn read_header(buf: &mut &[u8]) -> Result<(u8, Dims)> {
    if take(buf, 6)? != MAGIC {
        return Err(SegError::Format("not a grid file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(buf, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(SegError::Format(format!("unsupported grid version {version}")));
    }
    let h = take(buf, 2)?;
    let (dtype, rank) = (h[0], h[1] as usize);
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()) as usize);
    }
    Ok((dtype, Dims::new(dims)?))
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data().len() * 8);
    write_header(&mut out, DTYPE_F64, img.dims()).expect("vec write");
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_labels(map: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + map.len());
    write_header(&mut out, DTYPE_U8, map.dims()).expect("vec write");
    out.push(map.num_labels());
    out.extend_from_slice(map.labels());
    out
}

/// Decodes an image without renormalizing it.
pub fn decode_image(mut buf: &[u8]) -> Result<Image> {
    let (dtype, dims) = read_header(&mut buf)?;
    if dtype != DTYPE_F64 {
        return Err(SegError::Format(format!("expected f64 image payload, found dtype {dtype}")));
    }
    let payload = take(&mut buf, dims.volume() * 8)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(dims, data)
}

pub fn decode_labels(mut buf: &[u8]) -> Result<LabelMap> {
    let (dtype, dims) = read_header(&mut buf)?;
    if dtype != DTYPE_U8 {
        return Err(SegError::Format(format!("expected u8 label payload, found dtype {dtype}")));
    }
    let num_labels = take(&mut buf, 1)?[0];
    let payload = take(&mut buf, dims.volume())?;
    LabelMap::new(dims, payload.to_vec(), num_labels)
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    Ok(fs::write(path, encode_image(img))?)
}

pub fn save_labels(path: &Path, map: &LabelMap) -> Result<()> {
    Ok(fs::write(path, encode_labels(map))?)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_image(&buf)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&fs::read(path)?)
}

/// Decodes a binary (P5) 8-bit PGM into a normalized 2D image.
pub fn decode_pgm(buf: &[u8]) -> Result<Image> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < buf.len() && buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < buf.len() && buf[i] == b'#' {
            while i < buf.len() && buf[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(SegError::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(SegError::Format(format!("expected a binary PGM (P5), found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| SegError::Format(format!("bad PGM header field {s:?}")));
    let (cols, rows, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(SegError::Format(format!("only 8-bit PGM is supported (maxval {maxval})")));
    }
    let payload = buf.get(i + 1..i + 1 + rows * cols).ok_or_else(|| SegError::Format("truncated PGM payload".into()))?;
    let data = payload.iter().map(|&v| f64::from(v)).collect();
    Image::normalized(Dims::new(vec![rows, cols])?, data)
}

/// Loads an image from a grid file, or from a PGM when the extension is `.pgm`.
pub fn load_image_any(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        decode_pgm(&bytes)
    } else {
        decode_image(&bytes)
    }
}

/// Rows × cols of the preview; 3D grids are tiled slice by slice vertically.
fn preview_shape(dims: &Dims) -> (usize, usize) {
    let d = dims.as_slice();
    let cols = d[d.len() - 1];
    (dims.volume() / cols, cols)
}

fn write_pgm(path: &Path, dims: &Dims, pixels: &[u8]) -> Result<()> {
    let (rows, cols) = preview_shape(dims);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{cols} {rows}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// 8-bit preview, min–max scaled.
pub fn export_image_pgm(path: &Path, img: &Image) -> Result<()> {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
        .collect();
    write_pgm(path, img.dims(), &px)
}

/// 8-bit preview with labels spread over the grey range.
pub fn export_labels_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    let top = u32::from(map.num_labels() - 1).max(1);
    let px: Vec<u8> = map
        .labels()
        .iter()
        .map(|&l| (u32::from(l) * 255 / top) as u8)
        .collect();
    write_pgm(path, map.dims(), &px)
}
