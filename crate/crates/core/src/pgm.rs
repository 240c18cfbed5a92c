//! Binary (P5) PGM reading and writing for segmentation masks.
//!
//! Masks are single-channel `[H, W]` tensors holding 0 or 1; foreground
//! writes as 255. The header is the canonical `P5\n<W> <H>\n255\n` form
//! and the reader accepts exactly that.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub fn write_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    std::fs::write(path, to_bytes(mask)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    from_bytes(&std::fs::read(path)?)
}

pub fn to_bytes(mask: &Tensor) -> Result<Vec<u8>> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(Error::shape("write_pgm", format!("mask {shape:?}, expected [H, W]")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in mask.data() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        buf.push(if v == 1.0 { 255 } else { 0 });
    }
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let fail = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(fail(0, "not a binary PGM (missing P5)".into()));
    }
    let mut pos = 2;
    let field = |pos: &mut usize, what: &str| -> Result<usize> {
        if bytes.get(*pos) != Some(&b'\n') && bytes.get(*pos) != Some(&b' ') {
            return Err(fail(*pos, format!("expected separator before {what}")));
        }
        *pos += 1;
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if *pos == start {
            return Err(fail(start, format!("expected {what}")));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .unwrap()
            .parse::<usize>()
            .map_err(|e| fail(start, format!("bad {what}: {e}")))
    };
    let w = field(&mut pos, "width")?;
    let h = field(&mut pos, "height")?;
    let maxval = field(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(fail(pos, format!("maxval {maxval}, expected 255")));
    }
    if bytes.get(pos) != Some(&b'\n') {
        return Err(fail(pos, "expected newline after maxval".into()));
    }
    pos += 1;
    let need = w * h;
    let have = bytes.len() - pos;
    if have != need {
        return Err(fail(
            bytes.len().min(pos + need),
            format!("payload holds {have} pixels, header promises {need}"),
        ));
    }
    let data: Vec<f64> = bytes[pos..].iter().map(|&b| if b == 0 { 0.0 } else { 1.0 }).collect();
    Tensor::new(vec![h, w], data)
}
