//! Binary PPM export of `[−1, 1]` grids.

use std::path::Path;

use super::binfmt::atomic_write;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Array;

/// `[−1, 1] → [0, 255]`, clamped and rounded.
pub fn to_byte(v: f32) -> u8 {
    (((v as f64 + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

/// P6 bytes of an `[H, W, C]` image; one channel is written as gray.
pub fn ppm_bytes(image: &Array<f32>) -> Result<Vec<u8>> {
    let &[h, w, c] = image.shape() else {
        return Err(shape_err("ppm", format!("expected [H, W, C], got {:?}", image.shape())));
    };
    if c != 1 && c != 3 {
        return Err(shape_err("ppm", format!("{c} channels")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in image.data().chunks_exact(c) {
        if c == 1 {
            out.extend([to_byte(px[0]); 3]);
        } else {
            out.extend(px.iter().map(|&v| to_byte(v)));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Array<f32>) -> Result<()> {
    atomic_write(path, &ppm_bytes(image)?)
}

/// Writes `frame_000.ppm`, `frame_001.ppm`, … for an `[F, H, W, C]` clip.
pub fn write_video(dir: &Path, clip: &Array<f32>) -> Result<()> {
    let &[f, h, w, c] = clip.shape() else {
        return Err(shape_err("video", format!("expected [F, H, W, C], got {:?}", clip.shape())));
    };
    std::fs::create_dir_all(dir)?;
    let frame = h * w * c;
    for i in 0..f {
        let img = Array::new(vec![h, w, c], clip.data()[i * frame..(i + 1) * frame].to_vec())?;
        write_ppm(&dir.join(format!("frame_{i:03}.ppm")), &img)?;
    }
    Ok(())
}

/// Parses a P6 file back to `(width, height, rgb bytes)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |d: &str| Error::Format { offset: 0, detail: format!("ppm: {d}") };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("short header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("not an 8-bit P6 file"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    if pos >= bytes.len() {
        return Err(bad("missing pixel data"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h * 3, body.len())));
    }
    Ok((w, h, body.to_vec()))
}
