//! PNG color images and masks, PFM depth maps.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ImageBuffer;

/// Decoded 8-bit image: width, height, channels, samples.
fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(format!("PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(format!("PNG: {e}")))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format("PNG palette was not expanded")),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(format!("unsupported PNG bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let mut out = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(stride).take(h) {
        out.extend_from_slice(&row[..w * channels]);
    }
    Ok((w, h, channels, out))
}

/// Sky mask from PNG bytes: 1 where the (gray or channel-mean) value exceeds
/// 127, else 0. Alpha is ignored.
pub fn decode_mask(bytes: &[u8]) -> Result<ImageBuffer> {
    let (w, h, c, px) = decode_png(bytes)?;
    let color = if c >= 3 { 3 } else { 1 };
    let data = px
        .chunks_exact(c)
        .map(|p| {
            let v = p[..color].iter().map(|&v| u32::from(v)).sum::<u32>() as f64 / color as f64;
            if v > 127.0 { 1.0 } else { 0.0 }
        })
        .collect();
    ImageBuffer::from_data(w, h, 1, data)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes).map_err(|e| super::ply::with_path(e, path))
}

/// RGB image in [0, 1] from PNG bytes; gray inputs are replicated.
pub fn decode_color(bytes: &[u8]) -> Result<ImageBuffer> {
    let (w, h, c, px) = decode_png(bytes)?;
    let mut data = Vec::with_capacity(w * h * 3);
    for p in px.chunks_exact(c) {
        let rgb = if c >= 3 { [p[0], p[1], p[2]] } else { [p[0]; 3] };
        data.extend(rgb.map(|v| f64::from(v) / 255.0));
    }
    ImageBuffer::from_data(w, h, 3, data)
}

pub fn load_color(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_color(&bytes).map_err(|e| super::ply::with_path(e, path))
}

/// 8-bit PNG of a 1- or 3-channel buffer, values clamped to [0, 1].
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(format!("PNG: {e}")))?;
        let px: Vec<u8> = img
            .data
            .iter()
            .map(|v| (if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 } * 255.0).round() as u8)
            .collect();
        writer.write_image_data(&px).map_err(|e| Error::format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

pub fn save_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Little-endian PFM (`Pf` or `PF`, scale −1), rows bottom to top. Pixels
/// that are non-finite or flagged invalid are written as 0.
pub fn encode_pfm(img: &ImageBuffer, valid: Option<&[bool]>) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel PFM"))),
    };
    if valid.is_some_and(|v| v.len() != img.width * img.height) {
        return Err(Error::SizeMismatch {
            expected: format!("{} validity flags", img.width * img.height),
            found: valid.map_or(0, <[bool]>::len).to_string(),
        });
    }
    let mut out = Vec::with_capacity(img.data.len() * 4 + 32);
    write!(out, "{magic}\n{} {}\n-1.0\n", img.width, img.height).expect("write to Vec");
    let c = img.channels;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let i = y * img.width + x;
            let ok = valid.is_none_or(|v| v[i]);
            for ch in 0..c {
                let v = img.data[i * c + ch];
                let v = if ok && v.is_finite() { v as f32 } else { 0.0 };
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_pfm(img: &ImageBuffer, valid: Option<&[bool]>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pfm(img, valid)?).map_err(|e| Error::io(path, e))
}

pub fn parse_pfm(bytes: &[u8]) -> Result<ImageBuffer> {
    // three whitespace-terminated header tokens lines: magic, "w h", scale
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
        if start == pos || pos - start > 32 {
            return Err(Error::format("PFM header truncated"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("PFM header is not ASCII"))?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("PFM header truncated"));
    }
    pos += 1;
    let channels = match fields[0] {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::format(format!("bad PFM magic `{m}`"))),
    };
    let dim = |s: &str| s.parse::<usize>().ok().filter(|&d| d > 0);
    let (w, h) = match (dim(fields[1]), dim(fields[2])) {
        (Some(w), Some(h)) => (w, h),
        _ => return Err(Error::format("bad PFM dimensions")),
    };
    let scale: f64 = fields[3]
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::format("bad PFM scale"))?;
    let little = scale < 0.0;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4 * channels))
        .ok_or_else(|| Error::format("PFM dimensions overflow"))?;
    let body = bytes
        .get(pos..)
        .filter(|b| b.len() >= need)
        .ok_or_else(|| Error::format("PFM body truncated"))?;
    let mut data = vec![0.0; w * h * channels];
    for (k, chunk) in body[..need].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("PFM sample {k}")));
        }
        let (row, rest) = (k / (w * channels), k % (w * channels));
        data[(h - 1 - row) * w * channels + rest] = f64::from(v);
    }
    ImageBuffer::from_data(w, h, channels, data)
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes).map_err(|e| super::ply::with_path(e, path))
}
