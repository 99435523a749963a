//! Image file formats: PFM (read/write), Radiance RGBE (read only), PNG previews (write only).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Writes a little-endian PFM. Rows go bottom to top as the format requires.
/// Non-finite and negative values are rejected.
pub fn write_pfm(image: &Image, path: &Path) -> Result<()> {
    let bytes = encode_pfm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pfm(image: &Image) -> Result<Vec<u8>> {
    let tag = match image.channels {
        3 => "PF",
        1 => "Pf",
        c => return Err(Error::InvalidImage(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    if let Some(v) = image.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidImage(format!("PFM pixels must be finite and nonnegative, found {v}")));
    }
    let mut out = Vec::with_capacity(32 + image.data.len() * 4);
    write!(out, "{tag}\n{} {}\n-1.0\n", image.width, image.height).expect("writing to a Vec");
    let row_len = image.width * image.channels;
    for y in (0..image.height).rev() {
        for v in &image.data[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::InvalidImage(format!("malformed PFM: {m}"));
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(bad(&format!("unknown magic '{other}'"))),
    };
    let width: usize = token()?.parse().map_err(|_| bad("width"))?;
    let height: usize = token()?.parse().map_err(|_| bad("height"))?;
    let scale: f64 = token()?.parse().map_err(|_| bad("scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be nonzero"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let little_endian = scale < 0.0;
    let count = width * height * channels;
    if bytes.len() < pos + count * 4 {
        return Err(bad("raster is truncated"));
    }
    let raster = &bytes[pos..pos + count * 4];
    let mut data = vec![0.0f32; count];
    let row_len = width * channels;
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let file_row = i / row_len;
        let y = height - 1 - file_row;
        data[y * row_len + i % row_len] = v;
    }
    Image::from_data(width, height, channels, data)
}

/// Reads a Radiance `.hdr` (RGBE) file, flat or new-style run-length encoded.
pub fn read_hdr(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_hdr(&bytes)
}

pub fn decode_hdr(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::InvalidImage(format!("malformed HDR: {m}"));
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        let line = String::from_utf8_lossy(&bytes[start..*pos]).trim_end().to_string();
        *pos += 1;
        Ok(line)
    };
    let magic = next_line(&mut pos)?;
    if !magic.starts_with("#?") {
        return Err(bad("missing #? signature"));
    }
    loop {
        let line = next_line(&mut pos)?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt != "32-bit_rle_rgbe" {
                return Err(bad(&format!("unsupported format {fmt}")));
            }
        }
    }
    let res = next_line(&mut pos)?;
    let parts: Vec<&str> = res.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "-Y" || parts[2] != "+X" {
        return Err(bad("only -Y H +X W orientation is supported"));
    }
    let height: usize = parts[1].parse().map_err(|_| bad("height"))?;
    let width: usize = parts[3].parse().map_err(|_| bad("width"))?;

    let mut rgbe = vec![[0u8; 4]; width * height];
    for y in 0..height {
        let row = &mut rgbe[y * width..(y + 1) * width];
        let rle = width >= 8
            && width < 32768
            && pos + 4 <= bytes.len()
            && bytes[pos] == 2
            && bytes[pos + 1] == 2
            && bytes[pos + 2] & 0x80 == 0;
        if rle {
            let w = ((bytes[pos + 2] as usize) << 8) | bytes[pos + 3] as usize;
            if w != width {
                return Err(bad("scanline width mismatch"));
            }
            pos += 4;
            for c in 0..4 {
                let mut x = 0;
                while x < width {
                    let count = *bytes.get(pos).ok_or_else(|| bad("truncated scanline"))? as usize;
                    pos += 1;
                    if count > 128 {
                        let run = count - 128;
                        let v = *bytes.get(pos).ok_or_else(|| bad("truncated run"))?;
                        pos += 1;
                        if x + run > width {
                            return Err(bad("run overflows scanline"));
                        }
                        for px in &mut row[x..x + run] {
                            px[c] = v;
                        }
                        x += run;
                    } else {
                        if count == 0 || x + count > width || pos + count > bytes.len() {
                            return Err(bad("bad literal run"));
                        }
                        for (k, px) in row[x..x + count].iter_mut().enumerate() {
                            px[c] = bytes[pos + k];
                        }
                        pos += count;
                        x += count;
                    }
                }
            }
        } else {
            if pos + width * 4 > bytes.len() {
                return Err(bad("truncated flat scanline"));
            }
            for (x, px) in row.iter_mut().enumerate() {
                px.copy_from_slice(&bytes[pos + x * 4..pos + x * 4 + 4]);
            }
            pos += width * 4;
        }
    }
    let mut data = Vec::with_capacity(width * height * 3);
    for px in rgbe {
        if px[3] == 0 {
            data.extend_from_slice(&[0.0; 3]);
        } else {
            let f = 2f32.powi(px[3] as i32 - 136);
            data.extend_from_slice(&[px[0] as f32 * f, px[1] as f32 * f, px[2] as f32 * f]);
        }
    }
    Image::from_data(width, height, 3, data)
}

/// Loads an environment or texture image by extension (`.pfm` or `.hdr`).
pub fn read_hdr_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("hdr") => read_hdr(path),
        _ => read_pfm(path),
    }
}

fn linear_to_srgb(v: f32) -> u8 {
    let v = v.clamp(0.0, 1.0);
    let s = if v <= 0.003_130_8 { 12.92 * v } else { 1.055 * v.powf(1.0 / 2.4) - 0.055 };
    (s * 255.0 + 0.5) as u8
}

/// 8-bit sRGB preview. One-channel images are written as grayscale.
pub fn write_png_preview(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(img.pixel_count() * 3);
    for i in 0..img.pixel_count() {
        let p = &img.data[i * img.channels..(i + 1) * img.channels];
        match img.channels {
            1 => buf.extend_from_slice(&[linear_to_srgb(p[0]); 3]),
            _ => buf.extend(p.iter().take(3).map(|&v| linear_to_srgb(v))),
        }
    }
    let out = image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
        .ok_or_else(|| Error::Png("buffer size mismatch".into()))?;
    out.save(path).map_err(|e| Error::Png(e.to_string()))
}
