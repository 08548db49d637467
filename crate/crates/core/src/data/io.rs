//! 8-bit RGB image files: PNG through the `png` crate, binary PPM (P6) by hand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{to_u8, ImageBuffer};

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn from_bytes(height: usize, width: usize, rgb: &[u8]) -> Result<ImageBuffer> {
    ImageBuffer::new(height, width, rgb.iter().map(|&b| b as f32 / 255.0).collect())
}

fn to_bytes(image: &ImageBuffer) -> Vec<u8> {
    image.pixels().iter().map(|&v| to_u8(v)).collect()
}

/// Reads an 8-bit RGB (or RGBA, alpha dropped) PNG or a P6 PPM with maxval
/// 255. The format is detected from the file contents.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let mut head = [0u8; 8];
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    drop(f);
    if n == 8 && head == PNG_SIGNATURE {
        load_png(path)
    } else if n >= 2 && &head[..2] == b"P6" {
        load_ppm(path)
    } else {
        Err(Error::format(path, "not a PNG or binary PPM file"))
    }
}

fn load_png(path: &Path) -> Result<ImageBuffer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "png: image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("png: {:?} samples, only 8-bit is supported", info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::format(
                path,
                format!("png: colour type {other:?}, expected RGB"),
            ))
        }
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * stride].chunks_exact(stride) {
            rgb.extend_from_slice(&px[..3]);
        }
    }
    from_bytes(h, w, &rgb)
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

fn load_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 2;
    let bad = |m: &str| Error::format(path, format!("ppm: {m}"));
    let w = ppm_token(&bytes, &mut pos).ok_or_else(|| bad("missing width"))?;
    let h = ppm_token(&bytes, &mut pos).ok_or_else(|| bad("missing height"))?;
    let maxval = ppm_token(&bytes, &mut pos).ok_or_else(|| bad("missing maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad(&format!(
            "truncated: {} sample bytes for a {w}×{h} image",
            bytes.len().saturating_sub(pos)
        )));
    }
    from_bytes(h, w, &bytes[pos..pos + need])
}

/// Writes the image as 8-bit samples (rounded half away from zero); the
/// format follows the extension, `.png` or `.ppm`.
pub fn save_image(image: &ImageBuffer, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => save_png(image, path),
        Some("ppm") => save_ppm(image, path),
        _ => Err(Error::format(path, "unsupported extension, use .png or .ppm")),
    }
}

fn save_png(image: &ImageBuffer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        image.width() as u32,
        image.height() as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path, format!("png: {e}"));
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(&to_bytes(image)).map_err(fail)?;
    writer.finish().map_err(fail)
}

fn save_ppm(image: &ImageBuffer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = write!(w, "P6\n{} {}\n255\n", image.width(), image.height())
        .and_then(|_| w.write_all(&to_bytes(image)))
        .and_then(|_| w.flush());
    res.map_err(|e| Error::io(path, e))
}

/// One path per line; blank lines and `#` comments are skipped. Relative
/// paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn write_manifest(paths: &[PathBuf], path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in paths {
        text.push_str(&p.to_string_lossy());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
