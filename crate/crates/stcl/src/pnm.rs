//! Netpbm and PNG image files: 16-bit big-endian PGM for raw mosaics, 8-bit
//! PPM or PNG for RGB frames.

use std::path::Path;

use stcl_core::image::{Provenance, RgbImage};
use stcl_core::raw::BayerFrame;

use crate::error::{read_file, write_file, Error, Result};

fn header(magic: &str, w: usize, h: usize, maxval: u32) -> Vec<u8> {
    format!("{}\n{} {}\n{}\n", magic, w, h, maxval).into_bytes()
}

/// Parses a binary Netpbm header; returns `(width, height, maxval, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<(usize, usize, u32, usize), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected {} header", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(String::from("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(String::from("malformed header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| String::from("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(String::from("missing whitespace after header"));
    }
    let maxval = u32::try_from(fields[2]).map_err(|_| String::from("maxval out of range"))?;
    Ok((fields[0] as usize, fields[1] as usize, maxval, pos + 1))
}

pub fn encode_pgm16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    let mut out = header("P5", width, height, 65535);
    for &s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u16>), String> {
    let (w, h, maxval, off) = parse_header(bytes, b"P5")?;
    if maxval != 65535 {
        return Err(format!("expected maxval 65535, got {}", maxval));
    }
    let payload = &bytes[off..];
    if payload.len() != 2 * w * h {
        return Err(format!("{}×{} 16-bit image needs {} bytes, got {}", w, h, 2 * w * h, payload.len()));
    }
    Ok((w, h, payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

pub fn write_pgm16(path: &Path, frame: &BayerFrame) -> Result<()> {
    write_file(path, &encode_pgm16(frame.width(), frame.height(), frame.samples()))
}

/// Reads a raw mosaic; black level and white balance come from the manifest.
pub fn read_pgm16(path: &Path, black_level: u16, wb_ratios: (f64, f64)) -> Result<BayerFrame> {
    let (w, h, samples) = decode_pgm16(&read_file(path)?).map_err(|e| Error::format(path, e))?;
    BayerFrame::new(w, h, samples, black_level, wb_ratios).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let (w, h) = img.size();
    let mut out = header("P6", w, h, 255);
    out.extend_from_slice(&img.to_rgb8());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let (w, h, maxval, off) = parse_header(bytes, b"P6")?;
    if maxval != 255 {
        return Err(format!("expected maxval 255, got {}", maxval));
    }
    let payload = &bytes[off..];
    if payload.len() != 3 * w * h {
        return Err(format!("{}×{} RGB image needs {} bytes, got {}", w, h, 3 * w * h, payload.len()));
    }
    RgbImage::from_rgb8(w, h, payload).map_err(|e| e.to_string())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let (w, h) = img.size();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Config(format!("png encoder: {}", e)))?;
        writer
            .write_image_data(&img.to_rgb8())
            .map_err(|e| Error::Config(format!("png encoder: {}", e)))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(format!("unsupported PNG colour type {:?}", other)),
    };
    RgbImage::from_rgb8(w, h, &rgb).map_err(|e| e.to_string())
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Writes an 8-bit RGB frame; the extension selects PNG, anything else PPM.
pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = if is_png(path) { encode_png(img)? } else { encode_ppm(img) };
    write_file(path, &bytes)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = read_file(path)?;
    let img = if is_png(path) { decode_png(&bytes) } else { decode_ppm(&bytes) };
    img.map(|i| i.with_provenance(Provenance::Srgb8)).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_is_big_endian() {
        let b = encode_pgm16(2, 1, &[0x0102, 0xfffe]);
        assert!(b.starts_with(b"P5\n2 1\n65535\n"));
        assert_eq!(&b[b.len() - 4..], &[1, 2, 0xff, 0xfe]);
        assert_eq!(decode_pgm16(&b).unwrap(), (2, 1, vec![0x0102, 0xfffe]));
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut b = b"P5 # note\n2 1 # size\n65535\n".to_vec();
        b.extend_from_slice(&[0, 1, 0, 2]);
        assert_eq!(decode_pgm16(&b).unwrap().2, vec![1, 2]);
    }

    #[test]
    fn truncated_and_wrong_maxval_rejected() {
        let b = encode_pgm16(2, 2, &[1, 2, 3, 4]);
        assert!(decode_pgm16(&b[..b.len() - 1]).is_err());
        assert!(decode_pgm16(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let bytes: Vec<u8> = (0..3 * 5 * 4).map(|i| (i * 7 % 256) as u8).collect();
        let img = RgbImage::from_rgb8(5, 4, &bytes).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap().to_rgb8(), bytes);
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap().to_rgb8(), bytes);
    }
}
