//! Minimal binary PPM (P6) reader and PGM (P5) writer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// r, g, b interleaved, row-major.
    pub data: Vec<u8>,
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comments
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(token: &str, what: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Format(format!("bad {what}: '{token}'")))
}

/// Read a binary P6 image from raw bytes.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let magic = read_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::Format(format!("expected P6 magic, got '{magic}'")));
    }
    let width = parse_dim(&read_token(bytes, &mut pos)?, "width")?;
    let height = parse_dim(&read_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(&read_token(bytes, &mut pos)?, "maxval")? as u16;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte between header and raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing raster separator".into()));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    Ok(RgbImage {
        width,
        height,
        maxval,
        data: bytes[pos..pos + need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_pgm(img))?;
    Ok(())
}

/// Read a binary P5 image (used by tests to round-trip heatmaps).
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let magic = read_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected P5 magic, got '{magic}'")));
    }
    let width = parse_dim(&read_token(bytes, &mut pos)?, "width")?;
    let height = parse_dim(&read_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(&read_token(bytes, &mut pos)?, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing raster separator".into()));
    }
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::Format("raster truncated".into()));
    }
    Ok(GrayImage {
        width,
        height,
        data: bytes[pos..pos + need].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_pgm(&bytes)
}

/// Rec. 601 luminance in [0, 1], as a height x width tensor.
pub fn rgb_to_grayscale(img: &RgbImage) -> Tensor {
    let scale = 1.0 / img.maxval as f64;
    Tensor::from_fn(img.height, img.width, |y, x| {
        let i = (y * img.width + x) * 3;
        let r = img.data[i] as f64 * scale;
        let g = img.data[i + 1] as f64 * scale;
        let b = img.data[i + 2] as f64 * scale;
        0.299 * r + 0.587 * g + 0.114 * b
    })
}

/// Pack a [0, 1] tensor into an 8-bit grayscale PPM-compatible RGB raster.
pub fn grayscale_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let v = (t.at(y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            data.extend_from_slice(&[v, v, v]);
        }
    }
    RgbImage {
        width: w,
        height: h,
        maxval: 255,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comments() {
        let img = RgbImage {
            width: 2,
            height: 2,
            maxval: 255,
            data: vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
        };
        let mut bytes = b"P6\n# a comment\n2 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&img.data);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn truncated_raster_is_format_error() {
        let bytes = b"P6\n2 2\n255\nabc".to_vec();
        assert!(matches!(decode_ppm(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n0"), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_encode_decode_round_trip() {
        let img = GrayImage {
            width: 3,
            height: 1,
            data: vec![0, 128, 255],
        };
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn grayscale_conversion_uses_luminance() {
        let img = RgbImage {
            width: 1,
            height: 1,
            maxval: 255,
            data: vec![255, 0, 0],
        };
        let t = rgb_to_grayscale(&img);
        assert!((t.at(0, 0) - 0.299).abs() < 1e-12);
    }
}
