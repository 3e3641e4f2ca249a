//! Binary PGM (P5) reader/writer. Binary PPM (P6) inputs are converted to
//! luma on load.

use std::path::Path;

use super::image::GrayImage;
use crate::error::{Error, Result};

fn parse_err(message: impl Into<String>) -> Error {
    Error::Parse {
        location: "pnm header".into(),
        message: message.into(),
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(parse_err("file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(parse_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(format!("expected a number at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| parse_err(format!("{e}")))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err("missing whitespace after maxval"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_offset: pos + 1,
    })
}

/// Decode P5 or P6 bytes into a grayscale image.
pub fn decode_pnm(bytes: &[u8]) -> Result<GrayImage> {
    let h = read_header(bytes)?;
    if h.maxval == 0 || h.maxval > 255 {
        return Err(parse_err(format!("unsupported maxval {}", h.maxval)));
    }
    let channels = match &h.magic {
        b"P5" => 1,
        b"P6" => 3,
        m => {
            return Err(parse_err(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(m)
            )))
        }
    };
    let n = h.width * h.height;
    let raster = &bytes[h.data_offset..];
    if raster.len() < n * channels {
        return Err(parse_err(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            n * channels
        )));
    }
    let scale = 255.0 / h.maxval as f64;
    let pixels = if channels == 1 {
        raster[..n].iter().map(|&v| v as f64 * scale).collect()
    } else {
        raster[..3 * n]
            .chunks_exact(3)
            .map(|c| {
                let luma = 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64;
                (luma * scale).round().clamp(0.0, 255.0)
            })
            .collect()
    };
    GrayImage::new(h.width, h.height, pixels)
}

/// Encode as P5; intensities are rounded to the nearest integer.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&p| p.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            location: path.display().to_string(),
            message,
        },
        other => other,
    })
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_round_trip() {
        let img = GrayImage::new(3, 2, vec![0.0, 10.0, 20.0, 128.0, 254.0, 255.0]).unwrap();
        let back = decode_pnm(&encode_pgm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_and_p6_luma() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 10, 10, 10]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.get(0, 0), (0.299f64 * 255.0).round());
        assert_eq!(img.get(1, 0), 10.0);
    }

    #[test]
    fn truncated_raster_is_an_error() {
        let bytes = b"P5 4 4 255\n\x00\x01".to_vec();
        assert!(matches!(decode_pnm(&bytes), Err(Error::Parse { .. })));
        assert!(decode_pnm(b"P2 1 1 255\n0").is_err());
    }
}
