//! Image file I/O: PNG and binary PPM (P6). Format is picked from the file
//! extension; everything else is rejected.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

use super::{BinaryMask, ImageRGB};

pub fn read_image(path: &Path) -> Result<ImageRGB> {
    match extension(path)? {
        Format::Png => {
            let img = image::open(path)?.to_rgb8();
            ImageRGB::from_raw(img.width() as usize, img.height() as usize, img.into_raw())
        }
        Format::Ppm => read_ppm(&fs::read(path)?),
    }
}

pub fn write_image(path: &Path, img: &ImageRGB) -> Result<()> {
    match extension(path)? {
        Format::Png => {
            let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.as_raw().to_vec())
                .expect("buffer length matches dimensions");
            buf.save_with_format(path, image::ImageFormat::Png)?;
            Ok(())
        }
        Format::Ppm => {
            let f = fs::File::create(path)?;
            let mut w = BufWriter::new(f);
            write!(w, "P6\n{} {}\n255\n", img.width(), img.height())?;
            w.write_all(img.as_raw())?;
            Ok(())
        }
    }
}

/// Mask as an 8-bit gray PNG: true -> 255, false -> 0.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let buf: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, buf)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Gray PNG -> mask; pixels >= 128 are foreground.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let bits = img.as_raw().iter().map(|&v| v >= 128).collect();
    BinaryMask::from_raw(img.width() as usize, img.height() as usize, bits)
}

enum Format {
    Png,
    Ppm,
}

fn extension(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ref e) if e == "png" => Ok(Format::Png),
        Some(ref e) if e == "ppm" => Ok(Format::Ppm),
        other => Err(Error::InvalidInput(format!(
            "unsupported image extension {:?} (png and ppm only)",
            other
        ))),
    }
}

fn read_ppm(bytes: &[u8]) -> Result<ImageRGB> {
    fn skip_space(bytes: &[u8], pos: &mut usize) {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
        skip_space(bytes, pos);
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidInput("malformed ppm header".into()))
    }

    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::InvalidInput("not a binary ppm (P6) file".into()));
    }
    let mut pos = 2usize;
    let width = token(bytes, &mut pos)?;
    let height = token(bytes, &mut pos)?;
    let maxval = token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::InvalidInput(format!("unsupported ppm maxval {maxval} (255 only)")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::InvalidInput("ppm pixel data truncated".into()));
    }
    ImageRGB::from_raw(width, height, bytes[pos..pos + need].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::ImageRGB;

    fn sample() -> ImageRGB {
        ImageRGB::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 80, 7])
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = sample();
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = sample();
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn ppm_with_comment() {
        let data = b"P6\n# a comment\n2 1\n255\n\x01\x02\x03\x04\x05\x06";
        let img = read_ppm(data).unwrap();
        assert_eq!(img.pixel(0, 0), [1, 2, 3]);
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn unknown_extension_rejected() {
        let err = read_image(Path::new("x.bmp")).unwrap_err();
        assert!(err.to_string().contains("unsupported image extension"));
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = crate::BinaryMask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        write_mask_png(&path, &mask).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }
}
