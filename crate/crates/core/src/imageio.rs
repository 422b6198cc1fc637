//! PNG encoding for images, binary masks and 16-bit probability planes.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, ArrayView2};

use crate::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::validation(format!("missing file {}", path.display())));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save(img: image::DynamicImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads an 8-bit grayscale PNG into `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let img = open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::validation(format!(
                "{} is {:?}, expected 8-bit grayscale",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        f64::from(gray.get_pixel(c as u32, r as u32)[0]) / 255.0
    }))
}

/// Writes a `[0, 1]` image as 8-bit grayscale (rounded).
pub fn write_gray(path: &Path, image: ArrayView2<'_, f64>) -> Result<()> {
    let (h, w) = image.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    save(img.into(), path)
}

/// Reads a mask PNG. Only the values 0 and 255 are accepted.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::validation(format!(
                "mask {} is {:?}, expected 8-bit grayscale",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = match px[0] {
            0 => 0,
            255 => 1,
            v => {
                return Err(Error::validation(format!(
                    "mask {} has value {v} at ({y}, {x}); only 0 and 255 are allowed",
                    path.display()
                )))
            }
        };
    }
    Ok(out)
}

pub fn write_mask(path: &Path, mask: ArrayView2<'_, u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    save(img.into(), path)
}

/// Quantizes a probability to a 16-bit code (`value / 65535`).
pub fn probability_to_u16(p: f64) -> u16 {
    (p.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn u16_to_probability(v: u16) -> f64 {
    f64::from(v) / 65535.0
}

pub fn write_prob16(path: &Path, plane: ArrayView2<'_, f64>) -> Result<()> {
    let (h, w) = plane.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([probability_to_u16(plane[[y as usize, x as usize]])])
    });
    save(img.into(), path)
}

pub fn read_prob16(path: &Path) -> Result<Array2<f64>> {
    let img = open(path)?;
    let g = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::validation(format!(
                "{} is {:?}, expected 16-bit grayscale",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        u16_to_probability(g.get_pixel(c as u32, r as u32)[0])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mask_roundtrip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = array![[0u8, 1], [1, 1]];
        write_mask(&p, m.view()).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);

        let bad = dir.path().join("bad.png");
        write_gray(&bad, array![[0.5, 0.0]].view()).unwrap();
        assert!(read_mask(&bad).unwrap_err().is_validation());
    }

    #[test]
    fn prob16_roundtrip_is_exact_on_codes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        let plane = array![[0.0, 1.0], [u16_to_probability(12345), u16_to_probability(65534)]];
        write_prob16(&p, plane.view()).unwrap();
        assert_eq!(read_prob16(&p).unwrap(), plane);
    }
}
