//! Density image export.

use std::path::Path;

use image::{GrayImage, ImageFormat};

use crate::error::{Error, Result};
use crate::eval::DensityImage;

/// 8-bit gray levels after gamma correction; row 0 is the shallowest.
pub fn to_gray(img: &DensityImage) -> GrayImage {
    let px: Vec<u8> = img.display().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_raw(img.grid.width as u32, img.grid.height as u32, px).expect("buffer matches grid")
}

/// Writes PNG for `.png` paths and binary PGM otherwise.
pub fn write_image(path: &Path, img: &DensityImage) -> Result<()> {
    img.grid.validate()?;
    let gray = to_gray(img);
    if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return gray.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        });
    }
    let mut bytes = format!("P5\n{} {}\n255\n", gray.width(), gray.height()).into_bytes();
    bytes.extend_from_slice(gray.as_raw());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{render_density, GridConfig};
    use crate::types::Vec2;

    #[test]
    fn brightest_pixel_is_white() {
        let grid = GridConfig::covering(0.0, 4.0, 0.0, 3.0, 1.0, 0.5).unwrap();
        let img = render_density(&[Vec2::new(0.5, 0.5), Vec2::new(0.5, 0.5), Vec2::new(2.5, 1.5)], &grid).unwrap();
        let g = to_gray(&img);
        assert_eq!(g.dimensions(), (4, 3));
        assert_eq!(g.get_pixel(0, 0).0[0], 255);
        assert_eq!(g.get_pixel(2, 1).0[0], (0.5f64.sqrt() * 255.0).round() as u8);
        assert_eq!(g.get_pixel(3, 2).0[0], 0);
    }

    #[test]
    fn writes_pgm_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridConfig::covering(0.0, 2.0, 0.0, 2.0, 1.0, 1.0).unwrap();
        let img = render_density(&[Vec2::new(1.5, 0.5)], &grid).unwrap();
        let pgm = dir.path().join("d.pgm");
        write_image(&pgm, &img).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 0, 0]);
        let png = dir.path().join("d.png");
        write_image(&png, &img).unwrap();
        assert!(std::fs::read(&png).unwrap().starts_with(b"\x89PNG"));
        assert!(write_image(&dir.path().join("missing/d.png"), &img).is_err());
    }
}
