//! Binary greyscale (P5) image dumps.

use std::path::Path;

use crate::error::Result;

/// Maps `[-1, 1]` to `0..=255`.
pub fn to_gray(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Square images of side `side` packed row-major into a grid with `cols`
/// images per row. Unused cells stay black.
pub fn montage(images: &[&[f64]], side: usize, cols: usize) -> (usize, usize, Vec<u8>) {
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols).max(1);
    let (w, h) = (cols * side, rows * side);
    let mut px = vec![0u8; w * h];
    for (k, img) in images.iter().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        for r in 0..side {
            for c in 0..side {
                px[(gr * side + r) * w + gc * side + c] = to_gray(img[r * side + c]);
            }
        }
    }
    (w, h, px)
}

pub fn write_montage(path: &Path, images: &[&[f64]], side: usize, cols: usize) -> Result<()> {
    let (w, h, px) = montage(images, side, cols);
    std::fs::write(path, encode_pgm(w, h, &px))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels() {
        assert_eq!(to_gray(-1.0), 0);
        assert_eq!(to_gray(1.0), 255);
        assert_eq!(to_gray(0.0), 128);
        assert_eq!(to_gray(7.0), 255);
    }

    #[test]
    fn montage_layout_and_header() {
        let a = [-1.0, 1.0, 1.0, -1.0];
        let b = [1.0; 4];
        let (w, h, px) = montage(&[&a, &b, &a], 2, 2);
        assert_eq!((w, h), (4, 4));
        assert_eq!(&px[..4], &[0, 255, 255, 255]);
        assert_eq!(&px[8..12], &[0, 255, 0, 0]);
        let bytes = encode_pgm(w, h, &px);
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 16);
    }
}
