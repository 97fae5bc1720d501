use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Value written into masked pixels (black in the tanh range).
pub const MASK_FILL: f64 = -1.0;

/// Layout of flattened images: `index = (row·side + col)·channels + ch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageGeometry {
    pub side: usize,
    pub channels: usize,
}

impl ImageGeometry {
    pub fn pixels(&self) -> usize {
        self.side * self.side * self.channels
    }
}

/// Axis-aligned rectangle `[x0, x0+w) × [y0, y0+h)` inside a `side × side`
/// image; `x` indexes columns, `y` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub side: usize,
}

impl Mask {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize, side: usize) -> Result<Self> {
        let ok = w >= 1 && h >= 1 && w <= side && h <= side && x0 + w <= side && y0 + h <= side;
        if !ok {
            return Err(Error::Contract(format!(
                "mask ({x0},{y0},{w},{h}) does not fit a {side}x{side} image"
            )));
        }
        Ok(Mask { x0, y0, w, h, side })
    }

    pub fn full(side: usize) -> Self {
        Mask {
            x0: 0,
            y0: 0,
            w: side,
            h: side,
            side,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.x0 <= col && col < self.x0 + self.w && self.y0 <= row && row < self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// `w, h` uniform on `{1..side}`, then the origin uniform over every
/// position that keeps the mask inside the image.
pub fn sample_mask(side: usize, rng: &mut Rng) -> Mask {
    assert!(side >= 1, "image side must be positive");
    let w = rng.range_inclusive(1, side);
    let h = rng.range_inclusive(1, side);
    sample_mask_origin(side, w, h, rng)
}

/// Origin draw for a fixed mask size.
pub fn sample_mask_origin(side: usize, w: usize, h: usize, rng: &mut Rng) -> Mask {
    let x0 = rng.range_inclusive(0, side - w);
    let y0 = rng.range_inclusive(0, side - h);
    Mask { x0, y0, w, h, side }
}

/// Element-wise membership for a `[batch, pixels]` tensor. `masks` holds one
/// mask per row, or a single mask applied to every row.
pub fn mask_bits(masks: &[Mask], batch: usize, geom: ImageGeometry) -> Result<Vec<bool>> {
    if masks.len() != batch && masks.len() != 1 {
        return Err(Error::shape(
            "mask",
            format!("{} masks for a batch of {batch}", masks.len()),
        ));
    }
    if masks.iter().any(|m| m.side != geom.side) {
        return Err(Error::shape("mask", "mask side differs from image side"));
    }
    let mut bits = Vec::with_capacity(batch * geom.pixels());
    for b in 0..batch {
        let m = &masks[if masks.len() == 1 { 0 } else { b }];
        for row in 0..geom.side {
            for col in 0..geom.side {
                let inside = m.contains(row, col);
                bits.extend(std::iter::repeat(inside).take(geom.channels));
            }
        }
    }
    Ok(bits)
}

fn check_images(x: &Tensor, geom: ImageGeometry) -> Result<()> {
    if !x.is_matrix() || x.cols() != geom.pixels() {
        return Err(Error::shape(
            "mask",
            format!("{:?} is not a batch of {}x{}x{} images", x.shape(), geom.side, geom.side, geom.channels),
        ));
    }
    Ok(())
}

/// Sets masked pixels to [`MASK_FILL`].
pub fn apply_mask(x: &Tensor, masks: &[Mask], geom: ImageGeometry) -> Result<Tensor> {
    check_images(x, geom)?;
    let bits = mask_bits(masks, x.rows(), geom)?;
    let mut out = x.clone();
    for (v, inside) in out.data_mut().iter_mut().zip(bits) {
        if inside {
            *v = MASK_FILL;
        }
    }
    Ok(out)
}

/// `recon` inside the mask, `x` outside; exact selection.
pub fn mix(x: &Tensor, recon: &Tensor, masks: &[Mask], geom: ImageGeometry) -> Result<Tensor> {
    check_images(x, geom)?;
    check_images(recon, geom)?;
    if x.shape() != recon.shape() {
        return Err(Error::shape("mix", "image and reconstruction differ in shape"));
    }
    let bits = mask_bits(masks, x.rows(), geom)?;
    let data = x
        .data()
        .iter()
        .zip(recon.data())
        .zip(bits)
        .map(|((&a, &r), inside)| if inside { r } else { a })
        .collect();
    Tensor::new(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const G8: ImageGeometry = ImageGeometry { side: 8, channels: 1 };

    #[test]
    fn forced_full_size_has_only_origin() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let m = sample_mask_origin(8, 8, 8, &mut rng);
            assert_eq!((m.x0, m.y0), (0, 0));
        }
        for _ in 0..50 {
            assert_eq!(sample_mask(1, &mut rng), Mask::full(1));
        }
    }

    #[test]
    fn sampled_masks_fit() {
        let mut rng = Rng::new(2);
        for _ in 0..10_000 {
            let m = sample_mask(8, &mut rng);
            assert!(Mask::new(m.x0, m.y0, m.w, m.h, 8).is_ok());
        }
        assert!(Mask::new(7, 0, 2, 1, 8).is_err());
    }

    #[test]
    fn apply_examples() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(&[2, 64]).map(f64::tanh);
        let full = apply_mask(&x, &[Mask::full(8)], G8).unwrap();
        assert!(full.data().iter().all(|&v| v == MASK_FILL));
        let one = apply_mask(&x, &[Mask::new(0, 0, 1, 1, 8).unwrap()], G8).unwrap();
        let changed = one.data().iter().zip(x.data()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2);
        assert_eq!(one.at(0, 0), MASK_FILL);
        let m = [sample_mask(8, &mut rng)];
        let once = apply_mask(&x, &m, G8).unwrap();
        assert_eq!(apply_mask(&once, &m, G8).unwrap(), once);
    }

    #[test]
    fn mix_examples() {
        let mut rng = Rng::new(4);
        let x = rng.normal_tensor(&[3, 64]);
        let r = rng.normal_tensor(&[3, 64]);
        let masks: Vec<Mask> = (0..3).map(|_| sample_mask(8, &mut rng)).collect();
        assert_eq!(mix(&x, &x, &masks, G8).unwrap(), x);
        assert_eq!(mix(&x, &r, &[Mask::full(8)], G8).unwrap(), r);
        let a = mix(&x, &r, &masks, G8).unwrap();
        let b = mix(&r, &x, &masks, G8).unwrap();
        assert_eq!(
            a.zip_map(&b, |p, q| p + q),
            x.zip_map(&r, |p, q| p + q)
        );
    }

    #[test]
    fn boundaries_are_closed_open() {
        let m = Mask::new(2, 3, 3, 2, 8).unwrap();
        assert!(m.contains(3, 2) && m.contains(4, 4));
        assert!(!m.contains(5, 2) && !m.contains(3, 5) && !m.contains(2, 2) && !m.contains(3, 1));
    }

    #[test]
    fn channels_share_the_mask() {
        let geom = ImageGeometry { side: 2, channels: 3 };
        let bits = mask_bits(&[Mask::new(1, 0, 1, 1, 2).unwrap()], 1, geom).unwrap();
        assert_eq!(bits, vec![false, false, false, true, true, true, false, false, false, false, false, false]);
    }
}
