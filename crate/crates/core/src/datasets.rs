//! Synthetic data generated on the fly: a 3×3 Gaussian grid in 2D and
//! 8×8 bar images with orientation labels.

use crate::autodiff::Tensor;
use crate::chains::ImageGeometry;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Nine Gaussians centred on `{−0.6, 0, 0.6}²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2d {
    pub s: f64,
}

pub const GRID_COORDS: [f64; 3] = [-0.6, 0.0, 0.6];

impl Default for Grid2d {
    fn default() -> Self {
        Grid2d { s: 0.05 }
    }
}

impl Grid2d {
    pub fn center(k: usize) -> [f64; 2] {
        [GRID_COORDS[k / 3], GRID_COORDS[k % 3]]
    }

    /// Samples with their component indices.
    pub fn sample_labeled(&self, rng: &mut Rng, batch: usize) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(batch * 2);
        let mut comps = Vec::with_capacity(batch);
        for _ in 0..batch {
            let k = rng.below(9) as usize;
            let c = Self::center(k);
            data.push(c[0] + self.s * rng.normal());
            data.push(c[1] + self.s * rng.normal());
            comps.push(k);
        }
        (Tensor::new(&[batch, 2], data).expect("batch > 0"), comps)
    }

    pub fn sample(&self, rng: &mut Rng, batch: usize) -> Tensor {
        self.sample_labeled(rng, batch).0
    }
}

/// Orientation label of a bars image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarsLabel {
    OnlyHorizontal = 0,
    OnlyVertical = 1,
    Both = 2,
}

impl BarsLabel {
    pub fn of(r: usize, c: usize) -> Self {
        match (r > 0, c > 0) {
            (true, false) => BarsLabel::OnlyHorizontal,
            (false, true) => BarsLabel::OnlyVertical,
            (true, true) => BarsLabel::Both,
            (false, false) => panic!("bars image needs at least one bar"),
        }
    }
}

/// 8×8 images with `r` full rows and `c` full columns set to +1 on a −1
/// background; `(r, c)` uniform on `{0,1,2}² \ {(0,0)}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Bars8;

pub const BARS_SIDE: usize = 8;

/// One drawn bars image before rasterising.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BarsSpec {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl BarsSpec {
    pub fn label(&self) -> BarsLabel {
        BarsLabel::of(self.rows.len(), self.cols.len())
    }

    pub fn render(&self) -> Vec<f64> {
        let mut px = vec![-1.0; BARS_SIDE * BARS_SIDE];
        for &r in &self.rows {
            px[r * BARS_SIDE..(r + 1) * BARS_SIDE].fill(1.0);
        }
        for &c in &self.cols {
            for r in 0..BARS_SIDE {
                px[r * BARS_SIDE + c] = 1.0;
            }
        }
        px
    }
}

impl Bars8 {
    pub const GEOMETRY: ImageGeometry = ImageGeometry {
        side: BARS_SIDE,
        channels: 1,
    };

    pub fn draw_spec(rng: &mut Rng) -> BarsSpec {
        // Eight equally likely (r, c) pairs.
        let k = rng.below(8) as usize + 1;
        let (r, c) = (k / 3, k % 3);
        let mut rows = rng.choose_distinct(BARS_SIDE, r);
        let mut cols = rng.choose_distinct(BARS_SIDE, c);
        rows.sort_unstable();
        cols.sort_unstable();
        BarsSpec { rows, cols }
    }

    pub fn sample(&self, rng: &mut Rng, batch: usize) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(batch * BARS_SIDE * BARS_SIDE);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let spec = Self::draw_spec(rng);
            data.extend(spec.render());
            labels.push(spec.label() as usize);
        }
        (Tensor::new(&[batch, 64], data).expect("batch > 0"), labels)
    }
}

/// Dataset selected by configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dataset {
    Grid2d(Grid2d),
    Bars8,
}

impl Dataset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "grid2d" => Ok(Dataset::Grid2d(Grid2d::default())),
            "bars8" => Ok(Dataset::Bars8),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dataset::Grid2d(_) => "grid2d",
            Dataset::Bars8 => "bars8",
        }
    }

    pub fn d_x(&self) -> usize {
        match self {
            Dataset::Grid2d(_) => 2,
            Dataset::Bars8 => BARS_SIDE * BARS_SIDE,
        }
    }

    /// Image layout, if the samples are images.
    pub fn geometry(&self) -> Option<ImageGeometry> {
        match self {
            Dataset::Grid2d(_) => None,
            Dataset::Bars8 => Some(Bars8::GEOMETRY),
        }
    }

    pub fn n_labels(&self) -> usize {
        match self {
            Dataset::Grid2d(_) => 9,
            Dataset::Bars8 => 3,
        }
    }

    /// Samples with labels (grid component or bar orientation).
    pub fn sample(&self, rng: &mut Rng, batch: usize) -> (Tensor, Vec<usize>) {
        match self {
            Dataset::Grid2d(g) => g.sample_labeled(rng, batch),
            Dataset::Bars8 => Bars8.sample(rng, batch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn chi_p(obs: &[f64]) -> f64 {
        let n: f64 = obs.iter().sum();
        let e = n / obs.len() as f64;
        let stat: f64 = obs.iter().map(|o| (o - e) * (o - e) / e).sum();
        ChiSquared::new((obs.len() - 1) as f64).unwrap().sf(stat)
    }

    #[test]
    fn zero_spread_hits_centres() {
        let g = Grid2d { s: 0.0 };
        let (x, k) = g.sample_labeled(&mut Rng::new(1), 100);
        for (r, &c) in k.iter().enumerate() {
            assert_eq!(x.row(r), &Grid2d::center(c));
        }
    }

    #[test]
    fn grid_components_are_uniform() {
        let (_, k) = Grid2d::default().sample_labeled(&mut Rng::new(2), 100_000);
        let mut counts = [0.0; 9];
        k.iter().for_each(|&c| counts[c] += 1.0);
        assert!(chi_p(&counts) > 0.001);
    }

    #[test]
    fn grid_samples_stay_inside() {
        // Leaving [-1, 1] needs an 8σ excursion at the default spread.
        let x = Grid2d::default().sample(&mut Rng::new(3), 10_000);
        assert!(x.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = Dataset::Bars8.sample(&mut Rng::new(4), 16);
        let b = Dataset::Bars8.sample(&mut Rng::new(4), 16);
        assert_eq!(a, b);
        let g = Grid2d::default();
        assert_eq!(g.sample(&mut Rng::new(5), 8), g.sample(&mut Rng::new(5), 8));
    }

    #[test]
    fn bars_examples() {
        let one_row = BarsSpec {
            rows: vec![3],
            cols: vec![],
        };
        assert_eq!(one_row.render().iter().filter(|&&v| v == 1.0).count(), 8);
        assert_eq!(one_row.label(), BarsLabel::OnlyHorizontal);
        let cross = BarsSpec {
            rows: vec![1],
            cols: vec![6],
        };
        assert_eq!(cross.label(), BarsLabel::Both);
        assert_eq!(cross.render().iter().filter(|&&v| v == 1.0).count(), 15);
        assert_eq!(cross.render()[6], 1.0);
        assert_eq!(cross.render()[BARS_SIDE + 2], 1.0);
    }

    #[test]
    fn bars_values_labels_and_counts() {
        let mut rng = Rng::new(6);
        let mut pairs = [0.0; 8];
        for _ in 0..80_000 {
            let s = Bars8::draw_spec(&mut rng);
            let (r, c) = (s.rows.len(), s.cols.len());
            assert!(r <= 2 && c <= 2 && r + c > 0);
            pairs[r * 3 + c - 1] += 1.0;
            let px = s.render();
            assert!(px.iter().all(|&v| v == 1.0 || v == -1.0));
            let on = px.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(on, 8 * (r + c) - r * c);
            let mut dedup = s.rows.clone();
            dedup.dedup();
            assert_eq!(dedup.len(), r);
        }
        assert!(chi_p(&pairs) > 0.001, "{pairs:?}");
        let (_, labels) = Bars8.sample(&mut rng, 1000);
        assert!(labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn bar_positions_are_uniform() {
        let mut rng = Rng::new(7);
        let mut rows = [0.0; 8];
        for _ in 0..50_000 {
            for r in Bars8::draw_spec(&mut rng).rows {
                rows[r] += 1.0;
            }
        }
        assert!(chi_p(&rows) > 0.001);
    }

    #[test]
    fn parse_names() {
        assert_eq!(Dataset::parse("bars8").unwrap().d_x(), 64);
        assert_eq!(Dataset::parse("grid2d").unwrap().geometry(), None);
        assert!(matches!(Dataset::parse("mnist"), Err(Error::Config(_))));
    }
}
