//! Deterministic synthetic satellite chips with pixel-exact ship masks.
//!
//! A chip is open water with speckle, optionally a land half-plane, bright
//! cloud blobs and sun glint, plus one or more ships drawn as rotated
//! ellipses. Only ships ever set mask bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ChipSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of ships per chip.
    pub ship_count: (usize, usize),
    /// Full major-axis length range in pixels (ignored when `ship_fraction` is set).
    pub ship_length: (f32, f32),
    /// Full minor-axis width range in pixels (ignored when `ship_fraction` is set).
    pub ship_width: (f32, f32),
    /// Target mean fraction of ship pixels. When set, ship areas are drawn
    /// around `fraction * H * W / mean_ship_count`.
    pub ship_fraction: Option<f64>,
    /// Length / width ratio range used with `ship_fraction`.
    pub ship_aspect: (f32, f32),
    pub cloud_prob: f64,
    pub land_prob: f64,
    pub glint_prob: f64,
    pub noise: f32,
    /// Mean RGB of open water.
    pub water_tone: [f32; 3],
    pub seed: u64,
}

impl Default for ChipSpec {
    fn default() -> Self {
        ChipSpec {
            height: 64,
            width: 64,
            ship_count: (1, 2),
            ship_length: (8.0, 16.0),
            ship_width: (3.0, 5.0),
            ship_fraction: None,
            ship_aspect: (3.0, 5.0),
            cloud_prob: 0.3,
            land_prob: 0.2,
            glint_prob: 0.3,
            noise: 0.04,
            water_tone: [0.08, 0.18, 0.28],
            seed: 1,
        }
    }
}

impl ChipSpec {
    /// Shifted distractor distribution standing in for a different sensor.
    pub fn target_style(seed: u64) -> Self {
        ChipSpec {
            cloud_prob: 0.6,
            land_prob: 0.45,
            glint_prob: 0.5,
            noise: 0.06,
            water_tone: [0.12, 0.22, 0.22],
            seed,
            ..ChipSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("chip {}x{} too small", self.height, self.width));
        }
        if self.ship_count.0 > self.ship_count.1 {
            return bad("ship_count range reversed".into());
        }
        if let Some(f) = self.ship_fraction {
            if !(1e-5..=1e-1).contains(&f) {
                return bad(format!("ship_fraction {f} outside [1e-5, 1e-1]"));
            }
            if !(self.ship_aspect.0 >= 1.0 && self.ship_aspect.0 <= self.ship_aspect.1) {
                return bad("ship_aspect must satisfy 1 <= lo <= hi".into());
            }
            if self.ship_count.1 == 0 {
                return bad("ship_fraction needs at least one ship per chip".into());
            }
        } else if !(self.ship_length.0 > 0.0
            && self.ship_length.0 <= self.ship_length.1
            && self.ship_width.0 > 0.0
            && self.ship_width.0 <= self.ship_width.1)
        {
            return bad("ship length/width ranges must be positive and ordered".into());
        }
        let (max_a, _) = self.max_semi_axes();
        let limit = (self.height.min(self.width) as f32) / 2.0 - 1.0;
        if self.ship_count.1 > 0 && max_a > limit {
            return bad(format!(
                "ship semi-axis up to {max_a:.1} px does not fit a {}x{} chip",
                self.height, self.width
            ));
        }
        for p in [self.cloud_prob, self.land_prob, self.glint_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be >= 0".into());
        }
        Ok(())
    }

    fn mean_ship_count(&self) -> f64 {
        (self.ship_count.0 + self.ship_count.1) as f64 / 2.0
    }

    /// Mean ellipse area for fraction-driven sizing.
    fn mean_ship_area(&self) -> Option<f64> {
        self.ship_fraction
            .map(|f| f * (self.height * self.width) as f64 / self.mean_ship_count())
    }

    fn max_semi_axes(&self) -> (f32, f32) {
        match self.mean_ship_area() {
            Some(area) => {
                let area = AREA_JITTER.1 * area;
                let b = (area / (std::f64::consts::PI * self.ship_aspect.1 as f64)).sqrt();
                ((b * self.ship_aspect.1 as f64) as f32, b as f32)
            }
            None => (self.ship_length.1 / 2.0, self.ship_width.1 / 2.0),
        }
    }
}

const AREA_JITTER: (f64, f64) = (0.75, 1.25);

/// A rendered ship: rotated ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShipEllipse {
    pub cy: f32,
    pub cx: f32,
    /// Semi-major axis.
    pub a: f32,
    /// Semi-minor axis.
    pub b: f32,
    pub theta: f32,
}

impl ShipEllipse {
    /// Whether the center of pixel `(y, x)` lies inside the ellipse.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dy = y as f32 + 0.5 - self.cy;
        let dx = x as f32 + 0.5 - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug)]
pub struct Chip {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub ships: Vec<ShipEllipse>,
}

fn chip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_ship(spec: &ChipSpec, rng: &mut ChaCha8Rng) -> ShipEllipse {
    let (a, b) = match spec.mean_ship_area() {
        Some(area) => {
            let area = area * rng.random_range(AREA_JITTER.0..=AREA_JITTER.1);
            let aspect = rng.random_range(spec.ship_aspect.0..=spec.ship_aspect.1) as f64;
            let b = (area / (std::f64::consts::PI * aspect)).sqrt();
            ((b * aspect) as f32, b as f32)
        }
        None => (
            rng.random_range(spec.ship_length.0..=spec.ship_length.1) / 2.0,
            rng.random_range(spec.ship_width.0..=spec.ship_width.1) / 2.0,
        ),
    };
    // Keep the whole ellipse inside the chip so mask area is never clipped.
    let margin = a + 1.0;
    let cy = rng.random_range(margin..=spec.height as f32 - margin);
    let cx = rng.random_range(margin..=spec.width as f32 - margin);
    let theta = rng.random_range(0.0..std::f32::consts::PI);
    ShipEllipse { cy, cx, a, b, theta }
}

/// Renders chip `index` of the dataset described by `spec`.
pub fn generate_chip(spec: &ChipSpec, index: u64) -> Result<Chip> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut rng = chip_rng(spec.seed, index);
    let noise = Normal::new(0.0f32, spec.noise.max(1e-12)).expect("valid sigma");
    let mut img = vec![0.0f32; 3 * plane];

    // Water with a gentle swell pattern.
    let tone_shift: f32 = rng.random_range(-0.03..0.03);
    let (fy, fx, phase) = (
        rng.random_range(0.05f32..0.3),
        rng.random_range(0.05f32..0.3),
        rng.random_range(0.0f32..6.28),
    );
    for y in 0..h {
        for x in 0..w {
            let swell = 0.02 * (fy * y as f32 + fx * x as f32 + phase).sin();
            for c in 0..3 {
                img[c * plane + y * w + x] = spec.water_tone[c] + tone_shift + swell + noise.sample(&mut rng);
            }
        }
    }

    if rng.random_bool(spec.land_prob) {
        // Half-plane n . (p - p0) > 0 with a textured coast.
        let ang: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (ny, nx) = ang.sin_cos();
        let depth = rng.random_range(0.15f32..0.4) * h.min(w) as f32;
        let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
        let reach = (h.max(w) as f32) / 2.0;
        let land = [
            rng.random_range(0.30f32..0.45),
            rng.random_range(0.30f32..0.45),
            rng.random_range(0.15f32..0.25),
        ];
        for y in 0..h {
            for x in 0..w {
                let d = ny * (y as f32 - cy) + nx * (x as f32 - cx) - (reach - depth);
                if d > 0.0 {
                    let tex = 0.05 * ((x as f32 * 0.7).sin() * (y as f32 * 0.9).cos());
                    for c in 0..3 {
                        img[c * plane + y * w + x] = land[c] + tex + noise.sample(&mut rng);
                    }
                }
            }
        }
    }

    if rng.random_bool(spec.cloud_prob) {
        let blobs = rng.random_range(1..=3);
        for _ in 0..blobs {
            let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
            let sigma = rng.random_range(0.08f32..0.25) * h.min(w) as f32;
            let opacity = rng.random_range(0.3f32..0.7);
            for y in 0..h {
                for x in 0..w {
                    let r2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let alpha = opacity * (-r2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..3 {
                        let v = &mut img[c * plane + y * w + x];
                        *v = *v * (1.0 - alpha) + 0.95 * alpha;
                    }
                }
            }
        }
    }

    if rng.random_bool(spec.glint_prob) {
        let spots = rng.random_range(1..=4);
        for _ in 0..spots {
            let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
            for c in 0..3 {
                img[c * plane + y * w + x] = 0.98;
            }
        }
    }

    let count = rng.random_range(spec.ship_count.0..=spec.ship_count.1);
    let ships: Vec<ShipEllipse> = (0..count).map(|_| draw_ship(spec, &mut rng)).collect();
    let mut mask = vec![0.0f32; plane];
    let hull = [
        rng.random_range(0.70f32..0.90),
        rng.random_range(0.70f32..0.90),
        rng.random_range(0.65f32..0.85),
    ];
    for ship in &ships {
        let r = ship.a.ceil() as isize + 1;
        let (y0, x0) = (ship.cy as isize, ship.cx as isize);
        for y in (y0 - r).max(0)..(y0 + r + 1).min(h as isize) {
            for x in (x0 - r).max(0)..(x0 + r + 1).min(w as isize) {
                let (y, x) = (y as usize, x as usize);
                if ship.covers(y, x) {
                    mask[y * w + x] = 1.0;
                    for c in 0..3 {
                        img[c * plane + y * w + x] = hull[c] + 0.5 * noise.sample(&mut rng);
                    }
                }
            }
        }
    }

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Chip {
        image: Tensor::new(vec![3, h, w], img)?,
        mask: Tensor::new(vec![1, h, w], mask)?,
        ships,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

impl Flip {
    /// Uniform draw over {none, horizontal, vertical}.
    pub fn draw<R: Rng>(rng: &mut R) -> Flip {
        match rng.random_range(0..3) {
            0 => Flip::None,
            1 => Flip::Horizontal,
            _ => Flip::Vertical,
        }
    }

    /// Reproducible draw for one sample of one epoch.
    pub fn for_sample(seed: u64, epoch: u64, index: u64) -> Flip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f11b_0000_0000);
        rng.set_stream(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
        Flip::draw(&mut rng)
    }
}

fn flip_planes(t: &Tensor, flip: Flip) -> Result<Tensor> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Dimension(format!("augment expects [C,H,W], got {:?}", t.shape()))),
    };
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match flip {
                    Flip::None => (y, x),
                    Flip::Horizontal => (y, w - 1 - x),
                    Flip::Vertical => (h - 1 - y, x),
                };
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Applies the same flip to an image and its mask.
pub fn augment(image: &Tensor, mask: &Tensor, flip: Flip) -> Result<(Tensor, Tensor)> {
    if image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::Dimension(format!(
            "image {:?} and mask {:?} differ spatially",
            image.shape(),
            mask.shape()
        )));
    }
    Ok((flip_planes(image, flip)?, flip_planes(mask, flip)?))
}
