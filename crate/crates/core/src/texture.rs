//! Procedural texture synthesis: flat fills, gradients, value noise,
//! checkers and stripes. Backs both the domain backgrounds and the
//! unconstrained replacement-background bank.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeds::Stream;

/// A small set of base colors a domain draws from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[f64; 3]>,
    /// Per-channel jitter applied when sampling.
    pub jitter: f64,
}

impl Palette {
    pub fn sample(&self, rng: &mut Stream) -> [f64; 3] {
        let base = self.colors[rng.random_range(0..self.colors.len())];
        let mut out = [0.0; 3];
        for (o, b) in out.iter_mut().zip(base.iter()) {
            *o = (b + rng.random_range(-self.jitter..self.jitter)).clamp(0.0, 1.0);
        }
        out
    }
}

/// Texture families available to background synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    Flat,
    Gradient,
    Perlin,
    Checker,
    Stripes,
    /// Images loaded from a user-supplied folder.
    PhotoFolder,
}

fn hash2(x: i64, y: i64, seed: u64) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth value noise in [0,1] at one point.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let fx = smoothstep(x - x0 as f64);
    let fy = smoothstep(y - y0 as f64);
    let v00 = hash2(x0, y0, seed);
    let v10 = hash2(x0 + 1, y0, seed);
    let v01 = hash2(x0, y0 + 1, seed);
    let v11 = hash2(x0 + 1, y0 + 1, seed);
    let top = v00 * (1.0 - fx) + v10 * fx;
    let bot = v01 * (1.0 - fx) + v11 * fx;
    top * (1.0 - fy) + bot * fy
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] * (1.0 - t) + b[0] * t,
        a[1] * (1.0 - t) + b[1] * t,
        a[2] * (1.0 - t) + b[2] * t,
    ]
}

/// Synthesize one square texture of the given family.
pub fn synthesize(family: TextureFamily, size: usize, palette: &Palette, rng: &mut Stream) -> Array3<f64> {
    match family {
        TextureFamily::Flat => {
            let c = palette.sample(rng);
            Array3::from_shape_fn((size, size, 3), |(_, _, ch)| c[ch])
        }
        TextureFamily::Gradient => {
            let c1 = palette.sample(rng);
            let c2 = palette.sample(rng);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (angle.sin(), angle.cos());
            Array3::from_shape_fn((size, size, 3), |(y, x, ch)| {
                let t = ((x as f64 * dx + y as f64 * dy) / size as f64 + 1.0) / 2.0;
                mix(c1, c2, t.clamp(0.0, 1.0))[ch]
            })
        }
        TextureFamily::Perlin => {
            let c1 = palette.sample(rng);
            let c2 = palette.sample(rng);
            let scale: f64 = rng.random_range(3.0..8.0);
            let seed: u64 = rng.random();
            Array3::from_shape_fn((size, size, 3), |(y, x, ch)| {
                let n = value_noise(
                    x as f64 / size as f64 * scale,
                    y as f64 / size as f64 * scale,
                    seed,
                ) * 0.65
                    + value_noise(
                        x as f64 / size as f64 * scale * 2.0,
                        y as f64 / size as f64 * scale * 2.0,
                        seed ^ 0xabcd,
                    ) * 0.35;
                mix(c1, c2, n)[ch]
            })
        }
        TextureFamily::Checker => {
            let c1 = palette.sample(rng);
            let c2 = palette.sample(rng);
            let cell = rng.random_range(4..(size / 4).max(5));
            let ox = rng.random_range(0..cell);
            let oy = rng.random_range(0..cell);
            Array3::from_shape_fn((size, size, 3), |(y, x, ch)| {
                let parity = (((x + ox) / cell) + ((y + oy) / cell)) % 2;
                if parity == 0 {
                    c1[ch]
                } else {
                    c2[ch]
                }
            })
        }
        TextureFamily::Stripes => {
            let c1 = palette.sample(rng);
            let c2 = palette.sample(rng);
            let period = rng.random_range(6..(size / 3).max(7)) as f64;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (dy, dx) = (angle.sin(), angle.cos());
            Array3::from_shape_fn((size, size, 3), |(y, x, ch)| {
                let t = (x as f64 * dx + y as f64 * dy) / period;
                if (t.floor() as i64).rem_euclid(2) == 0 {
                    c1[ch]
                } else {
                    c2[ch]
                }
            })
        }
        TextureFamily::PhotoFolder => {
            // Callers resolve folders themselves; synthesizing falls back to
            // noise so the bank never produces an empty image.
            synthesize(TextureFamily::Perlin, size, palette, rng)
        }
    }
}

/// The all-families palette used for the unconstrained texture bank.
pub fn unconstrained_palette() -> Palette {
    Palette {
        colors: vec![
            [0.95, 0.95, 0.95],
            [0.1, 0.1, 0.1],
            [0.8, 0.3, 0.3],
            [0.3, 0.8, 0.3],
            [0.3, 0.3, 0.8],
            [0.9, 0.8, 0.2],
            [0.6, 0.2, 0.7],
            [0.2, 0.7, 0.7],
        ],
        jitter: 0.08,
    }
}

/// Synthesize an unconstrained image: any family, wide palette.
pub fn unconstrained_texture(size: usize, rng: &mut Stream) -> Array3<f64> {
    let fam = match rng.random_range(0..5) {
        0 => TextureFamily::Flat,
        1 => TextureFamily::Gradient,
        2 => TextureFamily::Perlin,
        3 => TextureFamily::Checker,
        _ => TextureFamily::Stripes,
    };
    synthesize(fam, size, &unconstrained_palette(), rng)
}
