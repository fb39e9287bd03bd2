//! Seeded value noise, used for backgrounds and object surfaces.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueNoise {
    pub seed: u64,
    /// Lattice spacing of the coarsest octave, in pixels.
    pub cell: f64,
    pub octaves: u32,
}

impl ValueNoise {
    pub fn new(seed: u64) -> Self {
        Self { seed, cell: 8.0, octaves: 3 }
    }

    /// Noise value in `[0, 1]` at a continuous position. Any translation of
    /// the sample grid gives an exactly translated image.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut cell = self.cell;
        for octave in 0..self.octaves {
            total += amp * lattice_interp(self.seed.wrapping_add(octave as u64 * 0x9E37_79B9), x / cell, y / cell);
            norm += amp;
            amp *= 0.5;
            cell *= 0.5;
        }
        (total / norm) as f32
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn lattice_interp(seed: u64, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (ix, iy) = (x0 as i64, y0 as i64);
    let fx = smoothstep(x - x0);
    let fy = smoothstep(y - y0);
    let v00 = lattice(seed, ix, iy);
    let v10 = lattice(seed, ix + 1, iy);
    let v01 = lattice(seed, ix, iy + 1);
    let v11 = lattice(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    top + (bottom - top) * fy
}

/// Uniform value in `[0, 1)` for a lattice node (splitmix64 finalizer).
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}
