//! Procedural class prototypes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Names of the available prototypes, in class-index order.
pub const PROTOTYPES: [&str; 8] = [
    "hbars", "cross", "ring", "checker", "diagonal", "vbars", "frame", "xcross",
];

/// Renders prototype `class` on an `n×n` canvas, shifted by `(dy, dx)`.
/// Strokes are two pixels wide so that masking every other row never erases a
/// shape.
pub fn render(class: usize, n: usize, dy: i32, dx: i32) -> Vec<f32> {
    let mut img = vec![0.0f32; n * n];
    let c = (n as f64 - 1.0) / 2.0;
    let s = n as f64 / 16.0;
    for y in 0..n {
        for x in 0..n {
            let sy = y as i32 - dy;
            let sx = x as i32 - dx;
            if sy < 0 || sx < 0 || sy >= n as i32 || sx >= n as i32 {
                continue;
            }
            let (fy, fx) = (sy as f64, sx as f64);
            let on = match class {
                0 => {
                    let r = (fy / s) as usize;
                    matches!(r, 3 | 4 | 7 | 8 | 11 | 12)
                }
                1 => (fx - c).abs() <= 1.0 * s || (fy - c).abs() <= 1.0 * s,
                2 => {
                    let d = ((fy - c).powi(2) + (fx - c).powi(2)).sqrt();
                    d >= 4.0 * s && d <= 6.2 * s
                }
                3 => ((fy / (4.0 * s)) as usize + (fx / (4.0 * s)) as usize).is_multiple_of(2),
                4 => (fy - fx).abs() <= 1.0 * s,
                5 => {
                    let col = (fx / s) as usize;
                    matches!(col, 3 | 4 | 7 | 8 | 11 | 12)
                }
                6 => {
                    let lo = 2.0 * s;
                    let hi = n as f64 - 1.0 - 2.0 * s;
                    let inside = fy >= lo && fy <= hi && fx >= lo && fx <= hi;
                    let edge = fy <= lo + 1.0 * s
                        || fy >= hi - 1.0 * s
                        || fx <= lo + 1.0 * s
                        || fx >= hi - 1.0 * s;
                    inside && edge
                }
                _ => (fy - fx).abs() <= 1.0 * s || (fy + fx - 2.0 * c).abs() <= 1.0 * s,
            };
            if on {
                img[y * n + x] = 1.0;
            }
        }
    }
    img
}

/// A jittered sample: random shift of up to one pixel, random stroke
/// intensity and faint pixel noise, clamped to `[0, 1]`.
pub fn sample<R: Rng + ?Sized>(class: usize, n: usize, rng: &mut R) -> Vec<f32> {
    let dy = rng.random_range(-1..=1);
    let dx = rng.random_range(-1..=1);
    let intensity: f32 = rng.random_range(0.75..=1.0);
    let noise = Normal::new(0.0f32, 0.05).expect("valid std");
    render(class, n, dy, dx)
        .into_iter()
        .map(|v| (v * intensity + noise.sample(rng)).clamp(0.0, 1.0))
        .collect()
}
