use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Independent stream for one `(domain, index)` pair under `seed`, so
/// that a sample's draws do not depend on generation order.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(index);
    r
}

/// Gaussian noise with standard deviation `sd`; zero when `sd == 0`.
pub fn noise<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).expect("positive sd").sample(rng)
    } else {
        0.0
    }
}

/// Smooth random field on an `h x w` grid built from Gaussian bumps and a
/// tilted plane, rescaled to span `[0, 1]`.
pub fn smooth_field<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, bumps: usize) -> Vec<f64> {
    let tilt = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let centers: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.15..0.4) * h.max(w) as f64,
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let mut f: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let mut v = 0.5 * (tilt.0 * y / h as f64 + tilt.1 * x / w as f64);
            for &(cy, cx, r, a) in &centers {
                v += a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp();
            }
            v
        })
        .collect();
    let (lo, hi) = f
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| {
            (l.min(v), u.max(v))
        });
    let span = (hi - lo).max(1e-12);
    for v in &mut f {
        *v = (*v - lo) / span;
    }
    f
}

/// Central-difference gradient magnitude of a row-major `h x w` field.
pub fn gradient_magnitude(f: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| f[y * w + x];
    (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let gx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1)))
                / ((x + 1).min(w - 1) - x.saturating_sub(1)).max(1) as f64;
            let gy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x))
                / ((y + 1).min(h - 1) - y.saturating_sub(1)).max(1) as f64;
            (gx * gx + gy * gy).sqrt()
        })
        .collect()
}
