//! Seeded synthetic images: smooth colour gradients with Gaussian blobs and
//! a faint oriented texture. Image `i` of a set depends only on
//! `(seed, i)`, so sets with the same seed share prefixes.

use crate::image::Image;
use crate::rng;
use rand::Rng;

pub fn image(seed: u64, index: u64, height: usize, width: usize) -> Image {
    let mut r = rng::stream(seed, &[index]);
    let base: [f64; 3] = std::array::from_fn(|_| r.random_range(0.1..0.6));
    let slope: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.3..0.3));
    let angle = r.random_range(0.0..std::f64::consts::TAU);
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..r.random_range(2..=4))
        .map(|_| {
            let centre = [r.random_range(0.0..1.0), r.random_range(0.0..1.0)];
            let radius = r.random_range(0.08..0.3);
            let colour = std::array::from_fn(|_| r.random_range(-0.5..0.5));
            (centre, radius, colour)
        })
        .collect();
    let freq = r.random_range(2.0..6.0);
    let tex_angle = r.random_range(0.0..std::f64::consts::PI);
    let tex_amp = r.random_range(0.0..0.08);

    let (ca, sa) = (angle.cos(), angle.sin());
    let (ct, st) = (tex_angle.cos(), tex_angle.sin());
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            let ramp = (u - 0.5) * ca + (v - 0.5) * sa;
            let wave = tex_amp * (std::f64::consts::TAU * freq * (u * ct + v * st)).sin();
            for c in 0..3 {
                let mut p = base[c] + slope[c] * ramp + wave;
                for (centre, radius, colour) in &blobs {
                    let d2 = (u - centre[0]).powi(2) + (v - centre[1]).powi(2);
                    p += colour[c] * (-d2 / (2.0 * radius * radius)).exp();
                }
                data.push(p.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(height, width, data).expect("consistent geometry")
}

pub fn dataset(seed: u64, count: usize, height: usize, width: usize) -> Vec<Image> {
    (0..count as u64).map(|i| image(seed, i, height, width)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = dataset(7, 3, 32, 32);
        let b = dataset(7, 3, 32, 32);
        assert_eq!(a, b);
        assert!(a.iter().all(|im| im.data.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a[0], a[1]);
        assert_ne!(dataset(8, 1, 32, 32)[0], a[0]);
    }
}
