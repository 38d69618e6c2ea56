//! Bilinear downsampling with half-pixel centers and no antialiasing
//! prefilter, together with its exact adjoint.

use crate::error::{Error, Result};
use crate::image::Image;

/// `(i0, i1, t)`: output sample `k` reads `(1 - t)·src[i0] + t·src[i1]`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|k| {
            let x = ((k as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (x.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

fn check_shapes(src: (usize, usize), dst: (usize, usize)) -> Result<()> {
    let ok = dst.0 > 0 && dst.1 > 0 && src.0 % dst.0 == 0 && src.1 % dst.1 == 0;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "cannot downsample {}x{} to {}x{}: source must be a positive multiple of the target",
            src.0, src.1, dst.0, dst.1
        )))
    }
}

pub fn downsample(image: &Image, width: usize, height: usize) -> Result<Image> {
    check_shapes(image.shape(), (width, height))?;
    if image.shape() == (width, height) {
        return Ok(image.clone());
    }
    let tx = axis_taps(image.width(), width);
    let ty = axis_taps(image.height(), height);
    let mut out = Image::new(width, height);
    for (y, &(y0, y1, ty)) in ty.iter().enumerate() {
        for (x, &(x0, x1, tx)) in tx.iter().enumerate() {
            let top = (1.0 - tx) * image.get(x0, y0) + tx * image.get(x1, y0);
            let bottom = (1.0 - tx) * image.get(x0, y1) + tx * image.get(x1, y1);
            out.set(x, y, (1.0 - ty) * top + ty * bottom);
        }
    }
    Ok(out)
}

/// Transposes [`downsample`]: scatters a gradient on the small image back
/// onto a `width × height` source.
pub fn downsample_adjoint(grad: &Image, width: usize, height: usize) -> Result<Image> {
    check_shapes((width, height), grad.shape())?;
    if grad.shape() == (width, height) {
        return Ok(grad.clone());
    }
    let tx = axis_taps(width, grad.width());
    let ty = axis_taps(height, grad.height());
    let mut out = Image::new(width, height);
    let data = out.data_mut();
    for (y, &(y0, y1, ty)) in ty.iter().enumerate() {
        for (x, &(x0, x1, tx)) in tx.iter().enumerate() {
            let g = grad.get(x, y);
            if g == 0.0 {
                continue;
            }
            data[y0 * width + x0] += g * (1.0 - ty) * (1.0 - tx);
            data[y0 * width + x1] += g * (1.0 - ty) * tx;
            data[y1 * width + x0] += g * ty * (1.0 - tx);
            data[y1 * width + x1] += g * ty * tx;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Reference: sample the continuous bilinear surface of `img` at the
    /// back-projected center of every output pixel, with edge clamping.
    fn reference(img: &Image, w: usize, h: usize) -> Image {
        let sample = |u: f64, v: f64| {
            let u = u.clamp(0.0, (img.width() - 1) as f64);
            let v = v.clamp(0.0, (img.height() - 1) as f64);
            let (x0, y0) = (u.floor(), v.floor());
            let (fx, fy) = (u - x0, v - y0);
            let px = |x: f64, y: f64| {
                img.get(
                    (x as usize).min(img.width() - 1),
                    (y as usize).min(img.height() - 1),
                )
            };
            px(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + px(x0 + 1.0, y0) * fx * (1.0 - fy)
                + px(x0, y0 + 1.0) * (1.0 - fx) * fy
                + px(x0 + 1.0, y0 + 1.0) * fx * fy
        };
        let sx = img.width() as f64 / w as f64;
        let sy = img.height() as f64 / h as f64;
        let mut out = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5));
            }
        }
        out
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_stays_constant() {
        let out = downsample(&Image::filled(128, 128, 0.37), 32, 32).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn factor_two_is_block_mean() {
        let img = random_image(8, 6, 1);
        let out = downsample(&img, 4, 3).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let mean = (img.get(2 * x, 2 * y)
                    + img.get(2 * x + 1, 2 * y)
                    + img.get(2 * x, 2 * y + 1)
                    + img.get(2 * x + 1, 2 * y + 1))
                    / 4.0;
                assert!((out.get(x, y) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_reference_resampler() {
        let img = random_image(128, 128, 2);
        for (w, h) in [(32, 32), (64, 64), (16, 32)] {
            let a = downsample(&img, w, h).unwrap();
            let b = reference(&img, w, h);
            let diff = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "{w}x{h}: {diff}");
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_non_divisible() {
        assert!(downsample(&Image::new(30, 30), 4, 4).is_err());
        assert!(downsample(&Image::new(8, 8), 0, 4).is_err());
    }

    #[test]
    fn adjoint_identity() {
        let x = random_image(64, 64, 3);
        let g = random_image(16, 16, 4);
        let lhs: f64 = downsample(&x, 16, 16)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = downsample_adjoint(&g, 64, 64)
            .unwrap()
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
