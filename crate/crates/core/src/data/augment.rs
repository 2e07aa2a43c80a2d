use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Train,
    Test,
}

/// Bilinear resampling of the window `[y0, y0+ch) × [x0, x0+cw)` of a
/// `[C, H, W]` image to `oh × ow`, sampling at pixel centers.
fn crop_resize(img: &Tensor, y0: f64, x0: f64, ch: f64, cw: f64, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let data = img.data();
    let mut out = vec![0.0; c * oh * ow];
    let coord = |o: usize, start: f64, len: f64, n: usize, size: usize| {
        let s = (start + (o as f64 + 0.5) * len / n as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, s - i0 as f64)
    };
    for oy in 0..oh {
        let (y0i, y1i, fy) = coord(oy, y0, ch, oh, h);
        for ox in 0..ow {
            let (x0i, x1i, fx) = coord(ox, x0, cw, ow, w);
            for k in 0..c {
                let at = |y: usize, x: usize| data[(k * h + y) * w + x];
                let top = at(y0i, x0i) * (1.0 - fx) + at(y0i, x1i) * fx;
                let bot = at(y1i, x0i) * (1.0 - fx) + at(y1i, x1i) * fx;
                out[(k * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("sized output")
}

/// Resizes a `[C, H, W]` image to `oh × ow`.
pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    crop_resize(img, 0.0, 0.0, h as f64, w as f64, oh, ow)
}

/// Train: random resized crop (area fraction in [0.5, 1], aspect ratio in
/// [3/4, 4/3]) to `out × out`. Test: resize to `round(out·8/7)` and center crop.
pub fn augment_crop(img: &Tensor, mode: CropMode, out: usize, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    match mode {
        CropMode::Train => {
            let area = (h * w) as f64 * rng.gen_range(0.5..=1.0);
            let ratio: f64 = rng.gen_range(0.75..=4.0 / 3.0);
            let cw = (area * ratio).sqrt().min(w as f64);
            let ch = (area / ratio).sqrt().min(h as f64);
            let y0 = rng.gen_range(0.0..=(h as f64 - ch));
            let x0 = rng.gen_range(0.0..=(w as f64 - cw));
            crop_resize(img, y0, x0, ch, cw, out, out)
        }
        CropMode::Test => {
            let big = (out as f64 * 8.0 / 7.0).round() as usize;
            let resized = resize_bilinear(img, big, big);
            let off = (big - out) / 2;
            let c = img.shape()[0];
            Tensor::from_fn(&[c, out, out], |i| {
                let (k, rest) = (i / (out * out), i % (out * out));
                let (y, x) = (rest / out + off, rest % out + off);
                resized.data()[(k * big + y) * big + x]
            })
        }
    }
}

/// Independent uniform [0, 1] pixels.
pub fn noise_batch(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen::<f64>())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| (i % (h * w)) as f64 / (h * w) as f64)
    }

    #[test]
    fn test_mode_keeps_the_resize_ratio() {
        assert_eq!((224.0f64 * 8.0 / 7.0).round(), 256.0);
        assert_eq!((56.0f64 * 8.0 / 7.0).round(), 64.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // a 64×64 image at out 56 is resized to 64 (identity) then center cropped
        let img = ramp(64, 64);
        let out = augment_crop(&img, CropMode::Test, 56, &mut rng);
        assert_eq!(out.shape(), &[3, 56, 56]);
        for k in 0..3 {
            for y in 0..56 {
                for x in 0..56 {
                    let a = out.at(&[k, y, x]);
                    let b = img.at(&[k, y + 4, x + 4]);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = ramp(5, 7);
        let out = resize_bilinear(&img, 5, 7);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_is_seeded() {
        let img = ramp(32, 32);
        let a = augment_crop(&img, CropMode::Train, 24, &mut ChaCha8Rng::seed_from_u64(3));
        let b = augment_crop(&img, CropMode::Train, 24, &mut ChaCha8Rng::seed_from_u64(3));
        let c = augment_crop(&img, CropMode::Train, 24, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.shape(), &[3, 24, 24]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_statistics_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = noise_batch(&[4, 3, 29, 29], &mut rng);
        assert_eq!(n.shape(), &[4, 3, 29, 29]);
        assert!(n.numel() >= 10_000);
        let mean = n.data().iter().sum::<f64>() / n.numel() as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        let again = noise_batch(&[4, 3, 29, 29], &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(n, again);
    }
}
