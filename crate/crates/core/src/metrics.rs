//! Float RGB images and the PSNR / SSIM quality metrics.

use std::path::Path;

use image::ImageEncoder;

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    /// `3 · width · height` values, pixel-interleaved.
    pub data: Vec<f64>,
}

impl ImageF {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(3 * width * height).collect(),
        }
    }

    #[inline]
    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// 8-bit quantization (round to nearest).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Round-trips through 8-bit storage, matching what a PNG holds.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.width, self.height, &self.to_rgb8())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Ok(Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw()))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Self {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut data = Vec::with_capacity(3 * w * h);
        let norm = 1.0 / (factor * factor) as f64;
        for row in 0..h {
            for col in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(col * factor + dx, row * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                data.extend(acc.iter().map(|v| v * norm));
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn mean_abs_diff(&self, other: &ImageF) -> Result<f64> {
        check_dims(self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &ImageF) -> Result<f64> {
        check_dims(self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

fn check_dims(a: &ImageF, b: &ImageF) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch { a: a.dims(), b: b.dims() });
    }
    Ok(())
}

/// PSNR cap reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB over all pixels and channels (peak 1).
pub fn psnr(a: &ImageF, b: &ImageF) -> Result<f64> {
    check_dims(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter, "valid" region only.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity on luma with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim(a: &ImageF, b: &ImageF) -> Result<f64> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            min: SSIM_WINDOW,
        });
    }
    let (w, h) = a.dims();
    let la = a.luma();
    let lb = b.luma();
    let k = gaussian_kernel();
    let aa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&la, w, h, &k);
    let mu_b = filter_valid(&lb, w, h, &k);
    let e_aa = filter_valid(&aa, w, h, &k);
    let e_bb = filter_valid(&bb, w, h, &k);
    let e_ab = filter_valid(&ab, w, h, &k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> ImageF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageF {
            width: w,
            height: h,
            data: (0..3 * w * h).map(|_| rng.gen()).collect(),
        }
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = noise(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = ImageF::filled(5, 4, [0.2, 0.3, 0.4]);
        let b = ImageF::filled(5, 4, [0.3, 0.4, 0.5]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_symmetric_and_dimension_checked() {
        let a = noise(9, 7, 2);
        let b = noise(9, 7, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(matches!(psnr(&a, &noise(7, 9, 3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let a = ImageF::filled(16, 16, [0.5; 3]);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let b = ImageF {
                width: 16,
                height: 16,
                data: a.data.iter().map(|v| v + amp * (rng.gen::<f64>() * 2.0 - 1.0)).collect(),
            };
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = noise(20, 15, 4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = ImageF::filled(16, 16, [0.2; 3]);
        let b = ImageF::filled(16, 16, [0.8; 3]);
        let c1 = 1e-4;
        let expect = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((got - 0.4707).abs() < 1e-4);
    }

    #[test]
    fn ssim_symmetric() {
        let a = noise(24, 19, 5);
        let b = noise(24, 19, 6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ssim_too_small() {
        let a = noise(10, 30, 7);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let a = noise(6, 5, 8);
        let b = ImageF::decode_png(&a.encode_png().unwrap()).unwrap();
        assert_eq!(b, a.quantized());
    }
}
