//! Image and flow quality metrics over masked regions.

use crate::buffer::{FlowMap, Image, Mask};
use crate::error::{Error, Result};
use crate::loss::ssim_map;

pub const PSNR_CAP: f64 = 100.0;

fn empty(what: &str) -> Error {
    Error::UndefinedResult(format!("{what}: empty mask"))
}

/// `10·log10(peak² / MSE)` over masked pixels and all channels, capped.
pub fn psnr(a: &Image, b: &Image, mask: &Mask, peak: f64) -> Result<f64> {
    a.check_shape(b, "psnr")?;
    let count = mask.count();
    if count == 0 {
        return Err(empty("psnr"));
    }
    let mut sum = 0.0;
    for p in 0..a.pixels() {
        if mask.data[p] {
            for c in 0..a.channels {
                let d = a.data[p * a.channels + c] - b.data[p * a.channels + c];
                sum += d * d;
            }
        }
    }
    let mse = sum / (count * a.channels) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Luminance SSIM averaged over masked window centres.
pub fn ssim(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    let count = mask.count();
    if count == 0 {
        return Err(empty("ssim"));
    }
    let map = ssim_map(a, b)?;
    let s: f64 = map.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(s / count as f64)
}

/// Mean Euclidean flow difference over masked pixels valid in both flows.
pub fn endpoint_error(a: &FlowMap, b: &FlowMap, mask: Option<&Mask>) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidArgument("endpoint error: shape mismatch".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..a.width * a.height {
        if !(a.valid[p] && b.valid[p]) || mask.is_some_and(|m| !m.data[p]) {
            continue;
        }
        let (u, v) = (a.data[p], b.data[p]);
        sum += (u[0] - v[0]).hypot(u[1] - v[1]);
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedResult("endpoint error: empty overlap".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::dssim_loss;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, 3, 0.5);
        let all = Mask::new(8, 8, true);
        assert_eq!(psnr(&a, &a, &all, 1.0).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, 3, 0.6);
        assert!((psnr(&a, &b, &all, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &b, &Mask::new(8, 8, false), 1.0), Err(Error::UndefinedResult(_))));
    }

    #[test]
    fn ssim_examples() {
        let a = Image::from_fn(16, 16, 3, |x, y, c| ((x * 3 + y * 5 + c) % 7) as f64 / 7.0);
        let all = Mask::new(16, 16, true);
        assert!((ssim(&a, &a, &all).unwrap() - 1.0).abs() < 1e-12);
        let b = Image::from_fn(16, 16, 3, |x, y, _| ((x + y) % 4) as f64 / 4.0);
        let d = dssim_loss(&a, &b, &all).unwrap().value;
        assert!((ssim(&a, &b, &all).unwrap() - (1.0 - 2.0 * d)).abs() < 1e-12);
        // constant images: only the luminance term survives in the interior
        let c0 = Image::filled(16, 16, 3, 0.3);
        let c1 = Image::filled(16, 16, 3, 0.5);
        let interior = Mask::from_fn(16, 16, |x, y| (5..11).contains(&x) && (5..11).contains(&y));
        let want = (2.0 * 0.3 * 0.5 + 1e-4) / (0.09 + 0.25 + 1e-4);
        assert!((ssim(&c0, &c1, &interior).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn epe_examples() {
        let a = FlowMap::from_fn(5, 5, |_, _| Some([1.0, 1.0]));
        let b = FlowMap::from_fn(5, 5, |_, _| Some([4.0, 5.0]));
        assert_eq!(endpoint_error(&a, &a, None).unwrap(), 0.0);
        assert!((endpoint_error(&a, &b, None).unwrap() - 5.0).abs() < 1e-12);
        let c = FlowMap::from_fn(5, 5, |_, _| None);
        assert!(endpoint_error(&a, &c, None).is_err());
    }
}
