//! Training objectives over rendered buffers, each returning its value and
//! the gradient with respect to the rendered buffer.

use std::fmt;

use crate::buffer::{FlowMap, Image, Mask, LUMA};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Forward-backward consistency threshold in pixels.
pub const OCCLUSION_THRESHOLD: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub mask: f64,
    pub dssim: f64,
    pub arap: f64,
    pub normal: f64,
    pub flow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 0.8,
            mask: 2.0,
            dssim: 0.2,
            arap: 1.0,
            normal: 1.0,
            flow: 1.0,
        }
    }
}

/// One loss term and the number of samples it averaged over. `count == 0`
/// flags an empty support (value 0).
#[derive(Clone, Debug)]
pub struct TermEval<G> {
    pub value: f64,
    pub count: usize,
    pub grad: G,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute RGB error over masked pixels.
pub fn photometric_loss(rgb: &Image, target: &Image, mask: &Mask) -> Result<TermEval<Image>> {
    rgb.check_shape(target, "photometric target")?;
    let count = mask.count();
    let mut grad = Image::zeros(rgb.width, rgb.height, rgb.channels);
    if count == 0 {
        return Ok(TermEval { value: 0.0, count, grad });
    }
    let n = (count * rgb.channels) as f64;
    let mut sum = 0.0;
    for p in 0..rgb.pixels() {
        if !mask.data[p] {
            continue;
        }
        for c in 0..rgb.channels {
            let i = p * rgb.channels + c;
            let d = rgb.data[i] - target.data[i];
            sum += d.abs();
            grad.data[i] = sign(d) / n;
        }
    }
    Ok(TermEval { value: sum / n, count, grad })
}

/// Mean absolute error between alpha and a binary mask over all pixels.
pub fn mask_loss(alpha: &Image, target: &Mask) -> Result<TermEval<Image>> {
    if alpha.width != target.width || alpha.height != target.height {
        return Err(Error::InvalidArgument("mask loss: shape mismatch".into()));
    }
    let n = alpha.pixels();
    let mut grad = Image::zeros(alpha.width, alpha.height, 1);
    let mut sum = 0.0;
    for p in 0..n {
        let d = alpha.data[p] - if target.data[p] { 1.0 } else { 0.0 };
        sum += d.abs();
        grad.data[p] = sign(d) / n as f64;
    }
    Ok(TermEval { value: sum / n as f64, count: n, grad })
}

/// Mean over valid pixels of the per-component L1 distance averaged over the
/// three components.
pub fn normal_loss(rendered: &Image, reference: &Image, valid: &Mask) -> Result<TermEval<Image>> {
    rendered.check_shape(reference, "normal reference")?;
    let count = valid.count();
    let mut grad = Image::zeros(rendered.width, rendered.height, 3);
    if count == 0 {
        return Ok(TermEval { value: 0.0, count, grad });
    }
    let n = (3 * count) as f64;
    let mut sum = 0.0;
    for p in 0..rendered.pixels() {
        if !valid.data[p] {
            continue;
        }
        for c in 0..3 {
            let d = rendered.data[3 * p + c] - reference.data[3 * p + c];
            sum += d.abs();
            grad.data[3 * p + c] = sign(d) / n;
        }
    }
    Ok(TermEval { value: sum / n, count, grad })
}

/// Flow term with the number of pixels dropped by the occlusion mask.
#[derive(Clone, Debug)]
pub struct FlowEval {
    pub term: TermEval<Vec<[f64; 2]>>,
    pub occluded: usize,
}

/// Mean of `|dx| + |dy|` over pixels valid in both flows and not occluded.
pub fn flow_loss(rendered: &FlowMap, reference: &FlowMap, occlusion: &Mask) -> Result<FlowEval> {
    if rendered.width != reference.width || rendered.height != reference.height {
        return Err(Error::InvalidArgument("flow loss: shape mismatch".into()));
    }
    let n = rendered.width * rendered.height;
    let mut grad = vec![[0.0; 2]; n];
    let mut occluded = 0;
    let mut usable = Vec::new();
    for p in 0..n {
        if !(rendered.valid[p] && reference.valid[p]) {
            continue;
        }
        if occlusion.data[p] {
            occluded += 1;
            continue;
        }
        usable.push(p);
    }
    let count = usable.len();
    if count == 0 {
        return Ok(FlowEval {
            term: TermEval { value: 0.0, count, grad },
            occluded,
        });
    }
    let mut sum = 0.0;
    for &p in &usable {
        let (a, b) = (rendered.data[p], reference.data[p]);
        let d = [a[0] - b[0], a[1] - b[1]];
        sum += d[0].abs() + d[1].abs();
        grad[p] = [sign(d[0]) / count as f64, sign(d[1]) / count as f64];
    }
    Ok(FlowEval {
        term: TermEval { value: sum / count as f64, count, grad },
        occluded,
    })
}

/// Occlusion mask of a forward flow given the matching backward flow.
pub fn occlusion_mask(forward: &FlowMap, backward: &FlowMap, threshold: f64) -> Mask {
    forward.occlusion(backward, threshold)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "same" Gaussian filter with zero padding. The kernel is
/// symmetric so this operator is self-adjoint.
fn blur(data: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * data[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

struct SsimMaps {
    ssim: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_maps(x: &[f64], y: &[f64], w: usize, h: usize) -> SsimMaps {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = blur(x, w, h);
    let mu_y = blur(y, w, h);
    let exx = blur(&sq(x, x), w, h);
    let eyy = blur(&sq(y, y), w, h);
    let exy = blur(&sq(x, y), w, h);
    let n = w * h;
    let (mut ssim, mut a1, mut a2, mut b1, mut b2) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let vx = exx[p] - mx * mx;
        let vy = eyy[p] - my * my;
        let cxy = exy[p] - mx * my;
        a1[p] = 2.0 * mx * my + SSIM_C1;
        a2[p] = 2.0 * cxy + SSIM_C2;
        b1[p] = mx * mx + my * my + SSIM_C1;
        b2[p] = vx + vy + SSIM_C2;
        ssim[p] = a1[p] * a2[p] / (b1[p] * b2[p]);
    }
    SsimMaps { ssim, mu_x, mu_y, a1, a2, b1, b2 }
}

/// Per-pixel SSIM of the luminance of two RGB images.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    a.check_shape(b, "ssim")?;
    let (la, lb) = (a.luminance(), b.luminance());
    Ok(ssim_maps(&la.data, &lb.data, a.width, a.height).ssim)
}

/// `(1 − SSIM) / 2` on luminance, averaged over masked window centres.
pub fn dssim_loss(rgb: &Image, target: &Image, mask: &Mask) -> Result<TermEval<Image>> {
    rgb.check_shape(target, "dssim target")?;
    let (w, h) = (rgb.width, rgb.height);
    let count = mask.count();
    let mut grad = Image::zeros(w, h, rgb.channels);
    if count == 0 {
        return Ok(TermEval { value: 0.0, count, grad });
    }
    let x = rgb.luminance().data;
    let y = target.luminance().data;
    let m = ssim_maps(&x, &y, w, h);
    let mut sum = 0.0;
    let n = w * h;
    let (mut g_mu, mut g_exx, mut g_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let gs = -0.5 / count as f64;
    for p in 0..n {
        if !mask.data[p] {
            continue;
        }
        let s = m.ssim[p];
        sum += 0.5 * (1.0 - s);
        let (mx, my) = (m.mu_x[p], m.mu_y[p]);
        let denom = m.b1[p] * m.b2[p];
        let ds_dmu = (2.0 * my * m.a2[p] - 2.0 * my * m.a1[p]) / denom - s * 2.0 * mx / m.b1[p]
            + s * 2.0 * mx / m.b2[p];
        g_mu[p] = gs * ds_dmu;
        g_exx[p] = gs * (-s / m.b2[p]);
        g_exy[p] = gs * (2.0 * m.a1[p] / denom);
    }
    let (bmu, bxx, bxy) = (blur(&g_mu, w, h), blur(&g_exx, w, h), blur(&g_exy, w, h));
    for p in 0..n {
        let gl = bmu[p] + 2.0 * x[p] * bxx[p] + y[p] * bxy[p];
        for c in 0..3 {
            grad.data[p * rgb.channels + c] = gl * LUMA[c];
        }
    }
    Ok(TermEval { value: sum / count as f64, count, grad })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Rgb,
    Mask,
    Dssim,
    Arap,
    Normal,
    Flow,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Rgb, Term::Mask, Term::Dssim, Term::Arap, Term::Normal, Term::Flow];

    pub fn name(self) -> &'static str {
        match self {
            Term::Rgb => "rgb",
            Term::Mask => "mask",
            Term::Dssim => "dssim",
            Term::Arap => "arap",
            Term::Normal => "normal",
            Term::Flow => "flow",
        }
    }

    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Term::Rgb => w.rgb,
            Term::Mask => w.mask,
            Term::Dssim => w.dssim,
            Term::Arap => w.arap,
            Term::Normal => w.normal,
            Term::Flow => w.flow,
        }
    }
}

/// Values of the six terms for one iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub stage: String,
    /// Indexed like [`Term::ALL`].
    pub values: [f64; 6],
    pub counts: [usize; 6],
    pub occluded: usize,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, t: Term) -> f64 {
        self.values[t as usize]
    }

    pub fn set(&mut self, t: Term, value: f64, count: usize) {
        self.values[t as usize] = value;
        self.counts[t as usize] = count;
    }
}

/// Weighted sum of the terms; a non-finite term aborts naming it.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for t in Term::ALL {
        let v = report.get(t);
        if !v.is_finite() {
            return Err(Error::NumericalAbort { term: t.name().into() });
        }
        total += t.weight(weights) * v;
    }
    Ok(total)
}

/// One log record: `iter stage rgb mask dssim arap normal flow total occluded`
/// in that order, floats in shortest round-trip form.
impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} stage={}", self.iteration, self.stage)?;
        for t in Term::ALL {
            write!(f, " {}={:e}", t.name(), self.get(t))?;
        }
        write!(f, " total={:e} occluded={}", self.total, self.occluded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_fn(w, h, c, |_, _, _| rng.gen())
    }

    /// Direct 2D windowed SSIM, zero padded, one pixel at a time.
    fn ssim_oracle(x: &Image, y: &Image, px: usize, py: usize) -> f64 {
        let (lx, ly) = (x.luminance(), y.luminance());
        let mut wsum = [0.0f64; 5];
        let sigma2 = 2.0 * SSIM_SIGMA * SSIM_SIGMA;
        let norm: f64 = (-5..=5).map(|i: i32| (-(i * i) as f64 / sigma2).exp()).sum();
        for j in -5i32..=5 {
            for i in -5i32..=5 {
                let (xx, yy) = (px as i32 + i, py as i32 + j);
                if xx < 0 || yy < 0 || xx >= x.width as i32 || yy >= x.height as i32 {
                    continue;
                }
                let wgt = (-(i * i + j * j) as f64 / sigma2).exp() / (norm * norm);
                let (a, b) = (lx.at(xx as usize, yy as usize, 0), ly.at(xx as usize, yy as usize, 0));
                wsum[0] += wgt * a;
                wsum[1] += wgt * b;
                wsum[2] += wgt * a * a;
                wsum[3] += wgt * b * b;
                wsum[4] += wgt * a * b;
            }
        }
        let [mx, my, xx, yy, xy] = wsum;
        let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
        ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
    }

    #[test]
    fn photometric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_image(&mut rng, 9, 7, 3);
        let all = Mask::new(9, 7, true);
        assert_eq!(photometric_loss(&a, &a, &all).unwrap().value, 0.0);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 0.1);
        assert!((photometric_loss(&b, &a, &all).unwrap().value - 0.1).abs() < 1e-12);
        let c = rand_image(&mut rng, 9, 7, 3);
        let m = Mask::from_fn(9, 7, |x, y| (x + y) % 3 != 0);
        let mut s = 0.0;
        let mut n = 0;
        for y in 0..7 {
            for x in 0..9 {
                if m.at(x, y) {
                    for k in 0..3 {
                        s += (a.at(x, y, k) - c.at(x, y, k)).abs();
                        n += 1;
                    }
                }
            }
        }
        assert!((photometric_loss(&a, &c, &m).unwrap().value - s / n as f64).abs() < 1e-7);
        let e = photometric_loss(&a, &c, &Mask::new(9, 7, false)).unwrap();
        assert_eq!((e.value, e.count), (0.0, 0));
    }

    #[test]
    fn mask_and_normal_examples() {
        let zero = Image::zeros(6, 5, 1);
        assert_eq!(mask_loss(&zero, &Mask::new(6, 5, true)).unwrap().value, 1.0);
        assert_eq!(mask_loss(&zero, &Mask::new(6, 5, false)).unwrap().value, 0.0);
        let a = Image::from_fn(4, 4, 3, |_, _, c| if c == 2 { -1.0 } else { 0.0 });
        let b = Image::from_fn(4, 4, 3, |_, _, c| if c == 2 { 1.0 } else { 0.0 });
        let all = Mask::new(4, 4, true);
        assert_eq!(normal_loss(&a, &a, &all).unwrap().value, 0.0);
        assert!((normal_loss(&a, &b, &all).unwrap().value - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dssim_matches_windowed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_image(&mut rng, 20, 17, 3);
        let b = rand_image(&mut rng, 20, 17, 3);
        let mask = Mask::from_fn(20, 17, |x, y| x > 2 && y != 5);
        let mut s = 0.0;
        for y in 0..17 {
            for x in 0..20 {
                if mask.at(x, y) {
                    s += 0.5 * (1.0 - ssim_oracle(&a, &b, x, y));
                }
            }
        }
        let want = s / mask.count() as f64;
        assert!((dssim_loss(&a, &b, &mask).unwrap().value - want).abs() < 1e-5);
        assert!(dssim_loss(&a, &a, &mask).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn dssim_constant_negative_is_large() {
        let white = Image::filled(16, 16, 3, 1.0);
        let black = Image::zeros(16, 16, 3);
        let interior = Mask::from_fn(16, 16, |x, y| (5..11).contains(&x) && (5..11).contains(&y));
        let v = dssim_loss(&white, &black, &interior).unwrap().value;
        // luminance term C1/(1 + C1) with unit structure term
        assert!((v - 0.5 * (1.0 - SSIM_C1 / (1.0 + SSIM_C1))).abs() < 1e-9);
    }

    #[test]
    fn dssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_image(&mut rng, 14, 12, 3);
        let b = rand_image(&mut rng, 14, 12, 3);
        let mask = Mask::from_fn(14, 12, |x, _| x > 1);
        let an = dssim_loss(&a, &b, &mask).unwrap().grad;
        for &i in &[0usize, 17, 100, 250, 400, 503] {
            let h = 1e-5;
            let mut p = a.clone();
            p.data[i] += h;
            let mut m = a.clone();
            m.data[i] -= h;
            let fd = (dssim_loss(&p, &b, &mask).unwrap().value - dssim_loss(&m, &b, &mask).unwrap().value)
                / (2.0 * h);
            assert!((fd - an.data[i]).abs() < 1e-7 + 1e-4 * fd.abs(), "{i}: {fd} vs {}", an.data[i]);
        }
    }

    #[test]
    fn flow_examples_and_occlusion_invariance() {
        let a = FlowMap::from_fn(8, 8, |_, _| Some([0.3, -0.2]));
        let b = FlowMap::from_fn(8, 8, |_, _| Some([1.3, -0.2]));
        let none = Mask::new(8, 8, false);
        assert_eq!(flow_loss(&a, &a, &none).unwrap().term.value, 0.0);
        assert!((flow_loss(&a, &b, &none).unwrap().term.value - 1.0).abs() < 1e-15);
        let occ = Mask::from_fn(8, 8, |x, _| x < 3);
        let base = flow_loss(&a, &b, &occ).unwrap();
        let mut c = b.clone();
        for y in 0..8 {
            for x in 0..3 {
                c.data[y * 8 + x] = [99.0, -42.0];
            }
        }
        let other = flow_loss(&a, &c, &occ).unwrap();
        assert_eq!(base.term.value.to_bits(), other.term.value.to_bits());
        assert_eq!(base.occluded, 24);
        let empty = flow_loss(&a, &b, &Mask::new(8, 8, true)).unwrap();
        assert_eq!((empty.term.value, empty.term.count), (0.0, 0));
    }

    #[test]
    fn rotation_flows_are_self_consistent() {
        let (w, h) = (24usize, 24usize);
        let (c, ang) = (12.0, 0.05f64);
        let rot = |x: f64, y: f64, a: f64| {
            let (s, co) = a.sin_cos();
            let (dx, dy) = (x - c, y - c);
            [c + co * dx - s * dy - x, c + s * dx + co * dy - y]
        };
        let fwd = FlowMap::from_fn(w, h, |x, y| Some(rot(x as f64, y as f64, ang)));
        let bwd = FlowMap::from_fn(w, h, |x, y| Some(rot(x as f64, y as f64, -ang)));
        let occ = occlusion_mask(&fwd, &bwd, OCCLUSION_THRESHOLD);
        // only pixels whose forward target leaves the grid are flagged
        for y in 3..21 {
            for x in 3..21 {
                assert!(!occ.at(x, y));
            }
        }
        let zero = FlowMap::from_fn(w, h, |_, _| Some([0.0, 0.0]));
        let e = flow_loss(&fwd, &zero, &occ).unwrap();
        let mut s = 0.0;
        let mut n = 0;
        for p in 0..w * h {
            if !occ.data[p] {
                s += fwd.data[p][0].abs() + fwd.data[p][1].abs();
                n += 1;
            }
        }
        assert!((e.term.value - s / n as f64).abs() < 1e-12);
    }

    #[test]
    fn total_of_unit_terms_is_six() {
        let r = LossReport {
            values: [1.0; 6],
            ..Default::default()
        };
        assert_eq!(total_loss(&r, &LossWeights::default()).unwrap(), 6.0);
        let mut bad = r.clone();
        bad.values[4] = f64::NAN;
        match total_loss(&bad, &LossWeights::default()) {
            Err(Error::NumericalAbort { term }) => assert_eq!(term, "normal"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn total_is_linear_in_each_weight(vals in prop::array::uniform6(0.0f64..10.0), k in 0usize..6, c in 0.0f64..5.0) {
            let r = LossReport { values: vals, ..Default::default() };
            let w = LossWeights::default();
            let mut w2 = w;
            match Term::ALL[k] {
                Term::Rgb => w2.rgb *= c,
                Term::Mask => w2.mask *= c,
                Term::Dssim => w2.dssim *= c,
                Term::Arap => w2.arap *= c,
                Term::Normal => w2.normal *= c,
                Term::Flow => w2.flow *= c,
            }
            let t = Term::ALL[k];
            let d = total_loss(&r, &w2).unwrap() - total_loss(&r, &w).unwrap();
            prop_assert!((d - (c - 1.0) * t.weight(&w) * vals[k]).abs() < 1e-9);
        }

        #[test]
        fn losses_are_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_image(&mut rng, 12, 12, 3);
            let b = rand_image(&mut rng, 12, 12, 3);
            let m = Mask::from_fn(12, 12, |_, _| rng.gen_bool(0.7));
            prop_assert!(photometric_loss(&a, &b, &m).unwrap().value >= 0.0);
            prop_assert!(dssim_loss(&a, &b, &m).unwrap().value >= 0.0);
        }
    }
}
