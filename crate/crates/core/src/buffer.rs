//! Dense per-pixel buffers: multi-channel float images, boolean masks and
//! 2D flow maps with validity.

use crate::error::{invalid, Result};

/// Row-major `height × width × channels` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(invalid(format!(
                "{what}: shape {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Rec. 601 luma of a 3-channel image.
    pub fn luminance(&self) -> Image {
        assert_eq!(self.channels, 3, "luminance needs RGB");
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    /// Keeps pixels whose full `(2r+1)²` neighbourhood is set.
    pub fn erode(&self, r: usize) -> Mask {
        let (w, h) = (self.width as isize, self.height as isize);
        let r = r as isize;
        Mask::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    let (xx, yy) = (x + dx, y + dy);
                    xx >= 0 && yy >= 0 && xx < w && yy < h && self.at(xx as usize, yy as usize)
                })
            })
        })
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-pixel 2D displacement in pixels with a validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Option<[f64; 2]>,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(v) => {
                        data.push(v);
                        valid.push(true);
                    }
                    None => {
                        data.push([0.0; 2]);
                        valid.push(false);
                    }
                }
            }
        }
        Self {
            width,
            height,
            data,
            valid,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.valid.clone(),
        }
    }

    /// Bilinear lookup at continuous pixel coordinates (pixel centres at
    /// integers). `None` when any of the four taps is outside or invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let x0 = x.floor();
        let y0 = y.floor();
        if !(x0 >= 0.0 && y0 >= 0.0) {
            return None;
        }
        let (xi, yi) = (x0 as usize, y0 as usize);
        let fx = x - x0;
        let fy = y - y0;
        let x1 = if fx > 0.0 { xi + 1 } else { xi };
        let y1 = if fy > 0.0 { yi + 1 } else { yi };
        if x1 >= self.width || y1 >= self.height {
            return None;
        }
        let taps = [(xi, yi), (x1, yi), (xi, y1), (x1, y1)];
        if taps.iter().any(|&(a, b)| !self.is_valid(a, b)) {
            return None;
        }
        let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let mut out = [0.0; 2];
        for (&(a, b), wi) in taps.iter().zip(w) {
            let v = self.at(a, b);
            out[0] += wi * v[0];
            out[1] += wi * v[1];
        }
        Some(out)
    }

    /// Composes `self` (a→b) with `next` (b→c) into a→c:
    /// `f(x) = self(x) + next(x + self(x))`.
    pub fn compose(&self, next: &FlowMap) -> FlowMap {
        FlowMap::from_fn(self.width, self.height, |x, y| {
            if !self.is_valid(x, y) {
                return None;
            }
            let f = self.at(x, y);
            let g = next.sample(x as f64 + f[0], y as f64 + f[1])?;
            Some([f[0] + g[0], f[1] + g[1]])
        })
    }

    /// Occlusion by forward-backward consistency: a pixel is occluded when
    /// `|fwd(x) + bwd(x + fwd(x))| > threshold` or the backward lookup fails.
    pub fn occlusion(&self, backward: &FlowMap, threshold: f64) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            if !self.is_valid(x, y) {
                return false;
            }
            let f = self.at(x, y);
            match backward.sample(x as f64 + f[0], y as f64 + f[1]) {
                Some(b) => {
                    let r = [f[0] + b[0], f[1] + b[1]];
                    (r[0] * r[0] + r[1] * r[1]).sqrt() > threshold
                }
                None => true,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_sample_on_linear_field_is_exact() {
        let f = FlowMap::from_fn(8, 8, |x, y| Some([x as f64 * 0.5 - 1.0, 2.0 * y as f64]));
        let s = f.sample(2.25, 3.75).unwrap();
        assert!((s[0] - (2.25 * 0.5 - 1.0)).abs() < 1e-12);
        assert!((s[1] - 7.5).abs() < 1e-12);
        assert!(f.sample(7.5, 1.0).is_none());
        assert_eq!(f.sample(7.0, 7.0), Some(f.at(7, 7)));
    }

    #[test]
    fn opposite_translations_are_consistent() {
        let fwd = FlowMap::from_fn(16, 16, |_, _| Some([1.5, -0.5]));
        let bwd = FlowMap::from_fn(16, 16, |_, _| Some([-1.5, 0.5]));
        let occ = fwd.occlusion(&bwd, 1.5);
        // only pixels whose target leaves the grid are flagged
        assert!(!occ.at(4, 4));
        assert!(occ.at(15, 4));
        let chained = fwd.compose(&fwd);
        assert_eq!(chained.at(3, 3), [3.0, -1.0]);
    }

    #[test]
    fn erode_removes_thin_structures() {
        let m = Mask::from_fn(9, 9, |x, _| x == 4);
        assert_eq!(m.erode(1).count(), 0);
        let full = Mask::new(5, 5, true);
        assert_eq!(full.erode(1).count(), 9);
    }
}
