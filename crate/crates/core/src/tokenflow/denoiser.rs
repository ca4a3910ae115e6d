use std::f64::consts::PI;

use super::{enlarged_self_attention, FeatureVolume};
use crate::buffer::{Image, Mask};
use crate::error::{invalid, Result};
use crate::sequence::MultiviewSequence;

/// One sampler step `t → t−1` for a set of frames of one viewpoint.
pub struct StepOutput {
    pub volumes: Vec<FeatureVolume>,
    /// Self-attention features of each input frame at step `t`.
    pub attention: Vec<FeatureVolume>,
}

pub trait Denoiser: Sync {
    fn total_steps(&self) -> usize;

    /// `injected[i]`, when present, replaces frame `i`'s own self-attention
    /// output. With `enlarged_sa` every frame attends over all of `frames`.
    fn step(&self, frames: &[FeatureVolume], injected: &[Option<FeatureVolume>], enlarged_sa: bool) -> Result<StepOutput>;

    fn decode(&self, volume: &FeatureVolume) -> Result<Image>;
}

/// Contracts every volume toward a fixed encoding of its target frame:
/// `F ← (1−γ)B + γE` with `B` the (possibly injected) attention output.
/// The encoding pools RGB and mask over stride×stride cells and lifts the
/// four values into `channels` with orthonormal DCT columns.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub gamma: f64,
    pub steps: usize,
    pub stride: usize,
    pub channels: usize,
    /// Weight of the enlarged attention output in `B`; zero keeps frames
    /// independent.
    pub attention_coupling: f64,
    pub heads: usize,
    frames: usize,
    views: usize,
    targets: Vec<Image>,
    encodings: Vec<FeatureVolume>,
    basis: Vec<[f64; 4]>,
}

impl ToyDenoiser {
    /// Targets are the images and masks of `seq`.
    pub fn from_sequence(seq: &MultiviewSequence, gamma: f64, steps: usize, stride: usize, channels: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(invalid(format!("contraction rate {gamma} outside [0, 1]")));
        }
        if channels < 4 {
            return Err(invalid("the toy denoiser needs at least 4 channels"));
        }
        super::grid_size(seq.width(), seq.height(), stride)?;
        let basis: Vec<[f64; 4]> = (0..channels)
            .map(|c| {
                std::array::from_fn(|j| {
                    let norm = if j == 0 { (1.0 / channels as f64).sqrt() } else { (2.0 / channels as f64).sqrt() };
                    norm * (PI * (c as f64 + 0.5) * j as f64 / channels as f64).cos()
                })
            })
            .collect();
        let mut out = Self {
            gamma,
            steps,
            stride,
            channels,
            attention_coupling: 0.0,
            heads: 1,
            frames: seq.frames,
            views: seq.views(),
            targets: seq.images.clone(),
            encodings: Vec::new(),
            basis,
        };
        for n in 1..=seq.frames {
            for k in 1..=seq.views() {
                let s = seq.slot(n, k);
                out.encodings.push(out.encode(&seq.images[s], &seq.masks[s], n, k));
            }
        }
        Ok(out)
    }

    fn encode(&self, img: &Image, mask: &Mask, n: usize, k: usize) -> FeatureVolume {
        let s = self.stride;
        let (w, h) = (img.width / s, img.height / s);
        let mut v = FeatureVolume::zeros(w, h, self.channels, n, k, 0);
        let area = (s * s) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut pooled = [0.0; 4];
                for py in y * s..(y + 1) * s {
                    for px in x * s..(x + 1) * s {
                        for c in 0..3 {
                            pooled[c] += img.at(px, py, c) / area;
                        }
                        pooled[3] += if mask.at(px, py) { 1.0 / area } else { 0.0 };
                    }
                }
                let cell = v.cell_mut(x, y);
                for (c, b) in self.basis.iter().enumerate() {
                    cell[c] = (0..4).map(|j| b[j] * pooled[j]).sum();
                }
            }
        }
        v
    }

    fn slot(&self, v: &FeatureVolume) -> Result<usize> {
        if v.frame == 0 || v.frame > self.frames || v.view == 0 || v.view > self.views {
            return Err(invalid(format!("no target for frame {} view {}", v.frame, v.view)));
        }
        Ok((v.frame - 1) * self.views + (v.view - 1))
    }

    /// Encoding of the target of `(n, k)`.
    pub fn target_encoding(&self, n: usize, k: usize) -> &FeatureVolume {
        &self.encodings[(n - 1) * self.views + (k - 1)]
    }
}

impl Denoiser for ToyDenoiser {
    fn total_steps(&self) -> usize {
        self.steps
    }

    fn step(&self, frames: &[FeatureVolume], injected: &[Option<FeatureVolume>], enlarged_sa: bool) -> Result<StepOutput> {
        if injected.len() != frames.len() {
            return Err(invalid("one injection slot per frame is required"));
        }
        let refs: Vec<&FeatureVolume> = frames.iter().collect();
        let mut volumes = Vec::with_capacity(frames.len());
        for (f, inj) in frames.iter().zip(injected) {
            let target = &self.encodings[self.slot(f)?];
            if !f.same_grid(target) {
                return Err(invalid("feature volume does not match the denoiser grid"));
            }
            let base = match inj {
                Some(i) => {
                    if !i.same_grid(f) {
                        return Err(invalid("injected features do not match the frame grid"));
                    }
                    i.clone()
                }
                None if enlarged_sa && self.attention_coupling != 0.0 => {
                    let a = enlarged_self_attention(f, &refs, self.heads)?;
                    let mut b = f.clone();
                    for (x, y) in b.data.iter_mut().zip(&a.data) {
                        *x += self.attention_coupling * (y - *x);
                    }
                    b
                }
                None => f.clone(),
            };
            let mut next = FeatureVolume {
                frame: f.frame,
                view: f.view,
                step: f.step.saturating_sub(1),
                ..base
            };
            for (x, e) in next.data.iter_mut().zip(&target.data) {
                *x = (1.0 - self.gamma) * *x + self.gamma * e;
            }
            volumes.push(next);
        }
        Ok(StepOutput { volumes, attention: frames.to_vec() })
    }

    /// Target image plus the RGB part of the residual `F − E`, upsampled
    /// by nearest neighbour and clamped to `[0, 1]`.
    fn decode(&self, volume: &FeatureVolume) -> Result<Image> {
        let slot = self.slot(volume)?;
        let target = &self.targets[slot];
        let enc = &self.encodings[slot];
        if !volume.same_grid(enc) {
            return Err(invalid("feature volume does not match the denoiser grid"));
        }
        let s = self.stride;
        Ok(Image::from_fn(target.width, target.height, 3, |x, y, c| {
            let (f, e) = (volume.cell(x / s, y / s), enc.cell(x / s, y / s));
            let r: f64 = self.basis.iter().enumerate().map(|(i, b)| b[c] * (f[i] - e[i])).sum();
            (target.at(x, y, c) + r).clamp(0.0, 1.0)
        }))
    }
}
