//! Flow-guided token propagation: feature warping, keyframe scheduling,
//! keyframe blending, enlarged self-attention and a pluggable denoiser.

mod denoiser;
mod generate;
mod volume;

pub use denoiser::{Denoiser, StepOutput, ToyDenoiser};
pub use generate::{
    chained_keyframe_flows, inter_frame_variance, noise_volumes, regenerate_pipeline, rendered_keyframe_flows,
    run_generation, Generation, GenerationConfig, KeyframeFlows, PropagationWindow, Regeneration,
};
pub use volume::{decode_ftv1, encode_ftv1, grid_size, read_ftv1, write_ftv1, FeatureVolume};

use crate::buffer::FlowMap;
use crate::error::{invalid, Result};

pub const FEATURE_STRIDE: usize = 8;
pub const DEFAULT_CHANNELS: usize = 16;
pub const TOTAL_STEPS: usize = 40;
pub const DEFAULT_TAU: usize = 20;
pub const KEYFRAME_INTERVAL: usize = 8;

/// Keyframes `1, 1+interval, …` plus the last frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyframeSchedule {
    pub frames: usize,
    pub interval: usize,
    pub keyframes: Vec<usize>,
}

impl KeyframeSchedule {
    pub fn new(frames: usize, interval: usize) -> Result<Self> {
        if frames == 0 || interval == 0 {
            return Err(invalid("keyframe schedule needs frames ≥ 1 and interval ≥ 1"));
        }
        let mut keyframes: Vec<usize> = (1..=frames).step_by(interval).collect();
        if *keyframes.last().unwrap() != frames {
            keyframes.push(frames);
        }
        Ok(Self { frames, interval, keyframes })
    }

    pub fn is_keyframe(&self, n: usize) -> bool {
        self.keyframes.binary_search(&n).is_ok()
    }

    /// Bracketing keyframes `(prev, next)` of a non-keyframe.
    pub fn bracket(&self, n: usize) -> Option<(usize, usize)> {
        if n == 0 || n > self.frames || self.is_keyframe(n) {
            return None;
        }
        let i = self.keyframes.partition_point(|&k| k < n);
        Some((self.keyframes[i - 1], self.keyframes[i]))
    }

    pub fn non_keyframes(&self) -> Vec<usize> {
        (1..=self.frames).filter(|&n| !self.is_keyframe(n)).collect()
    }
}

/// Which way the blend weight runs between the bracketing keyframes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LambdaForm {
    /// `λ = (n − prev)/(next − prev)`: weight moves to `next` as `n` nears it.
    #[default]
    Linear,
    /// `λ = (next − n)/(next − prev)`.
    Printed,
}

impl LambdaForm {
    pub fn weight(self, n: usize, prev: usize, next: usize) -> f64 {
        let span = (next - prev) as f64;
        match self {
            LambdaForm::Linear => (n - prev) as f64 / span,
            LambdaForm::Printed => (next - n) as f64 / span,
        }
    }
}

/// Flow map at feature resolution, in feature cells. Each cell reads the
/// image flow bilinearly at its centre.
pub fn downsample_flow(flow: &FlowMap, stride: usize) -> Result<FlowMap> {
    if stride == 0 || flow.width % stride != 0 || flow.height % stride != 0 {
        return Err(invalid(format!(
            "flow {}x{} is not divisible by stride {stride}",
            flow.width, flow.height
        )));
    }
    let s = stride as f64;
    let c = (s - 1.0) / 2.0;
    Ok(FlowMap::from_fn(flow.width / stride, flow.height / stride, |x, y| {
        let f = flow.sample(x as f64 * s + c, y as f64 * s + c)?;
        Some([f[0] / s, f[1] / s])
    }))
}

/// Backward warp: `out(x) = source(x + flow(x))`, sampled bilinearly with
/// cell centres at integers. `flow` maps target pixels to source pixels at
/// image resolution. Cells whose flow is invalid or whose sample leaves the
/// grid are zero and marked invalid.
pub fn warp_features(source: &FeatureVolume, flow: &FlowMap, stride: usize) -> Result<(FeatureVolume, Vec<bool>)> {
    if flow.width != source.width * stride || flow.height != source.height * stride {
        return Err(invalid("flow and feature grid disagree in size"));
    }
    let down = downsample_flow(flow, stride)?;
    let mut out = FeatureVolume { data: vec![0.0; source.data.len()], ..source.clone() };
    let mut valid = vec![false; source.width * source.height];
    let (w, h) = (source.width, source.height);
    for y in 0..h {
        for x in 0..w {
            if !down.is_valid(x, y) {
                continue;
            }
            let f = down.at(x, y);
            let (sx, sy) = (x as f64 + f[0], y as f64 + f[1]);
            if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ];
            let dst = out.cell_mut(x, y);
            for (tx, ty, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(source.cell(tx, ty)) {
                    *d += wt * s;
                }
            }
            valid[y * w + x] = true;
        }
    }
    Ok((out, valid))
}

/// Blends warped keyframe features into frame `own.frame`:
/// `(1−λ)·prev + λ·next` where both are valid, the valid one where only one
/// is, and `own` where neither is.
pub fn propagate(
    schedule: &KeyframeSchedule,
    form: LambdaForm,
    own: &FeatureVolume,
    prev: (&FeatureVolume, &[bool]),
    next: (&FeatureVolume, &[bool]),
) -> Result<FeatureVolume> {
    let n = own.frame;
    let (kp, kn) = schedule
        .bracket(n)
        .ok_or_else(|| invalid(format!("frame {n} is a keyframe or out of range and cannot be propagated")))?;
    if !own.same_grid(prev.0) || !own.same_grid(next.0) {
        return Err(invalid("propagation inputs disagree in shape"));
    }
    let lambda = form.weight(n, kp, kn);
    let mut out = own.clone();
    let c = own.channels;
    for p in 0..own.width * own.height {
        let (a, b) = (prev.1[p], next.1[p]);
        let dst = &mut out.data[p * c..(p + 1) * c];
        let pa = &prev.0.data[p * c..(p + 1) * c];
        let pb = &next.0.data[p * c..(p + 1) * c];
        match (a, b) {
            (true, true) => {
                for i in 0..c {
                    dst[i] = pa[i] + lambda * (pb[i] - pa[i]);
                }
            }
            (true, false) => dst.copy_from_slice(pa),
            (false, true) => dst.copy_from_slice(pb),
            (false, false) => {}
        }
    }
    Ok(out)
}

/// Scaled dot-product attention of `query`'s tokens against the tokens of
/// every volume in `frames`; channels split evenly across `heads`, no
/// projections.
pub fn enlarged_self_attention(query: &FeatureVolume, frames: &[&FeatureVolume], heads: usize) -> Result<FeatureVolume> {
    let c = query.channels;
    if heads == 0 || c % heads != 0 {
        return Err(invalid(format!("{c} channels cannot be split into {heads} heads")));
    }
    if frames.is_empty() || frames.iter().any(|f| !f.same_grid(query)) {
        return Err(invalid("attention frames must share the query's grid"));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let tokens = query.width * query.height;
    let mut out = query.clone();
    let mut logits = vec![0.0; tokens * frames.len()];
    for h in 0..heads {
        let r = h * d..(h + 1) * d;
        for q in 0..tokens {
            let qv = &query.data[q * c..(q + 1) * c][r.clone()];
            let mut max = f64::NEG_INFINITY;
            for (fi, f) in frames.iter().enumerate() {
                for t in 0..tokens {
                    let kv = &f.data[t * c..(t + 1) * c][r.clone()];
                    let l = scale * qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>();
                    logits[fi * tokens + t] = l;
                    max = max.max(l);
                }
            }
            let mut z = 0.0;
            let mut acc = vec![0.0; d];
            for (fi, f) in frames.iter().enumerate() {
                for t in 0..tokens {
                    let e = (logits[fi * tokens + t] - max).exp();
                    z += e;
                    let vv = &f.data[t * c..(t + 1) * c][r.clone()];
                    for (a, v) in acc.iter_mut().zip(vv) {
                        *a += e * v;
                    }
                }
            }
            for (o, a) in out.data[q * c..(q + 1) * c][r.clone()].iter_mut().zip(acc) {
                *o = a / z;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(w: usize, h: usize, c: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureVolume {
        let mut v = FeatureVolume::zeros(w, h, c, n, 1, 0);
        for y in 0..h {
            for x in 0..w {
                for i in 0..c {
                    v.cell_mut(x, y)[i] = f(x, y, i);
                }
            }
        }
        v
    }

    #[test]
    fn schedule_brackets() {
        let s = KeyframeSchedule::new(16, 8).unwrap();
        assert_eq!(s.keyframes, vec![1, 9, 16]);
        assert_eq!(s.bracket(2), Some((1, 9)));
        assert_eq!(s.bracket(15), Some((9, 16)));
        assert_eq!(s.bracket(9), None);
        assert_eq!(KeyframeSchedule::new(17, 8).unwrap().keyframes, vec![1, 9, 17]);
        assert_eq!(KeyframeSchedule::new(1, 8).unwrap().keyframes, vec![1]);
        for n in s.non_keyframes() {
            let (a, b) = s.bracket(n).unwrap();
            assert!(a < n && n < b && s.is_keyframe(a) && s.is_keyframe(b));
        }
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let v = vol(4, 3, 2, 1, |x, y, c| (x * 7 + y * 3 + c) as f64);
        let (w, valid) = warp_features(&v, &FlowMap::zeros(32, 24), 8).unwrap();
        assert_eq!(w, v);
        assert!(valid.iter().all(|&b| b));
    }

    #[test]
    fn integer_shift_warp() {
        let v = vol(6, 2, 1, 1, |x, y, _| (x + 10 * y) as f64);
        let flow = FlowMap::from_fn(48, 16, |_, _| Some([-24.0, 0.0]));
        let (w, valid) = warp_features(&v, &flow, 8).unwrap();
        for y in 0..2 {
            for x in 0..6 {
                assert_eq!(valid[y * 6 + x], x >= 3);
                if x >= 3 {
                    assert_eq!(w.cell(x, y)[0], v.cell(x - 3, y)[0]);
                }
            }
        }
    }

    #[test]
    fn propagation_weights() {
        let s = KeyframeSchedule::new(17, 8).unwrap();
        let own = vol(2, 2, 1, 2, |_, _, _| 5.0);
        let a = vol(2, 2, 1, 1, |_, _, _| 0.0);
        let b = vol(2, 2, 1, 9, |_, _, _| 8.0);
        let all = vec![true; 4];
        let out = propagate(&s, LambdaForm::Linear, &own, (&a, &all), (&b, &all)).unwrap();
        assert!(out.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let out = propagate(&s, LambdaForm::Printed, &own, (&a, &all), (&b, &all)).unwrap();
        assert!(out.data.iter().all(|&v| (v - 7.0).abs() < 1e-12));
        let mid = FeatureVolume { frame: 5, ..own.clone() };
        let out = propagate(&s, LambdaForm::Linear, &mid, (&a, &all), (&b, &all)).unwrap();
        assert!(out.data.iter().all(|&v| v == 4.0));
        let mixed = [true, false, false, true];
        let none = [false, true, false, false];
        let out = propagate(&s, LambdaForm::Linear, &own, (&a, &mixed), (&b, &none)).unwrap();
        assert_eq!(out.data, vec![0.0, 8.0, 5.0, 0.0]);
        let key = FeatureVolume { frame: 9, ..own };
        assert!(propagate(&s, LambdaForm::Linear, &key, (&a, &all), (&b, &all)).is_err());
    }

    #[test]
    fn two_token_attention_closed_form() {
        let f1 = vol(2, 1, 1, 1, |x, _, _| [1.0, 2.0][x]);
        let f2 = vol(2, 1, 1, 2, |x, _, _| [0.5, -1.0][x]);
        let out = enlarged_self_attention(&f1, &[&f1, &f2], 1).unwrap();
        for (x, q) in [1.0f64, 2.0].iter().enumerate() {
            let keys = [1.0, 2.0, 0.5, -1.0];
            let e: Vec<f64> = keys.iter().map(|k| (q * k).exp()).collect();
            let want = e.iter().zip(&keys).map(|(a, b)| a * b).sum::<f64>() / e.iter().sum::<f64>();
            assert!((out.cell(x, 0)[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_frames_do_not_change_attention() {
        let f = vol(3, 3, 4, 1, |x, y, c| ((x * 5 + y * 3 + c * 7) % 11) as f64 / 5.0 - 1.0);
        let single = enlarged_self_attention(&f, &[&f], 2).unwrap();
        let many = enlarged_self_attention(&f, &[&f, &f, &f, &f], 2).unwrap();
        for (a, b) in single.data.iter().zip(&many.data) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(enlarged_self_attention(&f, &[&f], 3).is_err());
    }
}
