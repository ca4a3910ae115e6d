use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{grid_size, propagate, warp_features, Denoiser, FeatureVolume, KeyframeSchedule, LambdaForm};
use crate::buffer::FlowMap;
use crate::error::{invalid, Error, Result};
use crate::field::GaussianField;
use crate::render::{render_flow, Camera};
use crate::sequence::MultiviewSequence;

/// Per frame (index `n−1`): flows `n → prev` and `n → next` to the
/// bracketing keyframes at image resolution; `None` for keyframes.
pub type KeyframeFlows = Vec<Option<(FlowMap, FlowMap)>>;

/// Which sampler iterations propagate keyframe features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PropagationWindow {
    /// The first `τ` iterations, starting from pure noise.
    #[default]
    NoisyEnd,
    /// Iterations whose step index `t` (counting down from `T`) is `≤ τ`.
    StepIndex,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationConfig {
    pub tau: usize,
    pub window: PropagationWindow,
    pub lambda: LambdaForm,
    pub stride: usize,
    /// Start every frame of a view from the same noise.
    pub shared_noise: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            tau: super::DEFAULT_TAU,
            window: PropagationWindow::NoisyEnd,
            lambda: LambdaForm::Linear,
            stride: super::FEATURE_STRIDE,
            shared_noise: false,
        }
    }
}

impl GenerationConfig {
    /// Whether sampler iteration `i` (0-based) of `total` propagates.
    pub fn propagates(&self, i: usize, total: usize) -> bool {
        match self.window {
            PropagationWindow::NoisyEnd => i < self.tau,
            PropagationWindow::StepIndex => total - i <= self.tau,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub volumes: Vec<FeatureVolume>,
    /// Per frame: share of flow-covered cells that received a valid warp,
    /// averaged over propagating iterations; 1 for keyframes.
    pub valid_fraction: Vec<f64>,
}

/// Standard-normal volumes, one per frame of view `view`, independent
/// unless `shared`.
#[allow(clippy::too_many_arguments)]
pub fn noise_volumes(
    frames: usize,
    view: usize,
    width: usize,
    height: usize,
    channels: usize,
    step: usize,
    seed: u64,
    shared: bool,
) -> Vec<FeatureVolume> {
    (1..=frames)
        .map(|n| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stream = if shared { 0 } else { n as u64 };
            rng.set_stream(((view as u64) << 32) | stream);
            let mut v = FeatureVolume::zeros(width, height, channels, n, view, step);
            for x in &mut v.data {
                *x = StandardNormal.sample(&mut rng);
            }
            v
        })
        .collect()
}

fn take_flows(flows: &KeyframeFlows, n: usize) -> Result<&(FlowMap, FlowMap)> {
    flows
        .get(n - 1)
        .and_then(|f| f.as_ref())
        .ok_or_else(|| invalid(format!("missing keyframe flow for frame {n}")))
}

/// Denoises all frames of one viewpoint. Propagating iterations denoise
/// only keyframes, then step every other frame with the blend of its
/// warped keyframe features injected; the remaining iterations denoise all
/// frames together with enlarged self-attention.
pub fn run_generation(
    denoiser: &dyn Denoiser,
    schedule: &KeyframeSchedule,
    flows: &KeyframeFlows,
    cfg: &GenerationConfig,
    init: Vec<FeatureVolume>,
) -> Result<Generation> {
    let total = denoiser.total_steps();
    if init.len() != schedule.frames {
        return Err(invalid(format!("{} volumes for {} frames", init.len(), schedule.frames)));
    }
    let others = schedule.non_keyframes();
    let any_propagation = (0..total).any(|i| cfg.propagates(i, total)) && !others.is_empty();
    if any_propagation {
        for &n in &others {
            take_flows(flows, n)?;
        }
    }
    let mut volumes = init;
    let mut valid_sum = vec![0.0; schedule.frames];
    let mut valid_steps = 0usize;
    for i in 0..total {
        if any_propagation && cfg.propagates(i, total) {
            let keys: Vec<FeatureVolume> = schedule.keyframes.iter().map(|&n| volumes[n - 1].clone()).collect();
            let out = denoiser.step(&keys, &vec![None; keys.len()], true)?;
            let attention = |n: usize| {
                let j = schedule.keyframes.binary_search(&n).unwrap();
                &out.attention[j]
            };
            let injected: Vec<(FeatureVolume, f64)> = others
                .par_iter()
                .map(|&n| -> Result<(FeatureVolume, f64)> {
                    let (kp, kn) = schedule.bracket(n).unwrap();
                    let (to_prev, to_next) = take_flows(flows, n)?;
                    let (wp, vp) = warp_features(attention(kp), to_prev, cfg.stride)?;
                    let (wn, vn) = warp_features(attention(kn), to_next, cfg.stride)?;
                    let own = &volumes[n - 1];
                    let blended = propagate(schedule, cfg.lambda, own, (&wp, &vp), (&wn, &vn))?;
                    let dp = super::downsample_flow(to_prev, cfg.stride)?;
                    let dn = super::downsample_flow(to_next, cfg.stride)?;
                    let covered = (0..vp.len()).filter(|&p| dp.valid[p] || dn.valid[p]).count();
                    let warped = (0..vp.len()).filter(|&p| vp[p] || vn[p]).count();
                    let frac = if covered == 0 { 1.0 } else { warped as f64 / covered as f64 };
                    Ok((blended, frac))
                })
                .collect::<Result<_>>()?;
            let frames: Vec<FeatureVolume> = others.iter().map(|&n| volumes[n - 1].clone()).collect();
            let inj: Vec<Option<FeatureVolume>> = injected.iter().map(|(v, _)| Some(v.clone())).collect();
            let stepped = denoiser.step(&frames, &inj, true)?;
            for (&n, v) in schedule.keyframes.iter().zip(out.volumes) {
                volumes[n - 1] = v;
            }
            for ((&n, v), (_, frac)) in others.iter().zip(stepped.volumes).zip(&injected) {
                volumes[n - 1] = v;
                valid_sum[n - 1] += frac;
            }
            valid_steps += 1;
        } else {
            let out = denoiser.step(&volumes, &vec![None; volumes.len()], true)?;
            volumes = out.volumes;
        }
    }
    let valid_fraction = (1..=schedule.frames)
        .map(|n| {
            if schedule.is_keyframe(n) || valid_steps == 0 {
                1.0
            } else {
                valid_sum[n - 1] / valid_steps as f64
            }
        })
        .collect();
    Ok(Generation { volumes, valid_fraction })
}

/// Keyframe flows rendered from a dynamic field for one camera.
pub fn rendered_keyframe_flows(field: &GaussianField, camera: &Camera, schedule: &KeyframeSchedule) -> Result<KeyframeFlows> {
    (1..=schedule.frames)
        .map(|n| {
            let Some((kp, kn)) = schedule.bracket(n) else {
                return Ok(None);
            };
            let ctx = |e: Error, m: usize| invalid(format!("rendering flow of view {} from frame {n} to {m}: {e}", camera.viewpoint_index));
            let a = render_flow(field, camera, n, kp).map_err(|e| ctx(e, kp))?;
            let b = render_flow(field, camera, n, kn).map_err(|e| ctx(e, kn))?;
            Ok(Some((a, b)))
        })
        .collect()
}

/// Keyframe flows of view `k` chained from the sequence's consecutive flows.
pub fn chained_keyframe_flows(seq: &MultiviewSequence, k: usize, schedule: &KeyframeSchedule) -> Result<KeyframeFlows> {
    (1..=schedule.frames)
        .map(|n| {
            let Some((kp, kn)) = schedule.bracket(n) else {
                return Ok(None);
            };
            let missing = || invalid(format!("missing consecutive flows for view {k} around frame {n}"));
            let a = seq.pair_flow(k, n, kp).ok_or_else(missing)?.0;
            let b = seq.pair_flow(k, n, kn).ok_or_else(missing)?.0;
            Ok(Some((a, b)))
        })
        .collect()
}

/// Variance across non-keyframes of each feature value, averaged over
/// cells and channels.
pub fn inter_frame_variance(volumes: &[FeatureVolume], schedule: &KeyframeSchedule) -> Result<f64> {
    let picked: Vec<&FeatureVolume> = schedule.non_keyframes().iter().map(|&n| &volumes[n - 1]).collect();
    if picked.len() < 2 {
        return Err(Error::UndefinedResult("inter-frame variance needs two non-keyframes".into()));
    }
    let m = picked.len() as f64;
    let len = picked[0].data.len();
    let mut total = 0.0;
    for i in 0..len {
        let mean = picked.iter().map(|v| v.data[i]).sum::<f64>() / m;
        total += picked.iter().map(|v| (v.data[i] - mean).powi(2)).sum::<f64>() / m;
    }
    Ok(total / len as f64)
}

#[derive(Clone, Debug)]
pub struct Regeneration {
    pub sequence: MultiviewSequence,
    /// `[view][frame]` valid-warp fractions.
    pub valid_fraction: Vec<Vec<f64>>,
    /// `[view][frame]` final feature volumes.
    pub volumes: Vec<Vec<FeatureVolume>>,
}

/// Regenerates every viewpoint of `seq` with flows rendered from `field`.
/// Masks and normals are carried over from `seq`; consecutive flows are
/// rendered from `field`.
pub fn regenerate_pipeline(
    field: &GaussianField,
    seq: &MultiviewSequence,
    denoiser: &dyn Denoiser,
    schedule: &KeyframeSchedule,
    cfg: &GenerationConfig,
    channels: usize,
    seed: u64,
) -> Result<Regeneration> {
    seq.check()?;
    if schedule.frames != seq.frames || field.timeline.frames != seq.frames {
        return Err(invalid("field, schedule and sequence disagree on the frame count"));
    }
    let (gw, gh) = grid_size(seq.width(), seq.height(), cfg.stride)?;
    let per_view: Vec<(Vec<_>, Vec<f64>, Vec<FeatureVolume>)> = (1..=seq.views())
        .into_par_iter()
        .map(|k| -> Result<_> {
            let cam = &seq.cameras[k - 1];
            let flows = rendered_keyframe_flows(field, cam, schedule)?;
            let init = noise_volumes(seq.frames, k, gw, gh, channels, denoiser.total_steps(), seed, cfg.shared_noise);
            let g = run_generation(denoiser, schedule, &flows, cfg, init)?;
            let images = g.volumes.iter().map(|v| denoiser.decode(v)).collect::<Result<Vec<_>>>()?;
            Ok((images, g.valid_fraction, g.volumes))
        })
        .collect::<Result<_>>()?;
    let mut out = seq.clone();
    let mut valid_fraction = Vec::new();
    let mut volumes = Vec::new();
    for (ki, (images, frac, vols)) in per_view.into_iter().enumerate() {
        volumes.push(vols);
        for (ni, img) in images.into_iter().enumerate() {
            let s = out.slot(ni + 1, ki + 1);
            out.images[s] = img;
        }
        valid_fraction.push(frac);
    }
    let slots: Vec<(usize, usize)> = (1..seq.frames)
        .flat_map(|n| (1..=seq.views()).map(move |k| (n, k)))
        .collect();
    let flows: Vec<(FlowMap, FlowMap)> = slots
        .par_iter()
        .map(|&(n, k)| -> Result<_> {
            let cam = &seq.cameras[k - 1];
            Ok((render_flow(field, cam, n, n + 1)?, render_flow(field, cam, n + 1, n)?))
        })
        .collect::<Result<_>>()?;
    for (&(n, k), (f, b)) in slots.iter().zip(flows) {
        let s = out.slot(n, k);
        out.flows_fwd[s] = Some(f);
        out.flows_bwd[s] = Some(b);
    }
    Ok(Regeneration {
        sequence: out,
        valid_fraction,
        volumes,
    })
}
