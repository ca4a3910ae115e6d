//! Three-stage optimization: static fit of the keyframe, coarse dynamic
//! field, refinement on regenerated sequences.

mod adam;
mod config;
mod eval;
mod init;
mod sampler;

pub use adam::AdamGroup;
pub use config::TrainConfig;
pub use eval::{evaluate_view, ViewScores};
pub use init::visual_hull_init;
pub use sampler::sample_timestep_pair;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::field::{
    arap_energy_with_grad, control_graph, control_motions, deform_backward, deform_with_motions,
    ArapGraph, ControlMotions, DeformTape, FieldGrad, Gaussian3D, GaussianField, GaussianGrad,
    NetShape, ParamGroup, Timeline,
};
use crate::io::{Checkpoint, TrainerSection};
use crate::loss::{
    dssim_loss, flow_loss, mask_loss, normal_loss, photometric_loss, total_loss, LossReport, Term,
};
use crate::math::{logistic, mat_vec, quat_to_mat, normalize4};
use crate::render::{render, render_backward, Channels, RenderGrad};
use crate::sequence::MultiviewSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Static,
    Coarse,
    Refine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Static => "static",
            Stage::Coarse => "coarse",
            Stage::Refine => "refine",
        }
    }

    pub fn from_index(i: u32) -> Result<Self> {
        match i {
            0 => Ok(Stage::Static),
            1 => Ok(Stage::Coarse),
            2 => Ok(Stage::Refine),
            _ => Err(Error::Format(format!("unknown stage tag {i}"))),
        }
    }

    pub fn iterations(self, cfg: &TrainConfig) -> u64 {
        match self {
            Stage::Static => cfg.static_iters,
            Stage::Coarse => cfg.coarse_iters,
            Stage::Refine => cfg.refine_iters,
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub field: GaussianField,
    pub stage: Stage,
    /// Iterations completed within the current stage.
    pub iteration: u64,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    /// Indexed like [`ParamGroup::ALL`].
    pub adam: Vec<AdamGroup>,
    /// Accumulated view-space positional gradient norms per Gaussian.
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u64>,
}

fn group_width(g: ParamGroup) -> Option<usize> {
    match g {
        ParamGroup::Position | ParamGroup::LogScale | ParamGroup::Color => Some(3),
        ParamGroup::Orientation => Some(4),
        ParamGroup::OpacityLogit => Some(1),
        ParamGroup::RbfLogRadius | ParamGroup::Network => None,
    }
}

impl TrainState {
    pub fn new(mut field: GaussianField, seed: u64) -> Self {
        field.normalize_orientations();
        field.round_to_f32();
        let adam = ParamGroup::ALL.iter().map(|&g| AdamGroup::zeros(field.param_len(g))).collect();
        let n = field.gaussians.len();
        Self {
            field,
            stage: Stage::Static,
            iteration: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            adam,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    /// Learning rate of `group` at the current iteration.
    pub fn learning_rate(&self, group: ParamGroup, cfg: &TrainConfig) -> f64 {
        let total = self.stage.iterations(cfg).max(1) as f64;
        let f = (self.iteration as f64 / total).min(1.0);
        let decay = |a: f64, b: f64| a * (b / a).powf(f);
        match group {
            ParamGroup::Position => decay(cfg.position_lr, cfg.position_lr_final),
            ParamGroup::Orientation => cfg.rotation_lr,
            ParamGroup::LogScale => cfg.scale_lr,
            ParamGroup::OpacityLogit => cfg.opacity_lr,
            ParamGroup::Color => cfg.color_lr,
            ParamGroup::RbfLogRadius => cfg.rbf_lr,
            ParamGroup::Network => decay(cfg.net_lr, cfg.net_lr_final),
        }
    }

    /// Moves to `stage`, restarting its iteration count and hence every
    /// decayed learning rate. Entering a dynamic stage attaches control
    /// points if the field has none.
    pub fn begin_stage(&mut self, stage: Stage, cfg: &TrainConfig) -> Result<()> {
        if stage != Stage::Static && !self.field.is_dynamic() {
            self.attach_controls(cfg)?;
        }
        self.stage = stage;
        self.iteration = 0;
        Ok(())
    }

    pub fn attach_controls(&mut self, cfg: &TrainConfig) -> Result<()> {
        self.field.attach_controls(cfg.control_points, 0)?;
        self.field.round_to_f32();
        for (i, &g) in ParamGroup::ALL.iter().enumerate() {
            if group_width(g).is_none() {
                self.adam[i] = AdamGroup::zeros(self.field.param_len(g));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        let mut counters = Vec::new();
        for a in &self.adam {
            arrays.push(a.m.clone());
            arrays.push(a.v.clone());
            counters.push(a.step);
        }
        arrays.push(self.grad_accum.clone());
        counters.extend(&self.grad_count);
        Checkpoint {
            field: self.field.clone(),
            trainer: Some(TrainerSection {
                iteration: self.iteration,
                stage: self.stage as u32,
                rng_seed: self.seed,
                rng_word_pos: self.rng.get_word_pos(),
                counters,
                arrays,
            }),
        }
    }

    /// Restores a state; a checkpoint without trainer data starts a fresh
    /// optimizer on the stored field.
    pub fn from_checkpoint(ck: Checkpoint, default_seed: u64) -> Result<Self> {
        let Some(t) = ck.trainer else {
            let mut s = Self::new(ck.field, default_seed);
            s.stage = if s.field.is_dynamic() { Stage::Coarse } else { Stage::Static };
            return Ok(s);
        };
        let field = ck.field;
        let groups = ParamGroup::ALL.len();
        let n = field.gaussians.len();
        let bad = || Error::Format("trainer section does not match the field".into());
        if t.arrays.len() != 2 * groups + 1 || t.counters.len() != groups + n {
            return Err(bad());
        }
        let mut adam = Vec::with_capacity(groups);
        for (i, &g) in ParamGroup::ALL.iter().enumerate() {
            let (m, v) = (t.arrays[2 * i].clone(), t.arrays[2 * i + 1].clone());
            if m.len() != field.param_len(g) || v.len() != m.len() {
                return Err(bad());
            }
            adam.push(AdamGroup { m, v, step: t.counters[i] });
        }
        let grad_accum = t.arrays[2 * groups].clone();
        if grad_accum.len() != n {
            return Err(bad());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(t.rng_seed);
        rng.set_word_pos(t.rng_word_pos);
        Ok(Self {
            field,
            stage: Stage::from_index(t.stage)?,
            iteration: t.iteration,
            seed: t.rng_seed,
            rng,
            adam,
            grad_accum,
            grad_count: t.counters[groups..].to_vec(),
        })
    }
}

/// A fresh static state initialised from the visual hull of the first
/// frame's training views.
pub fn initial_state(seq: &MultiviewSequence, cfg: &TrainConfig) -> Result<TrainState> {
    seq.check()?;
    let views = training_views(seq, cfg)?;
    if views.len() < 2 {
        return Err(invalid("static initialization needs at least 2 training views"));
    }
    let gaussians = visual_hull_init(
        seq,
        1,
        &views,
        cfg.hull_resolution,
        cfg.init_opacity,
        cfg.hull_erosion,
        cfg.surfel_tangent,
    );
    let field = GaussianField::new_static(gaussians, Timeline::new(seq.frames), &NetShape::default(), cfg.seed);
    let mut state = TrainState::new(field, cfg.seed);
    state.begin_stage(Stage::Static, cfg)?;
    Ok(state)
}

/// Views used for training: all cameras minus the held-out ones.
pub fn training_views(seq: &MultiviewSequence, cfg: &TrainConfig) -> Result<Vec<usize>> {
    for &h in &cfg.holdout_views {
        if h == 0 || h > seq.views() {
            return Err(invalid(format!("held-out view {h} does not exist")));
        }
    }
    Ok((1..=seq.views()).filter(|k| !cfg.holdout_views.contains(k)).collect())
}

/// Fits the static field on the keyframe, then attaches control points.
pub fn init_static(seq: &MultiviewSequence, cfg: &TrainConfig) -> Result<GaussianField> {
    let mut state = initial_state(seq, cfg)?;
    train_stage(&mut state, seq, cfg, None, &mut |_, _| Ok(()))?;
    Ok(state.field)
}

struct View {
    t_index: usize,
    k: usize,
    flow: bool,
}

struct ViewResult {
    values: [f64; 6],
    counts: [usize; 6],
    occluded: usize,
    grads: Vec<GaussianGrad>,
    target_grads: Option<Vec<GaussianGrad>>,
    mean2d: Vec<f64>,
}

/// Deformed Gaussians, their tape and the control motions at `n`.
fn deform_at(field: &GaussianField, n: usize) -> Result<(Vec<Gaussian3D>, DeformTape, Option<ControlMotions>)> {
    if !field.is_dynamic() {
        return Ok((field.gaussians.clone(), DeformTape { controls: None }, None));
    }
    let cm = control_motions(field, n)?;
    if n == field.timeline.canonical {
        return Ok((field.gaussians.clone(), DeformTape { controls: None }, Some(cm)));
    }
    let g = deform_with_motions(field, &cm.motions);
    Ok((g, DeformTape { controls: Some(cm.clone()) }, Some(cm)))
}

/// Loss terms and field gradient of one iteration, before the optimizer
/// step.
pub struct StepGradient {
    pub report: LossReport,
    pub grad: FieldGrad,
    /// Summed view-space positional gradient norm per Gaussian.
    pub mean2d: Vec<f64>,
    /// Number of renders each Gaussian was visible in.
    pub seen: Vec<u64>,
}

/// One optimization step of the current stage on `seq`.
pub fn train_step(state: &mut TrainState, seq: &MultiviewSequence, cfg: &TrainConfig) -> Result<LossReport> {
    let stage = state.stage;
    let times: Vec<usize> = if stage != Stage::Static {
        let (a, b) = sample_timestep_pair(seq.frames, cfg.pair_bias, &mut state.rng)?;
        vec![a, b]
    } else {
        vec![state.field.timeline.canonical]
    };
    let StepGradient {
        mut report,
        grad: fg,
        mean2d,
        seen,
    } = step_gradient(&state.field, seq, cfg, stage, &times)?;
    report.iteration = state.iteration + 1;
    if !fg.is_finite() {
        return Err(Error::NumericalAbort { term: "gradient".into() });
    }
    if stage == Stage::Static {
        for i in 0..mean2d.len() {
            state.grad_accum[i] += mean2d[i];
            state.grad_count[i] += seen[i];
        }
    }
    apply_gradients(state, &fg, cfg);
    state.iteration += 1;
    if stage == Stage::Static
        && cfg.densify
        && state.iteration >= cfg.densify_from
        && state.iteration <= cfg.densify_until
        && state.iteration % cfg.densify_interval == 0
    {
        densify_and_prune(state, cfg);
    }
    Ok(report)
}

/// Weighted loss over the training views of `seq` at `times` (one
/// timestep, or a sampled pair whose first entry carries the flow term)
/// and its gradient with respect to every field parameter.
pub fn step_gradient(
    field: &GaussianField,
    seq: &MultiviewSequence,
    cfg: &TrainConfig,
    stage: Stage,
    times: &[usize],
) -> Result<StepGradient> {
    let views = training_views(seq, cfg)?;
    let dynamic = times.len() == 2;
    if times.is_empty() || times.len() > 2 {
        return Err(invalid("step_gradient: expected one timestep or a pair"));
    }
    for &t in times {
        field.timeline.check(t)?;
    }
    let flow_views: Vec<usize> = match stage {
        Stage::Static => Vec::new(),
        Stage::Coarse => views.iter().copied().filter(|&k| k == 1).collect(),
        Stage::Refine => views.clone(),
    };
    let deformed: Vec<_> = times.iter().map(|&t| deform_at(field, t)).collect::<Result<_>>()?;

    let nt = times.len();
    let jobs: Vec<View> = (0..nt)
        .flat_map(|ti| {
            let fv = &flow_views;
            views.iter().map(move |&k| View {
                t_index: ti,
                k,
                flow: ti == 0 && nt == 2 && fv.contains(&k),
            })
        })
        .collect();
    let renders = jobs.len() as f64;
    let flow_renders = jobs.iter().filter(|j| j.flow).count().max(1) as f64;
    let w = cfg.weights;

    let results: Vec<ViewResult> = jobs
        .par_iter()
        .map(|job| -> Result<ViewResult> {
            let t = times[job.t_index];
            let gs = &deformed[job.t_index].0;
            let target = job.flow.then(|| deformed[1].0.as_slice());
            let cam = &seq.cameras[job.k - 1];
            let slot = seq.slot(t, job.k);
            let (out, tape) = render(gs, cam, Channels::ALL, target)?;
            let mut values = [0.0; 6];
            let mut counts = [0; 6];
            let mask = &seq.masks[slot];
            let rgb = photometric_loss(&out.rgb, &seq.images[slot], mask)?;
            let ds = dssim_loss(&out.rgb, &seq.images[slot], mask)?;
            let ml = mask_loss(&out.alpha, mask)?;
            let valid = out.normal_valid.and(&seq.normal_valid(t, job.k));
            let nl = normal_loss(&out.normal, &seq.normals[slot], &valid)?;
            let mut g_rgb = rgb.grad;
            for (a, b) in g_rgb.data.iter_mut().zip(&ds.grad.data) {
                *a = *a * w.rgb / renders + *b * w.dssim / renders;
            }
            let mut g_alpha = ml.grad;
            g_alpha.data.iter_mut().for_each(|v| *v *= w.mask / renders);
            let mut g_normal = nl.grad;
            g_normal.data.iter_mut().for_each(|v| *v *= w.normal / renders);
            values[Term::Rgb as usize] = rgb.value;
            counts[Term::Rgb as usize] = rgb.count;
            values[Term::Dssim as usize] = ds.value;
            counts[Term::Dssim as usize] = ds.count;
            values[Term::Mask as usize] = ml.value;
            counts[Term::Mask as usize] = ml.count;
            values[Term::Normal as usize] = nl.value;
            counts[Term::Normal as usize] = nl.count;
            let mut occluded = 0;
            let mut g_flow = None;
            if job.flow {
                let (tb, k) = (times[1], job.k);
                let (fwd, bwd) = seq
                    .pair_flow(k, t, tb)
                    .ok_or_else(|| invalid(format!("no reference flow for view {k} between {t} and {tb}")))?;
                let occ = fwd.occlusion(&bwd, cfg.occlusion_threshold);
                let fl = flow_loss(out.flow.as_ref().expect("flow requested"), &fwd, &occ)?;
                values[Term::Flow as usize] = fl.term.value;
                counts[Term::Flow as usize] = fl.term.count;
                occluded = fl.occluded;
                let mut g = fl.term.grad;
                for v in &mut g {
                    v[0] *= w.flow / flow_renders;
                    v[1] *= w.flow / flow_renders;
                }
                g_flow = Some(g);
            }
            let grad = RenderGrad {
                rgb: Some(g_rgb),
                alpha: Some(g_alpha),
                depth: None,
                normal: Some(g_normal),
                flow: g_flow,
            };
            let back = render_backward(gs, target, cam, &tape, &grad);
            Ok(ViewResult {
                values,
                counts,
                occluded,
                grads: back.gaussians,
                target_grads: back.flow_target,
                mean2d: back.mean2d_norm,
            })
        })
        .collect::<Result<_>>()?;

    let n = field.gaussians.len();
    let mut per_time = vec![vec![GaussianGrad::default(); n]; times.len()];
    let mut report = LossReport {
        stage: stage.name().into(),
        ..Default::default()
    };
    let mut mean2d = vec![0.0; n];
    let mut seen = vec![0u64; n];
    for (job, r) in jobs.iter().zip(&results) {
        for t in Term::ALL {
            let denom = if t == Term::Flow { flow_renders } else { renders };
            report.values[t as usize] += r.values[t as usize] / denom;
            report.counts[t as usize] += r.counts[t as usize];
        }
        report.occluded += r.occluded;
        for (a, b) in per_time[job.t_index].iter_mut().zip(&r.grads) {
            a.add(b);
        }
        if let Some(tg) = &r.target_grads {
            for (a, b) in per_time[1].iter_mut().zip(tg) {
                a.add(b);
            }
        }
        for i in 0..n {
            if r.mean2d[i] > 0.0 {
                mean2d[i] += r.mean2d[i];
                seen[i] += 1;
            }
        }
    }

    let mut fg = FieldGrad::zeros(field);
    for ((_, tape, _), grads) in deformed.iter().zip(&per_time) {
        deform_backward(field, tape, grads, &mut fg);
    }
    if dynamic && field.is_dynamic() {
        let rest: Vec<_> = field.control_points.iter().map(|c| c.rest_position).collect();
        let graph: ArapGraph = control_graph(&rest, cfg.arap_degree);
        let (a, b) = (deformed[0].2.as_ref().unwrap(), deformed[1].2.as_ref().unwrap());
        let e = arap_energy_with_grad(field, &graph, a, b, w.arap, &mut fg);
        report.set(Term::Arap, e, graph.edges.len());
    }
    report.total = total_loss(&report, &w)?;
    Ok(StepGradient {
        report,
        grad: fg,
        mean2d,
        seen,
    })
}

fn apply_gradients(state: &mut TrainState, fg: &FieldGrad, cfg: &TrainConfig) {
    for (i, &g) in ParamGroup::ALL.iter().enumerate() {
        let trainable = match g {
            ParamGroup::RbfLogRadius | ParamGroup::Network => state.stage != Stage::Static,
            _ => true,
        };
        if !trainable || state.field.param_len(g) == 0 {
            continue;
        }
        let lr = state.learning_rate(g, cfg);
        let eps = if group_width(g).is_none() { cfg.net_eps } else { cfg.eps };
        let mut params = state.field.group_values(g);
        let grads = fg.group_values(g);
        state.adam[i].update(&mut params, &grads, lr, cfg.beta1, cfg.beta2, eps);
        state.field.set_group_values(g, &params);
    }
    state.field.normalize_orientations();
    state.field.round_to_f32();
}

/// Clone or split Gaussians with a large mean view-space positional
/// gradient, drop nearly transparent ones, and reset the statistics.
/// Returns `(cloned, split, pruned)`.
pub fn densify_and_prune(state: &mut TrainState, cfg: &TrainConfig) -> (usize, usize, usize) {
    let old = std::mem::take(&mut state.field.gaussians);
    let mut next: Vec<Gaussian3D> = Vec::with_capacity(old.len());
    let mut origin: Vec<Option<usize>> = Vec::with_capacity(old.len());
    let (mut cloned, mut split, mut pruned) = (0, 0, 0);
    let mut budget = cfg.max_gaussians.saturating_sub(old.len());
    let mut extra: Vec<Gaussian3D> = Vec::new();
    for (i, g) in old.iter().enumerate() {
        let avg = if state.grad_count[i] > 0 {
            state.grad_accum[i] / state.grad_count[i] as f64
        } else {
            0.0
        };
        let hot = avg >= cfg.densify_grad_threshold && budget > 0;
        let big = g.log_scale.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp() > cfg.split_scale;
        if hot && big {
            let r = quat_to_mat(normalize4(g.orientation));
            let s = g.scale();
            for _ in 0..2 {
                let z: [f64; 3] = std::array::from_fn(|_| state.rng.sample::<f64, _>(StandardNormal));
                let off = mat_vec(&r, [z[0] * s[0], z[1] * s[1], z[2] * s[2]]);
                let mut c = g.clone();
                for k in 0..3 {
                    c.position[k] += off[k];
                    c.log_scale[k] -= 1.6f64.ln();
                }
                extra.push(c);
            }
            split += 1;
            budget -= 1;
            continue;
        }
        if hot {
            extra.push(g.clone());
            cloned += 1;
            budget -= 1;
        }
        next.push(g.clone());
        origin.push(Some(i));
    }
    for c in extra {
        next.push(c);
        origin.push(None);
    }
    let keep: Vec<bool> = next.iter().map(|g| logistic(g.opacity_logit) >= cfg.prune_opacity).collect();
    let mut kept = Vec::with_capacity(next.len());
    let mut kept_origin = Vec::with_capacity(next.len());
    for ((g, o), k) in next.into_iter().zip(origin).zip(&keep) {
        if *k {
            kept.push(g);
            kept_origin.push(o);
        } else {
            pruned += 1;
        }
    }
    if kept.is_empty() {
        // never render an empty field
        let best = (0..old.len())
            .max_by(|&a, &b| old[a].opacity_logit.total_cmp(&old[b].opacity_logit))
            .unwrap();
        kept.push(old[best].clone());
        kept_origin.push(Some(best));
        pruned -= 1;
    }
    state.field.gaussians = kept;
    for (i, &g) in ParamGroup::ALL.iter().enumerate() {
        if let Some(wd) = group_width(g) {
            state.adam[i].remap(&kept_origin, wd);
        }
    }
    let n = state.field.gaussians.len();
    state.grad_accum = vec![0.0; n];
    state.grad_count = vec![0; n];
    state.field.round_to_f32();
    (cloned, split, pruned)
}

/// Runs the remaining iterations of the current stage, handing every report
/// to `sink`. Stops early after `halt_after` iterations of this call.
/// Returns whether the stage completed. A finished static stage attaches
/// control points.
pub fn train_stage(
    state: &mut TrainState,
    seq: &MultiviewSequence,
    cfg: &TrainConfig,
    halt_after: Option<u64>,
    sink: &mut dyn FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<bool> {
    let total = state.stage.iterations(cfg);
    let mut done = 0u64;
    while state.iteration < total {
        if halt_after.is_some_and(|h| done >= h) {
            return Ok(false);
        }
        let report = train_step(state, seq, cfg)?;
        sink(state, &report)?;
        done += 1;
    }
    if state.stage == Stage::Static && !state.field.is_dynamic() && seq.frames > 1 {
        state.attach_controls(cfg)?;
    }
    Ok(true)
}

/// Largest translation emitted by the deformation network over the
/// timeline (world units).
pub fn max_control_translation(field: &GaussianField) -> Result<f64> {
    let mut m: f64 = 0.0;
    if !field.is_dynamic() {
        return Ok(0.0);
    }
    for n in 1..=field.timeline.frames {
        let cm = control_motions(field, n)?;
        for mo in &cm.motions {
            m = m.max(mo.translation.iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
    }
    Ok(m)
}

/// Uniform random draw used by tests that need the trainer's RNG type.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let _: u32 = r.gen();
    r
}
