use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gf4d::field::{deform, GaussianField};
use gf4d::io::{atomic_write, load_checkpoint, save_checkpoint, write_flo4, write_mask_png, write_pfm, write_png};
use gf4d::metrics::{endpoint_error, psnr, ssim};
use gf4d::render::{render as render_view, Channels};
use gf4d::sequence::{cameras_from_text, slot_name};
use gf4d::synth::{make_scene, SceneSpec};
use gf4d::tokenflow::{
    regenerate_pipeline, write_ftv1, GenerationConfig, KeyframeSchedule, LambdaForm, PropagationWindow, ToyDenoiser,
    FEATURE_STRIDE,
};
use gf4d::train::{initial_state, train_stage, Stage, TrainConfig, TrainState};
use gf4d::{Error, Mask};

use crate::workspace::{Workspace, MANIFEST, SEQUENCE_INFO, SUBDIRS};
use crate::{CliError, EvalArgs, LambdaArg, RegenOptions, RegenerateArgs, RenderArgs, StageArg, SynthArgs, TrainArgs, WindowArg};

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(Error::MissingInputs(vec![path.display().to_string()]).into());
    }
    Ok(fs::read_to_string(path).map_err(io_error(path))?)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let ws = Workspace::new(&a.out);
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out).map_err(io_error(&a.out))?.next().is_some();
        if non_empty && !a.force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to replace it",
                a.out.display()
            )));
        }
    }
    let mut spec = match &a.spec {
        Some(p) => SceneSpec::parse(&read_text(p)?)?,
        None => SceneSpec::default(),
    };
    for s in &a.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::BadConfigValue {
            key: s.clone(),
            value: String::new(),
        })?;
        spec.set(k.trim(), v.trim())?;
    }
    spec.validate()?;
    let _lock = ws.lock()?;
    if a.force {
        for d in SUBDIRS {
            let p = ws.dir(d);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(io_error(&p))?;
            }
        }
        let _ = fs::remove_file(ws.root.join(MANIFEST));
    }
    ws.create_dirs()?;
    let (_, seq) = make_scene(spec.clone())?;
    ws.write_sequence("inputs", &seq)?;
    atomic_write(&ws.dir("inputs").join("scene.txt"), spec.to_text().as_bytes())?;
    ws.write_manifest()?;
    println!(
        "synth: {} scene, {} frames x {} views at {}x{} -> {}",
        spec.kind.name(),
        seq.frames,
        seq.views(),
        seq.width(),
        seq.height(),
        ws.root.display()
    );
    Ok(())
}

pub fn load_config(file: Option<&Path>, sets: &[String]) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = file {
        cfg.apply_text(&read_text(p)?)?;
    }
    for s in sets {
        if !s.contains('=') {
            return Err(Error::BadConfigValue {
                key: s.clone(),
                value: String::new(),
            }
            .into());
        }
        cfg.apply_text(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_name(s: Stage) -> &'static str {
    s.name()
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let ws = Workspace::new(&a.workspace);
    let cfg = load_config(a.config.as_deref(), &a.set)?;
    require_inputs(&ws)?;
    let _lock = ws.lock()?;
    ws.create_dirs()?;
    let stages: Vec<Stage> = match a.stage {
        StageArg::Static => vec![Stage::Static],
        StageArg::Coarse => vec![Stage::Coarse],
        StageArg::Refine => vec![Stage::Refine],
        StageArg::All => vec![Stage::Static, Stage::Coarse, Stage::Refine],
    };
    let names: Vec<&str> = stages.iter().map(|s| stage_name(*s)).collect();
    let mut header = format!("# train stages={}\n# effective config\n", names.join(","));
    for line in cfg.to_text().lines() {
        header.push_str(&format!("# {line}\n"));
    }
    ws.append_log("train.log", &header)?;
    let mut budget = a.halt_after;
    for stage in stages {
        if a.stage == StageArg::All && !a.fresh && ws.checkpoint(stage_name(stage)).exists() {
            continue;
        }
        if stage == Stage::Refine && a.stage == StageArg::All && (a.fresh || !ws.dir("regenerated").join(SEQUENCE_INFO).exists()) {
            regenerate_into(&ws, &ws.checkpoint("coarse"), &a.regen)?;
        }
        if !run_stage(&ws, stage, &cfg, a, &mut budget)? {
            println!(
                "train: halted in the {} stage; rerun the same command to resume",
                stage_name(stage)
            );
            return Ok(());
        }
    }
    Ok(())
}

fn require_inputs(ws: &Workspace) -> Result<(), CliError> {
    let info = ws.dir("inputs").join(SEQUENCE_INFO);
    if !info.exists() {
        return Err(Error::MissingInputs(vec![info.display().to_string()]).into());
    }
    Ok(())
}

fn load_state(path: &Path, seed: u64) -> Result<TrainState, CliError> {
    if !path.exists() {
        return Err(Error::MissingInputs(vec![path.display().to_string()]).into());
    }
    Ok(TrainState::from_checkpoint(load_checkpoint(path)?, seed)?)
}

/// Trains `stage` to completion or until the halt budget runs out; returns
/// whether the stage finished.
fn run_stage(ws: &Workspace, stage: Stage, cfg: &TrainConfig, a: &TrainArgs, budget: &mut Option<u64>) -> Result<bool, CliError> {
    let seq = ws.read_sequence(if stage == Stage::Refine { "regenerated" } else { "inputs" })?;
    let latest = ws.checkpoint("latest");
    let resumed = if latest.exists() && !a.fresh {
        let st = load_state(&latest, cfg.seed)?;
        (st.stage == stage).then_some(st)
    } else {
        None
    };
    let mut state = match resumed {
        Some(st) => st,
        None => match stage {
            Stage::Static => initial_state(&seq, cfg)?,
            Stage::Coarse | Stage::Refine => {
                let prev = if stage == Stage::Coarse { "static" } else { "coarse" };
                let mut st = load_state(&ws.checkpoint(prev), cfg.seed)?;
                st.begin_stage(stage, cfg)?;
                st
            }
        },
    };
    let total = stage.iterations(cfg);
    let log_path = ws.dir("logs").join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_error(&log_path))?;
    let every = a.checkpoint_every.max(1);
    loop {
        if state.iteration >= total {
            break;
        }
        let chunk = match budget {
            Some(0) => return Ok(false),
            Some(b) => every.min(*b),
            None => every,
        };
        let before = state.iteration;
        let mut sink = |_: &TrainState, r: &gf4d::loss::LossReport| -> gf4d::Result<()> {
            writeln!(log, "{r}").map_err(io_error(&log_path))
        };
        match train_stage(&mut state, &seq, cfg, Some(chunk), &mut sink) {
            Ok(_) => {}
            Err(e @ Error::NumericalAbort { .. }) => {
                // state before the failing step
                let abort = ws.checkpoint("abort");
                save_checkpoint(&state.to_checkpoint(), &abort)?;
                eprintln!("train: diagnostic checkpoint written to {}", abort.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
        if let Some(b) = budget.as_mut() {
            *b -= state.iteration - before;
        }
        save_checkpoint(&state.to_checkpoint(), &latest)?;
    }
    // a finished static stage attaches control points
    if stage == Stage::Static && !state.field.is_dynamic() && seq.frames > 1 {
        state.attach_controls(cfg)?;
        save_checkpoint(&state.to_checkpoint(), &latest)?;
    }
    save_checkpoint(&state.to_checkpoint(), &ws.checkpoint(stage_name(stage)))?;
    println!(
        "train: {} stage complete ({} iterations, {} Gaussians)",
        stage_name(stage),
        total,
        state.field.gaussians.len()
    );
    Ok(true)
}

fn generation_config(o: &RegenOptions) -> GenerationConfig {
    GenerationConfig {
        tau: o.tau,
        window: match o.window {
            WindowArg::NoisyEnd => PropagationWindow::NoisyEnd,
            WindowArg::StepIndex => PropagationWindow::StepIndex,
        },
        lambda: match o.lambda {
            LambdaArg::Linear => LambdaForm::Linear,
            LambdaArg::Printed => LambdaForm::Printed,
        },
        stride: FEATURE_STRIDE,
        shared_noise: o.shared_noise,
    }
}

pub fn regenerate(a: &RegenerateArgs) -> Result<(), CliError> {
    let ws = Workspace::new(&a.workspace);
    require_inputs(&ws)?;
    let _lock = ws.lock()?;
    ws.create_dirs()?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| ws.checkpoint("coarse"));
    regenerate_into(&ws, &ckpt, &a.regen)
}

fn regenerate_into(ws: &Workspace, ckpt: &Path, o: &RegenOptions) -> Result<(), CliError> {
    let seq = ws.read_sequence("inputs")?;
    if !ckpt.exists() {
        return Err(Error::MissingInputs(vec![ckpt.display().to_string()]).into());
    }
    let field = load_checkpoint(ckpt)?.field;
    if !field.is_dynamic() {
        return Err(CliError::Usage(format!("{} holds no dynamic field", ckpt.display())));
    }
    let schedule = KeyframeSchedule::new(seq.frames, o.interval)?;
    let denoiser = ToyDenoiser::from_sequence(&seq, o.gamma, o.steps, FEATURE_STRIDE, o.channels)?;
    let cfg = generation_config(o);
    let r = regenerate_pipeline(&field, &seq, &denoiser, &schedule, &cfg, o.channels, o.noise_seed)?;
    ws.write_sequence("regenerated", &r.sequence)?;
    let feat = ws.dir("features");
    let mut log = format!(
        "# regenerate tau={} interval={} steps={} gamma={:?} channels={} keyframes={:?}\n",
        o.tau, o.interval, o.steps, o.gamma, o.channels, schedule.keyframes
    );
    for (ki, (vols, fracs)) in r.volumes.iter().zip(&r.valid_fraction).enumerate() {
        for (ni, (v, f)) in vols.iter().zip(fracs).enumerate() {
            write_ftv1(v, &feat.join(format!("{}.ftv1", slot_name(ni + 1, ki + 1))))?;
            log.push_str(&format!("view={} frame={} valid_fraction={f:.6}\n", ki + 1, ni + 1));
        }
    }
    ws.append_log("regenerate.log", &log)?;
    ws.write_manifest()?;
    let min = r.valid_fraction.iter().flatten().cloned().fold(1.0, f64::min);
    println!(
        "regenerate: {} frames x {} views written, minimum valid-warp fraction {min:.3}",
        seq.frames,
        seq.views()
    );
    Ok(())
}

fn default_checkpoint(ws: &Workspace) -> Result<PathBuf, CliError> {
    ["refine", "coarse", "static"]
        .iter()
        .map(|n| ws.checkpoint(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::MissingInputs(vec![ws.checkpoint("static").display().to_string()]).into())
}

fn load_field(ws: &Workspace, ckpt: Option<&PathBuf>) -> Result<GaussianField, CliError> {
    let p = match ckpt {
        Some(p) => p.clone(),
        None => default_checkpoint(ws)?,
    };
    if !p.exists() {
        return Err(Error::MissingInputs(vec![p.display().to_string()]).into());
    }
    Ok(load_checkpoint(&p)?.field)
}

pub fn render(a: &RenderArgs) -> Result<(), CliError> {
    let ws = Workspace::new(&a.workspace);
    let cams = cameras_from_text(&read_text(&ws.dir("inputs").join("cameras.txt"))?)?;
    let field = load_field(&ws, a.checkpoint.as_ref())?;
    if a.view == 0 || a.view > cams.len() {
        return Err(CliError::Usage(format!("unknown view {}; the workspace has views 1..={}", a.view, cams.len())));
    }
    field.timeline.check(a.time)?;
    let cam = &cams[a.view - 1];
    let (ga, _) = deform(&field, a.time)?;
    let target = match a.flow_to {
        Some(m) => {
            field.timeline.check(m)?;
            Some(deform(&field, m)?.0)
        }
        None => None,
    };
    let (out, _) = render_view(&ga, cam, Channels::ALL, target.as_deref())?;
    let dir = a.out.clone().unwrap_or_else(|| ws.dir("renders"));
    let name = slot_name(a.time, a.view);
    write_png(&out.rgb, &dir.join(format!("{name}.png")))?;
    write_mask_png(&out.coverage, &dir.join(format!("{name}_mask.png")))?;
    write_pfm(&out.depth, &dir.join(format!("{name}_depth.pfm")))?;
    write_pfm(&out.normal, &dir.join(format!("{name}_normal.pfm")))?;
    if let (Some(m), Some(flow)) = (a.flow_to, &out.flow) {
        write_flo4(flow, &dir.join(format!("{name}_flow_to{m:03}.flo4")))?;
    }
    println!("render: {} -> {}", name, dir.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ws = Workspace::new(&a.workspace);
    let seq = ws.read_sequence("inputs")?;
    let field = load_field(&ws, a.checkpoint.as_ref())?;
    if field.timeline.frames != seq.frames {
        return Err(CliError::Usage("checkpoint and inputs disagree on the frame count".into()));
    }
    let full = Mask::new(seq.width(), seq.height(), true);
    let frames: Vec<_> = (1..=seq.frames).map(|n| deform(&field, n).map(|d| d.0)).collect::<Result<_, _>>()?;
    let mut text = String::from("# view frame psnr ssim epe\n");
    let mut all = (Vec::new(), Vec::new(), Vec::new());
    for k in 1..=seq.views() {
        let cam = &seq.cameras[k - 1];
        let mut per = (Vec::new(), Vec::new(), Vec::new());
        for n in 1..=seq.frames {
            let target = frames.get(n).map(|g| g.as_slice());
            let (out, _) = render_view(&frames[n - 1], cam, Channels::ALL, target)?;
            let s = seq.slot(n, k);
            let p = psnr(&out.rgb, &seq.images[s], &full, 1.0)?;
            let q = ssim(&out.rgb, &seq.images[s], &full)?;
            let e = match (&out.flow, &seq.flows_fwd[s]) {
                (Some(f), Some(r)) => endpoint_error(f, r, Some(&seq.masks[s].and(&out.coverage))).ok(),
                _ => None,
            };
            let es = e.map_or("-".to_string(), |v| format!("{v:.6}"));
            text.push_str(&format!("view={k} frame={n} psnr={p:.6} ssim={q:.6} epe={es}\n"));
            per.0.push(p);
            per.1.push(q);
            per.2.extend(e);
        }
        text.push_str(&summary(&format!("view={k} frame=mean"), &per));
        all.0.extend(per.0);
        all.1.extend(per.1);
        all.2.extend(per.2);
    }
    text.push_str(&summary("view=all frame=mean", &all));
    let out = a.out.clone().unwrap_or_else(|| ws.dir("logs").join("eval.txt"));
    atomic_write(&out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn summary(label: &str, v: &(Vec<f64>, Vec<f64>, Vec<f64>)) -> String {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let e = if v.2.is_empty() { "-".to_string() } else { format!("{:.6}", mean(&v.2)) };
    format!("{label} psnr={:.6} ssim={:.6} epe={e}\n", mean(&v.0), mean(&v.1))
}
