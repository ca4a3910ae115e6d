use crate::buffer::Mask;
use crate::error::Result;
use crate::field::{deform, GaussianField};
use crate::metrics::{endpoint_error, psnr, ssim};
use crate::render::{render, Channels};
use crate::sequence::MultiviewSequence;

/// Scores of one viewpoint averaged over every timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewScores {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean over consecutive pairs; `None` with a single frame.
    pub epe: Option<f64>,
}

/// Renders view `k` at every timestep and compares with `seq`: PSNR and
/// SSIM over the full frame, flow endpoint error on pixels covered in both
/// the reference and the render.
pub fn evaluate_view(field: &GaussianField, seq: &MultiviewSequence, k: usize) -> Result<ViewScores> {
    let cam = &seq.cameras[k - 1];
    let full = Mask::new(cam.width, cam.height, true);
    let frames: Vec<_> = (1..=seq.frames).map(|n| deform(field, n).map(|d| d.0)).collect::<Result<_>>()?;
    let (mut p, mut s, mut e) = (0.0, 0.0, 0.0);
    for n in 1..=seq.frames {
        let target = frames.get(n).map(|g| g.as_slice());
        let (out, _) = render(&frames[n - 1], cam, Channels::ALL, target)?;
        let slot = seq.slot(n, k);
        p += psnr(&out.rgb, &seq.images[slot], &full, 1.0)?;
        s += ssim(&out.rgb, &seq.images[slot], &full)?;
        if let (Some(flow), Some(reference)) = (&out.flow, &seq.flows_fwd[slot]) {
            let m = seq.masks[slot].and(&out.coverage);
            e += endpoint_error(flow, reference, Some(&m))?;
        }
    }
    let nf = seq.frames as f64;
    Ok(ViewScores {
        psnr: p / nf,
        ssim: s / nf,
        epe: (seq.frames > 1).then(|| e / (nf - 1.0)),
    })
}
