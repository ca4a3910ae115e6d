//! Multiview image sequences: N timesteps × K viewpoints of images, masks,
//! normals and consecutive flows, plus their on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use crate::buffer::{FlowMap, Image, Mask};
use crate::error::{invalid, io_err, Error, Result};
use crate::io;
use crate::render::Camera;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiviewSequence {
    pub frames: usize,
    pub cameras: Vec<Camera>,
    /// Indexed by [`MultiviewSequence::slot`].
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    /// Camera-frame unit normals; zero vectors mark invalid pixels.
    pub normals: Vec<Image>,
    /// Flow `n → n+1` stored at slot `(n, k)`; absent for `n = N`.
    pub flows_fwd: Vec<Option<FlowMap>>,
    /// Flow `n+1 → n` stored at slot `(n, k)`.
    pub flows_bwd: Vec<Option<FlowMap>>,
}

pub fn slot_name(n: usize, k: usize) -> String {
    format!("frame{n:03}_view{k}")
}

impl MultiviewSequence {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    /// Flat index of timestep `n` (1-based) and viewpoint `k` (1-based).
    pub fn slot(&self, n: usize, k: usize) -> usize {
        debug_assert!((1..=self.frames).contains(&n) && (1..=self.views()).contains(&k));
        (n - 1) * self.views() + (k - 1)
    }

    pub fn width(&self) -> usize {
        self.cameras[0].width
    }

    pub fn height(&self) -> usize {
        self.cameras[0].height
    }

    pub fn normal_valid(&self, n: usize, k: usize) -> Mask {
        let img = &self.normals[self.slot(n, k)];
        let m = &self.masks[self.slot(n, k)];
        Mask::from_fn(img.width, img.height, |x, y| {
            let p = img.pixel(x, y);
            m.at(x, y) && p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > 0.25
        })
    }

    pub fn check(&self) -> Result<()> {
        let s = self.frames * self.views();
        if self.frames == 0 || self.views() == 0 {
            return Err(invalid("sequence needs at least one frame and one view"));
        }
        if self.images.len() != s
            || self.masks.len() != s
            || self.normals.len() != s
            || self.flows_fwd.len() != s
            || self.flows_bwd.len() != s
        {
            return Err(invalid("sequence slot counts disagree"));
        }
        for c in &self.cameras {
            c.validate()?;
            if c.width != self.width() || c.height != self.height() {
                return Err(invalid("cameras disagree on image size"));
            }
        }
        Ok(())
    }

    /// Forward and backward flow between `ta` and `tb` of view `k`, chained
    /// from consecutive flows. `None` when a link is missing.
    pub fn pair_flow(&self, k: usize, ta: usize, tb: usize) -> Option<(FlowMap, FlowMap)> {
        if ta == tb {
            let z = FlowMap::from_fn(self.width(), self.height(), |_, _| Some([0.0; 2]));
            return Some((z.clone(), z));
        }
        let chain = |from: usize, to: usize| -> Option<FlowMap> {
            let mut acc: Option<FlowMap> = None;
            let steps: Vec<usize> = if from < to {
                (from..to).collect()
            } else {
                (to..from).rev().collect()
            };
            for n in steps {
                let link = if from < to {
                    self.flows_fwd[self.slot(n, k)].as_ref()?
                } else {
                    self.flows_bwd[self.slot(n, k)].as_ref()?
                };
                acc = Some(match acc {
                    None => link.clone(),
                    Some(a) => a.compose(link),
                });
            }
            acc
        };
        Some((chain(ta, tb)?, chain(tb, ta)?))
    }

    /// Writes `frames/`, `masks/`, `normals/`, `flows_fwd/`, `flows_bwd/`
    /// and `cameras.txt` under `root`. Returns the written paths relative to
    /// `root`.
    pub fn write_dir(&self, root: &Path) -> Result<Vec<PathBuf>> {
        self.check()?;
        let mut written = Vec::new();
        let mut put = |rel: PathBuf, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            f(&root.join(&rel))?;
            written.push(rel);
            Ok(())
        };
        put(PathBuf::from("cameras.txt"), &|p| io::atomic_write(p, cameras_to_text(&self.cameras).as_bytes()))?;
        for n in 1..=self.frames {
            for k in 1..=self.views() {
                let s = self.slot(n, k);
                let name = slot_name(n, k);
                put(PathBuf::from(format!("frames/{name}.png")), &|p| io::write_png(&self.images[s], p))?;
                put(PathBuf::from(format!("masks/{name}.png")), &|p| io::write_mask_png(&self.masks[s], p))?;
                put(PathBuf::from(format!("normals/{name}.pfm")), &|p| io::write_pfm(&self.normals[s], p))?;
                if let Some(f) = &self.flows_fwd[s] {
                    put(PathBuf::from(format!("flows_fwd/{name}.flo4")), &|p| io::write_flo4(f, p))?;
                }
                if let Some(f) = &self.flows_bwd[s] {
                    put(PathBuf::from(format!("flows_bwd/{name}.flo4")), &|p| io::write_flo4(f, p))?;
                }
            }
        }
        Ok(written)
    }

    /// Paths (relative to `root`) that a complete sequence of the given size
    /// needs; flows only when `frames > 1`.
    pub fn required_slots(frames: usize, views: usize) -> Vec<PathBuf> {
        let mut out = vec![PathBuf::from("cameras.txt")];
        for n in 1..=frames {
            for k in 1..=views {
                let name = slot_name(n, k);
                out.push(format!("frames/{name}.png").into());
                out.push(format!("masks/{name}.png").into());
                out.push(format!("normals/{name}.pfm").into());
                if n < frames {
                    out.push(format!("flows_fwd/{name}.flo4").into());
                    out.push(format!("flows_bwd/{name}.flo4").into());
                }
            }
        }
        out
    }

    /// Reads a sequence of `frames` timesteps; every missing slot is listed
    /// in the error before anything is decoded.
    pub fn read_dir(root: &Path, frames: usize) -> Result<Self> {
        let cam_path = root.join("cameras.txt");
        let cameras = if cam_path.exists() {
            cameras_from_text(&fs::read_to_string(&cam_path).map_err(io_err(&cam_path))?)?
        } else {
            return Err(Error::MissingInputs(vec![cam_path.display().to_string()]));
        };
        let missing: Vec<String> = Self::required_slots(frames, cameras.len())
            .into_iter()
            .map(|r| root.join(r))
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingInputs(missing));
        }
        let k_count = cameras.len();
        let total = frames * k_count;
        let (mut images, mut masks, mut normals) = (Vec::new(), Vec::new(), Vec::new());
        let (mut flows_fwd, mut flows_bwd) = (Vec::new(), Vec::new());
        for n in 1..=frames {
            for k in 1..=k_count {
                let name = slot_name(n, k);
                images.push(io::read_png(&root.join(format!("frames/{name}.png")))?);
                masks.push(io::read_mask_png(&root.join(format!("masks/{name}.png")))?);
                normals.push(io::read_pfm(&root.join(format!("normals/{name}.pfm")))?);
                if n < frames {
                    flows_fwd.push(Some(io::read_flo4(&root.join(format!("flows_fwd/{name}.flo4")))?));
                    flows_bwd.push(Some(io::read_flo4(&root.join(format!("flows_bwd/{name}.flo4")))?));
                } else {
                    flows_fwd.push(None);
                    flows_bwd.push(None);
                }
            }
        }
        debug_assert_eq!(images.len(), total);
        let seq = Self {
            frames,
            cameras,
            images,
            masks,
            normals,
            flows_fwd,
            flows_bwd,
        };
        seq.check()?;
        for (i, img) in seq.images.iter().enumerate() {
            if img.width != seq.width() || img.height != seq.height() || img.channels != 3 {
                return Err(invalid(format!("image slot {i} has the wrong shape")));
            }
        }
        Ok(seq)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// One line per camera: `view rotation(9) center(3) half_extent width height`.
pub fn cameras_to_text(cams: &[Camera]) -> String {
    let mut s = String::new();
    for c in cams {
        let rot: Vec<f64> = c.rotation.iter().flatten().copied().collect();
        s.push_str(&format!(
            "view={} rotation={} center={} half_extent={:?} width={} height={}\n",
            c.viewpoint_index,
            join(&rot),
            join(&c.center),
            c.half_extent,
            c.width,
            c.height
        ));
    }
    s
}

pub fn cameras_from_text(text: &str) -> Result<Vec<Camera>> {
    let bad = |line: &str| Error::Format(format!("cameras: bad line {line:?}"));
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut kv = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(line))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(line));
        let floats = |k: &str| -> Result<Vec<f64>> {
            get(k)?.split(',').map(|v| v.parse::<f64>().map_err(|_| bad(line))).collect()
        };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(line)) };
        let r = floats("rotation")?;
        let c = floats("center")?;
        if r.len() != 9 || c.len() != 3 {
            return Err(bad(line));
        }
        let cam = Camera {
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            center: [c[0], c[1], c[2]],
            half_extent: get("half_extent")?.parse().map_err(|_| bad(line))?,
            width: int("width")?,
            height: int("height")?,
            viewpoint_index: int("view")?,
        };
        cam.validate()?;
        out.push(cam);
    }
    for (i, c) in out.iter().enumerate() {
        if c.viewpoint_index != i + 1 {
            return Err(Error::Format("cameras: views must be listed 1..K in order".into()));
        }
    }
    if out.is_empty() {
        return Err(Error::Format("cameras: no cameras".into()));
    }
    Ok(out)
}
