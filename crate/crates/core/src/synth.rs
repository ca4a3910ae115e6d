//! Synthetic oracle scenes: a Gaussian sphere shell under known rigid
//! motion, rendered into a multiview sequence with analytic flows.

use std::str::FromStr;

use crate::buffer::{FlowMap, Image, Mask};
use crate::error::{invalid, Error, Result};
use crate::field::{Gaussian3D, GaussianField, NetShape, Timeline};
use crate::math::{
    add3, logit, mat_t_vec, mat_vec, quat_from_axis_angle, quat_mul, rotation_between,
    quat_to_mat, sub3, Mat3, Quat, Vec3, QUAT_IDENTITY,
};
use crate::render::{normal_from_depth, render, Camera, Channels, RenderOutput, DEFAULT_AZIMUTHS};
use crate::sequence::MultiviewSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Static,
    Translation,
    Rotation,
    Articulation,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" | "sphere" => Ok(SceneKind::Static),
            "translation" => Ok(SceneKind::Translation),
            "rotation" => Ok(SceneKind::Rotation),
            "articulation" => Ok(SceneKind::Articulation),
            other => Err(invalid(format!("unknown scene kind `{other}`"))),
        }
    }
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Static => "static",
            SceneKind::Translation => "translation",
            SceneKind::Rotation => "rotation",
            SceneKind::Articulation => "articulation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub gaussians: usize,
    pub frames: usize,
    pub azimuths: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub half_extent: f64,
    pub radius: f64,
    /// World translation per frame.
    pub velocity: Vec3,
    /// Radians per frame.
    pub angular_rate: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::Translation,
            gaussians: 800,
            frames: 16,
            azimuths: DEFAULT_AZIMUTHS.to_vec(),
            width: 128,
            height: 128,
            half_extent: 1.0,
            radius: 0.5,
            velocity: [0.01, 0.0, 0.0],
            angular_rate: 0.03,
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|x| {
            x.trim().parse::<f64>().map_err(|_| Error::BadConfigValue {
                key: key.into(),
                value: v.into(),
            })
        })
        .collect()
}

impl SceneSpec {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::BadConfigValue {
            key: key.into(),
            value: value.into(),
        };
        match key {
            "kind" => self.kind = value.parse()?,
            "gaussians" => self.gaussians = value.parse().map_err(|_| bad())?,
            "frames" => self.frames = value.parse().map_err(|_| bad())?,
            "width" => self.width = value.parse().map_err(|_| bad())?,
            "height" => self.height = value.parse().map_err(|_| bad())?,
            "half_extent" => self.half_extent = value.parse().map_err(|_| bad())?,
            "radius" => self.radius = value.parse().map_err(|_| bad())?,
            "angular_rate" => self.angular_rate = value.parse().map_err(|_| bad())?,
            "azimuths" => self.azimuths = parse_list(key, value)?,
            "velocity" => {
                let v = parse_list(key, value)?;
                if v.len() != 3 {
                    return Err(bad());
                }
                self.velocity = [v[0], v[1], v[2]];
            }
            _ => return Err(Error::UnknownConfigKey(key.into())),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::BadConfigValue {
                key: line.into(),
                value: String::new(),
            })?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians < 4 || self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(invalid("scene needs ≥4 Gaussians, ≥1 frame and a positive image size"));
        }
        if self.azimuths.is_empty() {
            return Err(invalid("scene needs at least one view"));
        }
        if !(self.half_extent > 0.0 && self.radius > 0.0) {
            return Err(invalid("scene extent and radius must be positive"));
        }
        Ok(())
    }

    /// `key=value` lines that [`SceneSpec::parse`] reads back.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        format!(
            "kind={}\ngaussians={}\nframes={}\nazimuths={}\nwidth={}\nheight={}\nhalf_extent={:?}\nradius={:?}\nvelocity={}\nangular_rate={:?}\n",
            self.kind.name(),
            self.gaussians,
            self.frames,
            list(&self.azimuths),
            self.width,
            self.height,
            self.half_extent,
            self.radius,
            list(&self.velocity),
            self.angular_rate
        )
    }

    pub fn cameras(&self) -> Vec<Camera> {
        Camera::ring(&self.azimuths, self.half_extent, self.width, self.height)
    }
}

/// A hand-built field plus its closed-form motion.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub rest: Vec<Gaussian3D>,
    pub cameras: Vec<Camera>,
}

/// Smooth albedo on the shell.
fn albedo(p: Vec3) -> Vec3 {
    [
        0.5 + 0.3 * (4.0 * p[0] + 0.5).sin(),
        0.5 + 0.3 * (4.0 * p[1] + 1.3).sin(),
        0.5 + 0.3 * (4.0 * p[2]).cos(),
    ]
}

impl SyntheticScene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.gaussians;
        let spacing = spec.radius * (4.0 * std::f64::consts::PI / n as f64).sqrt();
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let rest = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let phi = i as f64 * golden;
                let dir = [phi.cos() * r, y, phi.sin() * r];
                let position = dir.map(|c| c * spec.radius);
                Gaussian3D {
                    position,
                    orientation: rotation_between([0.0, 0.0, 1.0], dir),
                    log_scale: [(0.6 * spacing).ln(), (0.6 * spacing).ln(), (0.15 * spacing).ln()],
                    opacity_logit: logit(0.9),
                    color: albedo(position),
                }
            })
            .collect();
        let cameras = spec.cameras();
        Ok(Self { spec, rest, cameras })
    }

    /// Body of a rest-pose point: 0 everywhere except the moving half
    /// (`x ≥ 0`) of the articulated scene.
    pub fn body_of(&self, rest: Vec3) -> usize {
        match self.spec.kind {
            SceneKind::Articulation if rest[0] >= 0.0 => 1,
            _ => 0,
        }
    }

    /// `x ↦ R x + t` taking body `b` from rest to timestep `n`.
    pub fn transform(&self, body: usize, n: usize) -> (Quat, Vec3) {
        let s = (n as f64) - 1.0;
        let sp = &self.spec;
        match (sp.kind, body) {
            (SceneKind::Static, _) | (SceneKind::Articulation, 0) => (QUAT_IDENTITY, [0.0; 3]),
            (SceneKind::Translation, _) => (QUAT_IDENTITY, sp.velocity.map(|v| v * s)),
            // about the front view axis through the origin
            (SceneKind::Rotation, _) | (SceneKind::Articulation, _) => {
                (quat_from_axis_angle([0.0, 0.0, 1.0], sp.angular_rate * s), [0.0; 3])
            }
        }
    }

    fn apply(&self, body: usize, n: usize, p: Vec3) -> Vec3 {
        let (q, t) = self.transform(body, n);
        add3(mat_vec(&quat_to_mat(q), p), t)
    }

    fn apply_inverse(&self, body: usize, n: usize, p: Vec3) -> Vec3 {
        let (q, t) = self.transform(body, n);
        let r: Mat3 = quat_to_mat(q);
        mat_t_vec(&r, sub3(p, t))
    }

    pub fn gaussians_at(&self, n: usize) -> Vec<Gaussian3D> {
        self.rest
            .iter()
            .map(|g| {
                let b = self.body_of(g.position);
                let (q, _) = self.transform(b, n);
                Gaussian3D {
                    position: self.apply(b, n, g.position),
                    orientation: quat_mul(q, g.orientation),
                    ..g.clone()
                }
            })
            .collect()
    }

    /// Static field holding the rest pose.
    pub fn rest_field(&self) -> GaussianField {
        GaussianField::new_static(self.rest.clone(), Timeline::new(self.spec.frames), &NetShape::default(), 0)
    }

    /// Dynamic field that reproduces a static or translating scene exactly:
    /// `controls` control points on the rest pose and a single linear layer
    /// mapping normalized time to the displacement.
    pub fn motion_field(&self, controls: usize) -> Result<GaussianField> {
        let velocity = match self.spec.kind {
            SceneKind::Static => [0.0; 3],
            SceneKind::Translation => self.spec.velocity,
            other => return Err(invalid(format!("no linear motion field for the {} scene", other.name()))),
        };
        let shape = NetShape {
            hidden_layers: 0,
            ..NetShape::default()
        };
        let mut field = GaussianField::new_static(self.rest.clone(), Timeline::new(self.spec.frames), &shape, 0);
        field.attach_controls(controls, 0)?;
        let span = self.spec.frames.saturating_sub(1) as f64;
        let time_input = 3 * (1 + 2 * shape.position_bands);
        let layer = &mut field.deformation.layers[0];
        for (c, v) in velocity.iter().enumerate() {
            layer.weights[c * layer.inputs + time_input] = v * span;
        }
        Ok(field)
    }

    pub fn render_frame(&self, n: usize, camera: &Camera) -> Result<RenderOutput> {
        Ok(render(&self.gaussians_at(n), camera, Channels::ALL, None)?.0)
    }

    /// Closed-form flow from `ta` to `tb`: each covered pixel is lifted with
    /// the rendered depth at `ta`, carried by the known motion and projected.
    pub fn analytic_flow(&self, camera: &Camera, ta: usize, tb: usize, depth: &Image, mask: &Mask) -> FlowMap {
        FlowMap::from_fn(camera.width, camera.height, |x, y| {
            if !mask.at(x, y) {
                return None;
            }
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let world = camera.unproject(u, v, depth.at(x, y, 0));
            let body = match self.spec.kind {
                SceneKind::Articulation => {
                    let r1 = self.apply_inverse(1, ta, world);
                    if r1[0] >= 0.0 {
                        1
                    } else {
                        0
                    }
                }
                _ => 0,
            };
            if self.transform(body, ta) == self.transform(body, tb) {
                return Some([0.0, 0.0]);
            }
            let rest = self.apply_inverse(body, ta, world);
            let moved = self.apply(body, tb, rest);
            let p = camera.project_point(moved);
            Some([p[0] - u, p[1] - v])
        })
    }

    /// Renders every `(n, k)` slot with analytic consecutive flows and
    /// depth-derived normals.
    pub fn sequence(&self) -> Result<MultiviewSequence> {
        let (nf, nk) = (self.spec.frames, self.cameras.len());
        let mut renders = Vec::with_capacity(nf * nk);
        for n in 1..=nf {
            for cam in &self.cameras {
                renders.push(self.render_frame(n, cam)?);
            }
        }
        let slot = |n: usize, k: usize| (n - 1) * nk + (k - 1);
        let mut seq = MultiviewSequence {
            frames: nf,
            cameras: self.cameras.clone(),
            images: Vec::new(),
            masks: Vec::new(),
            normals: Vec::new(),
            flows_fwd: Vec::new(),
            flows_bwd: Vec::new(),
        };
        for n in 1..=nf {
            for (ki, cam) in self.cameras.iter().enumerate() {
                let k = ki + 1;
                let r = &renders[slot(n, k)];
                let (normals, _) = normal_from_depth(&r.depth, cam, &r.coverage);
                seq.images.push(r.rgb.clone());
                seq.masks.push(r.coverage.clone());
                seq.normals.push(normals);
                if n < nf {
                    let next = &renders[slot(n + 1, k)];
                    seq.flows_fwd.push(Some(self.analytic_flow(cam, n, n + 1, &r.depth, &r.coverage)));
                    seq.flows_bwd.push(Some(self.analytic_flow(cam, n + 1, n, &next.depth, &next.coverage)));
                } else {
                    seq.flows_fwd.push(None);
                    seq.flows_bwd.push(None);
                }
            }
        }
        Ok(seq)
    }
}

/// Builds the scene and renders its sequence.
pub fn make_scene(spec: SceneSpec) -> Result<(SyntheticScene, MultiviewSequence)> {
    let scene = SyntheticScene::new(spec)?;
    let seq = scene.sequence()?;
    Ok((scene, seq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: SceneKind) -> SceneSpec {
        SceneSpec {
            kind,
            gaussians: 300,
            frames: 3,
            width: 48,
            height: 48,
            ..Default::default()
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let mut s = SceneSpec::default();
        s.set("kind", "rotation").unwrap();
        s.set("azimuths", "0,30.5").unwrap();
        assert_eq!(SceneSpec::parse(&s.to_text()).unwrap(), s);
        assert!(matches!(SceneSpec::parse("colour=red"), Err(Error::UnknownConfigKey(k)) if k == "colour"));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(matches!("vortex".parse::<SceneKind>(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let (_, seq) = make_scene(small(SceneKind::Static)).unwrap();
        for f in seq.flows_fwd.iter().flatten() {
            assert!(f.data.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
        }
    }

    #[test]
    fn translation_flow_is_projected_velocity() {
        let (scene, seq) = make_scene(small(SceneKind::Translation)).unwrap();
        for (k, cam) in scene.cameras.iter().enumerate() {
            let want = cam.project_vector(scene.spec.velocity);
            let f = seq.flows_fwd[k].as_ref().unwrap();
            for p in 0..f.data.len() {
                if f.valid[p] {
                    assert!((f.data[p][0] - want[0]).abs() < 1e-9 && (f.data[p][1] - want[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rotation_flow_grows_with_radius() {
        let (scene, seq) = make_scene(small(SceneKind::Rotation)).unwrap();
        let cam = &scene.cameras[0];
        let f = seq.flows_fwd[0].as_ref().unwrap();
        let c = 0.5 * cam.width as f64;
        for y in 0..cam.height {
            for x in 0..cam.width {
                if f.is_valid(x, y) {
                    let r = (x as f64 + 0.5 - c).hypot(y as f64 + 0.5 - c);
                    let m = f.at(x, y)[0].hypot(f.at(x, y)[1]);
                    let want = 2.0 * r * (0.5 * scene.spec.angular_rate).sin();
                    assert!((m - want).abs() < 1e-9, "{m} vs {want}");
                }
            }
        }
    }

    #[test]
    fn flows_are_forward_backward_consistent() {
        for kind in [SceneKind::Translation, SceneKind::Rotation] {
            let (_, seq) = make_scene(small(kind)).unwrap();
            let (fwd, bwd) = (seq.flows_fwd[0].as_ref().unwrap(), seq.flows_bwd[0].as_ref().unwrap());
            let mut checked = 0;
            for y in 0..fwd.height {
                for x in 0..fwd.width {
                    let Some(f) = fwd.is_valid(x, y).then(|| fwd.at(x, y)) else { continue };
                    if let Some(b) = bwd.sample(x as f64 + f[0], y as f64 + f[1]) {
                        assert!((f[0] + b[0]).hypot(f[1] + b[1]) <= 1e-4);
                        checked += 1;
                    }
                }
            }
            assert!(checked > 100);
        }
    }

    #[test]
    fn motion_field_reproduces_translation() {
        let scene = SyntheticScene::new(small(SceneKind::Translation)).unwrap();
        let field = scene.motion_field(32).unwrap();
        for n in 1..=3 {
            let (moved, _) = crate::field::deform(&field, n).unwrap();
            for (a, b) in moved.iter().zip(scene.gaussians_at(n)) {
                for c in 0..3 {
                    assert!((a.position[c] - b.position[c]).abs() < 1e-12);
                }
            }
        }
        assert!(SyntheticScene::new(small(SceneKind::Rotation)).unwrap().motion_field(8).is_err());
    }
}
