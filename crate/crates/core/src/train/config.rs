use crate::error::{Error, Result};
use crate::loss::{LossWeights, OCCLUSION_THRESHOLD};

/// Every tunable of the three training stages. Parsed from `key=value`
/// lines; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub static_iters: u64,
    pub coarse_iters: u64,
    pub refine_iters: u64,
    pub net_lr: f64,
    pub net_lr_final: f64,
    pub position_lr: f64,
    pub position_lr_final: f64,
    pub rotation_lr: f64,
    pub scale_lr: f64,
    pub opacity_lr: f64,
    pub color_lr: f64,
    pub rbf_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub net_eps: f64,
    /// Probability of drawing an adjacent timestep pair.
    pub pair_bias: f64,
    pub control_points: usize,
    pub arap_degree: usize,
    pub densify: bool,
    pub densify_from: u64,
    pub densify_until: u64,
    pub densify_interval: u64,
    /// Mean view-space positional gradient (per pixel) that triggers
    /// clone or split.
    pub densify_grad_threshold: f64,
    /// World-space scale above which a Gaussian is split instead of cloned.
    pub split_scale: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub hull_resolution: usize,
    /// Carve margin in voxels, applied in image space.
    pub hull_erosion: f64,
    /// Tangent-to-normal scale ratio of the initial surfels.
    pub surfel_tangent: f64,
    pub init_opacity: f64,
    pub weights: LossWeights,
    pub occlusion_threshold: f64,
    /// 1-based views excluded from training.
    pub holdout_views: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            static_iters: 5000,
            coarse_iters: 10000,
            refine_iters: 15000,
            net_lr: 3e-4,
            net_lr_final: 3e-6,
            position_lr: 1.6e-4,
            position_lr_final: 1.6e-6,
            rotation_lr: 1e-3,
            scale_lr: 5e-3,
            opacity_lr: 5e-2,
            color_lr: 2.5e-3,
            rbf_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            net_eps: 1e-8,
            pair_bias: 0.7,
            control_points: 512,
            arap_degree: 4,
            densify: true,
            densify_from: 500,
            densify_until: 4000,
            densify_interval: 100,
            densify_grad_threshold: 5e-5,
            split_scale: 0.03,
            prune_opacity: 0.005,
            max_gaussians: 20000,
            hull_resolution: 40,
            hull_erosion: 0.5,
            surfel_tangent: 1.5,
            init_opacity: 0.98,
            weights: LossWeights::default(),
            occlusion_threshold: OCCLUSION_THRESHOLD,
            holdout_views: Vec::new(),
            seed: 0,
        }
    }
}

macro_rules! keys {
    ($($name:literal => $($field:ident).+),* $(,)?) => {
        const KEYS: &[&str] = &[$($name),*];

        impl TrainConfig {
            /// Applies one `key=value` setting.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($name => self.$($field).+ = parse_value(key, value)?,)*
                    "holdout_views" => {
                        self.holdout_views = if value.trim().is_empty() {
                            Vec::new()
                        } else {
                            value
                                .split(',')
                                .map(|v| parse_value(key, v.trim()))
                                .collect::<Result<_>>()?
                        }
                    }
                    _ => return Err(Error::UnknownConfigKey(key.into())),
                }
                Ok(())
            }

            /// The effective configuration, one `key=value` per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{}={}\n", $name, self.$($field).+));)*
                let h: Vec<String> = self.holdout_views.iter().map(|v| v.to_string()).collect();
                s.push_str(&format!("holdout_views={}\n", h.join(",")));
                s
            }
        }
    };
}

keys! {
    "static_iters" => static_iters,
    "coarse_iters" => coarse_iters,
    "refine_iters" => refine_iters,
    "net_lr" => net_lr,
    "net_lr_final" => net_lr_final,
    "position_lr" => position_lr,
    "position_lr_final" => position_lr_final,
    "rotation_lr" => rotation_lr,
    "scale_lr" => scale_lr,
    "opacity_lr" => opacity_lr,
    "color_lr" => color_lr,
    "rbf_lr" => rbf_lr,
    "beta1" => beta1,
    "beta2" => beta2,
    "eps" => eps,
    "net_eps" => net_eps,
    "pair_bias" => pair_bias,
    "control_points" => control_points,
    "arap_degree" => arap_degree,
    "densify" => densify,
    "densify_from" => densify_from,
    "densify_until" => densify_until,
    "densify_interval" => densify_interval,
    "densify_grad_threshold" => densify_grad_threshold,
    "split_scale" => split_scale,
    "prune_opacity" => prune_opacity,
    "max_gaussians" => max_gaussians,
    "hull_resolution" => hull_resolution,
    "hull_erosion" => hull_erosion,
    "surfel_tangent" => surfel_tangent,
    "init_opacity" => init_opacity,
    "weight_rgb" => weights.rgb,
    "weight_mask" => weights.mask,
    "weight_dssim" => weights.dssim,
    "weight_arap" => weights.arap,
    "weight_normal" => weights.normal,
    "weight_flow" => weights.flow,
    "occlusion_threshold" => occlusion_threshold,
    "seed" => seed,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::BadConfigValue {
        key: key.into(),
        value: value.into(),
    })
}

impl TrainConfig {
    /// Names of all accepted keys.
    pub fn keys() -> Vec<&'static str> {
        let mut k = KEYS.to_vec();
        k.push("holdout_views");
        k
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::BadConfigValue {
                key: line.into(),
                value: String::new(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, v: String| Err(Error::BadConfigValue { key: key.into(), value: v });
        if !(0.0..=1.0).contains(&self.pair_bias) {
            return bad("pair_bias", self.pair_bias.to_string());
        }
        for (k, v) in [
            ("net_lr", self.net_lr),
            ("net_lr_final", self.net_lr_final),
            ("position_lr", self.position_lr),
            ("position_lr_final", self.position_lr_final),
            ("rotation_lr", self.rotation_lr),
            ("scale_lr", self.scale_lr),
            ("opacity_lr", self.opacity_lr),
            ("color_lr", self.color_lr),
            ("rbf_lr", self.rbf_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, v.to_string());
            }
        }
        if self.control_points < 3 {
            return bad("control_points", self.control_points.to_string());
        }
        if self.densify_interval == 0 {
            return bad("densify_interval", "0".into());
        }
        if self.hull_resolution < 4 {
            return bad("hull_resolution", self.hull_resolution.to_string());
        }
        if self.holdout_views.contains(&0) {
            return bad("holdout_views", "0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.holdout_views = vec![2, 5];
        c.weights.flow = 0.5;
        c.densify = false;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        match TrainConfig::parse("static_iters=10\nlearning_rate=3\n") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "learning_rate"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(TrainConfig::parse("pair_bias=2"), Err(Error::BadConfigValue { .. })));
    }
}
