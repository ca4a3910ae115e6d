/// Adam moments for one flat parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamGroup {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamGroup {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    /// Rebuilds the moments after a reshuffle of the owning elements:
    /// `origin[i]` names the old element kept at new position `i`, `None` for
    /// a fresh element. `width` values per element.
    pub fn remap(&mut self, origin: &[Option<usize>], width: usize) {
        let mut m = Vec::with_capacity(origin.len() * width);
        let mut v = Vec::with_capacity(origin.len() * width);
        for o in origin {
            match o {
                Some(j) => {
                    m.extend_from_slice(&self.m[j * width..(j + 1) * width]);
                    v.extend_from_slice(&self.v[j * width..(j + 1) * width]);
                }
                None => {
                    m.extend(std::iter::repeat(0.0).take(width));
                    v.extend(std::iter::repeat(0.0).take(width));
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut a = AdamGroup::zeros(3);
        let mut p = [0.5, -1.0, 2.0];
        a.update(&mut p, &[0.0; 3], 1e-2, 0.9, 0.999, 1e-15);
        assert_eq!(p, [0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = AdamGroup::zeros(2);
        let mut p = [0.0, 0.0];
        a.update(&mut p, &[3.0, -0.2], 0.1, 0.9, 0.999, 1e-15);
        assert!((p[0] + 0.1).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12);
    }
}
