use super::network::MageModel;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction. Moment buffers share the model's layout.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(model: &MageModel, lr: f64) -> Self {
        let n = model.param_count();
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update. `frozen[i]` skips layer `i` entirely, moments included.
    pub fn step(&mut self, model: &mut MageModel, grad: &MageModel, frozen: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let mut k = 0;
        for (i, (layer, g)) in model.layers.iter_mut().zip(&grad.layers).enumerate() {
            let n = layer.w.len() + layer.b.len();
            if frozen.get(i).copied().unwrap_or(false) {
                k += n;
                continue;
            }
            for (p, &g) in layer.values_mut().zip(g.values()) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
                k += 1;
            }
        }
    }
}
