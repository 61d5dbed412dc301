use super::config::OptimizerConfig;
use crate::model::ModelState;

/// Bias-corrected Adam over every parameter of a model, in visit order.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: &OptimizerConfig, model: &ModelState) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |p| m.push(vec![0.0f32; p.len()]));
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, model: &mut ModelState) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p| {
            let (m, v) = (&mut ms[k], &mut vs[k]);
            assert_eq!(m.len(), p.len(), "optimizer state does not match the model");
            for ((w, &g), (mi, vi)) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
            k += 1;
        });
    }
}
