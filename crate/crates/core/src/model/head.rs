use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, Conv2d, Dense, GroupNorm, GroupNormCache, Param};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Aggregation `ρ_agg` in front of the projection MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Global average over height, width and position.
    Pool,
    /// Learned 1×1 convolution collapsing channels, keeping the spatial layout.
    Ch,
}

impl HeadKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Pool => "pool",
            Self::Ch => "ch",
        }
    }
}

/// Contrastive projection `C = ρ_MLP ∘ ρ_agg`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<R> {
    pub kind: HeadKind,
    pub agg: Option<Conv2d<R>>,
    pub fc1: Dense<R>,
    pub gn: GroupNorm<R>,
    pub fc2: Dense<R>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<R> {
    h: Tensor<R>,
    v: Tensor<R>,
    gn: GroupNormCache<R>,
    r: Tensor<R>,
}

impl<R: Real> ProjectionHead<R> {
    /// `channels` and `spatial` describe the bottleneck `h`.
    pub fn new(kind: HeadKind, channels: usize, spatial: (usize, usize), units: usize, groups: usize, rng: &mut Rng) -> Self {
        let (agg, fan_in) = match kind {
            HeadKind::Pool => (None, channels),
            HeadKind::Ch => (Some(Conv2d::new("head.agg", channels, 1, 1, 1.0, rng)), spatial.0 * spatial.1),
        };
        Self {
            kind,
            agg,
            fc1: Dense::new("head.fc1", fan_in, units, 2.0, rng),
            gn: GroupNorm::new("head.gn", units, groups),
            fc2: Dense::new("head.fc2", units, units, 1.0, rng),
        }
    }

    pub fn forward(&self, h: &Tensor<R>) -> (Tensor<R>, HeadCache<R>) {
        let v = match &self.agg {
            None => {
                let plane = R::of(h.plane() as f64);
                let data = h
                    .data
                    .chunks(h.plane())
                    .map(|c| c.iter().copied().sum::<R>() / plane)
                    .collect();
                Tensor::matrix(h.n, h.c, data)
            }
            Some(agg) => {
                let a = agg.forward(h);
                Tensor::matrix(a.n, a.plane(), a.data)
            }
        };
        let u = self.fc1.forward(&v);
        let (g, gn) = self.gn.forward(&u);
        let r = relu(&g);
        let z = self.fc2.forward(&r);
        (
            z,
            HeadCache {
                h: h.clone(),
                v,
                gn,
                r,
            },
        )
    }

    /// Accumulates head gradients and returns `dL/dh`.
    pub fn backward(&mut self, cache: &HeadCache<R>, dz: &Tensor<R>) -> Tensor<R> {
        let dr = self.fc2.backward(&cache.r, dz);
        let dg = relu_backward(&cache.r, &dr);
        let du = self.gn.backward(&cache.gn, &dg);
        let dv = self.fc1.backward(&cache.v, &du);
        let h = &cache.h;
        match &mut self.agg {
            None => {
                let plane = h.plane();
                let scale = R::one() / R::of(plane as f64);
                let mut dh = Tensor::zeros(h.n, h.c, h.h, h.w);
                for (chunk, g) in dh.data.chunks_mut(plane).zip(&dv.data) {
                    chunk.iter_mut().for_each(|x| *x = *g * scale);
                }
                dh
            }
            Some(agg) => {
                let da = Tensor::from_vec(h.n, 1, h.h, h.w, dv.data);
                agg.backward(h, &da, true).expect("dx requested")
            }
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<R>)) {
        if let Some(a) = &self.agg {
            f(&a.weight);
            f(&a.bias);
        }
        for p in [
            &self.fc1.weight,
            &self.fc1.bias,
            &self.gn.gamma,
            &self.gn.beta,
            &self.fc2.weight,
            &self.fc2.bias,
        ] {
            f(p);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<R>)) {
        if let Some(a) = &mut self.agg {
            f(&mut a.weight);
            f(&mut a.bias);
        }
        for p in [
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.gn.gamma,
            &mut self.gn.beta,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ] {
            f(p);
        }
    }

    /// Parameter count of the aggregation layer alone.
    pub fn aggregation_params(&self) -> usize {
        self.agg.as_ref().map_or(0, |a| a.weight.len() + a.bias.len())
    }
}

/// SimSiam predictor `Q`: dense → ReLU → dense at constant width.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor<R> {
    pub fc1: Dense<R>,
    pub fc2: Dense<R>,
}

#[derive(Clone, Debug)]
pub struct PredictorCache<R> {
    z: Tensor<R>,
    r: Tensor<R>,
}

impl<R: Real> Predictor<R> {
    pub fn new(units: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Dense::new("pred.fc1", units, units, 2.0, rng),
            fc2: Dense::new("pred.fc2", units, units, 1.0, rng),
        }
    }

    pub fn forward(&self, z: &Tensor<R>) -> (Tensor<R>, PredictorCache<R>) {
        let r = relu(&self.fc1.forward(z));
        let q = self.fc2.forward(&r);
        (q, PredictorCache { z: z.clone(), r })
    }

    pub fn backward(&mut self, cache: &PredictorCache<R>, dq: &Tensor<R>) -> Tensor<R> {
        let dr = self.fc2.backward(&cache.r, dq);
        let du = relu_backward(&cache.r, &dr);
        self.fc1.backward(&cache.z, &du)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<R>)) {
        for p in [&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias] {
            f(p);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<R>)) {
        for p in [&mut self.fc1.weight, &mut self.fc1.bias, &mut self.fc2.weight, &mut self.fc2.bias] {
            f(p);
        }
    }
}
