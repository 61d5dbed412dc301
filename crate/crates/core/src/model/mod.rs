//! UNet backbone `F`, its encoder `E`, projection heads `C_pool` / `C_ch` and
//! the SimSiam predictor `Q`.
//!
//! Everything is generic over [`Real`]; training uses `f32` and gradient
//! checks run the same code in `f64`.

mod checkpoint;
mod head;
pub mod layers;
mod unet;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use head::{HeadCache, HeadKind, Predictor, PredictorCache, ProjectionHead};
pub use layers::Param;
pub use unet::{ConvBlock, EncoderTrace, SegTrace, UNet};

use serde::{Deserialize, Serialize};

use crate::batch::SliceBatch;
use crate::error::{Error, Result};
use crate::rng::{stream, tag as tags};
use crate::synthdata::{class_index, GLOBAL_CLASSES};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    /// Output channel names; empty means the first `n_classes` global classes.
    #[serde(default)]
    pub class_names: Vec<String>,
    pub input_shape: (usize, usize),
    pub dropout_p: f64,
    pub head_kind: HeadKind,
    pub mlp_units: usize,
    pub groupnorm_groups: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl ArchitectureSpec {
    /// Depth 4 and 32 base channels.
    pub fn full() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            n_classes: 4,
            class_names: Vec::new(),
            input_shape: (256, 256),
            dropout_p: 0.5,
            head_kind: HeadKind::Ch,
            mlp_units: 128,
            groupnorm_groups: 4,
        }
    }

    /// Depth 2, 8 base channels, 64×64 slices.
    pub fn desk(n_classes: usize) -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            n_classes,
            input_shape: (64, 64),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::validation("arch.depth", "must be >= 2"));
        }
        if self.depth > 8 {
            return Err(Error::validation("arch.depth", "must be <= 8"));
        }
        let unit = 1usize << self.depth;
        let (h, w) = self.input_shape;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::validation(
                "arch.input_shape",
                format!("{h}x{w} is not divisible by 2^depth = {unit}"),
            ));
        }
        if self.n_classes == 0 {
            return Err(Error::validation("arch.n_classes", "must be >= 1"));
        }
        if !self.class_names.is_empty() {
            if self.class_names.len() != self.n_classes {
                return Err(Error::validation(
                    "arch.class_names",
                    format!("{} names for {} classes", self.class_names.len(), self.n_classes),
                ));
            }
            for (i, c) in self.class_names.iter().enumerate() {
                if class_index(c).is_none() || self.class_names[..i].contains(c) {
                    return Err(Error::validation("arch.class_names", format!("unknown or duplicate class `{c}`")));
                }
            }
        } else if self.n_classes > GLOBAL_CLASSES.len() {
            return Err(Error::validation("arch.n_classes", "exceeds the known classes; set class_names"));
        }
        let g = self.groupnorm_groups;
        if g == 0 || self.base_channels == 0 || self.base_channels % g != 0 {
            return Err(Error::validation(
                "arch.base_channels",
                format!("must be a positive multiple of groupnorm_groups = {g}"),
            ));
        }
        if self.mlp_units == 0 || self.mlp_units % g != 0 {
            return Err(Error::validation(
                "arch.mlp_units",
                format!("must be a positive multiple of groupnorm_groups = {g}"),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation("arch.dropout_p", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            GLOBAL_CLASSES[..self.n_classes].iter().map(|s| s.to_string()).collect()
        } else {
            self.class_names.clone()
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    pub fn bottleneck_shape(&self) -> (usize, usize) {
        (self.input_shape.0 >> self.depth, self.input_shape.1 >> self.depth)
    }
}

/// Bottleneck activations `h = E(x)`, `[n, channels, h', w']`.
pub type Features<R> = Tensor<R>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Components {
    pub head: bool,
    pub predictor: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Inference,
    Training,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<R = f32> {
    pub arch: ArchitectureSpec,
    pub backbone: UNet<R>,
    pub head: Option<ProjectionHead<R>>,
    pub predictor: Option<Predictor<R>>,
}

/// Backbone only, as used by the supervised baseline and at inference.
pub fn build_model<R: Real>(arch: &ArchitectureSpec, seed: u64) -> Result<ModelState<R>> {
    build_model_with(arch, seed, Components::default())
}

/// Each part draws from its own stream, so the backbone initialization is the
/// same whichever extra parts are requested.
pub fn build_model_with<R: Real>(arch: &ArchitectureSpec, seed: u64, parts: Components) -> Result<ModelState<R>> {
    arch.validate()?;
    let backbone = UNet::new(arch, &mut stream(seed, tags::BACKBONE_INIT));
    let head = parts.head.then(|| {
        ProjectionHead::new(
            arch.head_kind,
            arch.bottleneck_channels(),
            arch.bottleneck_shape(),
            arch.mlp_units,
            arch.groupnorm_groups,
            &mut stream(seed, tags::HEAD_INIT),
        )
    });
    let predictor = parts
        .predictor
        .then(|| Predictor::new(arch.mlp_units, &mut stream(seed, tags::PREDICTOR_INIT)));
    Ok(ModelState {
        arch: arch.clone(),
        backbone,
        head,
        predictor,
    })
}

impl<R: Real> ModelState<R> {
    pub fn components(&self) -> Components {
        Components {
            head: self.head.is_some(),
            predictor: self.predictor.is_some(),
        }
    }

    pub fn check_batch(&self, batch: &SliceBatch) -> Result<()> {
        if (batch.height, batch.width) != self.arch.input_shape {
            return Err(Error::Shape(format!(
                "batch slices {}x{} vs architecture input {}x{}",
                batch.height, batch.width, self.arch.input_shape.0, self.arch.input_shape.1
            )));
        }
        if batch.images.len() != batch.len() * batch.height * batch.width {
            return Err(Error::Shape("batch image payload does not match its length".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<()> {
        if x.c != 1 || (x.h, x.w) != self.arch.input_shape {
            return Err(Error::Shape(format!(
                "input [{}, {}, {}, {}] vs architecture [n, 1, {}, {}]",
                x.n, x.c, x.h, x.w, self.arch.input_shape.0, self.arch.input_shape.1
            )));
        }
        Ok(())
    }

    /// Per-class probabilities `[n, C, h, w]`, dropout disabled.
    pub fn forward_segment(&self, batch: &SliceBatch) -> Result<Tensor<R>> {
        self.check_batch(batch)?;
        Ok(self.segment_tensor(&batch.to_tensor())?)
    }

    pub fn segment_tensor(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.check_input(x)?;
        Ok(self.backbone.forward_trace(x, None).probs)
    }

    pub fn encode(&self, batch: &SliceBatch) -> Result<Features<R>> {
        self.check_batch(batch)?;
        self.encode_tensor(&batch.to_tensor())
    }

    pub fn encode_tensor(&self, x: &Tensor<R>) -> Result<Features<R>> {
        self.check_input(x)?;
        Ok(self.backbone.encode_trace(x).features().clone())
    }

    pub fn project(&self, h: &Features<R>) -> Result<Tensor<R>> {
        let head = self.head.as_ref().ok_or_else(|| Error::Missing("projection head".into()))?;
        let expect = (self.arch.bottleneck_channels(), self.arch.bottleneck_shape());
        if (h.c, (h.h, h.w)) != expect {
            return Err(Error::Shape(format!(
                "features [{}, {}, {}] vs bottleneck [{}, {}, {}]",
                h.c, h.h, h.w, expect.0, expect.1 .0, expect.1 .1
            )));
        }
        Ok(head.forward(h).0)
    }

    pub fn predict(&self, z: &Tensor<R>) -> Result<Tensor<R>> {
        let q = self.predictor.as_ref().ok_or_else(|| Error::Missing("predictor".into()))?;
        if z.sample_len() != self.arch.mlp_units {
            return Err(Error::Shape(format!("projection width {} vs {}", z.sample_len(), self.arch.mlp_units)));
        }
        Ok(q.forward(z).0)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<R>)) {
        self.backbone.visit(f);
        if let Some(h) = &self.head {
            h.visit(f);
        }
        if let Some(q) = &self.predictor {
            q.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<R>)) {
        self.backbone.visit_mut(f);
        if let Some(h) = &mut self.head {
            h.visit_mut(f);
        }
        if let Some(q) = &mut self.predictor {
            q.visit_mut(f);
        }
    }

    pub fn params(&self) -> Vec<&Param<R>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    pub fn count_params(&self, mode: ParamMode) -> usize {
        let mut n = 0;
        match mode {
            ParamMode::Inference => self.backbone.visit(&mut |p| n += p.len()),
            ParamMode::Training => self.visit(&mut |p| n += p.len()),
        }
        n
    }

    /// Drops the head and predictor, keeping what inference needs.
    pub fn into_inference(self) -> Self {
        Self {
            head: None,
            predictor: None,
            ..self
        }
    }

    pub fn cast<S: Real>(&self) -> ModelState<S> {
        let mut out: ModelState<S> =
            build_model_with(&self.arch, 0, self.components()).expect("architecture validated on construction");
        let src = self.params();
        let mut i = 0;
        out.visit_mut(&mut |p| {
            *p = src[i].cast();
            i += 1;
        });
        out
    }
}
