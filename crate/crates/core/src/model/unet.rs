use super::layers::{
    apply_mask, dropout_mask, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid, Conv2d, ConvTranspose2,
    GroupNorm, GroupNormCache, Param,
};
use super::ArchitectureSpec;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// conv3×3 → GroupNorm → ReLU, twice.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<R> {
    pub conv1: Conv2d<R>,
    pub gn1: GroupNorm<R>,
    pub conv2: Conv2d<R>,
    pub gn2: GroupNorm<R>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<R> {
    x: Tensor<R>,
    gn1: GroupNormCache<R>,
    r1: Tensor<R>,
    gn2: GroupNormCache<R>,
    pub out: Tensor<R>,
}

impl<R: Real> ConvBlock<R> {
    fn new(name: &str, cin: usize, cout: usize, groups: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 2.0, rng),
            gn1: GroupNorm::new(&format!("{name}.gn1"), cout, groups),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 2.0, rng),
            gn2: GroupNorm::new(&format!("{name}.gn2"), cout, groups),
        }
    }

    fn forward(&self, x: &Tensor<R>) -> BlockCache<R> {
        let (a1, gn1) = self.gn1.forward(&self.conv1.forward(x));
        let r1 = relu(&a1);
        let (a2, gn2) = self.gn2.forward(&self.conv2.forward(&r1));
        BlockCache {
            x: x.clone(),
            gn1,
            out: relu(&a2),
            r1,
            gn2,
        }
    }

    fn backward(&mut self, cache: &BlockCache<R>, dout: &Tensor<R>, need_dx: bool) -> Option<Tensor<R>> {
        let d = relu_backward(&cache.out, dout);
        let d = self.gn2.backward(&cache.gn2, &d);
        let d = self.conv2.backward(&cache.r1, &d, true).expect("dx requested");
        let d = relu_backward(&cache.r1, &d);
        let d = self.gn1.backward(&cache.gn1, &d);
        self.conv1.backward(&cache.x, &d, need_dx)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<R>)) {
        for p in [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.gn1.gamma,
            &self.gn1.beta,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.gn2.gamma,
            &self.gn2.beta,
        ] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<R>)) {
        for p in [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.gn1.gamma,
            &mut self.gn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.gn2.gamma,
            &mut self.gn2.beta,
        ] {
            f(p);
        }
    }
}

/// Segmentation backbone `F`; its contracting half up to the bottleneck is
/// the encoder `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<R> {
    pub enc: Vec<ConvBlock<R>>,
    pub bottleneck: ConvBlock<R>,
    /// Indexed by level; `up[l]` maps level `l + 1` to level `l`.
    pub up: Vec<ConvTranspose2<R>>,
    pub dec: Vec<ConvBlock<R>>,
    pub seg: Conv2d<R>,
    pub dropout_p: f64,
}

#[derive(Clone, Debug)]
pub struct EncoderTrace<R> {
    blocks: Vec<BlockCache<R>>,
    pools: Vec<Vec<u32>>,
    bottleneck: BlockCache<R>,
}

impl<R: Real> EncoderTrace<R> {
    /// Bottleneck activations `h`.
    pub fn features(&self) -> &Tensor<R> {
        &self.bottleneck.out
    }
}

#[derive(Clone, Debug)]
struct LevelTrace<R> {
    up_input: Tensor<R>,
    block: BlockCache<R>,
    mask: Option<Vec<R>>,
}

#[derive(Clone, Debug)]
pub struct SegTrace<R> {
    pub encoder: EncoderTrace<R>,
    bottleneck_mask: Option<Vec<R>>,
    /// Indexed by level.
    levels: Vec<LevelTrace<R>>,
    seg_input: Tensor<R>,
    pub probs: Tensor<R>,
}

impl<R: Real> UNet<R> {
    pub fn new(arch: &ArchitectureSpec, rng: &mut Rng) -> Self {
        let g = arch.groupnorm_groups;
        let ch = |l: usize| arch.base_channels << l;
        let enc = (0..arch.depth)
            .map(|l| ConvBlock::new(&format!("enc{l}"), if l == 0 { 1 } else { ch(l - 1) }, ch(l), g, rng))
            .collect();
        let bottleneck = ConvBlock::new("bottleneck", ch(arch.depth - 1), ch(arch.depth), g, rng);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..arch.depth {
            up.push(ConvTranspose2::new(&format!("up{l}"), ch(l + 1), ch(l), rng));
            dec.push(ConvBlock::new(&format!("dec{l}"), 2 * ch(l), ch(l), g, rng));
        }
        let seg = Conv2d::new("seg", ch(0), arch.n_classes, 1, 1.0, rng);
        Self {
            enc,
            bottleneck,
            up,
            dec,
            seg,
            dropout_p: arch.dropout_p,
        }
    }

    pub fn depth(&self) -> usize {
        self.enc.len()
    }

    pub fn encode_trace(&self, x: &Tensor<R>) -> EncoderTrace<R> {
        let mut blocks = Vec::with_capacity(self.depth());
        let mut pools = Vec::with_capacity(self.depth());
        let mut cur = x.clone();
        for block in &self.enc {
            let cache = block.forward(&cur);
            let (pooled, arg) = maxpool2(&cache.out);
            blocks.push(cache);
            pools.push(arg);
            cur = pooled;
        }
        let bottleneck = self.bottleneck.forward(&cur);
        EncoderTrace {
            blocks,
            pools,
            bottleneck,
        }
    }

    /// Full forward pass. Dropout is active iff `dropout` is given.
    pub fn forward_trace(&self, x: &Tensor<R>, mut dropout: Option<&mut Rng>) -> SegTrace<R> {
        let encoder = self.encode_trace(x);
        let depth = self.depth();
        let h = encoder.features();
        let bottleneck_mask = dropout_mask(h.data.len(), self.dropout_p, dropout.as_deref_mut());
        let mut cur = apply_mask(h, bottleneck_mask.as_ref());
        let mut levels: Vec<Option<LevelTrace<R>>> = (0..depth).map(|_| None).collect();
        for l in (0..depth).rev() {
            let upsampled = self.up[l].forward(&cur);
            let cat = Tensor::concat_channels(&upsampled, &encoder.blocks[l].out);
            let block = self.dec[l].forward(&cat);
            let mask = if l + 2 >= depth {
                dropout_mask(block.out.data.len(), self.dropout_p, dropout.as_deref_mut())
            } else {
                None
            };
            let out = apply_mask(&block.out, mask.as_ref());
            levels[l] = Some(LevelTrace {
                up_input: cur,
                block,
                mask,
            });
            cur = out;
        }
        let probs = self.seg.forward(&cur).map(sigmoid);
        SegTrace {
            encoder,
            bottleneck_mask,
            levels: levels.into_iter().map(|l| l.expect("every level visited")).collect(),
            seg_input: cur,
            probs,
        }
    }

    /// Backpropagates from bottleneck gradient `dh` plus optional skip
    /// gradients, indexed by level.
    fn backward_encoder(&mut self, trace: &EncoderTrace<R>, dh: &Tensor<R>, mut dskips: Vec<Option<Tensor<R>>>) {
        let mut d = self.bottleneck.backward(&trace.bottleneck, dh, true).expect("dx requested");
        for l in (0..self.depth()).rev() {
            let mut dblock = maxpool2_backward(&trace.pools[l], &d);
            if let Some(ds) = dskips[l].take() {
                for (a, b) in dblock.data.iter_mut().zip(&ds.data) {
                    *a += *b;
                }
            }
            match self.enc[l].backward(&trace.blocks[l], &dblock, l > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Accumulates gradients of a loss on the bottleneck features only.
    pub fn backward_features(&mut self, trace: &EncoderTrace<R>, dh: &Tensor<R>) {
        let none = (0..self.depth()).map(|_| None).collect();
        self.backward_encoder(trace, dh, none);
    }

    /// Accumulates gradients given `dL/dp` for the sigmoid outputs.
    pub fn backward_segment(&mut self, trace: &SegTrace<R>, dprobs: &Tensor<R>) {
        let mut dlogits = dprobs.clone();
        for (d, &p) in dlogits.data.iter_mut().zip(&trace.probs.data) {
            *d *= p * (R::one() - p);
        }
        let mut d = self.seg.backward(&trace.seg_input, &dlogits, true).expect("dx requested");
        let depth = self.depth();
        let mut dskips: Vec<Option<Tensor<R>>> = (0..depth).map(|_| None).collect();
        for l in 0..depth {
            let lt = &trace.levels[l];
            let dout = apply_mask(&d, lt.mask.as_ref());
            let dcat = self.dec[l].backward(&lt.block, &dout, true).expect("dx requested");
            let (dup, dskip) = dcat.split_channels(self.up[l].cout);
            dskips[l] = Some(dskip);
            d = self.up[l].backward(&lt.up_input, &dup);
        }
        let dh = apply_mask(&d, trace.bottleneck_mask.as_ref());
        self.backward_encoder(&trace.encoder, &dh, dskips);
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<R>)) {
        for b in &self.enc {
            b.visit(f);
        }
        self.bottleneck.visit(f);
        for (u, b) in self.up.iter().zip(&self.dec) {
            f(&u.weight);
            f(&u.bias);
            b.visit(f);
        }
        f(&self.seg.weight);
        f(&self.seg.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<R>)) {
        for b in &mut self.enc {
            b.visit_mut(f);
        }
        self.bottleneck.visit_mut(f);
        for (u, b) in self.up.iter_mut().zip(&mut self.dec) {
            f(&mut u.weight);
            f(&mut u.bias);
            b.visit_mut(f);
        }
        f(&mut self.seg.weight);
        f(&mut self.seg.bias);
    }

    /// Encoder parameters (contracting path and bottleneck) only.
    pub fn visit_encoder<'a>(&'a self, f: &mut dyn FnMut(&'a Param<R>)) {
        for b in &self.enc {
            b.visit(f);
        }
        self.bottleneck.visit(f);
    }
}
