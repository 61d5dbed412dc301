//! Positive-pair generation for the contrastive branch.
//!
//! * `P_a`: two independent augmentations of one slice.
//! * `P_s`: the slice itself and a nearby slice of the same volume, the
//!   offset drawn from a rounded Gaussian with standard deviation given in µm.
//! * `P_s+a`: `P_s` followed by independent augmentation of both views.

mod augment;

pub use augment::{augment, augment_recorded, AugmentDraw, AugmentParams};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{SliceBatch, SliceRef};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthdata::{Image, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairingStrategy {
    #[serde(rename = "a")]
    Augment,
    #[serde(rename = "s")]
    Slice,
    #[serde(rename = "s+a")]
    SliceAugment,
}

impl PairingStrategy {
    pub fn label(self) -> &'static str {
        match self {
            Self::Augment => "a",
            Self::Slice => "s",
            Self::SliceAugment => "s+a",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicePairingParams {
    pub sigma_um: f64,
    pub slice_spacing_um: f64,
}

impl Default for SlicePairingParams {
    fn default() -> Self {
        Self {
            sigma_um: 250.0,
            slice_spacing_um: 111.0,
        }
    }
}

impl SlicePairingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_um > 0.0 && self.sigma_um.is_finite()) {
            return Err(Error::validation("slice_pairing.sigma_um", "must be > 0"));
        }
        if !(self.slice_spacing_um > 0.0 && self.slice_spacing_um.is_finite()) {
            return Err(Error::validation("slice_pairing.slice_spacing_um", "must be > 0"));
        }
        Ok(())
    }

    /// Standard deviation of the offset in slice units.
    pub fn sigma_slices(&self) -> f64 {
        self.sigma_um / self.slice_spacing_um
    }
}

/// Rounded Gaussian slice offset without any bounds applied.
pub fn sample_slice_offset(params: &SlicePairingParams, rng: &mut Rng) -> i64 {
    let normal = Normal::new(0.0, params.sigma_slices()).expect("finite sigma");
    normal.sample(rng).round() as i64
}

/// Partner slice index for anchor `b`, clamped into the volume.
pub fn sample_slice_index(b: usize, params: &SlicePairingParams, n_slices: usize, rng: &mut Rng) -> usize {
    debug_assert!(b < n_slices);
    let idx = b as i64 + sample_slice_offset(params, rng);
    idx.clamp(0, n_slices as i64 - 1) as usize
}

/// One positive pair and the slice indices each view came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub view_a: Image,
    pub view_b: Image,
    pub source_a: SliceRef,
    pub source_b: SliceRef,
}

pub fn pair_augmentation(volume: &Volume, b: usize, params: &AugmentParams, rng: &mut Rng) -> Pair {
    let x = volume.slice(b);
    let da = AugmentDraw::sample(params, x.height, x.width, rng);
    let db = AugmentDraw::sample(params, x.height, x.width, rng);
    Pair {
        view_a: da.apply(&x),
        view_b: db.apply(&x),
        source_a: SliceRef::of(volume, b),
        source_b: SliceRef::of(volume, b),
    }
}

pub fn pair_slice(volume: &Volume, b: usize, params: &SlicePairingParams, rng: &mut Rng) -> Pair {
    let partner = sample_slice_index(b, params, volume.n_slices, rng);
    Pair {
        view_a: volume.slice(b),
        view_b: volume.slice(partner),
        source_a: SliceRef::of(volume, b),
        source_b: SliceRef::of(volume, partner),
    }
}

/// Slice pairing followed by independent augmentation of each view. The
/// augmentation draws come first so that a vanishing `sigma` reproduces
/// [`pair_augmentation`] for the same stream.
pub fn pair_slice_aug(
    volume: &Volume,
    b: usize,
    slice_params: &SlicePairingParams,
    aug_params: &AugmentParams,
    rng: &mut Rng,
) -> Pair {
    let (h, w) = (volume.height, volume.width);
    let da = AugmentDraw::sample(aug_params, h, w, rng);
    let db = AugmentDraw::sample(aug_params, h, w, rng);
    let p = pair_slice(volume, b, slice_params, rng);
    Pair {
        view_a: da.apply(&p.view_a),
        view_b: db.apply(&p.view_b),
        ..p
    }
}

#[derive(Clone, Debug)]
pub struct PairGenerator {
    pub strategy: PairingStrategy,
    pub augment: AugmentParams,
    pub slice: SlicePairingParams,
}

impl PairGenerator {
    pub fn pair(&self, volume: &Volume, b: usize, rng: &mut Rng) -> Pair {
        // The slice spacing of the volume at hand takes precedence.
        let slice = SlicePairingParams {
            slice_spacing_um: volume.resolution.2,
            ..self.slice
        };
        match self.strategy {
            PairingStrategy::Augment => pair_augmentation(volume, b, &self.augment, rng),
            PairingStrategy::Slice => pair_slice(volume, b, &slice, rng),
            PairingStrategy::SliceAugment => pair_slice_aug(volume, b, &slice, &self.augment, rng),
        }
    }
}

/// Two aligned views; element `k` of both derives from the same anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub view_a: SliceBatch,
    pub view_b: SliceBatch,
    pub domain_id: Vec<String>,
}

impl PairBatch {
    pub fn from_pairs(pairs: Vec<Pair>) -> Self {
        let domain_id = pairs.iter().map(|p| p.source_a.domain_id.clone()).collect();
        let (mut ia, mut ib, mut pa, mut pb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for p in pairs {
            ia.push(p.view_a);
            ib.push(p.view_b);
            pa.push(p.source_a);
            pb.push(p.source_b);
        }
        Self {
            view_a: SliceBatch::from_images(&ia, pa),
            view_b: SliceBatch::from_images(&ib, pb),
            domain_id,
        }
    }

    pub fn len(&self) -> usize {
        self.domain_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain_id.is_empty()
    }
}
