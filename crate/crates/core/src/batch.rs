use crate::synthdata::{Image, Volume};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SliceRef {
    pub domain_id: String,
    pub volume_id: String,
    pub slice_index: usize,
}

impl SliceRef {
    pub fn of(volume: &Volume, slice_index: usize) -> Self {
        Self {
            domain_id: volume.domain_id.clone(),
            volume_id: volume.volume_id.clone(),
            slice_index,
        }
    }
}

/// A stack of equally-sized slices with optional labels on the experiment's
/// class axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBatch {
    pub height: usize,
    pub width: usize,
    /// `[n, height, width]`.
    pub images: Vec<f32>,
    /// `[n, n_classes, height, width]` binary.
    pub labels: Option<Vec<u8>>,
    /// `[n, n_classes]`: whether sample `i` carries ground truth for class `c`.
    pub class_mask: Vec<bool>,
    pub n_classes: usize,
    pub provenance: Vec<SliceRef>,
}

impl SliceBatch {
    pub fn empty(height: usize, width: usize, n_classes: usize) -> Self {
        Self {
            height,
            width,
            images: Vec::new(),
            labels: None,
            class_mask: Vec::new(),
            n_classes,
            provenance: Vec::new(),
        }
    }

    /// Unlabeled batch from images.
    pub fn from_images(images: &[Image], provenance: Vec<SliceRef>) -> Self {
        assert_eq!(images.len(), provenance.len());
        let (height, width) = images.first().map(|i| i.shape()).unwrap_or((0, 0));
        let mut data = Vec::with_capacity(images.len() * height * width);
        for img in images {
            assert_eq!(img.shape(), (height, width), "batch images must share a shape");
            data.extend_from_slice(&img.data);
        }
        Self {
            height,
            width,
            images: data,
            labels: None,
            class_mask: Vec::new(),
            n_classes: 0,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.images[i * p..(i + 1) * p]
    }

    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        Tensor::from_vec(
            self.len(),
            1,
            self.height,
            self.width,
            self.images.iter().map(|&v| R::of(v as f64)).collect(),
        )
    }

    pub fn labels_tensor<R: Real>(&self) -> Option<Tensor<R>> {
        self.labels.as_ref().map(|l| {
            Tensor::from_vec(
                self.len(),
                self.n_classes,
                self.height,
                self.width,
                l.iter().map(|&v| if v > 0 { R::one() } else { R::zero() }).collect(),
            )
        })
    }
}
