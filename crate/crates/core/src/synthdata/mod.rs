//! Synthetic multi-domain volumetric datasets.
//!
//! Volumes are stacks of 2D slices showing smooth horizontal layer bands with
//! ellipsoidal lesions, one lesion kind per class. Domains differ either in
//! appearance (gain, offset, noise, blur, native sampling grid) or in content
//! (lesion density and scale, class subset).

mod generate;
mod io;
pub(crate) mod resample;
mod split;

pub use generate::generate_domain;
pub use io::{load_dataset, load_split, save_dataset, MANIFEST_FILE};
pub use resample::resample_slice;
pub use split::{split_dataset, subsample_indices, subsample_unlabeled};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Framework-wide class order. Domains label a subset of these.
pub const GLOBAL_CLASSES: [&str; 4] = ["IRF", "SRF", "PED", "SHRM"];

/// Row-major 2D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type Image = Plane<f32>;
pub type Mask = Plane<u8>;

impl<T: Copy + Default> Plane<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::default(); height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "plane data length");
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    /// Additive Gaussian noise, as a fraction of the dynamic range.
    pub noise_std: f64,
    pub contrast_gain: f64,
    /// Additive intensity offset applied after the gain.
    #[serde(default)]
    pub offset: f64,
    pub blur_sigma: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            noise_std: 0.03,
            contrast_gain: 1.0,
            offset: 0.0,
            blur_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Content {
    /// Expected lesions per volume and class.
    pub lesion_density: f64,
    /// Typical in-plane lesion radius in pixels of the output grid.
    pub lesion_scale: f64,
}

impl Default for Content {
    fn default() -> Self {
        Self {
            lesion_density: 3.0,
            lesion_scale: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    pub n_volumes: usize,
    pub slices_per_volume: usize,
    pub slice_shape: (usize, usize),
    /// Acquisition grid; when set, slices are rendered on it and resampled to
    /// `slice_shape` (bilinear images, nearest-neighbour labels).
    #[serde(default)]
    pub native_shape: Option<(usize, usize)>,
    /// µm per pixel, (height, width), of the output grid.
    pub in_plane_resolution: (f64, f64),
    /// µm between consecutive slices.
    pub slice_spacing: f64,
    pub class_set: Vec<String>,
    #[serde(default)]
    pub appearance: Appearance,
    #[serde(default)]
    pub content: Content,
}

impl DomainSpec {
    /// Desk-scale defaults: 64×64 slices, 8 per volume, 111 µm spacing.
    pub fn desk(domain_id: &str, n_volumes: usize) -> Self {
        Self {
            domain_id: domain_id.to_string(),
            n_volumes,
            slices_per_volume: 8,
            slice_shape: (64, 64),
            native_shape: None,
            in_plane_resolution: (32.0, 80.0),
            slice_spacing: 111.0,
            class_set: vec!["IRF".into(), "SRF".into()],
            appearance: Appearance::default(),
            content: Content::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("domains[{}].{name}", self.domain_id);
        if self.domain_id.is_empty()
            || !self
                .domain_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::validation(
                f("domain_id"),
                "must be a non-empty [A-Za-z0-9_-] string",
            ));
        }
        if self.n_volumes == 0 {
            return Err(Error::validation(f("n_volumes"), "must be positive"));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::validation(f("slices_per_volume"), "must be positive"));
        }
        if self.slice_shape.0 < 16 || self.slice_shape.1 < 16 {
            return Err(Error::validation(f("slice_shape"), "dims must be >= 16"));
        }
        if let Some((h, w)) = self.native_shape {
            if h < 16 || w < 16 {
                return Err(Error::validation(f("native_shape"), "dims must be >= 16"));
            }
        }
        let (rh, rw) = self.in_plane_resolution;
        if !(rh > 0.0 && rw > 0.0 && rh.is_finite() && rw.is_finite()) {
            return Err(Error::validation(
                f("in_plane_resolution"),
                "must be strictly positive",
            ));
        }
        if !(self.slice_spacing > 0.0 && self.slice_spacing.is_finite()) {
            return Err(Error::validation(f("slice_spacing"), "must be > 0"));
        }
        if self.class_set.is_empty() {
            return Err(Error::validation(f("class_set"), "must be non-empty"));
        }
        for (i, c) in self.class_set.iter().enumerate() {
            if class_index(c).is_none() {
                return Err(Error::validation(
                    f("class_set"),
                    format!("unknown class `{c}` (known: {})", GLOBAL_CLASSES.join(", ")),
                ));
            }
            if self.class_set[..i].contains(c) {
                return Err(Error::validation(f("class_set"), format!("duplicate `{c}`")));
            }
        }
        let a = &self.appearance;
        if !(a.noise_std >= 0.0 && a.contrast_gain > 0.0 && a.blur_sigma >= 0.0) {
            return Err(Error::validation(
                f("appearance"),
                "noise_std >= 0, contrast_gain > 0, blur_sigma >= 0 required",
            ));
        }
        let c = &self.content;
        if !(c.lesion_density >= 0.0 && c.lesion_scale > 0.0) {
            return Err(Error::validation(
                f("content"),
                "lesion_density >= 0 and lesion_scale > 0 required",
            ));
        }
        Ok(())
    }
}

pub fn class_index(name: &str) -> Option<usize> {
    GLOBAL_CLASSES.iter().position(|c| *c == name)
}

/// A 3D image: slices × height × width, with optional per-slice labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub volume_id: String,
    pub domain_id: String,
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    /// `[slice, height, width]`, normalized intensity in `[0, 1]`.
    pub voxels: Vec<f32>,
    /// `[slice, class, height, width]` binary, class axis in `class_set` order.
    pub labels: Option<Vec<u8>>,
    pub class_set: Vec<String>,
    pub labeled_slice_indices: Vec<usize>,
    /// (µm/px height, µm/px width, µm slice spacing).
    pub resolution: (f64, f64, f64),
}

impl Volume {
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice_data(&self, s: usize) -> &[f32] {
        let p = self.plane_len();
        &self.voxels[s * p..(s + 1) * p]
    }

    pub fn slice(&self, s: usize) -> Image {
        Image::from_vec(self.height, self.width, self.slice_data(s).to_vec())
    }

    /// Label mask of the `k`-th class of `class_set` on slice `s`.
    pub fn label_data(&self, s: usize, k: usize) -> Option<&[u8]> {
        let labels = self.labels.as_ref()?;
        let p = self.plane_len();
        let off = (s * self.class_set.len() + k) * p;
        Some(&labels[off..off + p])
    }

    pub fn label(&self, s: usize, k: usize) -> Option<Mask> {
        self.label_data(s, k)
            .map(|d| Mask::from_vec(self.height, self.width, d.to_vec()))
    }

    pub fn is_labeled(&self, s: usize) -> bool {
        self.labels.is_some() && self.labeled_slice_indices.contains(&s)
    }

    pub fn pixel_area_um2(&self) -> f64 {
        self.resolution.0 * self.resolution.1
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("volume[{}].{name}", self.volume_id);
        let p = self.plane_len();
        if self.voxels.len() != self.n_slices * p {
            return Err(Error::Shape(format!(
                "volume {}: {} voxels for shape {}x{}x{}",
                self.volume_id,
                self.voxels.len(),
                self.n_slices,
                self.height,
                self.width
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.n_slices * self.class_set.len() * p {
                return Err(Error::Shape(format!(
                    "volume {}: label payload does not match {} slices x {} classes",
                    self.volume_id,
                    self.n_slices,
                    self.class_set.len()
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::validation(f("labels"), "labels must be binary"));
            }
        }
        if self.labeled_slice_indices.iter().any(|&s| s >= self.n_slices) {
            return Err(Error::validation(
                f("labeled_slice_indices"),
                "index out of range",
            ));
        }
        let (a, b, c) = self.resolution;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::validation(f("resolution"), "must be strictly positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Volume>,
    pub val: Vec<Volume>,
    pub test: Vec<Volume>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [(&'static str, &[Volume]); 3] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }
}
