use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use super::resample::{bilinear, nearest};
use super::{DomainSpec, Image, Mask, Volume};
use crate::error::Result;
use crate::rng::{keyed_stream, tag, Rng};

const VITREOUS: f32 = 0.06;
const RETINA_BANDS: [f32; 3] = [0.46, 0.30, 0.52];
const RPE: f32 = 0.88;
const CHOROID: f32 = 0.34;

/// Per-volume layer geometry, smooth in both the in-plane and slice axes.
struct Layers {
    top: f64,
    thickness: f64,
    amplitude: f64,
    frequency: f64,
    phase: f64,
    tilt: f64,
    slice_drift: f64,
}

impl Layers {
    fn sample(rng: &mut Rng) -> Self {
        Self {
            top: rng.gen_range(0.20..0.30),
            thickness: rng.gen_range(0.36..0.44),
            amplitude: rng.gen_range(0.01..0.04),
            frequency: rng.gen_range(0.5..1.5),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            tilt: rng.gen_range(-0.05..0.05),
            slice_drift: rng.gen_range(-0.4..0.4),
        }
    }

    /// (top boundary, RPE boundary) as row fractions at column fraction `u`
    /// of slice fraction `v`.
    fn boundaries(&self, u: f64, v: f64) -> (f64, f64) {
        let wave = self.amplitude
            * (std::f64::consts::TAU * self.frequency * u + self.phase + self.slice_drift * v)
                .sin();
        let top = self.top + wave + self.tilt * (u - 0.5);
        (top, top + self.thickness)
    }
}

#[derive(Clone, Copy)]
enum LesionKind {
    /// Dark cyst inside the retina.
    Irf,
    /// Dark flat pocket directly above the RPE.
    Srf,
    /// Medium-bright dome below the RPE.
    Ped,
    /// Bright material above the RPE.
    Shrm,
}

impl LesionKind {
    fn of(name: &str) -> Self {
        match name {
            "IRF" => Self::Irf,
            "SRF" => Self::Srf,
            "PED" => Self::Ped,
            _ => Self::Shrm,
        }
    }

    fn intensity(self) -> f32 {
        match self {
            Self::Irf => 0.04,
            Self::Srf => 0.12,
            Self::Ped => 0.66,
            Self::Shrm => 0.97,
        }
    }

    /// Vertical radius relative to the horizontal one.
    fn aspect(self) -> f64 {
        match self {
            Self::Irf => 0.8,
            Self::Srf => 0.45,
            Self::Ped => 0.6,
            Self::Shrm => 0.5,
        }
    }
}

struct Lesion {
    class: usize,
    kind: LesionKind,
    /// Slice coordinate in µm.
    z: f64,
    /// Column fraction of the centre; the row is derived from the layers.
    u: f64,
    /// Relative depth inside the lesion's anatomical band.
    depth: f64,
    rx: f64,
    ry: f64,
    rz_um: f64,
}

impl Lesion {
    /// Centre row in pixels for slice fraction `v`.
    fn centre_row(&self, layers: &Layers, v: f64, height: f64) -> f64 {
        let (top, rpe) = layers.boundaries(self.u, v);
        let (top, rpe) = (top * height, rpe * height);
        match self.kind {
            LesionKind::Irf => top + (0.25 + 0.5 * self.depth) * (rpe - top),
            LesionKind::Srf => rpe - self.ry - 1.0,
            LesionKind::Ped => rpe + 0.4 * self.ry,
            LesionKind::Shrm => rpe - self.ry - 1.0 - 0.5 * self.ry,
        }
    }
}

fn sample_lesions(spec: &DomainSpec, rng: &mut Rng, native_scale: f64) -> Vec<Lesion> {
    let depth_um = spec.slices_per_volume as f64 * spec.slice_spacing;
    let mut lesions = Vec::new();
    if spec.content.lesion_density <= 0.0 {
        return lesions;
    }
    let count = Poisson::new(spec.content.lesion_density).expect("positive density");
    for (class, name) in spec.class_set.iter().enumerate() {
        let kind = LesionKind::of(name);
        let n: f64 = count.sample(rng);
        for _ in 0..n as usize {
            let rx = spec.content.lesion_scale * rng.gen_range(0.7..1.3) * native_scale;
            lesions.push(Lesion {
                class,
                kind,
                z: rng.gen_range(0.0..depth_um),
                u: rng.gen_range(0.15..0.85),
                depth: rng.gen::<f64>(),
                rx,
                ry: rx * kind.aspect(),
                rz_um: rng.gen_range(150.0..350.0),
            });
        }
    }
    lesions
}

/// Clean content rendering of one slice on a `height × width` grid:
/// intensity plus one label mask per class of the domain.
fn render_slice(
    spec: &DomainSpec,
    layers: &Layers,
    lesions: &[Lesion],
    slice: usize,
    height: usize,
    width: usize,
) -> (Image, Vec<Mask>) {
    let n_slices = spec.slices_per_volume;
    let v = if n_slices > 1 {
        slice as f64 / (n_slices - 1) as f64
    } else {
        0.5
    };
    let z_um = (slice as f64 + 0.5) * spec.slice_spacing;
    let mut img = Image::new(height, width);
    let h = height as f64;
    for x in 0..width {
        let u = (x as f64 + 0.5) / width as f64;
        let (top, rpe) = layers.boundaries(u, v);
        let (top, rpe) = (top * h, rpe * h);
        let rpe_w = (0.05 * h).max(1.5);
        for y in 0..height {
            let yf = y as f64 + 0.5;
            let val = if yf < top {
                VITREOUS
            } else if yf < rpe {
                let t = ((yf - top) / (rpe - top) * 3.0) as usize;
                RETINA_BANDS[t.min(2)]
            } else if yf < rpe + rpe_w {
                RPE
            } else {
                let fade = ((yf - rpe - rpe_w) / (0.25 * h)).min(1.0) as f32;
                CHOROID * (1.0 - 0.6 * fade)
            };
            img.set(y, x, val);
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    for lesion in lesions {
        let dz = (z_um - lesion.z) / lesion.rz_um;
        if dz.abs() >= 1.0 {
            continue;
        }
        let shrink = (1.0 - dz * dz).sqrt();
        let (rx, ry) = (lesion.rx * shrink, lesion.ry * shrink);
        let cx = lesion.u * width as f64;
        let cy = lesion.centre_row(layers, v, h);
        let y_lo = ((cy - ry).floor().max(0.0)) as usize;
        let y_hi = ((cy + ry).ceil().min(h)) as usize;
        let x_lo = ((cx - rx).floor().max(0.0)) as usize;
        let x_hi = ((cx + rx).ceil().min(width as f64)) as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let ex = (x as f64 + 0.5 - cx) / rx;
                let ey = (y as f64 + 0.5 - cy) / ry;
                if ex * ex + ey * ey <= 1.0 {
                    img.set(y, x, lesion.kind.intensity());
                    owner[y * width + x] = Some(lesion.class);
                }
            }
        }
    }

    let mut masks: Vec<Mask> = (0..spec.class_set.len())
        .map(|_| Mask::new(height, width))
        .collect();
    for (i, o) in owner.iter().enumerate() {
        if let Some(c) = *o {
            masks[c].data[i] = 1;
        }
    }
    (img, masks)
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.iter().map(|v| (v / s) as f32).collect()
    };
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, k) in kernel.iter().enumerate() {
                let xx = (x + i as isize - radius).clamp(0, w - 1);
                acc += k * img.data[(y * w + xx) as usize];
            }
            tmp.data[(y * w + x) as usize] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, k) in kernel.iter().enumerate() {
                let yy = (y + i as isize - radius).clamp(0, h - 1);
                acc += k * tmp.data[(yy * w + x) as usize];
            }
            img.data[(y * w + x) as usize] = acc;
        }
    }
}

/// Generates `spec.n_volumes` volumes. Content (layers, lesions, labels) and
/// appearance (blur, gain, offset, noise) draw from separate streams, so specs
/// that differ only in appearance produce identical labels.
pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Result<Vec<Volume>> {
    spec.validate()?;
    let (height, width) = spec.slice_shape;
    let (nh, nw) = spec.native_shape.unwrap_or(spec.slice_shape);
    let native_scale = nw as f64 / width as f64;
    let n_classes = spec.class_set.len();
    let noise = Normal::new(0.0, spec.appearance.noise_std.max(0.0)).expect("finite std");

    let mut volumes = Vec::with_capacity(spec.n_volumes);
    for v in 0..spec.n_volumes {
        let volume_id = format!("{}_{v:04}", spec.domain_id);
        let mut content_rng = keyed_stream(seed, tag::CONTENT, &volume_id);
        let mut appearance_rng = keyed_stream(seed, tag::APPEARANCE, &volume_id);
        let layers = Layers::sample(&mut content_rng);
        let lesions = sample_lesions(spec, &mut content_rng, native_scale);

        let plane = height * width;
        let mut voxels = Vec::with_capacity(spec.slices_per_volume * plane);
        let mut labels = Vec::with_capacity(spec.slices_per_volume * n_classes * plane);
        for s in 0..spec.slices_per_volume {
            let (native, native_masks) = render_slice(spec, &layers, &lesions, s, nh, nw);
            let (mut img, masks) = if (nh, nw) == (height, width) {
                (native, native_masks)
            } else {
                (
                    bilinear(&native, height, width),
                    native_masks
                        .iter()
                        .map(|m| nearest(m, height, width))
                        .collect(),
                )
            };
            let a = &spec.appearance;
            gaussian_blur(&mut img, a.blur_sigma);
            for px in img.data.iter_mut() {
                let mut val = *px as f64 * a.contrast_gain + a.offset;
                if a.noise_std > 0.0 {
                    val += noise.sample(&mut appearance_rng);
                }
                *px = val.clamp(0.0, 1.0) as f32;
            }
            voxels.extend_from_slice(&img.data);
            for m in &masks {
                labels.extend_from_slice(&m.data);
            }
        }
        volumes.push(Volume {
            volume_id,
            domain_id: spec.domain_id.clone(),
            n_slices: spec.slices_per_volume,
            height,
            width,
            voxels,
            labels: Some(labels),
            class_set: spec.class_set.clone(),
            labeled_slice_indices: (0..spec.slices_per_volume).collect(),
            resolution: (
                spec.in_plane_resolution.0,
                spec.in_plane_resolution.1,
                spec.slice_spacing,
            ),
        });
    }
    Ok(volumes)
}
