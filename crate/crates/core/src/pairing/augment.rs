use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthdata::resample::bilinear;
use crate::synthdata::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub p_hflip: f64,
    pub max_translate_frac: f64,
    pub max_zoom_in_frac: f64,
    pub max_brightness_frac: f64,
    pub max_jitter_frac: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            max_translate_frac: 0.25,
            max_zoom_in_frac: 0.5,
            max_brightness_frac: 0.6,
            max_jitter_frac: 0.2,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            p_hflip: 0.0,
            max_translate_frac: 0.0,
            max_zoom_in_frac: 0.0,
            max_brightness_frac: 0.0,
            max_jitter_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("p_hflip", self.p_hflip),
            ("max_translate_frac", self.max_translate_frac),
            ("max_zoom_in_frac", self.max_zoom_in_frac),
            ("max_brightness_frac", self.max_brightness_frac),
            ("max_jitter_frac", self.max_jitter_frac),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("augment.{name}"), "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// One realisation of the random augmentation, independent of image content.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Vertical and horizontal shift in pixels.
    pub shift: (i64, i64),
    /// Crop window `(top, left, height, width)` before resizing back.
    pub crop: (usize, usize, usize, usize),
    pub brightness: f64,
    pub channel_gain: [f64; 3],
}

fn symmetric(rng: &mut Rng, half_width: f64) -> f64 {
    rng.gen_range(-half_width..=half_width)
}

impl AugmentDraw {
    /// Always consumes the same number of draws regardless of `params`.
    pub fn sample(params: &AugmentParams, height: usize, width: usize, rng: &mut Rng) -> Self {
        let flip = rng.gen::<f64>() < params.p_hflip;

        let max_dy = (params.max_translate_frac * height as f64).floor() as i64;
        let max_dx = (params.max_translate_frac * width as f64).floor() as i64;
        let dy = rng.gen_range(-max_dy..=max_dy);
        let dx = rng.gen_range(-max_dx..=max_dx);

        let scale = rng.gen_range((1.0 - params.max_zoom_in_frac)..=1.0);
        let ch = ((scale * height as f64).round() as usize).clamp(1, height);
        let cw = ((scale * width as f64).round() as usize).clamp(1, width);
        let top = rng.gen_range(0..=height - ch);
        let left = rng.gen_range(0..=width - cw);

        let brightness = symmetric(rng, params.max_brightness_frac);
        let mut channel_gain = [1.0; 3];
        for g in channel_gain.iter_mut() {
            *g = 1.0 + symmetric(rng, params.max_jitter_frac);
        }
        Self {
            flip,
            shift: (dy, dx),
            crop: (top, left, ch, cw),
            brightness,
            channel_gain,
        }
    }

    /// Flip, translate (zero fill), zoom in (crop and bilinear resize), then
    /// colour distortion on an RGB replica averaged back to grey.
    pub fn apply(&self, image: &Image) -> Image {
        let (h, w) = image.shape();
        let mut out = image.clone();
        if self.flip {
            for row in out.data.chunks_mut(w) {
                row.reverse();
            }
        }

        let (dy, dx) = self.shift;
        if (dy, dx) != (0, 0) {
            let src = out.clone();
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        src.get(sy as usize, sx as usize)
                    } else {
                        0.0
                    };
                    out.set(y as usize, x as usize, v);
                }
            }
        }

        let (top, left, ch, cw) = self.crop;
        if (ch, cw) != (h, w) {
            let mut crop = Image::new(ch, cw);
            for y in 0..ch {
                for x in 0..cw {
                    crop.set(y, x, out.get(top + y, left + x));
                }
            }
            out = bilinear(&crop, h, w);
        }

        let b = self.brightness;
        let g = self.channel_gain;
        if b != 0.0 || g != [1.0; 3] {
            for v in out.data.iter_mut() {
                let base = (*v as f64 + b).clamp(0.0, 1.0);
                let grey: f64 = g.iter().map(|gk| (base * gk).clamp(0.0, 1.0)).sum::<f64>() / 3.0;
                *v = grey as f32;
            }
        }
        for v in out.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

pub fn augment(image: &Image, params: &AugmentParams, rng: &mut Rng) -> Image {
    augment_recorded(image, params, rng).0
}

/// Like [`augment`], also returning the draw that was applied.
pub fn augment_recorded(image: &Image, params: &AugmentParams, rng: &mut Rng) -> (Image, AugmentDraw) {
    let draw = AugmentDraw::sample(params, image.height, image.width, rng);
    (draw.apply(image), draw)
}
