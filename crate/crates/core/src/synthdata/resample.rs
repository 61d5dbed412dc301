use super::{Image, Mask};
use crate::error::{Error, Result};

/// Source coordinate of output pixel `i` under pixel-centre alignment.
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

pub(crate) fn bilinear(image: &Image, height: usize, width: usize) -> Image {
    if image.shape() == (height, width) {
        return image.clone();
    }
    let mut out = Image::new(height, width);
    let (hi, wi) = (image.height, image.width);
    for y in 0..height {
        let sy = source_coord(y, hi, height).clamp(0.0, (hi - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(hi - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..width {
            let sx = source_coord(x, wi, width).clamp(0.0, (wi - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(wi - 1);
            let fx = (sx - x0 as f64) as f32;
            let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
            let top = lerp(image.get(y0, x0), image.get(y0, x1), fx);
            let bottom = lerp(image.get(y1, x0), image.get(y1, x1), fx);
            out.set(y, x, lerp(top, bottom, fy));
        }
    }
    out
}

pub(crate) fn nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    let mut out = Mask::new(height, width);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * mask.height as f64 / height as f64).floor() as usize;
        let sy = sy.min(mask.height - 1);
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * mask.width as f64 / width as f64).floor() as usize;
            out.set(y, x, mask.get(sy, sx.min(mask.width - 1)));
        }
    }
    out
}

/// Resamples an image bilinearly and its label masks by nearest neighbour.
pub fn resample_slice(
    image: &Image,
    labels: Option<&[Mask]>,
    target_shape: (usize, usize),
) -> Result<(Image, Option<Vec<Mask>>)> {
    let (h, w) = target_shape;
    if h < 1 || w < 1 {
        return Err(Error::validation("target_shape", "dims must be >= 1"));
    }
    if image.data.is_empty() {
        return Err(Error::validation("image", "must be non-empty"));
    }
    let labels = match labels {
        Some(ms) => {
            let mut out = Vec::with_capacity(ms.len());
            for m in ms {
                if m.shape() != image.shape() {
                    return Err(Error::Shape(format!(
                        "label {:?} vs image {:?}",
                        m.shape(),
                        image.shape()
                    )));
                }
                out.push(nearest(m, h, w));
            }
            Some(out)
        }
        None => None,
    };
    Ok((bilinear(image, h, w), labels))
}
