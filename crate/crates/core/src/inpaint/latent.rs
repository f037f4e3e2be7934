use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

/// Spatial downsampling between pixel space and the latent grid.
pub const LATENT_FACTOR: usize = 4;

fn latent_dims(h: usize, w: usize) -> Result<(usize, usize)> {
    if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} is not a positive multiple of {LATENT_FACTOR}"
        )));
    }
    Ok((h / LATENT_FACTOR, w / LATENT_FACTOR))
}

/// Box-filters each `H x W x C` image into a `C x H/4 x W/4` latent.
pub fn encode_frames(frames: &[Array3<f64>]) -> Result<Array4<f64>> {
    let first = frames.first().ok_or_else(|| Error::Precondition("no frames to encode".into()))?;
    let (h, w, c) = first.dim();
    let (lh, lw) = latent_dims(h, w)?;
    let mut out = Array4::zeros((frames.len(), c, lh, lw));
    let norm = 1.0 / (LATENT_FACTOR * LATENT_FACTOR) as f64;
    for (f, img) in frames.iter().enumerate() {
        if img.dim() != (h, w, c) {
            return Err(Error::ShapeMismatch(format!("frame {f} is {:?}, expected {:?}", img.dim(), (h, w, c))));
        }
        for ((y, x, ch), &v) in img.indexed_iter() {
            out[[f, ch, y / LATENT_FACTOR, x / LATENT_FACTOR]] += v * norm;
        }
    }
    Ok(out)
}

/// A latent cell is occluded when any pixel of its block is.
pub fn encode_masks(masks: &[Array2<bool>]) -> Result<Array4<f64>> {
    let first = masks.first().ok_or_else(|| Error::Precondition("no masks to encode".into()))?;
    let (h, w) = first.dim();
    let (lh, lw) = latent_dims(h, w)?;
    let mut out = Array4::zeros((masks.len(), 1, lh, lw));
    for (f, m) in masks.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!("mask {f} is {:?}", m.dim())));
        }
        for ((y, x), &on) in m.indexed_iter() {
            if on {
                out[[f, 0, y / LATENT_FACTOR, x / LATENT_FACTOR]] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Bilinear upsampling back to pixel resolution, clamped to `[0,1]`.
pub fn decode_latents(latents: &Array4<f64>) -> Vec<Array3<f64>> {
    let (f, c, lh, lw) = latents.dim();
    let (h, w) = (lh * LATENT_FACTOR, lw * LATENT_FACTOR);
    let coord = |p: usize, n: usize| {
        let s = ((p as f64 + 0.5) / LATENT_FACTOR as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    (0..f)
        .map(|fi| {
            Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
                let (y0, y1, ty) = coord(y, lh);
                let (x0, x1, tx) = coord(x, lw);
                let l = |yy, xx| latents[[fi, ch, yy, xx]];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x1) * tx;
                let bot = l(y1, x0) * (1.0 - tx) + l(y1, x1) * tx;
                (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_round_trips() {
        let img = Array3::from_elem((8, 12, 3), 0.25);
        let z = encode_frames(&[img.clone()]).unwrap();
        assert_eq!(z.dim(), (1, 3, 2, 3));
        assert!(z.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let back = decode_latents(&z);
        assert!(back[0].iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn mask_cells_cover_any_occluded_pixel() {
        let mut m = Array2::from_elem((8, 8), false);
        m[[5, 2]] = true;
        let z = encode_masks(&[m]).unwrap();
        assert_eq!(z[[0, 0, 1, 0]], 1.0);
        assert_eq!(z.sum(), 1.0);
        assert!(encode_masks(&[Array2::from_elem((6, 8), false)]).is_err());
    }
}
