//! Single- and multi-scale (test-time augmented) segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{PftError, Result};
use crate::heads::argmax_scores;
use crate::model::PftModel;
use crate::segmap::LabelMap;
use crate::tensor::{chw, Tensor};

pub const DEFAULT_TTA_SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaVariant {
    pub scale: f64,
    pub flip: bool,
    pub height: usize,
    pub width: usize,
}

/// Nearest positive multiple of 32.
pub fn round_to_stride(x: f64) -> usize {
    ((x / 32.0).round() as usize).max(1) * 32
}

/// Every `(scale, flip)` combination, scales outermost.
pub fn tta_variants(height: usize, width: usize, scales: &[f64], hflip: bool) -> Vec<TtaVariant> {
    let flips: &[bool] = if hflip { &[false, true] } else { &[false] };
    scales
        .iter()
        .flat_map(|&scale| {
            flips.iter().map(move |&flip| TtaVariant {
                scale,
                flip,
                height: round_to_stride(height as f64 * scale),
                width: round_to_stride(width as f64 * scale),
            })
        })
        .collect()
}

/// Class scores of `image` upsampled to its full resolution.
pub fn full_resolution_scores(model: &PftModel, image: &Tensor) -> Result<Tensor> {
    let [_, h, w] = chw(image.shape(), "full_resolution_scores")?;
    model.class_scores(image)?.resize_bilinear(h, w)
}

/// Argmax of the full-resolution class scores.
pub fn predict_single(model: &PftModel, image: &Tensor) -> Result<LabelMap> {
    argmax_scores(&full_resolution_scores(model, image)?)
}

/// Average of the per-variant score maps, each un-flipped and resized to the
/// input resolution, then argmax.
pub fn multi_scale_scores(model: &PftModel, image: &Tensor, scales: &[f64], hflip: bool) -> Result<Tensor> {
    let [_, h, w] = chw(image.shape(), "multi_scale_inference")?;
    let variants = tta_variants(h, w, scales, hflip);
    if variants.is_empty() {
        return Err(PftError::Config("multi-scale inference needs at least one scale".into()));
    }
    let mut acc: Option<Tensor> = None;
    for v in &variants {
        let mut input = image.resize_bilinear(v.height, v.width)?;
        if v.flip {
            input = input.flip_horizontal()?;
        }
        let mut scores = model.class_scores(&input)?;
        if v.flip {
            scores = scores.flip_horizontal()?;
        }
        let scores = scores.resize_bilinear(h, w)?;
        acc = Some(match acc {
            None => scores,
            Some(mut a) => {
                a.data_mut().iter_mut().zip(scores.data()).for_each(|(x, y)| *x += y);
                a
            }
        });
    }
    let mut acc = acc.expect("non-empty variants");
    let n = variants.len() as f64;
    acc.data_mut().iter_mut().for_each(|x| *x /= n);
    Ok(acc)
}

pub fn multi_scale_inference(model: &PftModel, image: &Tensor, scales: &[f64], hflip: bool) -> Result<LabelMap> {
    argmax_scores(&multi_scale_scores(model, image, scales, hflip)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_has_twelve_variants() {
        let v = tta_variants(64, 64, &DEFAULT_TTA_SCALES, true);
        assert_eq!(v.len(), 12);
        assert_eq!(v[0].height, 32);
        assert_eq!(v.last().unwrap().height, 128);
        assert!(v.iter().all(|t| t.height % 32 == 0 && t.width % 32 == 0));
    }
}
