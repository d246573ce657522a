//! Toy convolutional backbone and feature pyramid network.
//!
//! The backbone has four stages at strides 4, 8, 16 and 32 with widths
//! `C, 2C, 4C, 8C`. Each stage downsamples with 2x2 average pooling, then
//! applies one 3x3 convolution and a GELU. The FPN maps every stage to width
//! `C` with a 1x1 lateral convolution, adds the bilinearly upsampled coarser
//! level, and finishes each level with a grouped 3x3 convolution.

use rand::Rng;

use crate::error::{PftError, Result};
use crate::params::{Bindings, Conv, ParamStore};
use crate::tensor::{Tape, Var};

/// Group count of the FPN output convolutions.
pub const FPN_GROUPS: usize = 4;

/// Strides of the pyramid levels, finest first.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Input sizes must be multiples of the coarsest stride.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(PftError::Config(format!(
            "image size {h}x{w} must be a positive multiple of 32"
        )));
    }
    Ok(())
}

/// Stage outputs, finest first: widths `C, 2C, 4C, 8C`.
#[derive(Debug, Clone, Copy)]
pub struct BackboneFeatures {
    pub c4: Var,
    pub c8: Var,
    pub c16: Var,
    pub c32: Var,
}

impl BackboneFeatures {
    pub fn levels(&self) -> [Var; 4] {
        [self.c4, self.c8, self.c16, self.c32]
    }
}

/// Pixel-token maps at strides 4..32, all with the same channel width.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub p4: Var,
    pub p8: Var,
    pub p16: Var,
    pub p32: Var,
    pub channels: usize,
}

impl FeaturePyramid {
    pub fn level(&self, stride: usize) -> Var {
        match stride {
            4 => self.p4,
            8 => self.p8,
            16 => self.p16,
            32 => self.p32,
            _ => panic!("no pyramid level at stride {stride}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: [Conv; 4],
    channels: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Self {
        let widths = [3, channels, 2 * channels, 4 * channels, 8 * channels];
        let stages = std::array::from_fn(|i| {
            Conv::new(store, &format!("backbone.stage{i}"), widths[i], widths[i + 1], 3, 1, 2.0, rng)
        });
        Self { stages, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stage_convs(&self) -> &[Conv; 4] {
        &self.stages
    }

    /// `image` is `[3, H, W]` with H, W multiples of 32.
    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bindings, image: Var) -> Result<BackboneFeatures> {
        let shape = tape.shape(image).to_vec();
        match shape.as_slice() {
            [3, h, w] => check_input_size(*h, *w)?,
            _ => return Err(PftError::Data(format!("expected a [3, H, W] image, got {shape:?}"))),
        }
        let mut x = tape.avg_pool2(image)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            x = tape.avg_pool2(x)?;
            x = stage.forward(tape, b, x)?;
            x = tape.gelu(x);
            out.push(x);
        }
        Ok(BackboneFeatures {
            c4: out[0],
            c8: out[1],
            c16: out[2],
            c32: out[3],
        })
    }
}

#[derive(Debug, Clone)]
pub struct Fpn {
    lateral: [Conv; 4],
    output: [Conv; 4],
    channels: usize,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(FPN_GROUPS) {
            return Err(PftError::Config(format!(
                "FPN width {channels} must be a positive multiple of {FPN_GROUPS}"
            )));
        }
        let lateral = std::array::from_fn(|i| {
            Conv::new(store, &format!("fpn.lateral{}", PYRAMID_STRIDES[i]), channels << i, channels, 1, 1, 1.0, rng)
        });
        let output = std::array::from_fn(|i| {
            Conv::new(store, &format!("fpn.output{}", PYRAMID_STRIDES[i]), channels, channels, 3, FPN_GROUPS, 1.0, rng)
        });
        Ok(Self {
            lateral,
            output,
            channels,
        })
    }

    pub fn lateral_convs(&self) -> &[Conv; 4] {
        &self.lateral
    }

    pub fn output_convs(&self) -> &[Conv; 4] {
        &self.output
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bindings, features: &BackboneFeatures) -> Result<FeaturePyramid> {
        let levels = features.levels();
        let mut outputs = [levels[0]; 4];
        let mut top_down: Option<Var> = None;
        for i in (0..4).rev() {
            let mut x = self.lateral[i].forward(tape, b, levels[i])?;
            if let Some(coarse) = top_down {
                let s = tape.shape(x).to_vec();
                let up = tape.resize_bilinear(coarse, s[1], s[2])?;
                x = tape.add(x, up)?;
            }
            top_down = Some(x);
            outputs[i] = self.output[i].forward(tape, b, x)?;
            debug_assert_eq!(tape.shape(outputs[i])[0], self.channels);
        }
        Ok(FeaturePyramid {
            p4: outputs[0],
            p8: outputs[1],
            p16: outputs[2],
            p32: outputs[3],
            channels: self.channels,
        })
    }
}
