//! End-to-end model: backbone, FPN, decoder and heads over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderOutputs, PftDecoder, QUERY_SCALES};
use crate::error::{PftError, Result};
use crate::heads::{class_scores, Aggregation, Heads, PredictionBundle};
use crate::params::{Bindings, ParamStore};
use crate::pyramid::{Backbone, FeaturePyramid, Fpn};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub scales: Vec<usize>,
    pub cross_scale: bool,
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            channels: 32,
            layers: 2,
            heads: 4,
            scales: QUERY_SCALES.to_vec(),
            cross_scale: true,
            aggregation: Aggregation::LogitAverage,
        }
    }
}

impl ModelConfig {
    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            classes: self.classes,
            channels: self.channels,
            layers: self.layers,
            heads: self.heads,
            scales: self.scales.clone(),
            cross_scale: self.cross_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes > 255 {
            return Err(PftError::Config("at most 255 categories are supported".into()));
        }
        self.decoder_config().validate()
    }
}

/// Everything a forward pass records on the tape.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub pyramid: FeaturePyramid,
    pub mask_feature: Var,
    pub decoder: DecoderOutputs,
    /// One bundle per supervision point: input queries, then each layer.
    pub bundles: Vec<PredictionBundle>,
}

impl ModelOutputs {
    pub fn final_bundle(&self) -> &PredictionBundle {
        self.bundles.last().expect("at least one bundle")
    }
}

#[derive(Debug, Clone)]
pub struct PftModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub decoder: PftDecoder,
    pub heads: Heads,
}

impl PftModel {
    /// Seeded initialisation; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, config.channels, &mut rng);
        let fpn = Fpn::new(&mut params, config.channels, &mut rng)?;
        let decoder = PftDecoder::new(&mut params, config.decoder_config(), &mut rng)?;
        let heads = Heads::new(&mut params, config.channels, &config.scales, &mut rng);
        Ok(Self {
            config,
            params,
            backbone,
            fpn,
            decoder,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bindings, image: Var) -> Result<ModelOutputs> {
        let features = self.backbone.forward(tape, b, image)?;
        let pyramid = self.fpn.forward(tape, b, &features)?;
        let mask_feature = self.heads.mask_feature(tape, b, pyramid.p4)?;
        let decoder = self.decoder.forward(tape, b, &pyramid)?;
        let bundles = decoder
            .queries
            .iter()
            .map(|qs| self.heads.predict(tape, b, qs, mask_feature))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelOutputs {
            pyramid,
            mask_feature,
            decoder,
            bundles,
        })
    }

    /// Final-layer class scores `[K, H/4, W/4]` for one image, no gradients.
    pub fn class_scores(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &b, x)?;
        class_scores(&mut tape, out.final_bundle(), self.config.aggregation)
    }

    /// Final-layer attention maps `[layer][scale] -> [K, H/s, W/s]`.
    pub fn attention_maps(&self, image: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &b, x)?;
        Ok(out
            .decoder
            .attn_weights
            .iter()
            .map(|layer| layer.iter().map(|w| tape.tensor(*w)).collect())
            .collect())
    }
}
