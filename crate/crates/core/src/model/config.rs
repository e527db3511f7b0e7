use crate::error::{Error, Result};
use crate::flow::FlowTarget;
use crate::kv_config;
use crate::masks::MaskOptions;

/// Architecture sizes and task-routing switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub det_patch: usize,
    pub gen_patch: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub t_embed_dim: usize,
    pub det_hidden: usize,
    pub diga_hidden: usize,
    /// Detection tokens (and text) may attend to the generation latents.
    pub smsa: bool,
    /// Detection tokens may attend to the instruction text.
    pub text_in_smsa: bool,
    /// Append text-head embeddings of the caption as extra condition tokens.
    pub detector_condition: bool,
    pub flow_target: FlowTarget,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            det_patch: 4,
            gen_patch: 4,
            d_model: 64,
            layers: 4,
            heads: 4,
            ff_dim: 128,
            vocab_size: 64,
            max_text_len: 32,
            t_embed_dim: 32,
            det_hidden: 64,
            diga_hidden: 64,
            smsa: true,
            text_in_smsa: true,
            detector_condition: false,
            flow_target: FlowTarget::Literal,
        }
    }
}

kv_config!(ModelConfig {
    image_size: value,
    channels: value,
    det_patch: value,
    gen_patch: value,
    d_model: value,
    layers: value,
    heads: value,
    ff_dim: value,
    vocab_size: value,
    max_text_len: value,
    t_embed_dim: value,
    det_hidden: value,
    diga_hidden: value,
    smsa: bool,
    text_in_smsa: bool,
    detector_condition: bool,
    flow_target: value,
});

impl ModelConfig {
    /// A very small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            det_patch: 4,
            gen_patch: 4,
            d_model: 8,
            layers: 2,
            heads: 2,
            ff_dim: 12,
            vocab_size: 12,
            max_text_len: 8,
            t_embed_dim: 4,
            det_hidden: 6,
            diga_hidden: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(format!("model config: {msg}")));
        if self.image_size == 0 || self.channels == 0 {
            return bad("image size and channels must be positive".into());
        }
        for p in [self.det_patch, self.gen_patch] {
            if p == 0 || self.image_size % p != 0 {
                return bad(format!("image size {} not divisible by patch {p}", self.image_size));
            }
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.t_embed_dim == 0 || self.t_embed_dim % 2 != 0 {
            return bad("t_embed_dim must be a positive even number".into());
        }
        if self.vocab_size == 0 || self.max_text_len == 0 || self.ff_dim == 0 {
            return bad("vocab_size, max_text_len and ff_dim must be positive".into());
        }
        if self.det_hidden == 0 || self.diga_hidden == 0 {
            return bad("head widths must be positive".into());
        }
        Ok(())
    }

    pub fn n_det(&self) -> usize {
        (self.image_size / self.det_patch).pow(2)
    }

    pub fn n_gen(&self) -> usize {
        (self.image_size / self.gen_patch).pow(2)
    }

    pub fn det_dim(&self) -> usize {
        self.det_patch * self.det_patch * self.channels
    }

    pub fn gen_dim(&self) -> usize {
        self.gen_patch * self.gen_patch * self.channels
    }

    pub fn mask_options(&self) -> MaskOptions {
        MaskOptions {
            smsa: self.smsa,
            text_in_smsa: self.text_in_smsa,
        }
    }

    /// Default generator layer for feature alignment: `⌈L/2⌉`.
    pub fn default_align_layer(&self) -> usize {
        self.layers.div_ceil(2)
    }
}
