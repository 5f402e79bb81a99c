//! The three-head multi-task network.
//!
//! Backbone: stem convolution, then stages of residual blocks (optionally
//! SE- or CBAM-gated); stage transitions downsample with stride-3
//! convolutions so every convolution keeps integral geometry. Encoder:
//! average-pool and max-pool branches over the final feature map, each
//! ReLU'd and dropped out, concatenated (optionally projected). Heads: one
//! dense layer per task — a tanh-bounded valence/arousal pair, 8 action-unit
//! logits, 7 expression logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionMode, Conv2dLayer, DenseLayer, ResidualBlock,
};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const NUM_AUS: usize = 8;
pub const NUM_EXPRESSIONS: usize = 7;

/// Architecture hyperparameters. Head widths are fixed at 2/8/7; everything
/// else scales.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// (C, H, W); H == W required.
    pub input_size: (usize, usize, usize),
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub dropout_p: f64,
    pub se_ratio: usize,
    pub cbam_kernel: usize,
    pub attention_mode: AttentionMode,
    /// Project the concatenated encoder down to this width before the heads.
    pub encoder_proj_dim: Option<usize>,
    /// Dense layers per head; 1 means a single linear readout.
    pub head_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (3, 32, 32),
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            dropout_p: 0.5,
            se_ratio: 16,
            cbam_kernel: 7,
            attention_mode: AttentionMode::Se,
            encoder_proj_dim: None,
            head_depth: 1,
        }
    }
}

impl ModelConfig {
    /// Four-stage configuration at the published operating point; feature
    /// dim 2048 from 112x112 inputs. Far too large to train here, but the
    /// wiring and widths are exercised in tests via closed forms.
    pub fn paper_scale() -> Self {
        ModelConfig {
            input_size: (3, 112, 112),
            stage_channels: vec![256, 512, 1024, 2048],
            blocks_per_stage: 2,
            encoder_proj_dim: Some(1024),
            ..ModelConfig::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("non-empty stages")
    }

    /// Width of the pooled-and-concatenated encoder output before any
    /// projection: avg branch + max branch.
    pub fn concat_width(&self) -> usize {
        2 * self.feature_dim()
    }

    /// Width the heads actually see.
    pub fn encoder_width(&self) -> usize {
        self.encoder_proj_dim.unwrap_or_else(|| self.concat_width())
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_size;
        if c == 0 || h == 0 || w == 0 || h != w {
            return Err(Error::InvalidArgument(format!(
                "input size must be square and non-zero, got ({c},{h},{w})"
            )));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::InvalidArgument("stage_channels is empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if self.head_depth == 0 {
            return Err(Error::InvalidArgument("head_depth must be >= 1".into()));
        }
        for &ch in &self.stage_channels {
            if self.se_ratio == 0 || ch % self.se_ratio != 0 {
                return Err(Error::InvalidArgument(format!(
                    "se_ratio {} must divide every stage width (offending: {ch})",
                    self.se_ratio
                )));
            }
        }
        Ok(())
    }
}

/// One task head: optional hidden stack then a linear readout.
#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Vec<DenseLayer>,
    pub out: DenseLayer,
}

impl Head {
    fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        scope: &str,
        in_dim: usize,
        out_dim: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Vec::new();
        for d in 0..depth - 1 {
            hidden.push(DenseLayer::new(
                store,
                &format!("{scope}.hidden{d}"),
                in_dim,
                in_dim,
                Init::FanIn,
                rng,
            ));
        }
        let out = DenseLayer::new(
            store,
            &format!("{scope}.out"),
            in_dim,
            out_dim,
            Init::FanInOut,
            rng,
        );
        Head { hidden, out }
    }

    fn forward<E: Element>(&self, t: &Tape<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            h = t.relu(layer.forward(t, store, h)?);
        }
        self.out.forward(t, store, h)
    }
}

/// Learnable per-task log-variance scalars for uncertainty weighting.
/// Checkpointed with the model; excluded from weight decay.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub va: ParamId,
    pub au: ParamId,
    pub expr: ParamId,
}

impl LossWeights {
    fn new<E: Element>(store: &mut ParamStore<E>) -> Self {
        LossWeights {
            va: store.add_with("loss_weights.va", Tensor::scalar(E::ZERO), true),
            au: store.add_with("loss_weights.au", Tensor::scalar(E::ZERO), true),
            expr: store.add_with("loss_weights.expr", Tensor::scalar(E::ZERO), true),
        }
    }

    /// Reset all three log-variances to 0 (unit variance).
    pub fn reset<E: Element>(&self, store: &mut ParamStore<E>) {
        for id in [self.va, self.au, self.expr] {
            store.get_mut(id).value.data_mut().fill(E::ZERO);
        }
    }

    pub fn values<E: Element>(&self, store: &ParamStore<E>) -> (f64, f64, f64) {
        (
            store.get(self.va).value.item().to_f64(),
            store.get(self.au).value.item().to_f64(),
            store.get(self.expr).value.item().to_f64(),
        )
    }
}

/// Per-task outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutputVars {
    pub va: Var,
    pub au_logits: Var,
    pub expr_logits: Var,
}

/// Materialized per-task outputs.
#[derive(Clone, Debug)]
pub struct ModelOutput<E: Element> {
    /// (N,2), tanh-bounded to [-1,1]; column 0 valence, column 1 arousal.
    pub va: Tensor<E>,
    /// (N,8)
    pub au_logits: Tensor<E>,
    /// (N,7)
    pub expr_logits: Tensor<E>,
}

pub struct MtaNet<E: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    pub stem: Conv2dLayer,
    pub blocks: Vec<ResidualBlock>,
    pub encoder_proj: Option<DenseLayer>,
    pub va_head: Head,
    pub au_head: Head,
    pub expr_head: Head,
    pub loss_weights: LossWeights,
}

impl<E: Element> MtaNet<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let (in_ch, in_h, _) = config.input_size;
        let c0 = config.stage_channels[0];
        let stem = Conv2dLayer::new(
            &mut store,
            "backbone.stem",
            in_ch,
            c0,
            3,
            1,
            1,
            Init::FanIn,
            &mut rng,
        );

        let mut blocks = Vec::new();
        let mut ch = c0;
        let mut hw = in_h;
        for (s, &out_ch) in config.stage_channels.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                // First block of every stage after the first downsamples.
                let stride = if s > 0 && b == 0 { 3 } else { 1 };
                let block = ResidualBlock::new(
                    &mut store,
                    &format!("backbone.stage{s}.block{b}"),
                    ch,
                    out_ch,
                    stride,
                    hw,
                    config.attention_mode,
                    config.se_ratio,
                    config.cbam_kernel,
                    &mut rng,
                )?;
                hw = block.out_hw;
                ch = out_ch;
                blocks.push(block);
            }
        }

        let encoder_proj = config.encoder_proj_dim.map(|proj| {
            DenseLayer::new(
                &mut store,
                "encoder.proj",
                config.concat_width(),
                proj,
                Init::FanIn,
                &mut rng,
            )
        });

        let e = config.encoder_width();
        let va_head = Head::new(&mut store, "head.va", e, 2, config.head_depth, &mut rng);
        let au_head = Head::new(&mut store, "head.au", e, NUM_AUS, config.head_depth, &mut rng);
        let expr_head = Head::new(
            &mut store,
            "head.expr",
            e,
            NUM_EXPRESSIONS,
            config.head_depth,
            &mut rng,
        );
        let loss_weights = LossWeights::new(&mut store);

        Ok(MtaNet {
            config,
            store,
            stem,
            blocks,
            encoder_proj,
            va_head,
            au_head,
            expr_head,
            loss_weights,
        })
    }

    /// Record the full forward pass on `tape`. Dropout fires only when
    /// `training` is set; `rng` drives the masks.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape<E>,
        images: &Tensor<E>,
        training: bool,
        rng: &mut R,
    ) -> Result<ModelOutputVars> {
        let (c, h, w) = self.config.input_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::InvalidShape {
                op: "forward",
                message: format!("expected (N,{c},{h},{w}), got {shape:?}"),
            });
        }
        if !images.is_finite() {
            return Err(Error::NonFinite("input images".into()));
        }
        let x = tape.constant(images.clone());
        self.forward_from(tape, x, training, rng)
    }

    /// Forward from an already-recorded input node (gradient checks feed a
    /// tracked leaf here).
    pub fn forward_from<R: Rng + ?Sized>(
        &self,
        t: &Tape<E>,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<ModelOutputVars> {
        let store = &self.store;
        let encoded = self.encoder_on(t, x, training, rng)?;
        let va = t.tanh(self.va_head.forward(t, store, encoded)?);
        let au_logits = self.au_head.forward(t, store, encoded)?;
        let expr_logits = self.expr_head.forward(t, store, encoded)?;
        Ok(ModelOutputVars {
            va,
            au_logits,
            expr_logits,
        })
    }

    /// Backbone, dual-pool branches, concatenation and optional projection.
    fn encoder_on<R: Rng + ?Sized>(
        &self,
        t: &Tape<E>,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let store = &self.store;
        let mut f = t.relu(self.stem.forward(t, store, x)?);
        for block in &self.blocks {
            f = block.forward(t, store, f)?;
        }
        let p = self.config.dropout_p;
        let avg = t.relu(t.global_avg_pool(f)?);
        let avg = t.dropout(avg, p, training, rng)?;
        let max = t.relu(t.global_max_pool(f)?);
        let max = t.dropout(max, p, training, rng)?;
        let mut encoded = t.concat(avg, max)?;
        if let Some(proj) = &self.encoder_proj {
            encoded = t.relu(proj.forward(t, store, encoded)?);
        }
        Ok(encoded)
    }

    /// Pooled encoder features (N, encoder_width) in inference mode.
    pub fn encode(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let (c, h, w) = self.config.input_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::InvalidShape {
                op: "encode",
                message: format!("expected (N,{c},{h},{w}), got {shape:?}"),
            });
        }
        let t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t.constant(images.clone());
        let encoded = self.encoder_on(&t, x, false, &mut rng)?;
        Ok(t.value(encoded))
    }

    /// Inference convenience: fresh tape, no dropout, materialized outputs.
    pub fn predict(&self, images: &Tensor<E>) -> Result<ModelOutput<E>> {
        let tape = Tape::new();
        // inference ignores the rng (dropout is the identity)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&tape, images, false, &mut rng)?;
        Ok(ModelOutput {
            va: tape.value(out.va),
            au_logits: tape.value(out.au_logits),
            expr_logits: tape.value(out.expr_logits),
        })
    }

    /// (name, shape, count) for every parameter in definition order.
    pub fn parameter_summary(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.store.summary()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.total_count()
    }

    /// Saturate every attention gate open, reducing each block to its plain
    /// residual form (the ablation baseline).
    pub fn saturate_attention_open(&mut self) {
        let blocks = self.blocks.clone();
        for block in &blocks {
            block.saturate_attention_open(&mut self.store);
        }
    }
}
