//! Model assembly: the text and audio branches, early- and late-fusion
//! heads, training-strategy freeze schedules, input batching, and
//! checkpoint serialization.

use crate::dsp::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::manifest::{ClassWeights, EmotionLabel, NUM_CLASSES};
use crate::nn::{
    apply_mask, concat_cols, masked_mean_pool, masked_mean_pool_backward, softmax_rows,
    split_cols, weighted_softmax_xent, zero_grads, Adam, BatchNorm, Conv1d, Dense, Dropout,
    MaskedBatch, ParamHost, ParamVisit, Relu2, Relu3, Scalar,
};
use crate::util::{derive_rng, Cursor, Rng};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Width preset for a model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeVariant {
    Small,
    Base,
    Large,
}

/// Text branch dimensions: the per-step reduction width and the two
/// convolution stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDims {
    pub reduce_dim: usize,
    pub conv_filters: usize,
    pub kernel: usize,
}

/// Audio branch dimensions: the two convolution stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioDims {
    pub conv_filters: usize,
    pub kernel: usize,
}

/// Complete architecture configuration shared by every system kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub size_variant: SizeVariant,
    pub text: TextDims,
    pub audio: AudioDims,
    pub ef_hidden: usize,
    pub dropout_rate: f64,
    /// Replace the late-fusion dense combiner with one learned scalar
    /// weight per branch.
    #[serde(default)]
    pub lf_scalar_combine: bool,
}

impl ModelConfig {
    /// Reference widths: 128-dim text reduction, 128 text filters, 104
    /// audio filters (so the fused embedding is 232-dim), 128 hidden
    /// fusion units, text kernel 3, audio kernel 9, dropout 0.5.
    pub fn base() -> ModelConfig {
        ModelConfig {
            size_variant: SizeVariant::Base,
            text: TextDims {
                reduce_dim: 128,
                conv_filters: 128,
                kernel: 3,
            },
            audio: AudioDims {
                conv_filters: 104,
                kernel: 9,
            },
            ef_hidden: 128,
            dropout_rate: 0.5,
            lf_scalar_combine: false,
        }
    }

    /// Base widths halved; kernels and dropout unchanged.
    pub fn small() -> ModelConfig {
        ModelConfig::scaled(SizeVariant::Small, 1, 2)
    }

    /// Base widths doubled; kernels and dropout unchanged.
    pub fn large() -> ModelConfig {
        ModelConfig::scaled(SizeVariant::Large, 2, 1)
    }

    pub fn variant(v: SizeVariant) -> ModelConfig {
        match v {
            SizeVariant::Small => ModelConfig::small(),
            SizeVariant::Base => ModelConfig::base(),
            SizeVariant::Large => ModelConfig::large(),
        }
    }

    fn scaled(variant: SizeVariant, num: usize, den: usize) -> ModelConfig {
        let base = ModelConfig::base();
        ModelConfig {
            size_variant: variant,
            text: TextDims {
                reduce_dim: base.text.reduce_dim * num / den,
                conv_filters: base.text.conv_filters * num / den,
                kernel: base.text.kernel,
            },
            audio: AudioDims {
                conv_filters: base.audio.conv_filters * num / den,
                kernel: base.audio.kernel,
            },
            ef_hidden: base.ef_hidden * num / den,
            dropout_rate: base.dropout_rate,
            lf_scalar_combine: base.lf_scalar_combine,
        }
    }

    /// Width of the concatenated pooled embedding fed to early fusion.
    pub fn fused_width(&self) -> usize {
        self.text.conv_filters + self.audio.conv_filters
    }

    /// Structural validation. The base variant is additionally pinned to
    /// its reference widths: 128-dim reduction and a 232-dim fused
    /// embedding.
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.text.reduce_dim,
            self.text.conv_filters,
            self.audio.conv_filters,
            self.ef_hidden,
        ];
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::Config("model widths must be positive".to_string()));
        }
        if self.text.kernel % 2 == 0 || self.audio.kernel % 2 == 0 {
            return Err(Error::Config("convolution kernels must be odd".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.size_variant == SizeVariant::Base {
            if self.text.reduce_dim != 128 {
                return Err(Error::Config(format!(
                    "base text reduction width is pinned to 128, got {}",
                    self.text.reduce_dim
                )));
            }
            if self.fused_width() != 232 {
                return Err(Error::Config(format!(
                    "base fused width is pinned to 232, got {}",
                    self.fused_width()
                )));
            }
        }
        Ok(())
    }
}

/// Training strategy for fusion models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    ColdStart,
    PreTrained,
    WarmStart,
}

/// The eight trainable systems: two single-modality models and each
/// fusion architecture crossed with each training strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    AudioOnly,
    TextOnly,
    EfCs,
    EfPt,
    EfWs,
    LfCs,
    LfPt,
    LfWs,
}

impl SystemKind {
    pub const ALL: [SystemKind; 8] = [
        SystemKind::AudioOnly,
        SystemKind::TextOnly,
        SystemKind::EfCs,
        SystemKind::EfPt,
        SystemKind::EfWs,
        SystemKind::LfCs,
        SystemKind::LfPt,
        SystemKind::LfWs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::AudioOnly => "audio_only",
            SystemKind::TextOnly => "text_only",
            SystemKind::EfCs => "ef_cs",
            SystemKind::EfPt => "ef_pt",
            SystemKind::EfWs => "ef_ws",
            SystemKind::LfCs => "lf_cs",
            SystemKind::LfPt => "lf_pt",
            SystemKind::LfWs => "lf_ws",
        }
    }

    pub fn parse(name: &str) -> Result<SystemKind> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown system kind '{name}'")))
    }

    pub fn needs_text(self) -> bool {
        self != SystemKind::AudioOnly
    }

    pub fn needs_audio(self) -> bool {
        self != SystemKind::TextOnly
    }

    pub fn is_late_fusion(self) -> bool {
        matches!(self, SystemKind::LfCs | SystemKind::LfPt | SystemKind::LfWs)
    }

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            SystemKind::AudioOnly | SystemKind::TextOnly => None,
            SystemKind::EfCs | SystemKind::LfCs => Some(Strategy::ColdStart),
            SystemKind::EfPt | SystemKind::LfPt => Some(Strategy::PreTrained),
            SystemKind::EfWs | SystemKind::LfWs => Some(Strategy::WarmStart),
        }
    }

    /// Default (base learning rate, warmup steps): 0.0007 with a 40-step
    /// warmup everywhere, except 0.0001 when fine-tuning pretrained
    /// branches (warm start) and a constant 0.01 for late fusion over
    /// pretrained branches.
    pub fn default_learning_rate(self) -> (f64, u64) {
        match self {
            SystemKind::EfWs | SystemKind::LfWs => (0.0001, 40),
            SystemKind::LfPt => (0.01, 0),
            _ => (0.0007, 40),
        }
    }
}

fn prefixed<S: Scalar>(
    host: &mut dyn ParamHost<S>,
    prefix: &str,
    f: &mut dyn FnMut(ParamVisit<'_, S>),
) {
    host.visit_params(&mut |mut p| {
        p.name = format!("{prefix}.{}", p.name);
        f(p);
    });
}

/// Per-step dense layer with batch normalization and ReLU; output is
/// re-masked so padded steps stay zero.
struct DenseBlock<S: Scalar> {
    dense: Dense<S>,
    norm: BatchNorm<S>,
    act: Relu3<S>,
}

impl<S: Scalar> DenseBlock<S> {
    fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        DenseBlock {
            // The normalizer cancels any uniform shift, so a bias here
            // would be a dead parameter.
            dense: Dense::without_bias(d_in, d_out, rng),
            norm: BatchNorm::new(d_out),
            act: Relu3::new(),
        }
    }

    fn forward(
        &mut self,
        x: &Array3<S>,
        mask: &Array2<bool>,
        train: bool,
        keep_cache: bool,
    ) -> Result<Array3<S>> {
        let y = self.dense.forward_seq(x, keep_cache);
        let y = self.norm.forward_seq(&y, mask, train, keep_cache)?;
        let mut y = self.act.forward(&y, keep_cache);
        apply_mask(&mut y, mask);
        Ok(y)
    }

    fn backward(&mut self, gy: &Array3<S>, mask: &Array2<bool>) -> Array3<S> {
        let mut g = gy.clone();
        apply_mask(&mut g, mask);
        let g = self.act.backward(&g);
        let g = self.norm.backward_seq(&g);
        self.dense.backward_seq(&g)
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.dense.frozen = frozen;
        self.norm.frozen = frozen;
    }
}

impl<S: Scalar> ParamHost<S> for DenseBlock<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        self.dense.visit_params(f);
        prefixed(&mut self.norm, "norm", f);
    }
}

/// Convolution over time with batch normalization and ReLU; output is
/// re-masked so padded steps stay zero.
struct ConvBlock<S: Scalar> {
    conv: Conv1d<S>,
    norm: BatchNorm<S>,
    act: Relu3<S>,
}

impl<S: Scalar> ConvBlock<S> {
    fn new(d_in: usize, n_f: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ConvBlock {
            // As in DenseBlock, the following normalizer would cancel a
            // bias exactly.
            conv: Conv1d::without_bias(d_in, n_f, kernel, rng)?,
            norm: BatchNorm::new(n_f),
            act: Relu3::new(),
        })
    }

    fn forward(
        &mut self,
        x: &Array3<S>,
        mask: &Array2<bool>,
        train: bool,
        keep_cache: bool,
    ) -> Result<Array3<S>> {
        let y = self.conv.forward(x, keep_cache);
        let y = self.norm.forward_seq(&y, mask, train, keep_cache)?;
        let mut y = self.act.forward(&y, keep_cache);
        apply_mask(&mut y, mask);
        Ok(y)
    }

    fn backward(&mut self, gy: &Array3<S>, mask: &Array2<bool>) -> Array3<S> {
        let mut g = gy.clone();
        apply_mask(&mut g, mask);
        let g = self.act.backward(&g);
        let g = self.norm.backward_seq(&g);
        self.conv.backward(&g)
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.conv.frozen = frozen;
        self.norm.frozen = frozen;
    }
}

impl<S: Scalar> ParamHost<S> for ConvBlock<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        self.conv.visit_params(f);
        prefixed(&mut self.norm, "norm", f);
    }
}

/// Text branch: per-step reduction, two convolution blocks, masked mean
/// pooling over time, and a 4-way classification head on the pooled
/// embedding.
struct TextBranch<S: Scalar> {
    reduce: DenseBlock<S>,
    conv1: ConvBlock<S>,
    conv2: ConvBlock<S>,
    head: Dense<S>,
}

impl<S: Scalar> TextBranch<S> {
    fn new(d_text: usize, dims: &TextDims, rng: &mut Rng) -> Result<Self> {
        Ok(TextBranch {
            reduce: DenseBlock::new(d_text, dims.reduce_dim, rng),
            conv1: ConvBlock::new(dims.reduce_dim, dims.conv_filters, dims.kernel, rng)?,
            conv2: ConvBlock::new(dims.conv_filters, dims.conv_filters, dims.kernel, rng)?,
            head: Dense::new(dims.conv_filters, NUM_CLASSES, rng),
        })
    }

    fn forward_pooled(
        &mut self,
        batch: &MaskedBatch<S>,
        train: bool,
        keep_cache: bool,
    ) -> Result<Array2<S>> {
        let x = self
            .reduce
            .forward(&batch.values, &batch.mask, train, keep_cache)?;
        let x = self.conv1.forward(&x, &batch.mask, train, keep_cache)?;
        let x = self.conv2.forward(&x, &batch.mask, train, keep_cache)?;
        masked_mean_pool(&x, &batch.mask)
    }

    fn backward_pooled(&mut self, g_pooled: &Array2<S>, batch: &MaskedBatch<S>) {
        let g = masked_mean_pool_backward(g_pooled, &batch.mask, batch.seq_len());
        let g = self.conv2.backward(&g, &batch.mask);
        let g = self.conv1.backward(&g, &batch.mask);
        let _ = self.reduce.backward(&g, &batch.mask);
    }

    fn set_frozen_all(&mut self, frozen: bool) {
        self.reduce.set_frozen(frozen);
        self.conv1.set_frozen(frozen);
        self.conv2.set_frozen(frozen);
        self.head.frozen = frozen;
    }
}

impl<S: Scalar> ParamHost<S> for TextBranch<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        prefixed(&mut self.reduce, "reduce", f);
        prefixed(&mut self.conv1, "conv1", f);
        prefixed(&mut self.conv2, "conv2", f);
        prefixed(&mut self.head, "head", f);
    }
}

/// Audio branch: two convolution blocks with dropout at the second
/// block's input, masked mean pooling, and a 4-way classification head.
struct AudioBranch<S: Scalar> {
    conv1: ConvBlock<S>,
    dropout: Dropout<S>,
    conv2: ConvBlock<S>,
    head: Dense<S>,
}

impl<S: Scalar> AudioBranch<S> {
    fn new(dims: &AudioDims, dropout_rate: f64, rng: &mut Rng) -> Result<Self> {
        Ok(AudioBranch {
            conv1: ConvBlock::new(FEATURE_DIM, dims.conv_filters, dims.kernel, rng)?,
            dropout: Dropout::new(dropout_rate),
            conv2: ConvBlock::new(dims.conv_filters, dims.conv_filters, dims.kernel, rng)?,
            head: Dense::new(dims.conv_filters, NUM_CLASSES, rng),
        })
    }

    fn forward_pooled(
        &mut self,
        batch: &MaskedBatch<S>,
        train: bool,
        rng: &mut Rng,
        keep_cache: bool,
    ) -> Result<Array2<S>> {
        let x = self
            .conv1
            .forward(&batch.values, &batch.mask, train, keep_cache)?;
        let x = self.dropout.forward(&x, train, rng, keep_cache);
        let x = self.conv2.forward(&x, &batch.mask, train, keep_cache)?;
        masked_mean_pool(&x, &batch.mask)
    }

    fn backward_pooled(&mut self, g_pooled: &Array2<S>, batch: &MaskedBatch<S>) {
        let g = masked_mean_pool_backward(g_pooled, &batch.mask, batch.seq_len());
        let g = self.conv2.backward(&g, &batch.mask);
        let g = self.dropout.backward(&g);
        let _ = self.conv1.backward(&g, &batch.mask);
    }

    fn set_frozen_all(&mut self, frozen: bool) {
        self.conv1.set_frozen(frozen);
        self.conv2.set_frozen(frozen);
        self.head.frozen = frozen;
    }
}

impl<S: Scalar> ParamHost<S> for AudioBranch<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        prefixed(&mut self.conv1, "conv1", f);
        prefixed(&mut self.conv2, "conv2", f);
        prefixed(&mut self.head, "head", f);
    }
}

/// Early-fusion head: hidden dense with ReLU over the concatenated
/// pooled embeddings, then a 4-way output layer.
struct EfHead<S: Scalar> {
    hidden: Dense<S>,
    act: Relu2<S>,
    out: Dense<S>,
}

impl<S: Scalar> EfHead<S> {
    fn new(d_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        EfHead {
            hidden: Dense::new(d_in, hidden, rng),
            act: Relu2::new(),
            out: Dense::new(hidden, NUM_CLASSES, rng),
        }
    }

    fn forward(&mut self, x: &Array2<S>, keep_cache: bool) -> Array2<S> {
        let h = self.hidden.forward(x, keep_cache);
        let h = self.act.forward(&h, keep_cache);
        self.out.forward(&h, keep_cache)
    }

    fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let g = self.out.backward(gy);
        let g = self.act.backward(&g);
        self.hidden.backward(&g)
    }

    fn set_frozen_all(&mut self, frozen: bool) {
        self.hidden.frozen = frozen;
        self.out.frozen = frozen;
    }
}

impl<S: Scalar> ParamHost<S> for EfHead<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        prefixed(&mut self.hidden, "hidden", f);
        prefixed(&mut self.out, "out", f);
    }
}

/// Late-fusion combiner over the two branch logit vectors (text first).
enum LfCombine<S: Scalar> {
    /// Full dense layer on the concatenated 8-dim logit vector.
    Dense(Dense<S>),
    /// One learned scalar weight per branch: `w[0]` scales the text
    /// logits, `w[1]` the audio logits.
    Scalars {
        w: Vec<S>,
        g: Vec<S>,
        frozen: bool,
        cache: Option<(Array2<S>, Array2<S>)>,
    },
}

impl<S: Scalar> LfCombine<S> {
    fn new(scalar_combine: bool, rng: &mut Rng) -> Self {
        if scalar_combine {
            LfCombine::Scalars {
                w: vec![S::from_f64(0.5), S::from_f64(0.5)],
                g: vec![S::ZERO, S::ZERO],
                frozen: false,
                cache: None,
            }
        } else {
            LfCombine::Dense(Dense::new(2 * NUM_CLASSES, NUM_CLASSES, rng))
        }
    }

    fn forward(
        &mut self,
        text_logits: &Array2<S>,
        audio_logits: &Array2<S>,
        keep_cache: bool,
    ) -> Array2<S> {
        match self {
            LfCombine::Dense(dense) => {
                let cat = concat_cols(text_logits, audio_logits);
                dense.forward(&cat, keep_cache)
            }
            LfCombine::Scalars { w, cache, .. } => {
                if keep_cache {
                    *cache = Some((text_logits.clone(), audio_logits.clone()));
                }
                text_logits.mapv(|v| v * w[0]) + audio_logits.mapv(|v| v * w[1])
            }
        }
    }

    fn backward(&mut self, gy: &Array2<S>) -> (Array2<S>, Array2<S>) {
        match self {
            LfCombine::Dense(dense) => {
                let g = dense.backward(gy);
                split_cols(&g, NUM_CLASSES)
            }
            LfCombine::Scalars { w, g, cache, .. } => {
                let (text_logits, audio_logits) =
                    cache.take().expect("scalar combine backward without cache");
                let mut g_text_w = S::ZERO;
                let mut g_audio_w = S::ZERO;
                for (gv, tv) in gy.iter().zip(text_logits.iter()) {
                    g_text_w += *gv * *tv;
                }
                for (gv, av) in gy.iter().zip(audio_logits.iter()) {
                    g_audio_w += *gv * *av;
                }
                g[0] += g_text_w;
                g[1] += g_audio_w;
                (gy.mapv(|v| v * w[0]), gy.mapv(|v| v * w[1]))
            }
        }
    }

    fn set_frozen_all(&mut self, value: bool) {
        match self {
            LfCombine::Dense(dense) => dense.frozen = value,
            LfCombine::Scalars { frozen, .. } => *frozen = value,
        }
    }
}

impl<S: Scalar> ParamHost<S> for LfCombine<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        match self {
            LfCombine::Dense(dense) => dense.visit_params(f),
            LfCombine::Scalars { w, g, frozen, .. } => f(ParamVisit {
                name: "weights".to_string(),
                dims: vec![2],
                value: w.as_mut_slice(),
                grad: Some(g.as_mut_slice()),
                frozen: *frozen,
            }),
        }
    }
}

/// Forward outcome: pre-softmax logits and normalized probabilities,
/// one row per utterance.
#[derive(Debug, Clone)]
pub struct ModelOutput<S: Scalar> {
    pub logits: Array2<S>,
    pub probs: Array2<S>,
}

/// A built system: the branches its kind requires plus one output head.
pub struct SerModel<S: Scalar> {
    kind: SystemKind,
    config: ModelConfig,
    d_text: usize,
    text: Option<TextBranch<S>>,
    audio: Option<AudioBranch<S>>,
    ef: Option<EfHead<S>>,
    lf: Option<LfCombine<S>>,
}

impl<S: Scalar> SerModel<S> {
    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    /// Enable or disable the audio dropout layer (no-op for text-only
    /// models). Disabling makes training forwards deterministic, which
    /// gradient checking requires.
    pub fn set_dropout_active(&mut self, active: bool) {
        if let Some(audio) = &mut self.audio {
            audio.dropout.active = active;
        }
    }

    fn validate_inputs(
        &self,
        audio: Option<&MaskedBatch<S>>,
        text: Option<&MaskedBatch<S>>,
    ) -> Result<()> {
        if self.kind.needs_audio() && audio.is_none() {
            return Err(Error::Model(format!(
                "{} forward requires an audio batch",
                self.kind.name()
            )));
        }
        if self.kind.needs_text() && text.is_none() {
            return Err(Error::Model(format!(
                "{} forward requires a text batch",
                self.kind.name()
            )));
        }
        if let (Some(a), Some(t)) = (audio, text) {
            if a.batch_size() != t.batch_size() {
                return Err(Error::Model(format!(
                    "audio batch has {} rows but text batch has {}",
                    a.batch_size(),
                    t.batch_size()
                )));
            }
            if let (Some(la), Some(lt)) = (&a.labels, &t.labels) {
                if la != lt {
                    return Err(Error::Model(
                        "audio and text batches carry different labels; rows are misaligned"
                            .to_string(),
                    ));
                }
            }
        }
        if let Some(a) = audio {
            if a.values.dim().2 != FEATURE_DIM {
                return Err(Error::Model(format!(
                    "audio batch width {} does not match the {FEATURE_DIM}-dim feature contract",
                    a.values.dim().2
                )));
            }
        }
        if let Some(t) = text {
            if t.values.dim().2 != self.d_text {
                return Err(Error::Model(format!(
                    "text batch width {} does not match model d_text {}",
                    t.values.dim().2,
                    self.d_text
                )));
            }
        }
        Ok(())
    }

    /// Run the model. Train mode uses batch statistics and dropout; eval
    /// mode is deterministic. `keep_cache` must be set when a backward
    /// pass will follow.
    pub fn forward(
        &mut self,
        audio: Option<&MaskedBatch<S>>,
        text: Option<&MaskedBatch<S>>,
        train: bool,
        rng: &mut Rng,
        keep_cache: bool,
    ) -> Result<ModelOutput<S>> {
        self.validate_inputs(audio, text)?;
        let logits = match self.kind {
            SystemKind::TextOnly => {
                let branch = self.text.as_mut().expect("text branch");
                let pooled = branch.forward_pooled(text.unwrap(), train, keep_cache)?;
                branch.head.forward(&pooled, keep_cache)
            }
            SystemKind::AudioOnly => {
                let branch = self.audio.as_mut().expect("audio branch");
                let pooled = branch.forward_pooled(audio.unwrap(), train, rng, keep_cache)?;
                branch.head.forward(&pooled, keep_cache)
            }
            SystemKind::EfCs | SystemKind::EfPt | SystemKind::EfWs => {
                let text_pooled = self
                    .text
                    .as_mut()
                    .expect("text branch")
                    .forward_pooled(text.unwrap(), train, keep_cache)?;
                let audio_pooled = self
                    .audio
                    .as_mut()
                    .expect("audio branch")
                    .forward_pooled(audio.unwrap(), train, rng, keep_cache)?;
                let fused = concat_cols(&text_pooled, &audio_pooled);
                self.ef.as_mut().expect("fusion head").forward(&fused, keep_cache)
            }
            SystemKind::LfCs | SystemKind::LfPt | SystemKind::LfWs => {
                let text_branch = self.text.as_mut().expect("text branch");
                let text_pooled = text_branch.forward_pooled(text.unwrap(), train, keep_cache)?;
                let text_logits = text_branch.head.forward(&text_pooled, keep_cache);
                let audio_branch = self.audio.as_mut().expect("audio branch");
                let audio_pooled =
                    audio_branch.forward_pooled(audio.unwrap(), train, rng, keep_cache)?;
                let audio_logits = audio_branch.head.forward(&audio_pooled, keep_cache);
                self.lf
                    .as_mut()
                    .expect("combiner")
                    .forward(&text_logits, &audio_logits, keep_cache)
            }
        };
        let probs = softmax_rows(&logits);
        Ok(ModelOutput { logits, probs })
    }

    /// Backpropagate from the logit gradient through the whole graph,
    /// accumulating parameter gradients. Requires a preceding forward
    /// with `keep_cache`.
    pub fn backward(
        &mut self,
        dlogits: &Array2<S>,
        audio: Option<&MaskedBatch<S>>,
        text: Option<&MaskedBatch<S>>,
    ) -> Result<()> {
        self.validate_inputs(audio, text)?;
        match self.kind {
            SystemKind::TextOnly => {
                let branch = self.text.as_mut().expect("text branch");
                let g_pooled = branch.head.backward(dlogits);
                branch.backward_pooled(&g_pooled, text.unwrap());
            }
            SystemKind::AudioOnly => {
                let branch = self.audio.as_mut().expect("audio branch");
                let g_pooled = branch.head.backward(dlogits);
                branch.backward_pooled(&g_pooled, audio.unwrap());
            }
            SystemKind::EfCs | SystemKind::EfPt | SystemKind::EfWs => {
                let g_fused = self.ef.as_mut().expect("fusion head").backward(dlogits);
                let (g_text, g_audio) = split_cols(&g_fused, self.config.text.conv_filters);
                self.text
                    .as_mut()
                    .expect("text branch")
                    .backward_pooled(&g_text, text.unwrap());
                self.audio
                    .as_mut()
                    .expect("audio branch")
                    .backward_pooled(&g_audio, audio.unwrap());
            }
            SystemKind::LfCs | SystemKind::LfPt | SystemKind::LfWs => {
                let (g_text_logits, g_audio_logits) =
                    self.lf.as_mut().expect("combiner").backward(dlogits);
                let text_branch = self.text.as_mut().expect("text branch");
                let g_pooled = text_branch.head.backward(&g_text_logits);
                text_branch.backward_pooled(&g_pooled, text.unwrap());
                let audio_branch = self.audio.as_mut().expect("audio branch");
                let g_pooled = audio_branch.head.backward(&g_audio_logits);
                audio_branch.backward_pooled(&g_pooled, audio.unwrap());
            }
        }
        Ok(())
    }

    /// Deterministic pooled branch embeddings (eval mode): (text, audio),
    /// each present when the model has that branch and a batch was given.
    pub fn pooled_embeddings(
        &mut self,
        audio: Option<&MaskedBatch<S>>,
        text: Option<&MaskedBatch<S>>,
    ) -> Result<(Option<Array2<S>>, Option<Array2<S>>)> {
        let mut rng = derive_rng(0, &["pooled-eval"]);
        let text_pooled = match (&mut self.text, text) {
            (Some(branch), Some(batch)) => Some(branch.forward_pooled(batch, false, false)?),
            _ => None,
        };
        let audio_pooled = match (&mut self.audio, audio) {
            (Some(branch), Some(batch)) => {
                Some(branch.forward_pooled(batch, false, &mut rng, false)?)
            }
            _ => None,
        };
        Ok((text_pooled, audio_pooled))
    }
}

impl<S: Scalar> ParamHost<S> for SerModel<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        if let Some(text) = &mut self.text {
            prefixed(text, "text", f);
        }
        if let Some(audio) = &mut self.audio {
            prefixed(audio, "audio", f);
        }
        if let Some(ef) = &mut self.ef {
            prefixed(ef, "fuse", f);
        }
        if let Some(lf) = &mut self.lf {
            prefixed(lf, "combine", f);
        }
    }
}

fn build_shell<S: Scalar>(
    kind: SystemKind,
    config: &ModelConfig,
    d_text: usize,
    seed: u64,
) -> Result<SerModel<S>> {
    config.validate()?;
    if kind.needs_text() && d_text == 0 {
        return Err(Error::Config("d_text must be positive".to_string()));
    }
    let mut rng = derive_rng(seed, &["model-init", kind.name()]);
    let text = if kind.needs_text() {
        Some(TextBranch::new(d_text, &config.text, &mut rng)?)
    } else {
        None
    };
    let audio = if kind.needs_audio() {
        Some(AudioBranch::new(&config.audio, config.dropout_rate, &mut rng)?)
    } else {
        None
    };
    let ef = match kind {
        SystemKind::EfCs | SystemKind::EfPt | SystemKind::EfWs => {
            Some(EfHead::new(config.fused_width(), config.ef_hidden, &mut rng))
        }
        _ => None,
    };
    let lf = if kind.is_late_fusion() {
        Some(LfCombine::new(config.lf_scalar_combine, &mut rng))
    } else {
        None
    };
    Ok(SerModel {
        kind,
        config: config.clone(),
        d_text,
        text,
        audio,
        ef,
        lf,
    })
}

/// Set the freeze schedule implied by the model's kind and align the
/// audio dropout with whether its consumer layer trains. Warns and leaves
/// single-modality models untouched.
pub fn apply_training_strategy<S: Scalar>(model: &mut SerModel<S>) {
    let Some(strategy) = model.kind.strategy() else {
        log::warn!(
            "no training strategy applies to {}; leaving all layers trainable",
            model.kind.name()
        );
        return;
    };
    let text = model.text.as_mut().expect("fusion model has a text branch");
    let audio = model.audio.as_mut().expect("fusion model has an audio branch");
    match strategy {
        Strategy::ColdStart => {
            text.set_frozen_all(false);
            audio.set_frozen_all(false);
        }
        Strategy::PreTrained => {
            text.set_frozen_all(true);
            audio.set_frozen_all(true);
        }
        Strategy::WarmStart => {
            text.set_frozen_all(true);
            audio.set_frozen_all(true);
            text.conv2.set_frozen(false);
            audio.conv2.set_frozen(false);
        }
    }
    audio.dropout.active = !audio.conv2.conv.frozen;
    if let Some(ef) = &mut model.ef {
        ef.set_frozen_all(false);
    }
    if let Some(lf) = &mut model.lf {
        lf.set_frozen_all(false);
    }
}

/// Pretrained single-modality checkpoints used to initialize fusion
/// branches.
pub struct PretrainedBranches<'a> {
    pub text: &'a Checkpoint,
    pub audio: &'a Checkpoint,
}

/// Build a system. Fresh layers are Xavier-initialized from the seed;
/// pretrained and warm-start kinds additionally require single-modality
/// branch checkpoints with matching dimensions, whose weights replace
/// the branch initialization. The kind's freeze schedule is applied.
pub fn build_model<S: Scalar>(
    kind: SystemKind,
    config: &ModelConfig,
    d_text: usize,
    seed: u64,
    pretrained: Option<&PretrainedBranches<'_>>,
) -> Result<SerModel<S>> {
    let mut model = build_shell(kind, config, d_text, seed)?;
    let wants_pretrained = matches!(
        kind.strategy(),
        Some(Strategy::PreTrained) | Some(Strategy::WarmStart)
    );
    if wants_pretrained {
        let sources = pretrained.ok_or_else(|| {
            Error::Model(format!(
                "{} requires pretrained text and audio branch checkpoints",
                kind.name()
            ))
        })?;
        if sources.text.header.kind != SystemKind::TextOnly {
            return Err(Error::Model(format!(
                "text branch checkpoint holds a {} model",
                sources.text.header.kind.name()
            )));
        }
        if sources.audio.header.kind != SystemKind::AudioOnly {
            return Err(Error::Model(format!(
                "audio branch checkpoint holds a {} model",
                sources.audio.header.kind.name()
            )));
        }
        if sources.text.header.config.text != config.text || sources.text.header.d_text != d_text {
            return Err(Error::Model(
                "text branch checkpoint dimensions do not match the model config".to_string(),
            ));
        }
        if sources.audio.header.config.audio != config.audio {
            return Err(Error::Model(
                "audio branch checkpoint dimensions do not match the model config".to_string(),
            ));
        }
        overlay_params(&mut model, &sources.text.tensors, "text.")?;
        overlay_params(&mut model, &sources.audio.tensors, "audio.")?;
    } else if pretrained.is_some() {
        log::warn!(
            "{} ignores pretrained checkpoints; training from scratch",
            kind.name()
        );
    }
    if kind.strategy().is_some() {
        apply_training_strategy(&mut model);
    }
    Ok(model)
}

/// One forward/backward/update cycle. Returns the class-weighted loss.
///
/// Labels are taken from the batches (which must agree when both carry
/// them). Aborts without mutating parameters on a non-finite loss or
/// gradient.
pub fn train_step<S: Scalar>(
    model: &mut SerModel<S>,
    audio: Option<&MaskedBatch<S>>,
    text: Option<&MaskedBatch<S>>,
    weights: &ClassWeights,
    adam: &mut Adam,
    rng: &mut Rng,
) -> Result<f64> {
    let labels: Vec<EmotionLabel> = audio
        .and_then(|b| b.labels.clone())
        .or_else(|| text.and_then(|b| b.labels.clone()))
        .ok_or_else(|| Error::Training("training batch has no labels".to_string()))?;
    zero_grads(model);
    let out = model.forward(audio, text, true, rng, true)?;
    let (loss, _probs, dlogits) = weighted_softmax_xent(&out.logits, &labels, weights)?;
    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {:?} in {} train step",
            loss,
            model.kind().name()
        )));
    }
    model.backward(&dlogits, audio, text)?;
    adam.step(model)?;
    Ok(loss.to_f64())
}

/// Pad aligned sequences into a masked batch, truncating each to at most
/// `max_len` initial steps. All sequences must share a width.
pub fn pad_batch<S: Scalar>(
    seqs: &[&Array2<f32>],
    labels: Option<&[EmotionLabel]>,
    max_len: usize,
) -> Result<MaskedBatch<S>> {
    if seqs.is_empty() {
        return Err(Error::Model("cannot batch zero sequences".to_string()));
    }
    if max_len == 0 {
        return Err(Error::Model("max_len must be positive".to_string()));
    }
    let d = seqs[0].dim().1;
    let mut kept_lens = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        if s.dim().1 != d {
            return Err(Error::shape(
                "pad_batch",
                format!("sequence {i} has width {}, expected {d}", s.dim().1),
            ));
        }
        if s.dim().0 == 0 {
            return Err(Error::shape("pad_batch", format!("sequence {i} is empty")));
        }
        kept_lens.push(s.dim().0.min(max_len));
    }
    let t_max = *kept_lens.iter().max().expect("non-empty batch");
    let b = seqs.len();
    let mut values = Array3::from_elem((b, t_max, d), S::ZERO);
    let mut mask = Array2::from_elem((b, t_max), false);
    for (i, s) in seqs.iter().enumerate() {
        for t in 0..kept_lens[i] {
            mask[[i, t]] = true;
            for j in 0..d {
                values[[i, t, j]] = S::from_f64(s[[t, j]] as f64);
            }
        }
    }
    MaskedBatch::new(values, mask, labels.map(|l| l.to_vec()))
}

/// Checkpoint file magic.
fn audit_batch(rng: &mut Rng, b: usize, t: usize, d: usize, valid: &[usize]) -> MaskedBatch<f64> {
    let mut values = Array3::from_elem((b, t, d), 0f64);
    let mut mask = Array2::from_elem((b, t), false);
    for i in 0..b {
        for step in 0..valid[i] {
            mask[[i, step]] = true;
            for j in 0..d {
                values[[i, step, j]] = crate::util::uniform_f64(rng) * 2.0 - 1.0;
            }
        }
    }
    let labels = (0..b).map(|i| EmotionLabel::from_index(i % 4).unwrap()).collect();
    MaskedBatch::new(values, mask, Some(labels)).expect("audit batch construction")
}

/// Compare every trainable parameter's analytic gradient against central
/// differences on one small random ragged batch, in 64-bit arithmetic
/// with dropout off and batch statistics active. Returns the largest
/// relative error over all parameter scalars.
///
/// A scalar whose finite-difference window straddles a rectifier kink
/// shows a large error at one step size that vanishes at a smaller one,
/// while a genuinely wrong gradient stays wrong at both. The audit
/// therefore retries at a tenth of the step when the first pass looks
/// bad and reports the smaller of the two results.
pub fn audit_model_gradients(
    kind: SystemKind,
    config: &ModelConfig,
    d_text: usize,
    seed: u64,
) -> Result<f64> {
    use crate::nn::{grad_check, restore_buffers, snapshot_buffers};

    let mut model: SerModel<f64> = build_model(kind, config, d_text, seed, None)?;
    model.set_dropout_active(false);
    let mut rng = derive_rng(seed, &["gradient-audit", kind.name()]);
    let audio = kind
        .needs_audio()
        .then(|| audit_batch(&mut rng, 4, 6, FEATURE_DIM, &[6, 4, 5, 3]));
    let text = kind
        .needs_text()
        .then(|| audit_batch(&mut rng, 4, 5, d_text, &[5, 2, 4, 3]));
    let labels = audio
        .as_ref()
        .or(text.as_ref())
        .and_then(|b| b.labels.clone())
        .expect("audit batches carry labels");
    let weights = ClassWeights::uniform();

    let mut loss_fn = |m: &mut SerModel<f64>, with_backward: bool| {
        let snap = snapshot_buffers(m);
        let mut fwd_rng = derive_rng(seed, &["gradient-audit-fwd"]);
        let out = m
            .forward(audio.as_ref(), text.as_ref(), true, &mut fwd_rng, true)
            .expect("audit forward");
        let (loss, _, dlogits) =
            weighted_softmax_xent(&out.logits, &labels, &weights).expect("audit loss");
        if with_backward {
            m.backward(&dlogits, audio.as_ref(), text.as_ref())
                .expect("audit backward");
        }
        restore_buffers(m, &snap);
        loss
    };

    let coarse = grad_check(&mut model, &mut loss_fn, 1e-5).max_rel_err;
    if coarse < 1e-5 {
        return Ok(coarse);
    }
    let fine = grad_check(&mut model, &mut loss_fn, 1e-6).max_rel_err;
    Ok(coarse.min(fine))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMFCKPT1";

const CHECKPOINT_VERSION: u32 = 1;

/// Provenance of a trained model: which configuration, fold, and seed
/// produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointLineage {
    pub config_hash: String,
    pub fold_index: usize,
    pub fold_signature: String,
    pub seed: u64,
}

impl CheckpointLineage {
    /// Placeholder lineage for models that were never trained.
    pub fn untrained() -> CheckpointLineage {
        CheckpointLineage {
            config_hash: String::new(),
            fold_index: 0,
            fold_signature: String::new(),
            seed: 0,
        }
    }
}

/// Checkpoint metadata stored ahead of the tensor records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: SystemKind,
    pub config: ModelConfig,
    pub d_text: usize,
    pub lineage: CheckpointLineage,
}

/// One named tensor: canonical walk order, row-major f32 data.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// A parsed checkpoint: header plus every parameter and statistics
/// buffer of the model, in walk order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Serialize a model to checkpoint bytes. The encoding is deterministic:
/// identical model state yields identical bytes.
pub fn encode_checkpoint(model: &mut SerModel<f32>, lineage: &CheckpointLineage) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        kind: model.kind(),
        config: model.config().clone(),
        d_text: model.d_text(),
        lineage: lineage.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization");

    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params(&mut |p| {
        tensors.push((p.name.clone(), p.dims.clone(), p.value.to_vec()));
    });

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Write a model checkpoint to disk.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &mut SerModel<f32>,
    lineage: &CheckpointLineage,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, lineage)).map_err(|e| Error::io(path, e))
}

/// Parse checkpoint bytes.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |detail: String| Error::format("checkpoint", detail);
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8).map_err(&fail)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".to_string()));
    }
    let header_len = cur.take_u32().map_err(&fail)? as usize;
    let header_bytes = cur.take(header_len).map_err(&fail)?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| fail(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let n_tensors = cur.take_u32().map_err(&fail)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for i in 0..n_tensors {
        let name_len = cur.take_u32().map_err(&fail)? as usize;
        let name = std::str::from_utf8(cur.take(name_len).map_err(&fail)?)
            .map_err(|e| fail(format!("tensor {i} name: {e}")))?
            .to_string();
        let ndims = cur.take_u32().map_err(&fail)? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(cur.take_u32().map_err(&fail)? as usize);
        }
        let numel = cur.take_u32().map_err(&fail)? as usize;
        if dims.iter().product::<usize>() != numel {
            return Err(fail(format!(
                "tensor '{name}' dims {dims:?} disagree with element count {numel}"
            )));
        }
        let raw = cur.take(numel * 4).map_err(&fail)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(CheckpointTensor { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(Checkpoint { header, tensors })
}

/// Read a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

/// Copy every tensor into the matching model parameter. Every model
/// parameter whose name starts with `prefix` must be covered, every
/// tensor must be consumed, and dimensions must agree exactly.
pub fn overlay_params<S: Scalar>(
    model: &mut SerModel<S>,
    tensors: &[CheckpointTensor],
    prefix: &str,
) -> Result<()> {
    let map: BTreeMap<&str, &CheckpointTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if map.len() != tensors.len() {
        return Err(Error::Model("checkpoint has duplicate tensor names".to_string()));
    }
    let mut missing: Vec<String> = Vec::new();
    let mut mismatched: Vec<String> = Vec::new();
    let mut consumed = 0usize;
    model.visit_params(&mut |p| {
        if !p.name.starts_with(prefix) {
            return;
        }
        match map.get(p.name.as_str()) {
            None => missing.push(p.name.clone()),
            Some(t) => {
                if t.dims != p.dims || t.data.len() != p.value.len() {
                    mismatched.push(p.name.clone());
                } else {
                    for (dst, src) in p.value.iter_mut().zip(t.data.iter()) {
                        *dst = S::from_f64(*src as f64);
                    }
                    consumed += 1;
                }
            }
        }
    });
    if !mismatched.is_empty() {
        return Err(Error::Model(format!(
            "checkpoint tensor dimensions do not match: {}",
            mismatched.join(", ")
        )));
    }
    if !missing.is_empty() {
        return Err(Error::Model(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    if consumed != tensors.len() {
        return Err(Error::Model(format!(
            "checkpoint has {} tensors not used by the model",
            tensors.len() - consumed
        )));
    }
    Ok(())
}

/// Rebuild the exact model stored in a checkpoint, including its freeze
/// schedule.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<SerModel<f32>> {
    let mut model: SerModel<f32> =
        build_shell(ckpt.header.kind, &ckpt.header.config, ckpt.header.d_text, 0)?;
    overlay_params(&mut model, &ckpt.tensors, "")?;
    if ckpt.header.kind.strategy().is_some() {
        apply_training_strategy(&mut model);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{lr_at, AdamConfig};
    use crate::util::uniform_f64;
    use ndarray::Array2;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            size_variant: SizeVariant::Small,
            text: TextDims {
                reduce_dim: 6,
                conv_filters: 5,
                kernel: 3,
            },
            audio: AudioDims {
                conv_filters: 4,
                kernel: 3,
            },
            ef_hidden: 6,
            dropout_rate: 0.5,
            lf_scalar_combine: false,
        }
    }

    const TINY_D_TEXT: usize = 7;

    fn random_batch<S: Scalar>(
        b: usize,
        t: usize,
        d: usize,
        valid: &[usize],
        with_labels: bool,
        tag: &str,
    ) -> MaskedBatch<S> {
        let mut rng = derive_rng(50, &["models-test", tag]);
        let mut values = Array3::from_elem((b, t, d), S::ZERO);
        let mut mask = Array2::from_elem((b, t), false);
        for i in 0..b {
            for step in 0..valid[i] {
                mask[[i, step]] = true;
                for j in 0..d {
                    values[[i, step, j]] = S::from_f64(uniform_f64(&mut rng) * 2.0 - 1.0);
                }
            }
        }
        let labels = with_labels.then(|| {
            (0..b)
                .map(|i| EmotionLabel::from_index(i % 4).unwrap())
                .collect()
        });
        MaskedBatch::new(values, mask, labels).unwrap()
    }

    fn tiny_batches<S: Scalar>(with_labels: bool) -> (MaskedBatch<S>, MaskedBatch<S>) {
        let audio = random_batch(4, 6, FEATURE_DIM, &[6, 4, 5, 3], with_labels, "audio");
        let text = random_batch(4, 5, TINY_D_TEXT, &[5, 2, 4, 3], with_labels, "text");
        (audio, text)
    }

    fn trainable_params<S: Scalar>(model: &mut SerModel<S>) -> Vec<(String, Vec<S>)> {
        let mut out = Vec::new();
        model.visit_params(&mut |p| {
            if p.grad.is_some() {
                out.push((p.name.clone(), p.value.to_vec()));
            }
        });
        out
    }

    fn params_with_prefix<S: Scalar>(model: &mut SerModel<S>, prefix: &str) -> Vec<(String, Vec<S>)> {
        let mut out = Vec::new();
        model.visit_params(&mut |p| {
            if p.name.starts_with(prefix) {
                out.push((p.name.clone(), p.value.to_vec()));
            }
        });
        out
    }

    fn pretrained_tiny() -> (Checkpoint, Checkpoint) {
        let cfg = tiny_config();
        let mut text: SerModel<f32> =
            build_model(SystemKind::TextOnly, &cfg, TINY_D_TEXT, 21, None).unwrap();
        let mut audio: SerModel<f32> =
            build_model(SystemKind::AudioOnly, &cfg, TINY_D_TEXT, 22, None).unwrap();
        let lineage = CheckpointLineage::untrained();
        let text_ckpt = parse_checkpoint(&encode_checkpoint(&mut text, &lineage)).unwrap();
        let audio_ckpt = parse_checkpoint(&encode_checkpoint(&mut audio, &lineage)).unwrap();
        (text_ckpt, audio_ckpt)
    }

    #[test]
    fn size_variants_scale_all_widths() {
        let base = ModelConfig::base();
        let small = ModelConfig::small();
        let large = ModelConfig::large();
        assert!(base.validate().is_ok());
        assert_eq!(small.text.reduce_dim * 2, base.text.reduce_dim);
        assert_eq!(small.text.conv_filters * 2, base.text.conv_filters);
        assert_eq!(small.audio.conv_filters * 2, base.audio.conv_filters);
        assert_eq!(small.ef_hidden * 2, base.ef_hidden);
        assert_eq!(large.text.reduce_dim, base.text.reduce_dim * 2);
        assert_eq!(large.text.conv_filters, base.text.conv_filters * 2);
        assert_eq!(large.audio.conv_filters, base.audio.conv_filters * 2);
        assert_eq!(large.ef_hidden, base.ef_hidden * 2);
        assert_eq!(small.text.kernel, base.text.kernel);
        assert_eq!(large.audio.kernel, base.audio.kernel);
        assert_eq!(base.fused_width(), 232);
    }

    #[test]
    fn base_widths_are_pinned() {
        let mut broken = ModelConfig::base();
        broken.audio.conv_filters = 100;
        assert!(broken.validate().is_err());
        let mut broken = ModelConfig::base();
        broken.text.reduce_dim = 64;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn kind_names_round_trip_and_rates_are_pinned() {
        for kind in SystemKind::ALL {
            assert_eq!(SystemKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(SystemKind::parse("early_fusion").is_err());
        assert_eq!(SystemKind::EfCs.default_learning_rate(), (0.0007, 40));
        assert_eq!(SystemKind::AudioOnly.default_learning_rate(), (0.0007, 40));
        assert_eq!(SystemKind::EfWs.default_learning_rate(), (0.0001, 40));
        assert_eq!(SystemKind::LfWs.default_learning_rate(), (0.0001, 40));
        assert_eq!(SystemKind::LfPt.default_learning_rate(), (0.01, 0));
        let (lr, warmup) = SystemKind::EfCs.default_learning_rate();
        assert_eq!(lr_at(0, lr, warmup), 0.0);
        assert_eq!(lr_at(40, lr, warmup), 0.0007);
        let (lr, warmup) = SystemKind::LfPt.default_learning_rate();
        assert_eq!(lr_at(0, lr, warmup), 0.01);
    }

    #[test]
    fn forward_shapes_and_probability_rows() {
        let cfg = tiny_config();
        let (audio, text) = tiny_batches::<f32>(false);
        let mut rng = derive_rng(1, &["fwd"]);
        for kind in SystemKind::ALL {
            let pretrained = pretrained_tiny();
            let sources = PretrainedBranches {
                text: &pretrained.0,
                audio: &pretrained.1,
            };
            let needs = matches!(
                kind.strategy(),
                Some(Strategy::PreTrained) | Some(Strategy::WarmStart)
            );
            let mut model: SerModel<f32> =
                build_model(kind, &cfg, TINY_D_TEXT, 5, needs.then_some(&sources)).unwrap();
            let out = model
                .forward(Some(&audio), Some(&text), false, &mut rng, false)
                .unwrap();
            assert_eq!(out.logits.dim(), (4, 4), "{}", kind.name());
            for row in out.probs.rows() {
                let sum: f32 = row.sum();
                assert!((sum - 1.0).abs() < 1e-6, "{}: {sum}", kind.name());
                assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }

    #[test]
    fn zeroed_single_step_inputs_collapse_to_one_bias_row() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::EfCs, &cfg, TINY_D_TEXT, 9, None).unwrap();
        let b = 5;
        let audio = MaskedBatch::new(
            Array3::from_elem((b, 3, FEATURE_DIM), 0.0f32),
            Array2::from_shape_fn((b, 3), |(_, t)| t == 0),
            None,
        )
        .unwrap();
        let text = MaskedBatch::new(
            Array3::from_elem((b, 2, TINY_D_TEXT), 0.0f32),
            Array2::from_shape_fn((b, 2), |(_, t)| t == 0),
            None,
        )
        .unwrap();
        let mut rng = derive_rng(2, &["zeros"]);
        let out = model
            .forward(Some(&audio), Some(&text), false, &mut rng, false)
            .unwrap();
        let first: Vec<f32> = out.logits.row(0).to_vec();
        for i in 1..b {
            assert_eq!(out.logits.row(i).to_vec(), first, "row {i}");
        }
    }

    #[test]
    fn late_fusion_matches_manual_branch_composition() {
        let mut cfg = tiny_config();
        cfg.lf_scalar_combine = false;
        let mut lf: SerModel<f32> = build_model(SystemKind::LfCs, &cfg, TINY_D_TEXT, 31, None).unwrap();
        let ckpt = parse_checkpoint(&encode_checkpoint(&mut lf, &CheckpointLineage::untrained()))
            .unwrap();

        let mut text_model: SerModel<f32> =
            build_model(SystemKind::TextOnly, &cfg, TINY_D_TEXT, 99, None).unwrap();
        let text_tensors: Vec<CheckpointTensor> = ckpt
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("text."))
            .cloned()
            .collect();
        overlay_params(&mut text_model, &text_tensors, "text.").unwrap();
        let mut audio_model: SerModel<f32> =
            build_model(SystemKind::AudioOnly, &cfg, TINY_D_TEXT, 98, None).unwrap();
        let audio_tensors: Vec<CheckpointTensor> = ckpt
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("audio."))
            .cloned()
            .collect();
        overlay_params(&mut audio_model, &audio_tensors, "audio.").unwrap();

        let (audio, text) = tiny_batches::<f32>(false);
        let mut rng = derive_rng(3, &["lf"]);
        let text_logits = text_model
            .forward(None, Some(&text), false, &mut rng, false)
            .unwrap()
            .logits;
        let audio_logits = audio_model
            .forward(Some(&audio), None, false, &mut rng, false)
            .unwrap()
            .logits;

        let w_t = ckpt.tensor("combine.weight").unwrap();
        let w = Array2::from_shape_vec((w_t.dims[0], w_t.dims[1]), w_t.data.clone()).unwrap();
        let b_t = ckpt.tensor("combine.bias").unwrap();
        let cat = concat_cols(&text_logits, &audio_logits);
        let mut manual = cat.dot(&w);
        for mut row in manual.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b_t.data.iter()) {
                *v += bias;
            }
        }

        let out = lf
            .forward(Some(&audio), Some(&text), false, &mut rng, false)
            .unwrap();
        for (a, b) in out.logits.iter().zip(manual.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn pretrained_kinds_require_checkpoints() {
        let cfg = tiny_config();
        let err = build_model::<f32>(SystemKind::EfPt, &cfg, TINY_D_TEXT, 1, None);
        assert!(err.is_err());
        let err = build_model::<f32>(SystemKind::LfWs, &cfg, TINY_D_TEXT, 1, None);
        assert!(err.is_err());
    }

    #[test]
    fn mismatched_branch_checkpoint_is_rejected() {
        let (text_ckpt, audio_ckpt) = pretrained_tiny();
        let mut wider = tiny_config();
        wider.text.conv_filters = 8;
        let sources = PretrainedBranches {
            text: &text_ckpt,
            audio: &audio_ckpt,
        };
        let err = build_model::<f32>(SystemKind::EfPt, &wider, TINY_D_TEXT, 1, Some(&sources));
        assert!(err.is_err());
    }

    fn train_n_steps(
        model: &mut SerModel<f32>,
        steps: usize,
        lr: f64,
        warmup: u64,
    ) -> Vec<f64> {
        let (audio, text) = tiny_batches::<f32>(true);
        let weights = ClassWeights::uniform();
        let mut adam = Adam::new(AdamConfig::new(lr, warmup));
        let mut rng = derive_rng(77, &["train-loop"]);
        let audio_in = model.kind().needs_audio().then_some(&audio);
        let text_in = model.kind().needs_text().then_some(&text);
        (0..steps)
            .map(|_| {
                train_step(model, audio_in, text_in, &weights, &mut adam, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn pretrained_branches_stay_bit_identical_under_training() {
        let cfg = tiny_config();
        let (text_ckpt, audio_ckpt) = pretrained_tiny();
        let sources = PretrainedBranches {
            text: &text_ckpt,
            audio: &audio_ckpt,
        };
        let mut model: SerModel<f32> =
            build_model(SystemKind::EfPt, &cfg, TINY_D_TEXT, 5, Some(&sources)).unwrap();
        let fusion_before = params_with_prefix(&mut model, "fuse.");
        train_n_steps(&mut model, 20, 0.01, 0);

        let text_after = params_with_prefix(&mut model, "text.");
        for (name, values) in &text_after {
            let src = text_ckpt.tensor(name).unwrap();
            for (a, b) in values.iter().zip(src.data.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        let audio_after = params_with_prefix(&mut model, "audio.");
        for (name, values) in &audio_after {
            let src = audio_ckpt.tensor(name).unwrap();
            for (a, b) in values.iter().zip(src.data.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        let fusion_after = params_with_prefix(&mut model, "fuse.");
        assert_ne!(fusion_before, fusion_after);
    }

    #[test]
    fn warm_start_trains_only_the_late_conv_blocks() {
        let cfg = tiny_config();
        let (text_ckpt, audio_ckpt) = pretrained_tiny();
        let sources = PretrainedBranches {
            text: &text_ckpt,
            audio: &audio_ckpt,
        };
        let mut model: SerModel<f32> =
            build_model(SystemKind::EfWs, &cfg, TINY_D_TEXT, 5, Some(&sources)).unwrap();
        train_n_steps(&mut model, 20, 0.01, 0);

        let after = params_with_prefix(&mut model, "");
        let mut conv2_weights_changed = 0usize;
        for (name, values) in &after {
            let early = name.starts_with("text.reduce.")
                || name.starts_with("text.conv1.")
                || name.starts_with("audio.conv1.")
                || name.starts_with("text.head.")
                || name.starts_with("audio.head.");
            let source = if name.starts_with("text.") {
                Some(text_ckpt.tensor(name).unwrap())
            } else if name.starts_with("audio.") {
                Some(audio_ckpt.tensor(name).unwrap())
            } else {
                None
            };
            if early {
                let src = source.unwrap();
                for (a, b) in values.iter().zip(src.data.iter()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{name}");
                }
            } else if name.starts_with("text.conv2.weight")
                || name.starts_with("audio.conv2.weight")
            {
                let src = source.unwrap();
                if values.iter().zip(src.data.iter()).any(|(a, b)| a != b) {
                    conv2_weights_changed += 1;
                }
            }
        }
        assert_eq!(conv2_weights_changed, 2);
    }

    #[test]
    fn strategy_on_single_modality_leaves_everything_trainable() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::AudioOnly, &cfg, TINY_D_TEXT, 4, None).unwrap();
        apply_training_strategy(&mut model);
        model.visit_params(&mut |p| {
            assert!(!p.frozen, "{}", p.name);
        });
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::EfCs, &cfg, TINY_D_TEXT, 6, None).unwrap();
        model.set_dropout_active(false);
        let before = trainable_params(&mut model);
        let losses = train_n_steps(&mut model, 2, 0.0, 0);
        assert_eq!(losses[0], losses[1]);
        let after = trainable_params(&mut model);
        for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn uniform_predictions_cost_ln_four() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::TextOnly, &cfg, TINY_D_TEXT, 7, None).unwrap();
        model.visit_params(&mut |p| {
            if p.name.starts_with("text.head.") {
                for v in p.value {
                    *v = 0.0;
                }
            }
        });
        let (_, text) = tiny_batches::<f32>(true);
        let mut rng = derive_rng(8, &["ln4"]);
        let out = model.forward(None, Some(&text), false, &mut rng, false).unwrap();
        let labels = text.labels.clone().unwrap();
        let (loss, _, _) =
            weighted_softmax_xent(&out.logits, &labels, &ClassWeights::uniform()).unwrap();
        assert!((loss as f64 - 4.0f64.ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn loss_falls_on_a_separable_batch() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::AudioOnly, &cfg, TINY_D_TEXT, 11, None).unwrap();
        let b = 8;
        let t = 4;
        let mut values = Array3::from_elem((b, t, FEATURE_DIM), 0.0f32);
        for i in 0..b {
            let class = i % 4;
            for step in 0..t {
                for j in 0..FEATURE_DIM {
                    values[[i, step, j]] = if j % 4 == class { 1.0 } else { -0.25 };
                }
            }
        }
        let labels: Vec<EmotionLabel> =
            (0..b).map(|i| EmotionLabel::from_index(i % 4).unwrap()).collect();
        let batch = MaskedBatch::new(values, Array2::from_elem((b, t), true), Some(labels)).unwrap();
        let weights = ClassWeights::uniform();
        let mut adam = Adam::new(AdamConfig::new(0.01, 0));
        let mut rng = derive_rng(12, &["separable"]);
        let losses: Vec<f64> = (0..50)
            .map(|_| train_step(&mut model, Some(&batch), None, &weights, &mut adam, &mut rng).unwrap())
            .collect();
        assert!(
            losses[49] < losses[0] * 0.5,
            "first {} last {}",
            losses[0],
            losses[49]
        );
    }

    #[test]
    fn checkpoints_round_trip_byte_identically() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::EfCs, &cfg, TINY_D_TEXT, 13, None).unwrap();
        train_n_steps(&mut model, 3, 0.01, 0);
        let lineage = CheckpointLineage {
            config_hash: "abc123".to_string(),
            fold_index: 2,
            fold_signature: "deadbeef".to_string(),
            seed: 9,
        };
        let bytes = encode_checkpoint(&mut model, &lineage);
        let ckpt = parse_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt.header.lineage, lineage);
        assert_eq!(ckpt.header.kind, SystemKind::EfCs);

        let mut rebuilt = model_from_checkpoint(&ckpt).unwrap();
        let again = encode_checkpoint(&mut rebuilt, &lineage);
        assert_eq!(bytes, again);

        let a = params_with_prefix(&mut model, "");
        let b = params_with_prefix(&mut rebuilt, "");
        assert_eq!(a.len(), b.len());
        for ((name, va), (_, vb)) in a.iter().zip(b.iter()) {
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::TextOnly, &cfg, TINY_D_TEXT, 14, None).unwrap();
        let mut bytes = encode_checkpoint(&mut model, &CheckpointLineage::untrained());
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(parse_checkpoint(&bytes).is_err());
    }

    #[test]
    fn fusion_branch_reproduces_the_standalone_embedding() {
        let cfg = tiny_config();
        let (text_ckpt, audio_ckpt) = pretrained_tiny();
        let sources = PretrainedBranches {
            text: &text_ckpt,
            audio: &audio_ckpt,
        };
        let mut fusion: SerModel<f32> =
            build_model(SystemKind::EfPt, &cfg, TINY_D_TEXT, 15, Some(&sources)).unwrap();
        let mut standalone = model_from_checkpoint(&text_ckpt).unwrap();
        let (audio, text) = tiny_batches::<f32>(false);
        let (fusion_text, _) = fusion
            .pooled_embeddings(Some(&audio), Some(&text))
            .unwrap();
        let (standalone_text, _) = standalone.pooled_embeddings(None, Some(&text)).unwrap();
        let a = fusion_text.unwrap();
        let b = standalone_text.unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn dropout_activity_follows_the_strategy() {
        let cfg = tiny_config();
        let (text_ckpt, audio_ckpt) = pretrained_tiny();
        let sources = PretrainedBranches {
            text: &text_ckpt,
            audio: &audio_ckpt,
        };
        let pt: SerModel<f32> =
            build_model(SystemKind::EfPt, &cfg, TINY_D_TEXT, 16, Some(&sources)).unwrap();
        assert!(!pt.audio.as_ref().unwrap().dropout.active);
        let ws: SerModel<f32> =
            build_model(SystemKind::LfWs, &cfg, TINY_D_TEXT, 16, Some(&sources)).unwrap();
        assert!(ws.audio.as_ref().unwrap().dropout.active);
        let cs: SerModel<f32> = build_model(SystemKind::EfCs, &cfg, TINY_D_TEXT, 16, None).unwrap();
        assert!(cs.audio.as_ref().unwrap().dropout.active);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::EfCs, &cfg, TINY_D_TEXT, 17, None).unwrap();
        let (audio, text) = tiny_batches::<f32>(false);
        let mut rng = derive_rng(18, &["det"]);
        let a = model
            .forward(Some(&audio), Some(&text), false, &mut rng, false)
            .unwrap();
        let b = model
            .forward(Some(&audio), Some(&text), false, &mut rng, false)
            .unwrap();
        for (x, y) in a.logits.iter().zip(b.logits.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn added_padding_does_not_move_the_outputs() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::TextOnly, &cfg, TINY_D_TEXT, 19, None).unwrap();
        let text = random_batch::<f32>(3, 6, TINY_D_TEXT, &[6, 4, 2], false, "pad-src");
        let (b, t, d) = text.values.dim();
        let extra = 5;
        let mut padded_values = Array3::from_elem((b, t + extra, d), 0.0f32);
        let mut padded_mask = Array2::from_elem((b, t + extra), false);
        for i in 0..b {
            for step in 0..t {
                padded_mask[[i, step]] = text.mask[[i, step]];
                for j in 0..d {
                    padded_values[[i, step, j]] = text.values[[i, step, j]];
                }
            }
        }
        let padded = MaskedBatch::new(padded_values, padded_mask, None).unwrap();
        let mut rng = derive_rng(20, &["pad"]);
        let short = model.forward(None, Some(&text), false, &mut rng, false).unwrap();
        let long = model.forward(None, Some(&padded), false, &mut rng, false).unwrap();
        for (x, y) in short.logits.iter().zip(long.logits.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn pad_batch_truncates_and_masks() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f32);
        let b = Array2::from_shape_fn((7, 2), |(i, j)| (100 + i * 2 + j) as f32);
        let batch: MaskedBatch<f32> =
            pad_batch(&[&a, &b], Some(&[EmotionLabel::Happy, EmotionLabel::Sad]), 5).unwrap();
        assert_eq!(batch.values.dim(), (2, 5, 2));
        assert_eq!(batch.valid_len(0), 3);
        assert_eq!(batch.valid_len(1), 5);
        assert_eq!(batch.values[[0, 2, 1]], 5.0);
        assert_eq!(batch.values[[0, 3, 0]], 0.0);
        assert_eq!(batch.values[[1, 4, 0]], 108.0);
        assert_eq!(
            batch.labels,
            Some(vec![EmotionLabel::Happy, EmotionLabel::Sad])
        );
        let widths_differ: Result<MaskedBatch<f32>> =
            pad_batch(&[&a, &Array2::from_elem((2, 3), 0.0f32)], None, 5);
        assert!(widths_differ.is_err());
    }

    #[test]
    fn forward_rejects_missing_or_misaligned_inputs() {
        let cfg = tiny_config();
        let mut model: SerModel<f32> =
            build_model(SystemKind::EfCs, &cfg, TINY_D_TEXT, 23, None).unwrap();
        let (audio, text) = tiny_batches::<f32>(true);
        let mut rng = derive_rng(24, &["rej"]);
        assert!(model.forward(Some(&audio), None, false, &mut rng, false).is_err());
        assert!(model.forward(None, Some(&text), false, &mut rng, false).is_err());

        let small_audio = random_batch::<f32>(2, 6, FEATURE_DIM, &[6, 4], true, "audio-small");
        assert!(model
            .forward(Some(&small_audio), Some(&text), false, &mut rng, false)
            .is_err());

        let mut shifted = tiny_batches::<f32>(true).0;
        shifted.labels = Some(
            (0..4)
                .map(|i| EmotionLabel::from_index((i + 1) % 4).unwrap())
                .collect(),
        );
        assert!(model
            .forward(Some(&shifted), Some(&text), false, &mut rng, false)
            .is_err());
    }

    #[test]
    fn early_fusion_gradients_match_central_differences() {
        let err = audit_model_gradients(SystemKind::EfCs, &tiny_config(), TINY_D_TEXT, 25).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn scalar_late_fusion_gradients_match_central_differences() {
        let mut cfg = tiny_config();
        cfg.lf_scalar_combine = true;
        let err = audit_model_gradients(SystemKind::LfCs, &cfg, TINY_D_TEXT, 25).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}

