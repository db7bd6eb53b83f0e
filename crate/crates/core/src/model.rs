//! Unet-TTS: content encoder, duration predictor, statistics-skip U-net (style
//! encoder and mel decoder), plus the conditional-normalization decoder used to
//! pre-train the content encoder.
//!
//! All components share one [`ParamStore`]; parameter names are prefixed with the
//! component (`content.`, `duration.`, `style.`, `decoder.`, `pretrain.`) so training
//! stages can select what they update.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, DurationStats, FrameConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::nn::attention::AttentionCache;
use crate::nn::layers::{relu, relu_backward, ConvCache, ResCache};
use crate::nn::norm::{affine_norm, affine_norm_backward, instance_norm, instance_norm_backward, AffineNormCache};
use crate::nn::gradcheck::{flatten_grads, flatten_params, unflatten_params, Differentiable, KINK_MARGIN};
use crate::nn::{ChannelStats, Conv1d, Embedding, Grads, Linear, Mat, ParamStore, ResBlock, SelfAttention};

pub const CONTENT_PREFIX: &str = "content.";
pub const DURATION_PREFIX: &str = "duration.";
pub const STYLE_PREFIX: &str = "style.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const PRETRAIN_PREFIX: &str = "pretrain.";

/// Which style-encoder levels feed the mel decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderStats {
    /// Every decoder level gets its mirrored encoder level.
    #[default]
    All,
    /// Only the deepest pair is used; the other AdaINs receive `(0, 1)`.
    DeepestOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_phonemes: usize,
    pub hidden: usize,
    pub n_mels: usize,
    pub kernel_content: usize,
    pub kernel_unet: usize,
    pub unet_levels: usize,
    pub content_blocks: usize,
    pub dp_conv_layers: usize,
    /// Rows of the pre-training speaker table.
    pub n_speakers: usize,
    #[serde(default)]
    pub decoder_stats: DecoderStats,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// 256-d hiddens, kernels 3 (content side) and 9 (U-net side).
    pub fn paper() -> Self {
        Self {
            n_phonemes: 17,
            hidden: 256,
            n_mels: dsp::N_MELS,
            kernel_content: 3,
            kernel_unet: 9,
            unet_levels: 4,
            content_blocks: 4,
            dp_conv_layers: 2,
            n_speakers: 12,
            decoder_stats: DecoderStats::All,
        }
    }

    /// The CPU-trainable profile: same topology, 64-d hiddens.
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            ..Self::paper()
        }
    }

    /// Gradient-check profile.
    pub fn tiny() -> Self {
        Self {
            n_phonemes: 6,
            hidden: 16,
            unet_levels: 2,
            content_blocks: 2,
            n_speakers: 3,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.unet_levels < 2 {
            return bad(format!("unet_levels must be >= 2, got {}", self.unet_levels));
        }
        if self.kernel_content % 2 == 0 || self.kernel_unet % 2 == 0 {
            return bad("convolution kernels must be odd".into());
        }
        if self.hidden == 0 || self.n_mels == 0 || self.n_phonemes == 0 || self.n_speakers == 0 {
            return bad("model dimensions must be positive".into());
        }
        Ok(())
    }

    /// Same parameter layout; `decoder_stats` is a wiring choice, not a layout one.
    pub fn same_layout(&self, other: &ModelConfig) -> bool {
        ModelConfig {
            decoder_stats: other.decoder_stats,
            ..self.clone()
        } == *other
    }
}

/// Phoneme ids with optional per-phoneme frame counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub durations: Option<Vec<usize>>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self {
            ids,
            durations: None,
        }
    }

    pub fn with_durations(ids: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        validate_durations(&durations, ids.len())?;
        Ok(Self {
            ids,
            durations: Some(durations),
        })
    }

    pub fn validate(&self, n_phonemes: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Input("phoneme sequence is empty".into()));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= n_phonemes) {
            return Err(Error::Input(format!(
                "phoneme id {bad} outside inventory of {n_phonemes}"
            )));
        }
        if let Some(d) = &self.durations {
            validate_durations(d, self.ids.len())?;
        }
        Ok(())
    }
}

fn validate_durations(durations: &[usize], phonemes: usize) -> Result<()> {
    if durations.len() != phonemes {
        return Err(Error::Input(format!(
            "{} durations for {phonemes} phonemes",
            durations.len()
        )));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(Error::Input("every duration must be at least one frame".into()));
    }
    Ok(())
}

/// Per-level channel statistics from the style encoder; index 0 is the shallowest
/// level (nearest the mel input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub levels: Vec<ChannelStats>,
}

impl StyleStats {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Repeats row `i` of `hiddens` `durations[i]` times.
pub fn length_regulate(hiddens: &Mat, durations: &[usize]) -> Result<Mat> {
    validate_durations(durations, hiddens.nrows())?;
    let total: usize = durations.iter().sum();
    let mut out = Array2::zeros((total, hiddens.ncols()));
    let mut t = 0;
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            out.row_mut(t).assign(&hiddens.row(i));
            t += 1;
        }
    }
    Ok(out)
}

/// Backward of [`length_regulate`]: sums frame gradients back onto their phoneme.
pub fn length_regulate_backward(dframes: &Mat, durations: &[usize]) -> Mat {
    let mut out = Array2::zeros((durations.len(), dframes.ncols()));
    let mut t = 0;
    for (i, &d) in durations.iter().enumerate() {
        let mut row = out.row_mut(i);
        for _ in 0..d {
            row += &dframes.row(t);
            t += 1;
        }
    }
    out
}

/// Per-utterance z-scores of durations; a zero spread falls back to 1.
pub fn normalize_durations(durations: &[usize]) -> Result<Vec<f64>> {
    let stats = dsp::duration_mean_std(durations)?;
    let std = if stats.std > 0.0 { stats.std } else { 1.0 };
    Ok(durations
        .iter()
        .map(|&d| (d as f64 - stats.mean) / std)
        .collect())
}

/// `max(1, round(y * std + mean))`, rounding half away from zero.
pub fn adjust_durations(normalized: &[f64], reference: &DurationStats) -> Vec<usize> {
    normalized
        .iter()
        .map(|y| {
            let d = (y * reference.std + reference.mean).round();
            if d < 1.0 {
                1
            } else {
                d as usize
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct ContentEncoder {
    embed: Embedding,
    blocks: Vec<ResBlock>,
}

struct ContentCache {
    blocks: Vec<ResCache>,
}

impl ContentEncoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let embed = Embedding::new(store, "content.embed", cfg.n_phonemes, cfg.hidden, 1.0);
        let blocks = (0..cfg.content_blocks)
            .map(|i| ResBlock::new(store, &format!("content.block{i}"), cfg.hidden, cfg.kernel_content))
            .collect();
        Self { embed, blocks }
    }

    fn forward(&self, p: &ParamStore, ids: &[usize]) -> Result<(Mat, ContentCache)> {
        let mut h = self.embed.forward(p, ids)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(p, &h)?;
            caches.push(cache);
            h = next;
        }
        Ok((h, ContentCache { blocks: caches }))
    }

    fn backward(&self, p: &ParamStore, ids: &[usize], cache: &ContentCache, dy: &Mat, g: &mut Grads) {
        let mut d = dy.clone();
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(p, c, &d, g);
        }
        self.embed.backward(ids, &d, g);
    }
}

#[derive(Debug, Clone)]
struct DurationPredictor {
    attention: SelfAttention,
    convs: Vec<Conv1d>,
    out: Linear,
}

struct DurationCache {
    attention: AttentionCache,
    convs: Vec<(ConvCache, Mat)>,
    last: Mat,
}

impl DurationPredictor {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let attention = SelfAttention::new(store, "duration.attention", cfg.hidden);
        let convs = (0..cfg.dp_conv_layers)
            .map(|i| {
                Conv1d::new(
                    store,
                    &format!("duration.conv{i}"),
                    cfg.hidden,
                    cfg.hidden,
                    cfg.kernel_content,
                    2f64.sqrt(),
                )
            })
            .collect();
        let out = Linear::new(store, "duration.out", cfg.hidden, 1, 1.0);
        Self {
            attention,
            convs,
            out,
        }
    }

    fn forward(&self, p: &ParamStore, x: &Mat) -> Result<(Array1<f64>, DurationCache)> {
        let (a, attention) = self.attention.forward(p, x, None)?;
        let mut h = x + &a;
        let mut convs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, cache) = conv.forward(p, &h)?;
            h = relu(&pre);
            convs.push((cache, pre));
        }
        let y = self.out.forward(p, &h)?.column(0).to_owned();
        Ok((
            y,
            DurationCache {
                attention,
                convs,
                last: h,
            },
        ))
    }

    fn backward(&self, p: &ParamStore, cache: &DurationCache, dy: &Array1<f64>, g: &mut Grads) {
        let dy = dy.clone().insert_axis(Axis(1));
        let mut d = self.out.backward(p, &cache.last, &dy, g);
        for (conv, (c, pre)) in self.convs.iter().zip(&cache.convs).rev() {
            d = conv.backward(p, c, &relu_backward(pre, &d), g);
        }
        // Residual around attention; the input itself is detached.
        self.attention.backward(p, &cache.attention, &d, g);
    }
}

#[derive(Debug, Clone)]
struct StyleEncoder {
    proj: Conv1d,
    blocks: Vec<ResBlock>,
}

struct StyleCache {
    proj: ConvCache,
    levels: Vec<(ResCache, Mat, ChannelStats)>,
}

impl StyleEncoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let proj = Conv1d::new(store, "style.proj", cfg.n_mels, cfg.hidden, cfg.kernel_unet, 1.0);
        let blocks = (0..cfg.unet_levels)
            .map(|i| ResBlock::new(store, &format!("style.level{i}"), cfg.hidden, cfg.kernel_unet))
            .collect();
        Self { proj, blocks }
    }

    /// Per level: ResCnn, read the channel stats, IN. Returns stats (shallow first)
    /// and the last normalized hidden as `content_pred`.
    fn forward(&self, p: &ParamStore, mel: &Mat) -> Result<(StyleStats, Mat, StyleCache)> {
        if mel.nrows() == 0 {
            return Err(Error::Input("reference mel has no frames".into()));
        }
        let (mut h, proj) = self.proj.forward(p, mel)?;
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (r, rc) = block.forward(p, &h)?;
            let (normed, s) = instance_norm(&r);
            stats.push(s.clone());
            h = normed.clone();
            levels.push((rc, normed, s));
        }
        Ok((StyleStats { levels: stats }, h, StyleCache { proj, levels }))
    }

    fn backward(
        &self,
        p: &ParamStore,
        cache: &StyleCache,
        dstats: &[(Array1<f64>, Array1<f64>)],
        dcontent_pred: &Mat,
        g: &mut Grads,
    ) {
        let mut d = dcontent_pred.clone();
        for (i, (block, (rc, normed, s))) in self.blocks.iter().zip(&cache.levels).enumerate().rev() {
            let (dm, ds) = &dstats[i];
            d = instance_norm_backward(normed, s, &d, Some(dm), Some(ds));
            d = block.backward(p, rc, &d, g);
        }
        self.proj.backward(p, &cache.proj, &d, g);
    }
}

#[derive(Debug, Clone)]
struct MelDecoder {
    blocks: Vec<ResBlock>,
    out: Linear,
    mode: DecoderStats,
}

struct DecoderCache {
    levels: Vec<(AffineNormCache, Array1<f64>, ResCache)>,
    last: Mat,
    /// Encoder level consumed by each decoder level; `None` means `(0, 1)`.
    pub wiring: Vec<Option<usize>>,
    /// Hidden right after each AdaIN, before the residual block.
    pub post_adain: Vec<Mat>,
}

impl MelDecoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let blocks = (0..cfg.unet_levels)
            .map(|j| ResBlock::new(store, &format!("decoder.level{j}"), cfg.hidden, cfg.kernel_unet))
            .collect();
        let out = Linear::new(store, "decoder.out", cfg.hidden, cfg.n_mels, 1.0);
        Self {
            blocks,
            out,
            mode: cfg.decoder_stats,
        }
    }

    /// Encoder level feeding decoder level `j`: the U-net mirror `L - 1 - j`.
    fn source_level(&self, j: usize) -> Option<usize> {
        let l = self.blocks.len();
        match self.mode {
            DecoderStats::All => Some(l - 1 - j),
            DecoderStats::DeepestOnly => (j == 0).then_some(l - 1),
        }
    }

    fn forward(&self, p: &ParamStore, content: &Mat, stats: &StyleStats) -> Result<(Mat, DecoderCache)> {
        if stats.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "decoder has {} levels, got {} stat pairs",
                self.blocks.len(),
                stats.len()
            )));
        }
        let channels = content.ncols();
        let identity = ChannelStats::identity(channels);
        let mut h = content.clone();
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut wiring = Vec::with_capacity(self.blocks.len());
        let mut post_adain = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            let src = self.source_level(j);
            let s = src.map_or(&identity, |i| &stats.levels[i]);
            let (a, ac) = affine_norm(&h, &s.std, &s.mean)?;
            let (next, rc) = block.forward(p, &a)?;
            post_adain.push(a);
            levels.push((ac, s.std.clone(), rc));
            wiring.push(src);
            h = next;
        }
        let mel = self.out.forward(p, &h)?;
        Ok((
            mel,
            DecoderCache {
                levels,
                last: h,
                wiring,
                post_adain,
            },
        ))
    }

    /// Returns the gradient on the content input and on each stats level (mean, std).
    fn backward(
        &self,
        p: &ParamStore,
        cache: &DecoderCache,
        dmel: &Mat,
        g: &mut Grads,
    ) -> (Mat, Vec<(Array1<f64>, Array1<f64>)>) {
        let channels = cache.last.ncols();
        let mut dstats = vec![(Array1::zeros(channels), Array1::zeros(channels)); self.blocks.len()];
        let mut d = self.out.backward(p, &cache.last, dmel, g);
        for (j, block) in self.blocks.iter().enumerate().rev() {
            let (ac, scale, rc) = &cache.levels[j];
            d = block.backward(p, rc, &d, g);
            let (dx, dscale, dshift) = affine_norm_backward(ac, scale, &d);
            if let Some(i) = cache.wiring[j] {
                dstats[i].0 += &dshift;
                dstats[i].1 += &dscale;
            }
            d = dx;
        }
        (d, dstats)
    }
}

/// Decoder of the pre-training model: conditional normalization driven by a
/// trainable speaker table.
#[derive(Debug, Clone)]
struct PretrainDecoder {
    speakers: Embedding,
    cond: Vec<(Linear, Linear)>,
    blocks: Vec<ResBlock>,
    out: Linear,
}

struct PretrainCache {
    speaker: Mat,
    levels: Vec<(AffineNormCache, Array1<f64>, ResCache)>,
    last: Mat,
}

impl PretrainDecoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let speakers = Embedding::new(store, "pretrain.speakers", cfg.n_speakers, cfg.hidden, 1.0);
        let mut cond = Vec::with_capacity(cfg.unet_levels);
        let mut blocks = Vec::with_capacity(cfg.unet_levels);
        for j in 0..cfg.unet_levels {
            let mean = Linear::new(store, &format!("pretrain.level{j}.mean"), cfg.hidden, cfg.hidden, 0.1);
            let std = Linear::new(store, &format!("pretrain.level{j}.std"), cfg.hidden, cfg.hidden, 0.1);
            store.get_mut(std.b).fill(1.0);
            cond.push((mean, std));
            blocks.push(ResBlock::new(store, &format!("pretrain.level{j}"), cfg.hidden, cfg.kernel_unet));
        }
        let out = Linear::new(store, "pretrain.out", cfg.hidden, cfg.n_mels, 1.0);
        Self {
            speakers,
            cond,
            blocks,
            out,
        }
    }

    fn forward(&self, p: &ParamStore, content: &Mat, speaker: usize) -> Result<(Mat, PretrainCache)> {
        if speaker >= self.speakers.n {
            return Err(Error::Input(format!(
                "speaker {speaker} not in table of {}",
                self.speakers.n
            )));
        }
        let s = self.speakers.forward(p, &[speaker])?;
        let mut h = content.clone();
        let mut levels = Vec::with_capacity(self.blocks.len());
        for ((mean_map, std_map), block) in self.cond.iter().zip(&self.blocks) {
            let mean = mean_map.forward(p, &s)?.row(0).to_owned();
            let std = std_map.forward(p, &s)?.row(0).to_owned();
            let (a, ac) = affine_norm(&h, &std, &mean)?;
            let (next, rc) = block.forward(p, &a)?;
            levels.push((ac, std, rc));
            h = next;
        }
        let mel = self.out.forward(p, &h)?;
        Ok((
            mel,
            PretrainCache {
                speaker: s,
                levels,
                last: h,
            },
        ))
    }

    fn backward(&self, p: &ParamStore, speaker: usize, cache: &PretrainCache, dmel: &Mat, g: &mut Grads) -> Mat {
        let mut d = self.out.backward(p, &cache.last, dmel, g);
        let mut dspeaker = Array2::zeros(cache.speaker.raw_dim());
        for (j, block) in self.blocks.iter().enumerate().rev() {
            let (ac, std, rc) = &cache.levels[j];
            d = block.backward(p, rc, &d, g);
            let (dx, dscale, dshift) = affine_norm_backward(ac, std, &d);
            let (mean_map, std_map) = &self.cond[j];
            dspeaker += &mean_map.backward(p, &cache.speaker, &dshift.insert_axis(Axis(0)), g);
            dspeaker += &std_map.backward(p, &cache.speaker, &dscale.insert_axis(Axis(0)), g);
            d = dx;
        }
        self.speakers.backward(&[speaker], &dspeaker, g);
        d
    }
}

/// Summed loss terms of one utterance with their element counts, so a batch can
/// normalize over all real frames at once.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    pub l1_mel: f64,
    pub mel_count: usize,
    pub l2_content: f64,
    pub content_count: usize,
    pub sq_duration: f64,
    pub duration_count: usize,
    /// Smallest |ReLU pre-activation| / |L1 residual| seen; used by gradient checks.
    pub min_kink_distance: f64,
}

impl LossSums {
    pub fn add(&mut self, other: &LossSums) {
        self.l1_mel += other.l1_mel;
        self.mel_count += other.mel_count;
        self.l2_content += other.l2_content;
        self.content_count += other.content_count;
        self.sq_duration += other.sq_duration;
        self.duration_count += other.duration_count;
        self.min_kink_distance = self.min_kink_distance.min(other.min_kink_distance);
    }
}

/// Weights applied to the summed terms in the backward pass (loss weight divided
/// by the batch element count).
#[derive(Debug, Clone, Copy)]
pub struct LossScale {
    pub mel: f64,
    pub content: f64,
    pub duration: f64,
}

fn min_abs(m: &Mat) -> f64 {
    m.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
}

fn res_kinks<'a>(caches: impl Iterator<Item = &'a ResCache>) -> f64 {
    caches.fold(f64::INFINITY, |a, c| a.min(min_abs(&c.pre)))
}

/// L1 sum and its gradient `scale * sign(pred - target)`.
fn l1_terms(pred: &Mat, target: &Mat, scale: f64) -> (f64, Mat, f64) {
    let diff = pred - target;
    let sum = diff.iter().map(|v| v.abs()).sum();
    let grad = diff.mapv(|v| scale * v.signum() * (v != 0.0) as u8 as f64);
    (sum, grad, min_abs(&diff))
}

/// The full model.
#[derive(Debug, Clone)]
pub struct UnetTts {
    pub config: ModelConfig,
    pub params: ParamStore,
    content: ContentEncoder,
    duration: DurationPredictor,
    style: StyleEncoder,
    decoder: MelDecoder,
    pretrain: PretrainDecoder,
}

/// Intermediate values of one synthesis pass, for inspection.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub wiring: Vec<Option<usize>>,
    pub post_adain: Vec<Mat>,
}

impl UnetTts {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        let content = ContentEncoder::new(&mut params, &config);
        let duration = DurationPredictor::new(&mut params, &config);
        let style = StyleEncoder::new(&mut params, &config);
        let decoder = MelDecoder::new(&mut params, &config);
        let pretrain = PretrainDecoder::new(&mut params, &config);
        Ok(Self {
            config,
            params,
            content,
            duration,
            style,
            decoder,
            pretrain,
        })
    }

    /// Switches the decoder's stats wiring without touching parameters.
    pub fn set_decoder_stats(&mut self, mode: DecoderStats) {
        self.config.decoder_stats = mode;
        self.decoder.mode = mode;
    }

    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig {
            n_mels: self.config.n_mels,
            ..FrameConfig::default()
        }
    }

    /// Embedding lookup then `content_blocks` residual blocks: `P x hidden`.
    pub fn content_encode(&self, phones: &PhonemeSequence) -> Result<Mat> {
        phones.validate(self.config.n_phonemes)?;
        Ok(self.content.forward(&self.params, &phones.ids)?.0)
    }

    /// Per-phoneme normalized (z-scored) durations.
    pub fn predict_durations_normalized(&self, phoneme_hiddens: &Mat) -> Result<Vec<f64>> {
        Ok(self.duration.forward(&self.params, phoneme_hiddens)?.0.to_vec())
    }

    pub fn style_encode(&self, ref_mel: &Mat) -> Result<(StyleStats, Mat)> {
        let (stats, content_pred, _) = self.style.forward(&self.params, ref_mel)?;
        Ok((stats, content_pred))
    }

    pub fn mel_decode(&self, content: &Mat, stats: &StyleStats) -> Result<Mat> {
        Ok(self.decoder.forward(&self.params, content, stats)?.0)
    }

    /// Like [`Self::mel_decode`], also returning which encoder level fed each
    /// decoder level and the hidden right after every AdaIN.
    pub fn mel_decode_traced(&self, content: &Mat, stats: &StyleStats) -> Result<(Mat, DecodeTrace)> {
        let (mel, cache) = self.decoder.forward(&self.params, content, stats)?;
        Ok((
            mel,
            DecodeTrace {
                wiring: cache.wiring,
                post_adain: cache.post_adain,
            },
        ))
    }

    /// Text plus one reference utterance to a mel spectrogram and the chosen durations.
    pub fn synthesize(
        &self,
        phones: &PhonemeSequence,
        ref_mel: &MelSpectrogram,
        ref_durations: &[usize],
    ) -> Result<(MelSpectrogram, Vec<usize>)> {
        let hiddens = self.content_encode(phones)?;
        let normalized = self.predict_durations_normalized(&hiddens)?;
        let durations = adjust_durations(&normalized, &dsp::duration_mean_std(ref_durations)?);
        let content = length_regulate(&hiddens, &durations)?;
        let (stats, _) = self.style_encode(&ref_mel.data)?;
        let mel = self.mel_decode(&content, &stats)?;
        Ok((MelSpectrogram::new(mel, &ref_mel.frame_config())?, durations))
    }

    /// Pre-training model output with ground-truth durations.
    pub fn pretrain_forward(&self, phones: &PhonemeSequence, durations: &[usize], speaker: usize) -> Result<Mat> {
        phones.validate(self.config.n_phonemes)?;
        let hiddens = self.content.forward(&self.params, &phones.ids)?.0;
        let content = length_regulate(&hiddens, durations)?;
        Ok(self.pretrain.forward(&self.params, &content, speaker)?.0)
    }

    /// Stage-1 loss terms for one utterance; accumulates `scale`-weighted gradients
    /// into `grads` when given. The duration head sees a detached copy of the
    /// content hiddens.
    #[allow(clippy::too_many_arguments)]
    pub fn stage1_terms(
        &self,
        ids: &[usize],
        durations: &[usize],
        mel: &Mat,
        speaker: usize,
        scale: LossScale,
        grads: Option<&mut Grads>,
        detached_content: Option<&Mat>,
    ) -> Result<LossSums> {
        let p = &self.params;
        let (hiddens, ccache) = self.content.forward(p, ids)?;
        let content = length_regulate(&hiddens, durations)?;
        check_alignment(content.nrows(), mel.nrows())?;
        let (pred, pcache) = self.pretrain.forward(p, &content, speaker)?;
        let (l1, dmel, l1_kink) = l1_terms(&pred, mel, scale.mel);

        let dp_input = detached_content.unwrap_or(&hiddens);
        let (dur_pred, dcache) = self.duration.forward(p, dp_input)?;
        let target = Array1::from(normalize_durations(durations)?);
        let dur_diff = &dur_pred - &target;
        let sq = dur_diff.mapv(|v| v * v).sum();

        let kinks = res_kinks(ccache.blocks.iter())
            .min(res_kinks(pcache.levels.iter().map(|l| &l.2)))
            .min(dcache.convs.iter().fold(f64::INFINITY, |a, (_, pre)| a.min(min_abs(pre))))
            .min(l1_kink);

        if let Some(g) = grads {
            let dcontent = self.pretrain.backward(p, speaker, &pcache, &dmel, g);
            let dhiddens = length_regulate_backward(&dcontent, durations);
            self.content.backward(p, ids, &ccache, &dhiddens, g);
            self.duration.backward(p, &dcache, &(dur_diff * (2.0 * scale.duration)), g);
        }
        Ok(LossSums {
            l1_mel: l1,
            mel_count: mel.len(),
            sq_duration: sq,
            duration_count: ids.len(),
            min_kink_distance: kinks,
            ..LossSums::default()
        })
    }

    /// Stage-2 loss terms for one utterance (`ref_mel` is the target itself).
    /// Gradients reach only the style encoder and mel decoder.
    pub fn stage2_terms(
        &self,
        ids: &[usize],
        durations: &[usize],
        mel: &Mat,
        scale: LossScale,
        grads: Option<&mut Grads>,
    ) -> Result<LossSums> {
        let p = &self.params;
        let (hiddens, ccache) = self.content.forward(p, ids)?;
        let content = length_regulate(&hiddens, durations)?;
        check_alignment(content.nrows(), mel.nrows())?;
        let (stats, content_pred, scache) = self.style.forward(p, mel)?;
        check_alignment(content.nrows(), content_pred.nrows())?;
        let (pred, dcache) = self.decoder.forward(p, &content, &stats)?;
        let (l1, dmel, l1_kink) = l1_terms(&pred, mel, scale.mel);
        let cdiff = &content_pred - &content;
        let l2 = cdiff.mapv(|v| v * v).sum();

        let kinks = res_kinks(ccache.blocks.iter())
            .min(res_kinks(scache.levels.iter().map(|l| &l.0)))
            .min(res_kinks(dcache.levels.iter().map(|l| &l.2)))
            .min(l1_kink);

        if let Some(g) = grads {
            let (_, dstats) = self.decoder.backward(p, &dcache, &dmel, g);
            let dcontent_pred = cdiff * (2.0 * scale.content);
            self.style.backward(p, &scache, &dstats, &dcontent_pred, g);
        }
        Ok(LossSums {
            l1_mel: l1,
            mel_count: mel.len(),
            l2_content: l2,
            content_count: content.len(),
            min_kink_distance: kinks,
            ..LossSums::default()
        })
    }
}

impl UnetTts {
    /// Mean squared error of the duration head on a batch against z-scored target
    /// durations. The content encoder is treated as fixed; gradients (scaled by
    /// `weight`) reach only the duration head.
    pub fn batch_duration_loss(&self, items: &[TrainItem], weight: f64, mut grads: Option<&mut Grads>) -> Result<f64> {
        let count: usize = items.iter().map(|it| it.ids.len()).sum();
        if count == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let mut sq = 0.0;
        for it in items {
            let (hiddens, _) = self.content.forward(&self.params, &it.ids)?;
            let (pred, cache) = self.duration.forward(&self.params, &hiddens)?;
            let diff = &pred - &Array1::from(normalize_durations(&it.durations)?);
            sq += diff.mapv(|v| v * v).sum();
            if let Some(g) = grads.as_deref_mut() {
                self.duration.backward(&self.params, &cache, &(diff * (2.0 * weight / count as f64)), g);
            }
        }
        Ok(sq / count as f64)
    }
}

fn check_alignment(content_frames: usize, target_frames: usize) -> Result<()> {
    if content_frames != target_frames {
        return Err(Error::Alignment(format!(
            "expanded content has {content_frames} frames, target has {target_frames}"
        )));
    }
    Ok(())
}

/// Training stage: 1 pre-trains the content encoder and duration head, 2 trains the
/// U-net on top of the frozen content side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Pretrain,
    Transfer,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(n: u8) -> std::result::Result<Self, String> {
        match n {
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::Transfer),
            other => Err(format!("stage must be 1 or 2, got {other}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::Transfer => 2,
        }
    }

    /// Parameter-name prefixes this stage updates.
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Pretrain => &[CONTENT_PREFIX, DURATION_PREFIX, PRETRAIN_PREFIX],
            Stage::Transfer => &[STYLE_PREFIX, DECODER_PREFIX],
        }
    }

    pub fn trains(self, name: &str) -> bool {
        self.prefixes().iter().any(|p| name.starts_with(p))
    }
}

/// One aligned training utterance.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub ids: Vec<usize>,
    pub durations: Vec<usize>,
    pub mel: Mat,
    pub speaker: usize,
}

/// Loss weights; stage 1 uses `mel` and `duration`, stage 2 `mel` and `content`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mel: f64,
    pub content: f64,
    pub duration: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 1.0,
            content: 1.0,
            duration: 1.0,
        }
    }
}

/// Batch loss with each term averaged over every real element in the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub mel: f64,
    /// Content MSE (stage 2) or normalized-duration MSE (stage 1).
    pub aux: f64,
    pub min_kink_distance: f64,
}

impl UnetTts {
    /// Weighted batch loss, accumulating gradients into `grads` when given.
    /// `detached` optionally fixes the duration head's input per item (stage 1).
    pub fn batch_loss(
        &self,
        stage: Stage,
        items: &[TrainItem],
        weights: LossWeights,
        mut grads: Option<&mut Grads>,
        detached: Option<&[Mat]>,
    ) -> Result<BatchLoss> {
        if items.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let frames: usize = items.iter().map(|it| it.durations.iter().sum::<usize>()).sum();
        let phonemes: usize = items.iter().map(|it| it.ids.len()).sum();
        let mel_count = (frames * self.config.n_mels) as f64;
        let scale = LossScale {
            mel: weights.mel / mel_count,
            content: weights.content / (frames * self.config.hidden) as f64,
            duration: weights.duration / phonemes as f64,
        };
        let mut sums = LossSums {
            min_kink_distance: f64::INFINITY,
            ..LossSums::default()
        };
        for (i, it) in items.iter().enumerate() {
            let g = grads.as_deref_mut();
            let terms = match stage {
                Stage::Pretrain => self.stage1_terms(
                    &it.ids,
                    &it.durations,
                    &it.mel,
                    it.speaker,
                    scale,
                    g,
                    detached.map(|d| &d[i]),
                )?,
                Stage::Transfer => self.stage2_terms(&it.ids, &it.durations, &it.mel, scale, g)?,
            };
            sums.add(&terms);
        }
        let mel = sums.l1_mel / mel_count;
        let (aux, aux_weight) = match stage {
            Stage::Pretrain => (sums.sq_duration / sums.duration_count as f64, weights.duration),
            Stage::Transfer => (sums.l2_content / sums.content_count as f64, weights.content),
        };
        Ok(BatchLoss {
            total: weights.mel * mel + aux_weight * aux,
            mel,
            aux,
            min_kink_distance: sums.min_kink_distance,
        })
    }
}

/// Finite-difference check of a full training loss over the stage's trainable
/// parameters, on a small random batch.
pub struct CompositeCheck {
    name: String,
    model: UnetTts,
    stage: Stage,
    items: Vec<TrainItem>,
    detached: Option<Vec<Mat>>,
    coords: Vec<usize>,
}

impl CompositeCheck {
    /// Draws a batch and model at `seed`, redrawing while any ReLU pre-activation
    /// or L1 residual sits within [`KINK_MARGIN`] of its kink.
    pub fn sample(config: &ModelConfig, stage: Stage, seed: u64, per_param: usize) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        for attempt in 0..200u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(attempt));
            let model = UnetTts::new(config.clone(), rng.random())?;
            let items: Vec<TrainItem> = (0..2)
                .map(|_| {
                    let p = rng.random_range(2..5);
                    let ids: Vec<usize> = (0..p).map(|_| rng.random_range(0..config.n_phonemes)).collect();
                    let durations: Vec<usize> = (0..p).map(|_| rng.random_range(1..4)).collect();
                    let t: usize = durations.iter().sum();
                    let mel = Array2::from_shape_simple_fn((t, config.n_mels), || rng.random_range(-2.0..2.0));
                    TrainItem {
                        ids,
                        durations,
                        mel,
                        speaker: rng.random_range(0..config.n_speakers),
                    }
                })
                .collect();
            let probe = model.batch_loss(stage, &items, LossWeights::default(), None, None)?;
            if probe.min_kink_distance < KINK_MARGIN {
                continue;
            }
            let detached = match stage {
                Stage::Pretrain => Some(
                    items
                        .iter()
                        .map(|it| model.content_encode(&PhonemeSequence::new(it.ids.clone())))
                        .collect::<Result<Vec<_>>>()?,
                ),
                Stage::Transfer => None,
            };
            let mut coords = Vec::new();
            let mut offset = 0;
            for (_, name, value) in model.params.iter() {
                if stage.trains(name) {
                    for _ in 0..per_param.min(value.len()) {
                        coords.push(offset + rng.random_range(0..value.len()));
                    }
                }
                offset += value.len();
            }
            return Ok(Self {
                name: format!("stage{}_loss", stage.number()),
                model,
                stage,
                items,
                detached,
                coords,
            });
        }
        Err(Error::State("could not draw a kink-free gradient-check point".into()))
    }

    fn at(&self, point: &[f64]) -> UnetTts {
        let mut m = self.model.clone();
        unflatten_params(&mut m.params, point);
        m
    }
}

impl Differentiable for CompositeCheck {
    fn name(&self) -> &str {
        &self.name
    }

    fn point(&self) -> Vec<f64> {
        flatten_params(&self.model.params)
    }

    fn value(&self, point: &[f64]) -> Result<f64> {
        let m = self.at(point);
        let loss = m.batch_loss(
            self.stage,
            &self.items,
            LossWeights::default(),
            None,
            self.detached.as_deref(),
        )?;
        Ok(loss.total)
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        let m = self.at(point);
        let mut g = m.params.zero_grads();
        m.batch_loss(
            self.stage,
            &self.items,
            LossWeights::default(),
            Some(&mut g),
            self.detached.as_deref(),
        )?;
        Ok(flatten_grads(&g))
    }

    fn coordinates(&self) -> Vec<usize> {
        self.coords.clone()
    }
}

/// Max relative finite-difference error of every nn op and both stage losses,
/// over `seeds` draws each, as `(name, error)` in run order.
pub fn gradient_suite(config: &ModelConfig, seeds: u64) -> Result<Vec<(String, f64)>> {
    use crate::nn::gradcheck::{finite_diff_check, op_cases, DEFAULT_STEP};
    let mut out = Vec::new();
    for seed in 0..seeds {
        for case in op_cases(seed) {
            let err = finite_diff_check(&case, &case.point(), DEFAULT_STEP)?;
            out.push((format!("{}#{seed}", case.name()), err));
        }
    }
    for stage in [Stage::Pretrain, Stage::Transfer] {
        for seed in 0..seeds {
            let check = CompositeCheck::sample(config, stage, seed, 6)?;
            let err = finite_diff_check(&check, &check.point(), DEFAULT_STEP)?;
            out.push((format!("{}#{seed}", check.name()), err));
        }
    }
    Ok(out)
}

/// Zeroes a parameter group (used by tests and ablations).
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    for id in store.ids_with_prefix(prefix).collect::<Vec<_>>() {
        store.get_mut(id).fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> UnetTts {
        UnetTts::new(ModelConfig::tiny(), 5).unwrap()
    }

    fn random_mel(t: usize, seed: u64) -> Mat {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((t, 80), || rng.random_range(-3.0..1.0))
    }

    fn mel_spec(t: usize, seed: u64) -> MelSpectrogram {
        MelSpectrogram::new(random_mel(t, seed), &FrameConfig::default()).unwrap()
    }

    #[test]
    fn content_shape_and_range() {
        let m = tiny();
        let h = m.content_encode(&PhonemeSequence::new(vec![0, 1, 5, 2])).unwrap();
        assert_eq!(h.dim(), (4, 16));
        assert!(matches!(
            m.content_encode(&PhonemeSequence::new(vec![6])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zeroed_content_blocks_return_embeddings() {
        let mut m = tiny();
        for id in m.params.ids_with_prefix("content.block").collect::<Vec<_>>() {
            m.params.get_mut(id).fill(0.0);
        }
        let ids = vec![3, 1, 4];
        let h = m.content_encode(&PhonemeSequence::new(ids.clone())).unwrap();
        let table = m.params.get(m.content.embed.table);
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(h.row(i), table.row(id));
        }
    }

    #[test]
    fn content_receptive_field() {
        // Two convolutions per block, each reaching (k-1)/2 frames either way.
        let m = tiny();
        let cfg = &m.config;
        let radius = cfg.content_blocks * (cfg.kernel_content - 1);
        let ids: Vec<usize> = (0..16).map(|i| i % 5).collect();
        let mut swapped = ids.clone();
        swapped[0] = 4;
        swapped[15] = 3;
        let a = m.content_encode(&PhonemeSequence::new(ids)).unwrap();
        let b = m.content_encode(&PhonemeSequence::new(swapped)).unwrap();
        for t in 0..16 {
            let near = t <= radius || t >= 15 - radius;
            let same = a.row(t) == b.row(t);
            assert_eq!(same, !near, "frame {t}");
        }
    }

    #[test]
    fn length_regulator_examples() {
        let h = Array2::from_shape_fn((3, 2), |(i, c)| (10 * i + c) as f64);
        let out = length_regulate(&h, &[2, 3, 1]).unwrap();
        assert_eq!(out.nrows(), 6);
        assert_eq!(out.row(4), h.row(1));
        assert_eq!(length_regulate(&h, &[1, 1, 1]).unwrap(), h);
        let one = length_regulate(&h.slice(ndarray::s![0..1, ..]).to_owned(), &[3]).unwrap();
        assert!(one.rows().into_iter().all(|r| r == h.row(0)));
        assert!(matches!(length_regulate(&h, &[1, 0, 1]), Err(Error::Input(_))));
    }

    #[test]
    fn adjust_examples() {
        let s = |mean, std| DurationStats { mean, std };
        assert_eq!(adjust_durations(&[1.0, -1.0, 0.0], &s(4.0, 2.0)), vec![6, 2, 4]);
        assert_eq!(adjust_durations(&[0.0, 0.0], &s(5.0, 2.0)), vec![5, 5]);
        assert_eq!(adjust_durations(&[-3.0], &s(2.0, 1.0)), vec![1]);
        // Half rounds away from zero.
        assert_eq!(adjust_durations(&[0.25], &s(2.0, 2.0)), vec![3]);
    }

    #[test]
    fn z_score_targets() {
        let z = normalize_durations(&[2, 4, 6]).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(normalize_durations(&[3, 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn duration_head_shape_and_zero_output() {
        let mut m = tiny();
        let h = m.content_encode(&PhonemeSequence::new(vec![1, 2, 3, 4, 5])).unwrap();
        assert_eq!(m.predict_durations_normalized(&h).unwrap().len(), 5);
        m.params.get_mut(m.duration.out.w).fill(0.0);
        assert!(m.predict_durations_normalized(&h).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn style_encoder_shapes() {
        let m = tiny();
        let (stats, content_pred) = m.style_encode(&random_mel(11, 1)).unwrap();
        assert_eq!(stats.len(), m.config.unet_levels);
        assert!(stats.levels.iter().all(|s| s.dim() == 16 && s.std.iter().all(|&v| v > 0.0)));
        assert_eq!(content_pred.nrows(), 11);
    }

    #[test]
    fn constant_reference_gives_degenerate_stats() {
        let m = tiny();
        let (stats, _) = m.style_encode(&Array2::from_elem((1, 80), -2.0)).unwrap();
        for s in &stats.levels {
            assert!(s.std.iter().all(|&v| (v - crate::nn::IN_EPS.sqrt()).abs() < 1e-6));
        }
    }

    #[test]
    fn style_stats_dimension_is_length_invariant() {
        let m = tiny();
        for t in [1, 2, 17, 40] {
            let (stats, _) = m.style_encode(&random_mel(t, t as u64)).unwrap();
            assert_eq!(stats.len(), 2);
            assert!(stats.levels.iter().all(|s| s.dim() == 16));
        }
    }

    #[test]
    fn decoder_mirror_wiring() {
        let m = UnetTts::new(ModelConfig { unet_levels: 4, ..ModelConfig::tiny() }, 1).unwrap();
        let (stats, _) = m.style_encode(&random_mel(8, 2)).unwrap();
        let content = Array2::from_elem((5, 16), 0.3);
        let (mel, trace) = m.mel_decode_traced(&content, &stats).unwrap();
        assert_eq!(mel.dim(), (5, 80));
        assert_eq!(trace.wiring, vec![Some(3), Some(2), Some(1), Some(0)]);

        let mut ablated = m.clone();
        ablated.set_decoder_stats(DecoderStats::DeepestOnly);
        let (_, trace) = ablated.mel_decode_traced(&content, &stats).unwrap();
        assert_eq!(trace.wiring, vec![Some(3), None, None, None]);
    }

    #[test]
    fn decoder_rejects_wrong_level_count() {
        let m = tiny();
        let (mut stats, _) = m.style_encode(&random_mel(8, 2)).unwrap();
        stats.levels.pop();
        assert!(matches!(
            m.mel_decode(&Array2::zeros((3, 16)), &stats),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn doubling_stds_doubles_post_adain_deviation() {
        let m = UnetTts::new(ModelConfig { unet_levels: 3, ..ModelConfig::tiny() }, 3).unwrap();
        let (stats, _) = m.style_encode(&random_mel(12, 4)).unwrap();
        let mut doubled = stats.clone();
        for s in &mut doubled.levels {
            s.std.mapv_inplace(|v| 2.0 * v);
        }
        let content = m.content_encode(&PhonemeSequence::new(vec![1, 2, 3, 4, 0, 5])).unwrap();
        let (_, a) = m.mel_decode_traced(&content, &stats).unwrap();
        let (_, b) = m.mel_decode_traced(&content, &doubled).unwrap();
        for (j, (pa, pb)) in a.post_adain.iter().zip(&b.post_adain).enumerate() {
            let sa = ChannelStats::of(pa);
            let sb = ChannelStats::of(pb);
            let src = &stats.levels[a.wiring[j].unwrap()];
            // Deviation around the injected mean, measured right after the AdaIN.
            for c in 0..16 {
                let dev_a = (sa.std[c].powi(2) - crate::nn::IN_EPS).max(0.0).sqrt();
                let dev_b = (sb.std[c].powi(2) - crate::nn::IN_EPS).max(0.0).sqrt();
                assert!((dev_b - 2.0 * dev_a).abs() < 1e-4 * (1.0 + dev_a), "level {j} ch {c}");
                assert!((sb.mean[c] - src.mean[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn synthesize_shape_law_and_determinism() {
        let m = tiny();
        let phones = PhonemeSequence::new(vec![0, 3, 2, 5, 1, 0]);
        let ref_mel = mel_spec(20, 7);
        let ref_durations = [3, 4, 2, 5, 6];
        let (mel, durations) = m.synthesize(&phones, &ref_mel, &ref_durations).unwrap();
        assert_eq!(mel.frames(), durations.iter().sum::<usize>());
        assert_eq!(mel.n_mels, 80);
        let (again, _) = tiny().synthesize(&phones, &ref_mel, &ref_durations).unwrap();
        assert_eq!(mel, again);
    }

    #[test]
    fn slow_reference_gives_longer_durations() {
        let m = tiny();
        let phones = PhonemeSequence::new(vec![1, 2, 3, 4, 5, 1, 2]);
        let base = [2usize, 3, 4, 2, 5, 3, 4, 2];
        let slow: Vec<usize> = base.iter().map(|&d| (d as f64 * 1.5).round() as usize).collect();
        let fast: Vec<usize> = base.iter().map(|&d| ((d as f64 * 0.7).round() as usize).max(1)).collect();
        let ref_mel = mel_spec(10, 1);
        let (_, ds) = m.synthesize(&phones, &ref_mel, &slow).unwrap();
        let (_, df) = m.synthesize(&phones, &ref_mel, &fast).unwrap();
        let mean = |d: &[usize]| d.iter().sum::<usize>() as f64 / d.len() as f64;
        assert!(mean(&ds) > mean(&df));
    }

    #[test]
    fn pretrain_shapes_and_speakers() {
        let mut m = tiny();
        let phones = PhonemeSequence::new(vec![1, 2, 3]);
        let out = m.pretrain_forward(&phones, &[2, 1, 4], 0).unwrap();
        assert_eq!(out.dim(), (7, 80));
        assert!(matches!(
            m.pretrain_forward(&phones, &[2, 1, 4], 3),
            Err(Error::Input(_))
        ));
        // Identical table rows give identical outputs.
        let table = m.pretrain.speakers.table;
        let row0 = m.params.get(table).row(0).to_owned();
        m.params.get_mut(table).row_mut(2).assign(&row0);
        assert_eq!(
            m.pretrain_forward(&phones, &[2, 1, 4], 0).unwrap(),
            m.pretrain_forward(&phones, &[2, 1, 4], 2).unwrap()
        );
    }

    #[test]
    fn conditional_norm_identity_degenerates_to_plain_in() {
        let mut m = tiny();
        for (mean_map, std_map) in m.pretrain.cond.clone() {
            m.params.get_mut(mean_map.w).fill(0.0);
            m.params.get_mut(mean_map.b).fill(0.0);
            m.params.get_mut(std_map.w).fill(0.0);
            m.params.get_mut(std_map.b).fill(1.0);
        }
        let phones = PhonemeSequence::new(vec![4, 2, 1]);
        let durations = [2, 3, 2];
        let out = m.pretrain_forward(&phones, &durations, 1).unwrap();
        // Reference: unconditional IN decoder built from the same blocks.
        let hiddens = m.content_encode(&phones).unwrap();
        let mut h = length_regulate(&hiddens, &durations).unwrap();
        for block in &m.pretrain.blocks {
            h = block.forward(&m.params, &instance_norm(&h).0).unwrap().0;
        }
        let expected = m.pretrain.out.forward(&m.params, &h).unwrap();
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_is_checked() {
        let m = tiny();
        let scale = LossScale { mel: 1.0, content: 1.0, duration: 1.0 };
        let err = m.stage2_terms(&[1, 2], &[2, 2], &random_mel(5, 1), scale, None);
        assert!(matches!(err, Err(Error::Alignment(_))));
        let err = m.stage1_terms(&[1, 2], &[2, 2], &random_mel(3, 1), 0, scale, None, None);
        assert!(matches!(err, Err(Error::Alignment(_))));
    }

    #[test]
    fn same_layout_ignores_wiring() {
        let a = ModelConfig::desk();
        let b = ModelConfig { decoder_stats: DecoderStats::DeepestOnly, ..a.clone() };
        assert!(a.same_layout(&b));
        assert!(!a.same_layout(&ModelConfig::paper()));
    }

    #[test]
    fn composite_losses_match_finite_differences() {
        use crate::nn::gradcheck::{finite_diff_check, DEFAULT_STEP};
        for stage in [Stage::Pretrain, Stage::Transfer] {
            for seed in 0..3 {
                let check = CompositeCheck::sample(&ModelConfig::tiny(), stage, seed, 4).unwrap();
                let err = finite_diff_check(&check, &check.point(), DEFAULT_STEP).unwrap();
                assert!(err < 1e-4, "{stage:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn stage2_gradients_stay_in_stage2_params() {
        let check = CompositeCheck::sample(&ModelConfig::tiny(), Stage::Transfer, 9, 1).unwrap();
        let g = check.gradient(&check.point()).unwrap();
        let mut offset = 0;
        let mut nonzero = 0;
        for (_, name, v) in check.model.params.iter() {
            let slice = &g[offset..offset + v.len()];
            if Stage::Transfer.trains(name) {
                nonzero += slice.iter().filter(|x| **x != 0.0).count();
            } else {
                assert!(slice.iter().all(|x| *x == 0.0), "{name}");
            }
            offset += v.len();
        }
        assert!(nonzero > 0);
    }

    proptest! {
        #[test]
        fn end_to_end_shape_law(
            ids in proptest::collection::vec(0usize..6, 1..10),
            ref_durations in proptest::collection::vec(1usize..9, 1..12),
            ref_frames in 1usize..30,
        ) {
            let m = tiny();
            let (mel, durations) = m
                .synthesize(&PhonemeSequence::new(ids.clone()), &mel_spec(ref_frames, 3), &ref_durations)
                .unwrap();
            prop_assert_eq!(durations.len(), ids.len());
            prop_assert_eq!(mel.data.dim(), (durations.iter().sum::<usize>(), 80));
        }
    }
}
