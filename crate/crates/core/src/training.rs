//! Two-stage training: stage 1 fits the content encoder, duration head and the
//! conditional-norm pre-training decoder; stage 2 freezes the content side and fits
//! the style encoder and mel decoder.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::corpus::{derive_seed, Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::model::{BatchLoss, DecoderStats, LossWeights, ModelConfig, Stage, TrainItem, UnetTts, DURATION_PREFIX};
use crate::nn::{Grads, Mat, ParamId, ParamStore};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub checkpoint_every: u64,
    pub val_every: u64,
    /// Stage 2 only: feed the decoder the deepest stats pair alone.
    pub single_level_stats: bool,
    /// Stage 2 only: keep training the duration head on its stage-1 loss.
    pub stage2_train_duration: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: 500,
            val_every: 100,
            single_level_stats: false,
            stage2_train_duration: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("learning_rate and epsilon must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.val_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("val_every and checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l1_mel: f64,
    pub l2_content: Option<f64>,
    pub mse_duration: Option<f64>,
    pub total: f64,
}

pub const REPORT_HEADER: &str = "step,l1_mel,l2_content,mse_duration,total";

impl LossReport {
    fn from_batch(step: u64, stage: Stage, loss: &BatchLoss) -> Self {
        let (l2_content, mse_duration) = match stage {
            Stage::Pretrain => (None, Some(loss.aux)),
            Stage::Transfer => (Some(loss.aux), None),
        };
        Self {
            step,
            l1_mel: loss.mel,
            l2_content,
            mse_duration,
            total: loss.total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l1_mel.is_finite()
            && self.total.is_finite()
            && self.l2_content.is_none_or(f64::is_finite)
            && self.mse_duration.is_none_or(f64::is_finite)
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{:e},{},{},{:e}",
            self.step,
            self.l1_mel,
            opt(self.l2_content),
            opt(self.mse_duration),
            self.total
        )
    }
}

pub fn reports_csv(reports: &[LossReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn parse_reports_csv(text: &str) -> Result<Vec<LossReport>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_HEADER) {
        return Err(Error::Input(format!("loss CSV must start with `{REPORT_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::Input(format!("loss CSV row {}: {what}", i + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
            let opt = |s: &str| if s.trim().is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(LossReport {
                step: cols[0].trim().parse().map_err(|_| bad("bad step"))?,
                l1_mel: num(cols[1])?,
                l2_content: opt(cols[2])?,
                mse_duration: opt(cols[3])?,
                total: num(cols[4])?,
            })
        })
        .collect()
}

/// Stage-2 loss on padded `frames x channels` arrays; `mask[t]` marks real frames.
pub fn compute_stage2_loss(
    mel_true: &Mat,
    mel_pred: &Mat,
    content: &Mat,
    content_pred: &Mat,
    mask: Option<&[bool]>,
) -> Result<LossReport> {
    if mel_true.dim() != mel_pred.dim() || content.dim() != content_pred.dim() {
        return Err(Error::Input("loss operands differ in shape".into()));
    }
    if mel_true.nrows() != content.nrows() {
        return Err(Error::Input("mel and content differ in frame count".into()));
    }
    let t = mel_true.nrows();
    let all = vec![true; t];
    let mask = mask.unwrap_or(&all);
    if mask.len() != t {
        return Err(Error::Input(format!("mask has {} entries for {t} frames", mask.len())));
    }
    let real = mask.iter().filter(|&&m| m).count();
    if real == 0 {
        return Err(Error::Input("mask selects no frames".into()));
    }
    let masked_mean = |a: &Mat, b: &Mat, f: fn(f64) -> f64| {
        let sum: f64 = a
            .rows()
            .into_iter()
            .zip(b.rows())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((ra, rb), _)| ra.iter().zip(rb).map(|(x, y)| f(x - y)).sum::<f64>())
            .sum();
        sum / (real * a.ncols()) as f64
    };
    let l1 = masked_mean(mel_true, mel_pred, f64::abs);
    let l2 = masked_mean(content, content_pred, |d| d * d);
    Ok(LossReport {
        step: 0,
        l1_mel: l1,
        l2_content: Some(l2),
        mse_duration: None,
        total: l1 + l2,
    })
}

/// Adam with bias correction, over a fixed set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, v)| Array2::zeros(v.raw_dim())).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, ids: &[ParamId]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for &id in ids {
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Model, optimizer state and step counter. The batch RNG is counter-based on
/// `(seed, step)`, so the step is the whole RNG state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: UnetTts,
    pub adam: Adam,
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    version: String,
    model: ModelConfig,
    train: TrainConfig,
    stage: Stage,
    step: u64,
    rng: RngState,
    adam_t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    counter: u64,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            version: VERSION.into(),
            model: self.model.config.clone(),
            train: self.config.clone(),
            stage: self.stage,
            step: self.step,
            rng: RngState {
                seed: self.seed,
                counter: self.step,
            },
            adam_t: self.adam.t,
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        for (id, name, value) in self.model.params.iter() {
            c.insert_mat(&format!("param/{name}"), value);
            c.insert_mat(&format!("adam_m/{name}"), &self.adam.m[id.index()]);
            c.insert_mat(&format!("adam_v/{name}"), &self.adam.v[id.index()]);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Load(format!("checkpoint header: {e}")))?;
        if meta.kind != "checkpoint" {
            return Err(Error::Load(format!("container holds a {:?}, not a checkpoint", meta.kind)));
        }
        let mut model = UnetTts::new(meta.model, 0)?;
        let mut adam = Adam::new(&model.params, &meta.train);
        adam.t = meta.adam_t;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let load = |prefix: &str, expected: (usize, usize)| -> Result<Array2<f64>> {
                let m = c.mat(&format!("{prefix}/{name}"))?;
                if m.dim() != expected {
                    return Err(Error::Load(format!("{prefix}/{name}: shape {:?}, expected {expected:?}", m.dim())));
                }
                Ok(m)
            };
            let dim = model.params.get(id).dim();
            *model.params.get_mut(id) = load("param", dim)?;
            adam.m[id.index()] = load("adam_m", dim)?;
            adam.v[id.index()] = load("adam_v", dim)?;
        }
        Ok(Self {
            model,
            adam,
            stage: meta.stage,
            step: meta.step,
            seed: meta.rng.seed,
            config: meta.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Loads and, when `expected` is given, refuses a different model layout.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let ckpt = Self::from_container(&Container::load(path)?)?;
        if let Some(cfg) = expected {
            if !cfg.same_layout(&ckpt.model.config) {
                return Err(Error::State(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path, None)
}

pub fn train_item(u: &Utterance) -> TrainItem {
    TrainItem {
        ids: u.phones.ids.clone(),
        durations: u.durations().to_vec(),
        mel: u.mel.data.clone(),
        speaker: u.speaker_id,
    }
}

/// Train and validation items for a stage. Stage 1 only uses train speakers (the
/// speaker table covers them); its validation set is their held-out utterances.
pub fn stage_data(corpus: &Corpus, stage: Stage) -> (Vec<TrainItem>, Vec<TrainItem>) {
    let n_train = corpus.n_train_speakers();
    let train = corpus.select(|u| u.split == Split::Train).map(train_item).collect();
    let val = corpus
        .select(|u| u.split == Split::Val && (stage == Stage::Transfer || u.speaker_id < n_train))
        .map(train_item)
        .collect();
    (train, val)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub train_reports: Vec<LossReport>,
    pub val_reports: Vec<LossReport>,
    pub best_val: Option<(u64, f64)>,
    /// Training steps whose content/target alignment was checked.
    pub alignment_checks: u64,
}

/// Batch indices for `step`: drawn without replacement from a stream keyed on
/// `(seed, step)` alone.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, step]));
    sample(&mut rng, n, batch.min(n)).into_vec()
}

fn trainable_ids(params: &ParamStore, stage: Stage, with_duration: bool) -> (Vec<ParamId>, Vec<ParamId>) {
    params.ids().partition(|&id| {
        let name = params.name(id);
        stage.trains(name) || (with_duration && name.starts_with(DURATION_PREFIX))
    })
}

/// Runs (or resumes) a stage from `ckpt` until `config.steps`.
pub fn run_stage(
    mut ckpt: Checkpoint,
    train: &[TrainItem],
    val: &[TrainItem],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let config = ckpt.config.clone();
    config.validate()?;
    let stage = config.stage;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs train and validation utterances".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let with_duration = stage == Stage::Transfer && config.stage2_train_duration;
    let (trainable, frozen) = trainable_ids(&ckpt.model.params, stage, with_duration);
    // Adds the duration term to a stage-2 report when the duration head trains.
    let add_duration = |model: &UnetTts, items: &[TrainItem], r: &mut LossReport, grads: Option<&mut Grads>| -> Result<()> {
        if with_duration {
            let d = model.batch_duration_loss(items, config.weights.duration, grads)?;
            r.mse_duration = Some(d);
            r.total += config.weights.duration * d;
        }
        Ok(())
    };
    let frozen_before: Vec<Array2<f64>> = frozen.iter().map(|&id| ckpt.model.params.get(id).clone()).collect();

    let mut train_reports = Vec::new();
    let mut val_reports = Vec::new();
    let mut best_val: Option<(u64, f64)> = None;
    let mut alignment_checks = 0;

    let validate = |model: &UnetTts, step: u64| -> Result<LossReport> {
        let loss = model.batch_loss(stage, val, config.weights, None, None)?;
        let mut r = LossReport::from_batch(step, stage, &loss);
        add_duration(model, val, &mut r, None)?;
        if !r.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite validation loss {r:?}"),
            });
        }
        Ok(r)
    };
    let mut record_val = |ckpt: &Checkpoint, r: LossReport, best: &mut Option<(u64, f64)>| -> Result<()> {
        if best.is_none_or(|(_, b)| r.l1_mel < b) {
            *best = Some((r.step, r.l1_mel));
            if let Some(dir) = out_dir {
                ckpt.save(&dir.join("best.utts"))?;
            }
        }
        val_reports.push(r);
        Ok(())
    };

    if ckpt.step % config.val_every == 0 || ckpt.step == 0 {
        let r = validate(&ckpt.model, ckpt.step)?;
        record_val(&ckpt, r, &mut best_val)?;
    }
    while ckpt.step < config.steps {
        let idx = batch_indices(ckpt.seed, ckpt.step, train.len(), config.batch_size);
        let batch: Vec<TrainItem> = idx.iter().map(|&i| train[i].clone()).collect();
        let mut grads = ckpt.model.params.zero_grads();
        let loss = ckpt.model.batch_loss(stage, &batch, config.weights, Some(&mut grads), None)?;
        alignment_checks += 1;
        let mut report = LossReport::from_batch(ckpt.step + 1, stage, &loss);
        add_duration(&ckpt.model, &batch, &mut report, Some(&mut grads))?;
        if !report.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                step: ckpt.step + 1,
                detail: format!("non-finite loss or gradient: {report:?}"),
            });
        }
        if !grads.all_zero(frozen.iter().copied()) {
            return Err(Error::State("gradient reached a frozen parameter".into()));
        }
        ckpt.adam.step(&mut ckpt.model.params, &grads, &trainable);
        ckpt.step += 1;
        train_reports.push(report);
        if ckpt.step % config.val_every == 0 || ckpt.step == config.steps {
            let r = validate(&ckpt.model, ckpt.step)?;
            record_val(&ckpt, r, &mut best_val)?;
        }
        if let Some(dir) = out_dir {
            if ckpt.step % config.checkpoint_every == 0 {
                ckpt.save(&dir.join(format!("step_{:06}.utts", ckpt.step)))?;
            }
        }
    }
    for (id, before) in frozen.iter().zip(&frozen_before) {
        if ckpt.model.params.get(*id) != before {
            return Err(Error::State(format!(
                "frozen parameter {} changed during training",
                ckpt.model.params.name(*id)
            )));
        }
    }
    if let Some(dir) = out_dir {
        ckpt.save(&dir.join("last.utts"))?;
        write_text(&dir.join("train_loss.csv"), &reports_csv(&train_reports))?;
        write_text(&dir.join("val_loss.csv"), &reports_csv(&val_reports))?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        train_reports,
        val_reports,
        best_val,
        alignment_checks,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fresh_checkpoint(model: UnetTts, config: &TrainConfig) -> Checkpoint {
    Checkpoint {
        adam: Adam::new(&model.params, config),
        model,
        stage: config.stage,
        step: 0,
        seed: config.seed,
        config: config.clone(),
    }
}

/// Stage 1 from a fresh initialization seeded by `config.seed`.
pub fn train_stage1(
    corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if config.stage != Stage::Pretrain {
        return Err(Error::Config("train_stage1 needs stage 1".into()));
    }
    if model_config.n_speakers != corpus.n_train_speakers() {
        return Err(Error::Config(format!(
            "model speaker table has {} rows, corpus has {} train speakers",
            model_config.n_speakers,
            corpus.n_train_speakers()
        )));
    }
    let model = UnetTts::new(model_config.clone(), config.seed)?;
    let (train, val) = stage_data(corpus, Stage::Pretrain);
    run_stage(fresh_checkpoint(model, config), &train, &val, out_dir)
}

/// Stage 2 on top of a stage-1 checkpoint; the optimizer starts fresh.
pub fn train_stage2(
    corpus: &Corpus,
    stage1: &Checkpoint,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if config.stage != Stage::Transfer {
        return Err(Error::Config("train_stage2 needs stage 2".into()));
    }
    if stage1.stage != Stage::Pretrain {
        return Err(Error::State("stage 2 must start from a stage-1 checkpoint".into()));
    }
    let mut model = stage1.model.clone();
    model.set_decoder_stats(if config.single_level_stats {
        DecoderStats::DeepestOnly
    } else {
        DecoderStats::All
    });
    let (train, val) = stage_data(corpus, Stage::Transfer);
    run_stage(fresh_checkpoint(model, config), &train, &val, out_dir)
}

/// Continues a run from a saved checkpoint up to its configured step count.
pub fn resume(corpus: &Corpus, ckpt: Checkpoint, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let (train, val) = stage_data(corpus, ckpt.config.stage);
    run_stage(ckpt, &train, &val, out_dir)
}

/// Resolves the run directory's standard checkpoint path.
pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.utts"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;
    use crate::nn::gradcheck::flatten_params;
    use ndarray::s;
    use rand::{Rng, SeedableRng};

    fn tiny_corpus() -> Corpus {
        Corpus::generate(&CorpusSpec {
            n_train: 4,
            n_val: 1,
            n_clone: 2,
            utts_per_speaker: 6,
            heldout_per_train_speaker: 2,
            style_variants: 1,
            min_len: 4,
            max_len: 6,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_phonemes: 17,
            n_speakers: 4,
            ..ModelConfig::tiny()
        }
    }

    fn cfg(stage: Stage, steps: u64) -> TrainConfig {
        TrainConfig {
            stage,
            steps,
            batch_size: 2,
            val_every: 5,
            checkpoint_every: 5,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn random(t: usize, c: usize, rng: &mut impl Rng) -> Mat {
        Array2::from_shape_simple_fn((t, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn stage2_loss_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mel = random(6, 80, &mut rng);
        let content = random(6, 8, &mut rng);
        let r = compute_stage2_loss(&mel, &mel, &content, &content, None).unwrap();
        assert_eq!(r.total, 0.0);
        let r = compute_stage2_loss(&mel, &(&mel + 1.0), &content, &content, None).unwrap();
        assert!((r.l1_mel - 1.0).abs() < 1e-12 && r.l2_content == Some(0.0));
        let r = compute_stage2_loss(&mel, &mel, &content, &(&content + 2.0), None).unwrap();
        assert!((r.l2_content.unwrap() - 4.0).abs() < 1e-12);
        assert!((r.total - 4.0).abs() < 1e-12);
        assert!(matches!(
            compute_stage2_loss(&mel, &content, &content, &content, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn padding_leaves_losses_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        // Two utterances of 5 and 9 frames, padded to 9 and stacked.
        let lens = [5usize, 9];
        let parts: Vec<[Mat; 4]> = lens
            .iter()
            .map(|&t| {
                [random(t, 80, &mut rng), random(t, 80, &mut rng), random(t, 8, &mut rng), random(t, 8, &mut rng)]
            })
            .collect();
        let stack = |k: usize, pad: usize| {
            let views: Vec<Mat> = parts
                .iter()
                .map(|p| {
                    let m = &p[k];
                    let mut out = Array2::from_elem((m.nrows() + pad, m.ncols()), 7.5);
                    out.slice_mut(s![..m.nrows(), ..]).assign(m);
                    out
                })
                .collect();
            ndarray::concatenate(ndarray::Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>()).unwrap()
        };
        let unpadded = compute_stage2_loss(&stack(0, 0), &stack(1, 0), &stack(2, 0), &stack(3, 0), None).unwrap();
        for pad in [1, 4, 13] {
            let mask: Vec<bool> = lens
                .iter()
                .flat_map(|&t| std::iter::repeat_n(true, t).chain(std::iter::repeat_n(false, pad)))
                .collect();
            let padded = compute_stage2_loss(&stack(0, pad), &stack(1, pad), &stack(2, pad), &stack(3, pad), Some(&mask)).unwrap();
            assert!((padded.l1_mel - unpadded.l1_mel).abs() < 1e-12);
            assert!((padded.l2_content.unwrap() - unpadded.l2_content.unwrap()).abs() < 1e-12);
            assert!((padded.total - unpadded.total).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_loss_matches_reference_formula() {
        let corpus = tiny_corpus();
        let model = UnetTts::new(tiny_model(), 1).unwrap();
        let (train, _) = stage_data(&corpus, Stage::Transfer);
        let batch = &train[..3];
        let loss = model.batch_loss(Stage::Transfer, batch, LossWeights::default(), None, None).unwrap();
        // Concatenate per-utterance predictions and score them as one masked batch.
        let mut pieces = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for it in batch {
            let h = model.content_encode(&crate::model::PhonemeSequence::new(it.ids.clone())).unwrap();
            let content = crate::model::length_regulate(&h, &it.durations).unwrap();
            let (stats, content_pred) = model.style_encode(&it.mel).unwrap();
            let pred = model.mel_decode(&content, &stats).unwrap();
            pieces[0].push(it.mel.clone());
            pieces[1].push(pred);
            pieces[2].push(content);
            pieces[3].push(content_pred);
        }
        let cat = |v: &Vec<Mat>| ndarray::concatenate(ndarray::Axis(0), &v.iter().map(|m| m.view()).collect::<Vec<_>>()).unwrap();
        let r = compute_stage2_loss(&cat(&pieces[0]), &cat(&pieces[1]), &cat(&pieces[2]), &cat(&pieces[3]), None).unwrap();
        assert!((r.l1_mel - loss.mel).abs() < 1e-12);
        assert!((r.l2_content.unwrap() - loss.aux).abs() < 1e-12);
        assert!((r.total - loss.total).abs() < 1e-12);
    }

    #[test]
    fn small_gradient_step_decreases_loss() {
        let corpus = tiny_corpus();
        for stage in [Stage::Pretrain, Stage::Transfer] {
            let mut model = UnetTts::new(tiny_model(), 4).unwrap();
            let (train, _) = stage_data(&corpus, stage);
            let item = std::slice::from_ref(&train[0]);
            let mut g = model.params.zero_grads();
            let before = model.batch_loss(stage, item, LossWeights::default(), Some(&mut g), None).unwrap();
            let (trainable, _) = trainable_ids(&model.params, stage, false);
            for id in trainable {
                let step = g.get(id) * 1e-4;
                *model.params.get_mut(id) -= &step;
            }
            let after = model.batch_loss(stage, item, LossWeights::default(), None, None).unwrap();
            assert!(after.total < before.total, "{stage:?}: {} -> {}", before.total, after.total);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let corpus = tiny_corpus();
        let out = train_stage1(&corpus, &tiny_model(), &cfg(Stage::Pretrain, 3), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.utts");
        let b = dir.path().join("b.utts");
        out.checkpoint.save(&a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(loaded.adam, out.checkpoint.adam);
        assert_eq!(flatten_params(&loaded.model.params), flatten_params(&out.checkpoint.model.params));

        let bytes = fs::read(&a).unwrap();
        fs::write(&b, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&b), Err(Error::Load(_))));

        let other = ModelConfig { hidden: 8, ..tiny_model() };
        assert!(matches!(Checkpoint::load(&a, Some(&other)), Err(Error::State(_))));
    }

    #[test]
    fn same_seed_runs_and_resume_are_identical() {
        let corpus = tiny_corpus();
        let config = cfg(Stage::Pretrain, 10);
        let full = train_stage1(&corpus, &tiny_model(), &config, None).unwrap();
        let again = train_stage1(&corpus, &tiny_model(), &config, None).unwrap();
        assert_eq!(full.train_reports, again.train_reports);

        let dir = tempfile::tempdir().unwrap();
        let half = TrainConfig { steps: 4, ..config.clone() };
        let first = train_stage1(&corpus, &tiny_model(), &half, Some(dir.path())).unwrap();
        let mut ckpt = load_checkpoint(&dir.path().join("last.utts")).unwrap();
        ckpt.config.steps = 10;
        let rest = resume(&corpus, ckpt, None).unwrap();
        let stitched: Vec<LossReport> = first.train_reports.iter().chain(&rest.train_reports).copied().collect();
        assert_eq!(stitched, full.train_reports);
        assert_eq!(
            flatten_params(&rest.checkpoint.model.params),
            flatten_params(&full.checkpoint.model.params)
        );
    }

    #[test]
    fn stage2_freezes_content_side() {
        let corpus = tiny_corpus();
        let s1 = train_stage1(&corpus, &tiny_model(), &cfg(Stage::Pretrain, 3), None).unwrap();
        let s2 = train_stage2(&corpus, &s1.checkpoint, &cfg(Stage::Transfer, 4), None).unwrap();
        let before = &s1.checkpoint.model.params;
        let after = &s2.checkpoint.model.params;
        let mut changed = 0;
        for (id, name, v) in after.iter() {
            if Stage::Transfer.trains(name) {
                changed += (v != before.get(id)) as usize;
            } else {
                assert_eq!(v, before.get(id), "{name} moved");
            }
        }
        assert!(changed > 0);
        assert_eq!(s2.alignment_checks, 4);
        assert!(matches!(
            train_stage2(&corpus, &s2.checkpoint, &cfg(Stage::Transfer, 1), None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn stage2_can_keep_training_the_duration_head() {
        let corpus = tiny_corpus();
        let s1 = train_stage1(&corpus, &tiny_model(), &cfg(Stage::Pretrain, 3), None).unwrap();
        let config = TrainConfig {
            stage2_train_duration: true,
            ..cfg(Stage::Transfer, 4)
        };
        let s2 = train_stage2(&corpus, &s1.checkpoint, &config, None).unwrap();
        let before = &s1.checkpoint.model.params;
        for (id, name, v) in s2.checkpoint.model.params.iter() {
            let moved = v != before.get(id);
            if name.starts_with(DURATION_PREFIX) {
                assert!(moved, "{name} stayed put");
            } else if !Stage::Transfer.trains(name) {
                assert!(!moved, "{name} moved");
            }
        }
        let r = &s2.train_reports[0];
        let d = r.mse_duration.expect("duration term reported");
        assert!((r.total - (r.l1_mel + r.l2_content.unwrap() + d)).abs() < 1e-12);

        // The duration gradient matches a central difference on one weight.
        let (train, _) = stage_data(&corpus, Stage::Transfer);
        let model = &s1.checkpoint.model;
        let mut g = model.params.zero_grads();
        model.batch_duration_loss(&train[..3], 1.0, Some(&mut g)).unwrap();
        let id = model.params.ids_with_prefix(DURATION_PREFIX).next().unwrap();
        let h = 1e-6;
        let at = |delta: f64| {
            let mut m = model.clone();
            m.params.get_mut(id)[[0, 0]] += delta;
            m.batch_duration_loss(&train[..3], 1.0, None).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let analytic = g.get(id)[[0, 0]];
        assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {analytic}");
    }

    #[test]
    fn outputs_and_csv_round_trip() {
        let corpus = tiny_corpus();
        let dir = tempfile::tempdir().unwrap();
        let out = train_stage1(&corpus, &tiny_model(), &cfg(Stage::Pretrain, 10), Some(dir.path())).unwrap();
        for f in ["last.utts", "best.utts", "step_000005.utts", "step_000010.utts", "train_loss.csv", "val_loss.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = fs::read_to_string(dir.path().join("train_loss.csv")).unwrap();
        assert_eq!(parse_reports_csv(&text).unwrap(), out.train_reports);
        assert_eq!(out.val_reports.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 5, 10]);
        for r in &out.train_reports {
            assert!((r.total - (r.l1_mel + r.mse_duration.unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let corpus = tiny_corpus();
        let mut model = UnetTts::new(tiny_model(), 1).unwrap();
        let id = model.params.ids().next().unwrap();
        model.params.get_mut(id)[[0, 0]] = f64::NAN;
        let config = cfg(Stage::Pretrain, 2);
        let (train, val) = stage_data(&corpus, Stage::Pretrain);
        let err = run_stage(fresh_checkpoint(model, &config), &train, &val, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn config_validation_and_unknown_keys() {
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rt": 1e-3}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rt"));
        let c: TrainConfig = serde_json::from_str(r#"{"stage": 2, "steps": 7}"#).unwrap();
        assert_eq!((c.stage, c.steps, c.batch_size), (Stage::Transfer, 7, 8));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stage": 3}"#).is_err());
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        assert_eq!(batch_indices(1, 7, 40, 8), batch_indices(1, 7, 40, 8));
        assert_ne!(batch_indices(1, 7, 40, 8), batch_indices(1, 8, 40, 8));
        let b = batch_indices(2, 0, 5, 8);
        let mut sorted = b.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
    }
}
