//! Deterministic synthetic corpus in the log-mel domain: phonemes with smooth
//! spectral envelopes, speakers with pitch/tilt/formant/rate traits, and five
//! speaking styles that scale duration, pitch range, energy and pausing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::dsp::{self, DurationStats, F0Track, FrameConfig, HarmonicModel, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::PhonemeSequence;

pub const SILENCE: usize = 0;
pub const STYLE_NAMES: [&str; 5] = ["neutral", "happy", "angry", "sad", "surprise"];
pub const MANIFEST: &str = "manifest.jsonl";
pub const CORPUS_INFO: &str = "corpus.json";

const ASPIRATION: f64 = 0.05;
const BIN_JITTER: f64 = 0.03;
const F0_JITTER: f64 = 0.005;
const DURATION_JITTER: f64 = 0.1;
const CONTOUR_DEPTH: f64 = 0.08;
const EDGE_SILENCE: usize = 3;

/// splitmix64 finalizer, used to derive independent seeds from tags.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// A Gaussian bump in the log envelope, in filter-index units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub center: f64,
    pub width: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phoneme {
    pub symbol: String,
    pub voiced: bool,
    pub base_duration: usize,
    /// Log level the formants sit on.
    pub floor: f64,
    pub formants: Vec<Formant>,
}

impl Phoneme {
    /// Log envelope at fractional filter position `pos`.
    pub fn log_envelope(&self, pos: f64) -> f64 {
        self.floor
            + self
                .formants
                .iter()
                .map(|f| f.gain * (-(pos - f.center).powi(2) / (2.0 * f.width * f.width)).exp())
                .sum::<f64>()
    }

    pub fn is_silence(&self) -> bool {
        self.formants.is_empty() && !self.voiced
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    pub phonemes: Vec<Phoneme>,
}

impl PhonemeInventory {
    /// Silence plus `n_voiced` voiced and `n_unvoiced` unvoiced phonemes.
    pub fn generate(seed: u64, n_voiced: usize, n_unvoiced: usize) -> Result<Self> {
        if n_voiced == 0 || n_unvoiced == 0 {
            return Err(Error::Config("inventory needs voiced and unvoiced phonemes".into()));
        }
        let mut rng = rng_for(seed, &[0x1a7e]);
        let mut phonemes = vec![Phoneme {
            symbol: "sil".into(),
            voiced: false,
            base_duration: EDGE_SILENCE,
            floor: dsp::log_floor(),
            formants: Vec::new(),
        }];
        for i in 0..n_voiced {
            let n_formants = rng.random_range(2..=3);
            let formants = (0..n_formants)
                .map(|k| Formant {
                    center: rng.random_range(4.0 + 20.0 * k as f64..24.0 + 20.0 * k as f64),
                    width: rng.random_range(3.0..7.0),
                    gain: rng.random_range(1.0..2.5),
                })
                .collect();
            phonemes.push(Phoneme {
                symbol: format!("v{i}"),
                voiced: true,
                base_duration: rng.random_range(2..=5),
                floor: -3.0,
                formants,
            });
        }
        for i in 0..n_unvoiced {
            let formants = vec![Formant {
                center: rng.random_range(45.0..75.0),
                width: rng.random_range(6.0..12.0),
                gain: rng.random_range(1.5..3.0),
            }];
            phonemes.push(Phoneme {
                symbol: format!("u{i}"),
                voiced: false,
                base_duration: rng.random_range(2..=4),
                floor: -4.0,
                formants,
            });
        }
        Ok(Self { phonemes })
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    /// The 80-point sampled log envelope of phoneme `id`.
    pub fn template(&self, id: usize, n_mels: usize) -> Vec<f64> {
        (0..n_mels).map(|m| self.phonemes[id].log_envelope(m as f64)).collect()
    }

    /// Space-separated symbols to ids.
    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|s| {
                self.phonemes
                    .iter()
                    .position(|p| p.symbol == s)
                    .ok_or_else(|| Error::Input(format!("unknown phoneme symbol {s:?}")))
            })
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::Input("empty phoneme string".into()));
        }
        Ok(ids)
    }

    pub fn format(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.phonemes[i].symbol.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Clone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    pub f0_base: f64,
    /// Log-gain change from the lowest to the highest mel filter.
    pub spectral_tilt: f64,
    /// Envelope offset in filter bins.
    pub formant_shift: f64,
    pub rate_scale: f64,
    pub split: Split,
}

impl SpeakerProfile {
    pub fn random(speaker_id: usize, split: Split, rng: &mut impl Rng) -> Self {
        Self {
            speaker_id,
            f0_base: rng.random_range(90.0..260.0),
            spectral_tilt: rng.random_range(-2.5..0.5),
            formant_shift: rng.random_range(-4.0..4.0),
            rate_scale: rng.random_range(0.8..1.25),
            split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(90.0..=260.0).contains(&self.f0_base) {
            return Err(Error::Config(format!("f0_base {} outside [90, 260]", self.f0_base)));
        }
        if !(0.6..=1.6).contains(&self.rate_scale) {
            return Err(Error::Config(format!("rate_scale {} outside [0.6, 1.6]", self.rate_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleProfile {
    pub name: String,
    pub duration_mult: f64,
    pub f0_range_mult: f64,
    pub energy_mult: f64,
    pub pause_prob: f64,
}

impl StyleProfile {
    pub fn named(name: &str) -> Result<Self> {
        let (d, f, e, p) = match name {
            "neutral" => (1.0, 1.0, 1.0, 0.05),
            "happy" => (0.85, 1.8, 1.4, 0.05),
            "angry" => (0.9, 1.4, 2.0, 0.05),
            "sad" => (1.5, 0.4, 0.6, 0.2),
            "surprise" => (1.1, 2.2, 1.6, 0.1),
            other => return Err(Error::Input(format!("unknown style {other:?}"))),
        };
        Ok(Self {
            name: name.into(),
            duration_mult: d,
            f0_range_mult: f,
            energy_mult: e,
            pause_prob: p,
        })
    }

    pub fn all() -> Vec<Self> {
        STYLE_NAMES.iter().map(|n| Self::named(n).unwrap()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_mult <= 0.0 || self.energy_mult <= 0.0 || self.f0_range_mult < 0.0 {
            return Err(Error::Config(format!("style {}: multipliers must be positive", self.name)));
        }
        if !(0.0..1.0).contains(&self.pause_prob) {
            return Err(Error::Config(format!("style {}: pause_prob outside [0, 1)", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phones: PhonemeSequence,
    pub mel: MelSpectrogram,
    pub f0_truth: F0Track,
    pub speaker_id: usize,
    pub style: String,
    pub split: Split,
    pub text_id: u64,
}

impl Utterance {
    pub fn durations(&self) -> &[usize] {
        self.phones.durations.as_deref().unwrap_or(&[])
    }
}

/// Renders a phoneme sequence with known durations for one speaker and style.
pub fn render_mel(
    inventory: &PhonemeInventory,
    phones: &PhonemeSequence,
    speaker: &SpeakerProfile,
    style: &StyleProfile,
    seed: u64,
) -> Result<(MelSpectrogram, F0Track)> {
    let config = FrameConfig::default();
    phones.validate(inventory.len())?;
    let durations = phones
        .durations
        .as_ref()
        .ok_or_else(|| Error::Input("render_mel needs durations".into()))?;
    let harmonic = HarmonicModel::new(&config, ASPIRATION)?;
    let n_mels = config.n_mels;
    let frames: usize = durations.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bin_noise = Normal::new(0.0, BIN_JITTER).unwrap();
    let f0_noise = Normal::new(0.0, F0_JITTER).unwrap();
    let period = rng.random_range(30.0..60.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let gain = style.energy_mult.ln();
    let tilt = |pos: f64| speaker.spectral_tilt * pos / (n_mels - 1) as f64;

    let mut mel = Array2::from_elem((frames, n_mels), dsp::log_floor());
    let mut f0_values = vec![0.0; frames];
    let mut t = 0;
    for (&id, &d) in phones.ids.iter().zip(durations) {
        let ph = &inventory.phonemes[id];
        for _ in 0..d {
            let contour = 1.0 + CONTOUR_DEPTH * style.f0_range_mult * (std::f64::consts::TAU * t as f64 / period + phase).sin();
            let f0 = (speaker.f0_base * contour * f0_noise.sample(&mut rng).exp())
                .clamp(dsp::F0_SEARCH_LO, dsp::F0_SEARCH_HI);
            if ph.is_silence() {
                t += 1;
                continue;
            }
            let env = |pos: f64| ph.log_envelope(pos - speaker.formant_shift) + tilt(pos);
            let linear: Vec<f64> = if ph.voiced {
                f0_values[t] = f0;
                harmonic.voiced_frame(f0, |pos| env(pos).exp())
            } else {
                (0..n_mels).map(|m| env(m as f64).exp()).collect()
            };
            for (m, v) in linear.into_iter().enumerate() {
                mel[[t, m]] = (v.max(dsp::LOG_FLOOR).ln() + gain + bin_noise.sample(&mut rng)).max(dsp::log_floor());
            }
            t += 1;
        }
    }
    let mel = MelSpectrogram::new(mel, &config)?;
    Ok((
        mel,
        F0Track {
            values: f0_values,
            search_lo: dsp::F0_SEARCH_LO,
            search_hi: dsp::F0_SEARCH_HI,
        },
    ))
}

/// Inserts a silence after interior phonemes with the style's pause probability and
/// wraps the result in edge silences.
pub fn add_pauses(text: &[usize], style: &StyleProfile, rng: &mut impl Rng) -> Vec<usize> {
    let mut ids = vec![SILENCE];
    for (i, &p) in text.iter().enumerate() {
        ids.push(p);
        if i + 1 < text.len() && rng.random::<f64>() < style.pause_prob {
            ids.push(SILENCE);
        }
    }
    ids.push(SILENCE);
    ids
}

/// `max(1, round(base * rate * style * jitter))` per phoneme.
pub fn sample_durations(
    inventory: &PhonemeInventory,
    ids: &[usize],
    speaker: &SpeakerProfile,
    style: &StyleProfile,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let jitter = Normal::new(0.0, DURATION_JITTER).unwrap();
    ids.iter()
        .map(|&id| {
            let base = inventory.phonemes[id].base_duration as f64;
            let d = base * speaker.rate_scale * style.duration_mult * jitter.sample(rng).exp();
            (d.round() as usize).max(1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_clone: usize,
    pub utts_per_speaker: usize,
    /// Trailing utterances of each train speaker held out for validation.
    pub heldout_per_train_speaker: usize,
    /// Extra renders per style for each clone speaker.
    pub style_variants: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_voiced: usize,
    pub n_unvoiced: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 12,
            n_val: 2,
            n_clone: 4,
            utts_per_speaker: 40,
            heldout_per_train_speaker: 4,
            style_variants: 8,
            min_len: 8,
            max_len: 20,
            n_voiced: 12,
            n_unvoiced: 4,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_train < 4 {
            return bad("need at least 4 train speakers");
        }
        if self.n_clone < 2 {
            return bad("need at least 2 clone speakers");
        }
        if self.utts_per_speaker == 0 || self.heldout_per_train_speaker >= self.utts_per_speaker {
            return bad("utts_per_speaker must exceed heldout_per_train_speaker");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 0 < min_len <= max_len");
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.n_train + self.n_val + self.n_clone
    }

    /// Utterances the manifest will list.
    pub fn expected_utterances(&self) -> usize {
        self.n_speakers() * self.utts_per_speaker + self.n_clone * STYLE_NAMES.len() * self.style_variants
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub speaker_id: usize,
    pub style: String,
    pub split: Split,
    pub text_id: u64,
    pub n_phonemes: usize,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusInfo {
    pub spec: CorpusSpec,
    /// Seed actually used after separability retries.
    pub effective_seed: u64,
    pub separability: Separability,
    pub inventory: PhonemeInventory,
    pub speakers: Vec<SpeakerProfile>,
    pub styles: Vec<StyleProfile>,
}

/// Mean time-averaged-cepstrum MCD within and across speakers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub same_speaker: f64,
    pub cross_speaker: f64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub info: CorpusInfo,
    pub utterances: Vec<Utterance>,
}

const TAG_SPEAKER: u64 = 1;
const TAG_TEXT: u64 = 2;
const TAG_PAUSE: u64 = 3;
const TAG_RENDER: u64 = 4;
/// Text ids at or above this are never used by corpus utterances.
pub const HELDOUT_TEXT_BASE: u64 = 1 << 32;

impl Corpus {
    /// Renders the whole corpus in memory; bumps the seed until the speaker
    /// separability oracle holds.
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        for attempt in 0..16u64 {
            let seed = spec.seed.wrapping_add(attempt);
            let corpus = Self::generate_with_seed(spec, seed)?;
            if corpus.info.separability.same_speaker < corpus.info.separability.cross_speaker {
                return Ok(corpus);
            }
        }
        Err(Error::State("no seed produced separable speakers".into()))
    }

    fn generate_with_seed(spec: &CorpusSpec, seed: u64) -> Result<Self> {
        let inventory = PhonemeInventory::generate(seed, spec.n_voiced, spec.n_unvoiced)?;
        let speakers: Vec<SpeakerProfile> = (0..spec.n_speakers())
            .map(|i| {
                let split = if i < spec.n_train {
                    Split::Train
                } else if i < spec.n_train + spec.n_val {
                    Split::Val
                } else {
                    Split::Clone
                };
                SpeakerProfile::random(i, split, &mut rng_for(seed, &[TAG_SPEAKER, i as u64]))
            })
            .collect();
        let styles = StyleProfile::all();
        let mut info = CorpusInfo {
            spec: spec.clone(),
            effective_seed: seed,
            separability: Separability {
                same_speaker: 0.0,
                cross_speaker: 0.0,
            },
            inventory,
            speakers,
            styles,
        };
        let neutral = info.style("neutral")?.clone();
        let mut utterances = Vec::with_capacity(spec.expected_utterances());
        for speaker in &info.speakers {
            for k in 0..spec.utts_per_speaker {
                let text_id = (speaker.speaker_id * spec.utts_per_speaker + k) as u64;
                let split = match speaker.split {
                    Split::Train if k >= spec.utts_per_speaker - spec.heldout_per_train_speaker => Split::Val,
                    s => s,
                };
                let id = format!("s{:03}_{:03}", speaker.speaker_id, k);
                utterances.push(info.render_text(&id, text_id, speaker, &neutral, split)?);
            }
        }
        for speaker in info.speakers.iter().filter(|s| s.split == Split::Clone) {
            for style in &info.styles {
                for k in 0..spec.style_variants {
                    let text_id = (spec.n_speakers() * spec.utts_per_speaker
                        + (speaker.speaker_id * STYLE_NAMES.len() + style_index(&style.name)) * spec.style_variants
                        + k) as u64;
                    let id = format!("s{:03}_{}_{:02}", speaker.speaker_id, style.name, k);
                    utterances.push(info.render_text(&id, text_id, speaker, style, Split::Clone)?);
                }
            }
        }
        info.separability = separability(&utterances)?;
        Ok(Self { info, utterances })
    }

    /// Writes `corpus.json`, `manifest.jsonl` and one container per utterance.
    pub fn write(&self, root: &Path) -> Result<()> {
        let utt_dir = root.join("utts");
        fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
        let info_path = root.join(CORPUS_INFO);
        let info = serde_json::to_string_pretty(&self.info)?;
        fs::write(&info_path, info + "\n").map_err(|e| Error::io(&info_path, e))?;
        let mut manifest = Vec::new();
        for u in &self.utterances {
            let rel = format!("utts/{}.utts", u.id);
            utterance_container(u).save(&root.join(&rel))?;
            let entry = ManifestEntry {
                id: u.id.clone(),
                path: rel,
                speaker_id: u.speaker_id,
                style: u.style.clone(),
                split: u.split,
                text_id: u.text_id,
                n_phonemes: u.phones.ids.len(),
                n_frames: u.mel.frames(),
            };
            serde_json::to_writer(&mut manifest, &entry)?;
            manifest.push(b'\n');
        }
        let path = root.join(MANIFEST);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn open(root: &Path) -> Result<Self> {
        let info_path = root.join(CORPUS_INFO);
        let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: CorpusInfo = serde_json::from_str(&text)?;
        let utterances = read_manifest(root)?
            .into_iter()
            .map(|entry| load_utterance(root, &entry))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { info, utterances })
    }

    pub fn speaker(&self, id: usize) -> Result<&SpeakerProfile> {
        self.info.speaker(id)
    }

    pub fn n_train_speakers(&self) -> usize {
        self.info.spec.n_train
    }

    pub fn select<'a>(&'a self, pred: impl Fn(&Utterance) -> bool + 'a) -> impl Iterator<Item = &'a Utterance> + 'a {
        self.utterances.iter().filter(move |u| pred(u))
    }
}

impl CorpusInfo {
    pub fn style(&self, name: &str) -> Result<&StyleProfile> {
        self.styles
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Input(format!("unknown style {name:?}")))
    }

    pub fn speaker(&self, id: usize) -> Result<&SpeakerProfile> {
        self.speakers
            .get(id)
            .ok_or_else(|| Error::Input(format!("unknown speaker {id}")))
    }

    /// Phoneme string of text `text_id` (without pauses or edge silences).
    pub fn text(&self, text_id: u64) -> Vec<usize> {
        let spec = &self.spec;
        let mut rng = rng_for(self.effective_seed, &[TAG_TEXT, text_id]);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        (0..len).map(|_| rng.random_range(1..self.inventory.len())).collect()
    }

    /// The phone sequence of a text in a style: pauses depend on text and style only,
    /// so different speakers saying the same text in one style share it.
    pub fn phones_for(&self, text_id: u64, style: &StyleProfile) -> Vec<usize> {
        let mut rng = rng_for(self.effective_seed, &[TAG_PAUSE, text_id, style_index(&style.name) as u64]);
        add_pauses(&self.text(text_id), style, &mut rng)
    }

    pub fn render_text(
        &self,
        id: &str,
        text_id: u64,
        speaker: &SpeakerProfile,
        style: &StyleProfile,
        split: Split,
    ) -> Result<Utterance> {
        let ids = self.phones_for(text_id, style);
        let tags = [TAG_RENDER, text_id, speaker.speaker_id as u64, style_index(&style.name) as u64];
        let mut rng = rng_for(self.effective_seed, &tags);
        let durations = sample_durations(&self.inventory, &ids, speaker, style, &mut rng);
        let phones = PhonemeSequence::with_durations(ids, durations)?;
        let (mel, f0_truth) = render_mel(&self.inventory, &phones, speaker, style, rng.random())?;
        Ok(Utterance {
            id: id.to_string(),
            phones,
            mel,
            f0_truth,
            speaker_id: speaker.speaker_id,
            style: style.name.clone(),
            split,
            text_id,
        })
    }
}

fn style_index(name: &str) -> usize {
    STYLE_NAMES.iter().position(|s| *s == name).unwrap_or(STYLE_NAMES.len())
}

fn utterance_container(u: &Utterance) -> Container {
    let mut c = Container::new(serde_json::json!({
        "id": u.id,
        "speaker_id": u.speaker_id,
        "style": u.style,
        "split": u.split,
        "text_id": u.text_id,
    }));
    c.insert_usizes("phones", &u.phones.ids);
    c.insert_usizes("durations", u.durations());
    c.insert_mat("mel", &u.mel.data);
    c.insert_mat(
        "f0",
        &Array2::from_shape_vec((u.f0_truth.values.len(), 1), u.f0_truth.values.clone()).unwrap(),
    );
    c
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn load_utterance(root: &Path, entry: &ManifestEntry) -> Result<Utterance> {
    let path: PathBuf = root.join(&entry.path);
    let c = Container::load(&path)?;
    let ids = c.usizes("phones")?;
    let durations = c.usizes("durations")?;
    let mel = MelSpectrogram::new(c.mat("mel")?, &FrameConfig::default())?;
    let f0 = c.mat("f0")?.column(0).to_vec();
    let total: usize = durations.iter().sum();
    if total != mel.frames() || f0.len() != mel.frames() {
        return Err(Error::Load(format!(
            "{}: durations sum to {total}, mel has {} frames, f0 has {}",
            path.display(),
            mel.frames(),
            f0.len()
        )));
    }
    Ok(Utterance {
        id: entry.id.clone(),
        phones: PhonemeSequence::with_durations(ids, durations)?,
        mel,
        f0_truth: F0Track {
            values: f0,
            search_lo: dsp::F0_SEARCH_LO,
            search_hi: dsp::F0_SEARCH_HI,
        },
        speaker_id: entry.speaker_id,
        style: entry.style.clone(),
        split: entry.split,
        text_id: entry.text_id,
    })
}

/// Same-speaker vs cross-speaker mean MCD over the neutral utterances.
pub fn separability(utterances: &[Utterance]) -> Result<Separability> {
    let items: Vec<(usize, dsp::CepstralVector)> = utterances
        .iter()
        .filter(|u| u.style == "neutral")
        .map(|u| Ok((u.speaker_id, dsp::time_averaged_cepstrum(&u.mel, dsp::DEFAULT_CEPSTRUM_K)?)))
        .collect::<Result<_>>()?;
    let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let d = dsp::mcd_from_cepstra(&items[i].1, &items[j].1)?;
            if items[i].0 == items[j].0 {
                same += d;
                n_same += 1;
            } else {
                cross += d;
                n_cross += 1;
            }
        }
    }
    if n_same == 0 || n_cross == 0 {
        return Err(Error::Input("separability needs two speakers with two utterances each".into()));
    }
    Ok(Separability {
        same_speaker: same / n_same as f64,
        cross_speaker: cross / n_cross as f64,
    })
}

/// Ground-truth aggregates for one (speaker, style) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub speaker_id: usize,
    pub style: String,
    pub utterances: usize,
    pub duration: DurationStats,
    pub median_duration: f64,
    /// Mean phoneme energy over non-silence phonemes.
    pub mean_energy: f64,
    pub mean_f0: f64,
    pub f0_std: f64,
}

/// Per-(speaker, style) statistics of non-silence phonemes, optionally for one style.
pub fn corpus_stats(utterances: &[Utterance], style: Option<&str>) -> Result<Vec<GroupStats>> {
    let mut groups: BTreeMap<(usize, String), Vec<&Utterance>> = BTreeMap::new();
    for u in utterances.iter().filter(|u| style.is_none_or(|s| u.style == s)) {
        groups.entry((u.speaker_id, u.style.clone())).or_default().push(u);
    }
    if groups.is_empty() {
        return Err(Error::Input(format!("no utterances match style filter {style:?}")));
    }
    groups
        .into_iter()
        .map(|((speaker_id, style), utts)| {
            let mut durations = Vec::new();
            let mut energies = Vec::new();
            let mut f0 = Vec::new();
            for u in &utts {
                let e = dsp::phoneme_energy(&u.mel, u.durations())?;
                for (i, (&id, &d)) in u.phones.ids.iter().zip(u.durations()).enumerate() {
                    if id != SILENCE {
                        durations.push(d);
                        energies.push(e[i]);
                    }
                }
                f0.extend(u.f0_truth.voiced());
            }
            let duration = dsp::duration_mean_std(&durations)?;
            let d_f64: Vec<f64> = durations.iter().map(|&d| d as f64).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let mean_f0 = mean(&f0);
            let f0_std = (f0.iter().map(|v| (v - mean_f0).powi(2)).sum::<f64>() / f0.len().max(1) as f64).sqrt();
            Ok(GroupStats {
                speaker_id,
                style,
                utterances: utts.len(),
                duration,
                median_duration: dsp::median(&d_f64).unwrap_or(0.0),
                mean_energy: mean(&energies),
                mean_f0,
                f0_std,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 4,
            n_val: 1,
            n_clone: 2,
            utts_per_speaker: 5,
            heldout_per_train_speaker: 1,
            style_variants: 2,
            ..CorpusSpec::default()
        }
    }

    fn fixture() -> (PhonemeInventory, SpeakerProfile) {
        let inv = PhonemeInventory::generate(3, 12, 4).unwrap();
        let speaker = SpeakerProfile::random(0, Split::Train, &mut rng_for(3, &[9]));
        (inv, speaker)
    }

    #[test]
    fn silence_renders_at_floor() {
        let (inv, speaker) = fixture();
        let phones = PhonemeSequence::with_durations(vec![0, 1, 0], vec![3, 2, 4]).unwrap();
        let (mel, f0) = render_mel(&inv, &phones, &speaker, &StyleProfile::named("happy").unwrap(), 5).unwrap();
        assert_eq!(mel.frames(), 9);
        assert_eq!(f0.values.len(), 9);
        for t in (0..3).chain(5..9) {
            assert!(mel.data.row(t).iter().all(|&v| v == dsp::log_floor()));
            assert_eq!(f0.values[t], 0.0);
        }
        assert!(f0.values[3] > 0.0);
    }

    #[test]
    fn energy_mult_two_adds_ln2_per_phoneme() {
        let (inv, speaker) = fixture();
        let phones = PhonemeSequence::with_durations(vec![0, 2, 14, 5, 0], vec![2, 3, 4, 2, 2]).unwrap();
        let quiet = StyleProfile::named("neutral").unwrap();
        let loud = StyleProfile {
            energy_mult: 2.0,
            ..quiet.clone()
        };
        let (a, _) = render_mel(&inv, &phones, &speaker, &quiet, 11).unwrap();
        let (b, _) = render_mel(&inv, &phones, &speaker, &loud, 11).unwrap();
        let ea = dsp::phoneme_energy(&a, &[2, 3, 4, 2, 2]).unwrap();
        let eb = dsp::phoneme_energy(&b, &[2, 3, 4, 2, 2]).unwrap();
        for i in 1..4 {
            assert!((eb[i] - ea[i] - 2f64.ln()).abs() < 1e-9, "phoneme {i}");
        }
    }

    #[test]
    fn f0_is_recovered_on_voiced_frames() {
        let spec = CorpusSpec::default();
        let corpus_info = Corpus::generate_with_seed(&CorpusSpec { n_train: 4, n_val: 0, n_clone: 2, utts_per_speaker: 2, heldout_per_train_speaker: 0, style_variants: 0, ..spec }, 4)
            .unwrap()
            .info;
        let harmonic = HarmonicModel::new(&FrameConfig::default(), ASPIRATION).unwrap();
        let estimator = dsp::F0Estimator::new(&dsp::f0_grid(60.0, 400.0, 1.0), &harmonic).unwrap();
        let (mut hits, mut voiced) = (0usize, 0usize);
        for k in 0..100u64 {
            let speaker = &corpus_info.speakers[k as usize % corpus_info.speakers.len()];
            let style = &corpus_info.styles[k as usize % 5];
            let u = corpus_info.render_text("t", 10_000 + k, speaker, style, Split::Val).unwrap();
            let track = estimator.track(&u.mel);
            for (truth, est) in u.f0_truth.values.iter().zip(&track.values) {
                if *truth > 0.0 {
                    voiced += 1;
                    hits += ((truth - est).abs() <= 10.0) as usize;
                }
            }
        }
        let rate = hits as f64 / voiced as f64;
        assert!(rate >= 0.95, "recovered {rate:.3} of {voiced} voiced frames");
    }

    #[test]
    fn corpus_counts_and_partitions() {
        let spec = small_spec();
        let corpus = Corpus::generate(&spec).unwrap();
        assert_eq!(corpus.utterances.len(), spec.expected_utterances());
        for u in &corpus.utterances {
            assert_eq!(u.durations().iter().sum::<usize>(), u.mel.frames());
            assert_eq!(u.f0_truth.values.len(), u.mel.frames());
            let speaker = corpus.speaker(u.speaker_id).unwrap();
            if u.split == Split::Train {
                assert_eq!(speaker.split, Split::Train);
            }
            if speaker.split == Split::Clone {
                assert_eq!(u.split, Split::Clone);
            }
            let text_len = u.phones.ids.iter().filter(|&&p| p != SILENCE).count();
            assert!((8..=20).contains(&text_len));
            speaker.validate().unwrap();
        }
        let sep = corpus.info.separability;
        assert!(sep.same_speaker < sep.cross_speaker, "{sep:?}");
    }

    #[test]
    fn generation_is_byte_identical() {
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        Corpus::generate(&spec).unwrap().write(a.path()).unwrap();
        Corpus::generate(&spec).unwrap().write(b.path()).unwrap();
        let entries = read_manifest(a.path()).unwrap();
        for name in [MANIFEST, CORPUS_INFO] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        for e in &entries {
            assert_eq!(fs::read(a.path().join(&e.path)).unwrap(), fs::read(b.path().join(&e.path)).unwrap());
        }
        let reopened = Corpus::open(a.path()).unwrap();
        assert_eq!(reopened.utterances, Corpus::generate(&spec).unwrap().utterances);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            CorpusSpec { n_train: 3, ..small_spec() },
            CorpusSpec { n_clone: 1, ..small_spec() },
            CorpusSpec { min_len: 9, max_len: 4, ..small_spec() },
        ] {
            assert!(matches!(Corpus::generate(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn slow_style_lengthens_durations() {
        let (inv, speaker) = fixture();
        let neutral = StyleProfile::named("neutral").unwrap();
        let slow = StyleProfile { duration_mult: 1.5, ..neutral.clone() };
        let mut utts = Vec::new();
        for (k, style) in [&neutral, &slow].into_iter().enumerate() {
            for t in 0..40u64 {
                let mut rng = rng_for(t, &[k as u64]);
                let ids: Vec<usize> = (0..15).map(|_| rng.random_range(1..inv.len())).collect();
                let durations = sample_durations(&inv, &ids, &speaker, style, &mut rng);
                let phones = PhonemeSequence::with_durations(ids, durations).unwrap();
                let (mel, f0_truth) = render_mel(&inv, &phones, &speaker, style, t).unwrap();
                utts.push(Utterance {
                    id: format!("{k}_{t}"),
                    phones,
                    mel,
                    f0_truth,
                    speaker_id: 0,
                    style: if k == 0 { "neutral".into() } else { "slow".into() },
                    split: Split::Train,
                    text_id: t,
                });
            }
        }
        let stats = corpus_stats(&utts, None).unwrap();
        let ratio = stats[1].duration.mean / stats[0].duration.mean;
        assert!((ratio - 1.5).abs() < 0.15, "ratio {ratio}");
        assert!(corpus_stats(&utts, Some("angry")).is_err());
    }

    #[test]
    fn monotone_style_has_jitter_level_f0_spread() {
        let (inv, speaker) = fixture();
        let monotone = StyleProfile { f0_range_mult: 0.0, ..StyleProfile::named("neutral").unwrap() };
        let phones = PhonemeSequence::with_durations(vec![1, 2, 3, 4, 5, 6], vec![6; 6]).unwrap();
        let (mel, f0_truth) = render_mel(&inv, &phones, &speaker, &monotone, 2).unwrap();
        let u = Utterance {
            id: "m".into(),
            phones,
            mel,
            f0_truth,
            speaker_id: 0,
            style: "monotone".into(),
            split: Split::Train,
            text_id: 0,
        };
        let stats = &corpus_stats(&[u], None).unwrap()[0];
        // Log-normal jitter with sigma 0.005 gives a relative spread of about 0.5%.
        assert!(stats.f0_std / stats.mean_f0 < 2.0 * F0_JITTER, "{stats:?}");
    }

    #[test]
    fn parse_and_format_round_trip() {
        let (inv, _) = fixture();
        let ids = inv.parse("sil v0 u1 v3 sil").unwrap();
        assert_eq!(inv.format(&ids), "sil v0 u1 v3 sil");
        assert!(matches!(inv.parse("v0 zz"), Err(Error::Input(_))));
        assert!(matches!(inv.parse("  "), Err(Error::Input(_))));
    }
}
