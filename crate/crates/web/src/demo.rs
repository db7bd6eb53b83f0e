//! The demo's three operations as plain Rust, so they run and test natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unet_tts::corpus::{add_pauses, render_mel, sample_durations, PhonemeInventory, SpeakerProfile, Split, StyleProfile};
use unet_tts::dsp::{self, F0Estimator, FrameConfig, HarmonicModel, MelSpectrogram};
use unet_tts::model::PhonemeSequence;
use unet_tts::Result;

/// Inventory seed used by the default generated corpus.
pub const DEFAULT_INVENTORY_SEED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoiceParams {
    pub f0_base: f64,
    pub spectral_tilt: f64,
    pub formant_shift: f64,
    pub rate_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub mel: MelSpectrogram,
    pub ids: Vec<usize>,
    pub durations: Vec<usize>,
    pub f0_truth: Vec<f64>,
}

pub struct Demo {
    pub inventory: PhonemeInventory,
    estimator: F0Estimator,
}

impl Demo {
    pub fn new(inventory_seed: u64) -> Result<Self> {
        let config = FrameConfig::default();
        let harmonic = HarmonicModel::new(&config, 0.05)?;
        Ok(Self {
            inventory: PhonemeInventory::generate(inventory_seed, 12, 4)?,
            estimator: F0Estimator::new(&dsp::f0_grid(dsp::F0_SEARCH_LO, dsp::F0_SEARCH_HI, 2.0), &harmonic)?,
        })
    }

    pub fn symbols(&self) -> Vec<String> {
        self.inventory.phonemes.iter().map(|p| p.symbol.clone()).collect()
    }

    /// Renders `text` (space-separated symbols) for an ad-hoc speaker and a named style.
    pub fn render(&self, text: &str, voice: VoiceParams, style: &str, seed: u64) -> Result<Rendered> {
        let style = StyleProfile::named(style)?;
        let speaker = SpeakerProfile {
            speaker_id: 0,
            f0_base: voice.f0_base,
            spectral_tilt: voice.spectral_tilt,
            formant_shift: voice.formant_shift,
            rate_scale: voice.rate_scale,
            split: Split::Clone,
        };
        speaker.validate()?;
        let words: Vec<usize> = self
            .inventory
            .parse(text)?
            .into_iter()
            .filter(|&id| id != unet_tts::corpus::SILENCE)
            .collect();
        if words.is_empty() {
            return Err(unet_tts::Error::Input("text has no non-silence phonemes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = add_pauses(&words, &style, &mut rng);
        let durations = sample_durations(&self.inventory, &ids, &speaker, &style, &mut rng);
        let phones = PhonemeSequence::with_durations(ids.clone(), durations.clone())?;
        let (mel, f0) = render_mel(&self.inventory, &phones, &speaker, &style, seed ^ 0x5eed)?;
        Ok(Rendered {
            mel,
            ids,
            durations,
            f0_truth: f0.values,
        })
    }

    /// Per-frame F0 estimate from the log-mel frames; 0 where unvoiced.
    pub fn track_f0(&self, mel: &MelSpectrogram) -> Vec<f64> {
        self.estimator.track(mel).values
    }
}

/// Time-averaged mel-cepstral distortion in dB.
pub fn mcd(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    dsp::mcd_time_averaged(a, b, dsp::DEFAULT_CEPSTRUM_K)
}
