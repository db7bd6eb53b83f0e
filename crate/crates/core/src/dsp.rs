//! Deterministic signal processing: mel analysis, cepstra, MCD, energy,
//! mel-domain F0 estimation and duration statistics.
//!
//! Everything here is a pure function of its inputs.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 800;
pub const HOP: usize = 200;
pub const WIN: usize = 800;
pub const N_MELS: usize = 80;

/// Magnitudes are clamped to this value before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;
pub const DEFAULT_CEPSTRUM_K: usize = 13;
pub const F0_SEARCH_LO: f64 = 60.0;
pub const F0_SEARCH_HI: f64 = 400.0;
/// Normalized template correlation below which a frame is unvoiced.
pub const VOICING_THRESHOLD: f64 = 0.5;

/// `ln(LOG_FLOOR)`: the value of a silent bin.
pub fn log_floor() -> f64 {
    LOG_FLOOR.ln()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Framing and filterbank parameters of a log-mel analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_fft: N_FFT,
            hop: HOP,
            win: WIN,
            n_mels: N_MELS,
            f_lo: 0.0,
            f_hi: SAMPLE_RATE as f64 / 2.0,
        }
    }
}

impl FrameConfig {
    /// Frame count for `n_samples` with centre padding.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }

    pub fn mel_bank(&self) -> Result<MelBank> {
        MelBank::new(self.sample_rate, self.n_mels, self.f_lo, self.f_hi)
    }
}

/// Triangular filters on the HTK mel scale, evaluated at arbitrary frequencies.
#[derive(Debug, Clone)]
pub struct MelBank {
    n_mels: usize,
    mel_lo: f64,
    mel_step: f64,
    /// `n_mels + 2` edge/centre frequencies in Hz.
    points_hz: Vec<f64>,
}

impl MelBank {
    pub fn new(sample_rate: u32, n_mels: usize, f_lo: f64, f_hi: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= nyquist) {
            return Err(Error::Config(format!(
                "mel range must satisfy 0 <= f_lo < f_hi <= {nyquist}, got [{f_lo}, {f_hi}]"
            )));
        }
        if n_mels < 2 {
            return Err(Error::Config(format!("n_mels must be >= 2, got {n_mels}")));
        }
        let mel_lo = hz_to_mel(f_lo);
        let mel_step = (hz_to_mel(f_hi) - mel_lo) / (n_mels + 1) as f64;
        let points_hz = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + i as f64 * mel_step))
            .collect();
        Ok(Self {
            n_mels,
            mel_lo,
            mel_step,
            points_hz,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.points_hz[m + 1]
    }

    /// Response of filter `m` to a spectral line at `hz`; peaks at 1 on the centre.
    pub fn response(&self, m: usize, hz: f64) -> f64 {
        let (lo, c, hi) = (
            self.points_hz[m],
            self.points_hz[m + 1],
            self.points_hz[m + 2],
        );
        if hz <= lo || hz >= hi {
            0.0
        } else if hz <= c {
            (hz - lo) / (c - lo)
        } else {
            (hi - hz) / (hi - c)
        }
    }

    /// Filters with non-zero response at `hz`, as a half-open range.
    pub fn support(&self, hz: f64) -> std::ops::Range<usize> {
        let pos = (hz_to_mel(hz) - self.mel_lo) / self.mel_step;
        let lo = (pos.floor() as isize - 1).max(0) as usize;
        let hi = ((pos.ceil() as isize + 1).max(0) as usize).min(self.n_mels);
        lo.min(hi)..hi
    }

    /// Fractional filter index whose centre sits at `hz`.
    pub fn bin_position(&self, hz: f64) -> f64 {
        (hz_to_mel(hz) - self.mel_lo) / self.mel_step - 1.0
    }

    /// Filterbank sampled on the FFT grid, each row scaled to peak 1.
    pub fn matrix(&self, sample_rate: u32, n_fft: usize) -> Array2<f64> {
        let n_bins = n_fft / 2 + 1;
        let mut fb = Array2::zeros((self.n_mels, n_bins));
        for m in 0..self.n_mels {
            for k in 0..n_bins {
                let hz = k as f64 * sample_rate as f64 / n_fft as f64;
                fb[[m, k]] = self.response(m, hz);
            }
            let peak = fb.row(m).fold(0.0f64, |a, &b| a.max(b));
            if peak > 0.0 {
                fb.row_mut(m).mapv_inplace(|v| v / peak);
            }
        }
        fb
    }
}

/// `n_mels x (n_fft/2 + 1)` triangular filterbank on the HTK mel scale.
pub fn build_mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_lo: f64,
    f_hi: f64,
) -> Result<Array2<f64>> {
    Ok(MelBank::new(sample_rate, n_mels, f_lo, f_hi)?.matrix(sample_rate, n_fft))
}

/// Natural-log mel magnitudes, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f64>,
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn new(data: Array2<f64>, config: &FrameConfig) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Input("mel spectrogram needs at least one frame".into()));
        }
        if data.ncols() != config.n_mels {
            return Err(Error::Shape(format!(
                "mel spectrogram has {} bins, config expects {}",
                data.ncols(),
                config.n_mels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "mel spectrogram".into(),
            });
        }
        Ok(Self {
            data,
            sample_rate: config.sample_rate,
            n_fft: config.n_fft,
            hop: config.hop,
            win: config.win,
            n_mels: config.n_mels,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig {
            sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            hop: self.hop,
            win: self.win,
            n_mels: self.n_mels,
            ..FrameConfig::default()
        }
    }

    /// Mean log-mel profile over time.
    pub fn time_average(&self) -> Array1<f64> {
        self.data
            .mean_axis(Axis(0))
            .expect("spectrogram has at least one frame")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, &self.data)
    }
}

pub(crate) fn write_matrix_csv(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for row in data.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Index into `0..n` under symmetric (numpy "reflect") extension.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
        .collect()
}

/// Centre-padded (reflect) Hann STFT magnitudes projected onto the mel bank,
/// then `ln(max(x, LOG_FLOOR))`.
pub fn log_mel_spectrogram(signal: &[f64], config: &FrameConfig) -> Result<MelSpectrogram> {
    if signal.is_empty() {
        return Err(Error::Input("signal must contain at least one sample".into()));
    }
    if config.win > config.n_fft || config.hop == 0 {
        return Err(Error::Config(format!(
            "invalid framing: win {} n_fft {} hop {}",
            config.win, config.n_fft, config.hop
        )));
    }
    let fb = config.mel_bank()?.matrix(config.sample_rate, config.n_fft);
    let n_bins = config.n_fft / 2 + 1;
    let pad = (config.n_fft / 2) as isize;
    let frames = config.frame_count(signal.len());

    // Window is centred inside the FFT frame when win < n_fft.
    let mut window = vec![0.0; config.n_fft];
    let offset = (config.n_fft - config.win) / 2;
    for (i, w) in hann(config.win).into_iter().enumerate() {
        window[offset + i] = w;
    }

    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); config.n_fft];
    let mut mag = Array1::<f64>::zeros(n_bins);
    let mut data = Array2::<f64>::zeros((frames, config.n_mels));
    for t in 0..frames {
        let start = (t * config.hop) as isize - pad;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = signal[reflect_index(start + i as isize, signal.len())];
            *slot = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            mag[k] = buf[k].norm();
        }
        let mel = fb.dot(&mag);
        for (m, v) in mel.iter().enumerate() {
            data[[t, m]] = v.max(LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(data, config)
}

/// Orthonormal DCT-II coefficients of a profile.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstralVector {
    pub coeffs: Vec<f64>,
}

fn dct_scale(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// First `k` orthonormal DCT-II coefficients of `x`.
pub fn dct_ii(x: ArrayView1<f64>, k: usize) -> Vec<f64> {
    let n = x.len();
    (0..k)
        .map(|q| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * q as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .sum();
            dct_scale(q, n) * s
        })
        .collect()
}

/// Inverse of [`dct_ii`] for a full set of coefficients (DCT-III).
pub fn idct_ii(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    (0..n)
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(q, v)| {
                    dct_scale(q, n) * v * (PI * q as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
                })
                .sum()
        })
        .collect()
}

pub fn mel_cepstrum(profile: ArrayView1<f64>, k: usize) -> Result<CepstralVector> {
    if k > profile.len() {
        return Err(Error::Input(format!(
            "cepstrum order {k} exceeds profile length {}",
            profile.len()
        )));
    }
    Ok(CepstralVector {
        coeffs: dct_ii(profile, k),
    })
}

/// Time-averaged cepstrum. The DCT is linear, so averaging per-frame cepstra equals
/// the cepstrum of the time-averaged log-mel profile.
pub fn time_averaged_cepstrum(mel: &MelSpectrogram, k: usize) -> Result<CepstralVector> {
    mel_cepstrum(mel.time_average().view(), k)
}

/// `(10 / ln 10) * sqrt(2 * sum_{k>=1} (a_k - b_k)^2)`; coefficient 0 is ignored.
pub fn mcd_from_cepstra(a: &CepstralVector, b: &CepstralVector) -> Result<f64> {
    if a.coeffs.len() != b.coeffs.len() {
        return Err(Error::Shape(format!(
            "cepstra of order {} and {}",
            a.coeffs.len(),
            b.coeffs.len()
        )));
    }
    let sq: f64 = a
        .coeffs
        .iter()
        .zip(&b.coeffs)
        .skip(1)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(10.0 / std::f64::consts::LN_10 * (2.0 * sq).sqrt())
}

/// Mel-cepstral distortion between time-averaged cepstra, in dB.
pub fn mcd_time_averaged(a: &MelSpectrogram, b: &MelSpectrogram, k: usize) -> Result<f64> {
    if a.n_mels != b.n_mels {
        return Err(Error::Input(format!(
            "mel bin counts differ: {} vs {}",
            a.n_mels, b.n_mels
        )));
    }
    if k < 2 {
        return Err(Error::Input(format!("MCD needs K >= 2, got {k}")));
    }
    mcd_from_cepstra(
        &time_averaged_cepstrum(a, k)?,
        &time_averaged_cepstrum(b, k)?,
    )
}

/// `ln(mean_m exp(logmel[m]))` of one frame.
pub fn frame_energy(frame: ArrayView1<f64>) -> f64 {
    let max = frame.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mean = frame.iter().map(|v| (v - max).exp()).sum::<f64>() / frame.len() as f64;
    max + mean.ln()
}

/// Per-phoneme mean of frame energies.
pub fn phoneme_energy(mel: &MelSpectrogram, durations: &[usize]) -> Result<Vec<f64>> {
    let total: usize = durations.iter().sum();
    if total != mel.frames() {
        return Err(Error::Alignment(format!(
            "durations sum to {total} frames, spectrogram has {}",
            mel.frames()
        )));
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut start = 0;
    for &d in durations {
        if d == 0 {
            return Err(Error::Alignment("zero-length phoneme".into()));
        }
        let e: f64 = (start..start + d)
            .map(|t| frame_energy(mel.data.row(t)))
            .sum::<f64>()
            / d as f64;
        out.push(e);
        start += d;
    }
    Ok(out)
}

/// Per-frame F0 in Hz, 0 for unvoiced frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Track {
    pub values: Vec<f64>,
    pub search_lo: f64,
    pub search_hi: f64,
}

impl F0Track {
    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|&v| v > 0.0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let data = Array2::from_shape_vec((self.values.len(), 1), self.values.clone())
            .expect("column vector");
        write_matrix_csv(path, &data)
    }
}

/// The harmonic stack shared by the corpus renderer and the F0 estimator: every
/// harmonic of F0 below `max_hz` is a spectral line projected through the mel bank,
/// on top of a broadband aspiration floor.
#[derive(Debug, Clone)]
pub struct HarmonicModel {
    pub bank: MelBank,
    /// Aspiration level relative to the envelope.
    pub aspiration: f64,
    pub max_hz: f64,
}

impl HarmonicModel {
    pub fn new(config: &FrameConfig, aspiration: f64) -> Result<Self> {
        Ok(Self {
            bank: config.mel_bank()?,
            aspiration,
            max_hz: config.f_hi,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.bank.n_mels()
    }

    /// Linear mel magnitudes of a voiced frame; `envelope(pos)` is the linear gain
    /// at fractional filter position `pos`.
    pub fn voiced_frame(&self, f0: f64, envelope: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.n_mels();
        let mut out: Vec<f64> = (0..n)
            .map(|m| self.aspiration * envelope(m as f64))
            .collect();
        let mut h = 1.0;
        while h * f0 < self.max_hz {
            let hz = h * f0;
            let gain = envelope(self.bank.bin_position(hz));
            for m in self.bank.support(hz) {
                out[m] += gain * self.bank.response(m, hz);
            }
            h += 1.0;
        }
        out
    }

    /// Log template of a flat-envelope voiced frame.
    pub fn log_template(&self, f0: f64) -> Vec<f64> {
        self.voiced_frame(f0, |_| 1.0)
            .into_iter()
            .map(|v| v.max(LOG_FLOOR).ln())
            .collect()
    }
}

/// Candidate F0 grid from `lo` to `hi` inclusive.
pub fn f0_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Filters below this frequency resolve individual harmonics and carry the pitch cue.
const PITCH_BAND_HZ: f64 = 2000.0;
const DETREND_HALF_WIDTH: usize = 3;

/// Removes the slowly varying envelope: subtract a centred moving average.
fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(DETREND_HALF_WIDTH);
            let hi = (i + DETREND_HALF_WIDTH + 1).min(n);
            let mean = x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            x[i] - mean
        })
        .collect()
}

/// Centres and scales to unit norm; `None` for a constant vector.
fn unit_centered(x: &[f64]) -> Option<Vec<f64>> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 1e-9).then(|| c.into_iter().map(|v| v / norm).collect())
}

/// Matched harmonic-template pitch tracker.
pub struct F0Estimator {
    grid: Vec<f64>,
    templates: Vec<Vec<f64>>,
    band: usize,
    threshold: f64,
}

impl F0Estimator {
    pub fn new(grid: &[f64], model: &HarmonicModel) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Config("F0 candidate grid is empty".into()));
        }
        if let Some(bad) = grid
            .iter()
            .find(|&&f| !(F0_SEARCH_LO..=F0_SEARCH_HI).contains(&f))
        {
            return Err(Error::Config(format!(
                "F0 candidate {bad} Hz outside [{F0_SEARCH_LO}, {F0_SEARCH_HI}]"
            )));
        }
        let band = (0..model.n_mels())
            .take_while(|&m| model.bank.center_hz(m) < PITCH_BAND_HZ)
            .count()
            .max(2 * DETREND_HALF_WIDTH + 2);
        let templates = grid
            .iter()
            .map(|&f0| {
                let t = model.log_template(f0);
                unit_centered(&detrend(&t[..band])).unwrap_or_else(|| vec![0.0; band])
            })
            .collect();
        Ok(Self {
            grid: grid.to_vec(),
            templates,
            band,
            threshold: VOICING_THRESHOLD,
        })
    }

    /// Best candidate and its correlation, or `None` for a featureless frame.
    pub fn best(&self, frame: ArrayView1<f64>) -> Option<(f64, f64)> {
        let x: Vec<f64> = frame.iter().take(self.band).copied().collect();
        let x = unit_centered(&detrend(&x))?;
        self.grid
            .iter()
            .zip(&self.templates)
            .map(|(&f0, t)| (f0, x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()))
            .fold(None, |best: Option<(f64, f64)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            })
    }

    pub fn track(&self, mel: &MelSpectrogram) -> F0Track {
        let values = mel
            .data
            .rows()
            .into_iter()
            .map(|row| match self.best(row) {
                Some((f0, corr)) if corr >= self.threshold => f0,
                _ => 0.0,
            })
            .collect();
        F0Track {
            values,
            search_lo: self.grid.iter().copied().fold(f64::INFINITY, f64::min),
            search_hi: self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Per frame, the grid candidate whose harmonic template best correlates with the
/// frame; frames under the voicing threshold are 0.
pub fn estimate_f0_mel(mel: &MelSpectrogram, grid: &[f64], model: &HarmonicModel) -> Result<F0Track> {
    Ok(F0Estimator::new(grid, model)?.track(mel))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn duration_mean_std(durations: &[usize]) -> Result<DurationStats> {
    if durations.is_empty() {
        return Err(Error::Input("duration list is empty".into()));
    }
    let n = durations.len() as f64;
    let mean = durations.iter().sum::<usize>() as f64 / n;
    let var = durations
        .iter()
        .map(|&d| (d as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(DurationStats {
        mean,
        std: var.sqrt(),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn mel_from(data: Array2<f64>) -> MelSpectrogram {
        MelSpectrogram::new(data, &FrameConfig::default()).unwrap()
    }

    #[test]
    fn filterbank_shape_and_peaks() {
        let fb = build_mel_filterbank(16000, 800, 80, 0.0, 8000.0).unwrap();
        assert_eq!(fb.dim(), (80, 401));
        for row in fb.rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            let peak = row.fold(0.0f64, |a, &b| a.max(b));
            assert!((peak - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn filterbank_covers_interior_bins() {
        let bank = MelBank::new(16000, 80, 0.0, 8000.0).unwrap();
        let fb = bank.matrix(16000, 800);
        let (first, last) = (bank.center_hz(0), bank.center_hz(79));
        for k in 0..401 {
            let hz = k as f64 * 20.0;
            if hz > first && hz < last {
                assert!(fb.column(k).sum() > 0.0, "bin {k} ({hz} Hz) uncovered");
            }
        }
    }

    #[test]
    fn filterbank_rejects_bad_range() {
        assert!(matches!(
            build_mel_filterbank(16000, 800, 80, 100.0, 50.0),
            Err(Error::Config(_))
        ));
        assert!(build_mel_filterbank(16000, 800, 80, 0.0, 9000.0).is_err());
        assert!(build_mel_filterbank(16000, 800, 1, 0.0, 8000.0).is_err());
    }

    #[test]
    fn one_second_gives_81_frames() {
        let sig = vec![0.1; 16000];
        let mel = log_mel_spectrogram(&sig, &FrameConfig::default()).unwrap();
        assert_eq!(mel.frames(), 81);
        assert_eq!(mel.n_mels, 80);
    }

    #[test]
    fn frame_count_law_sweep() {
        let cfg = FrameConfig {
            n_fft: 64,
            hop: 16,
            win: 64,
            n_mels: 8,
            ..FrameConfig::default()
        };
        for n in (1..=2000).step_by(7) {
            let sig: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
            let mel = log_mel_spectrogram(&sig, &cfg).unwrap();
            assert_eq!(mel.frames(), 1 + n / 16, "N = {n}");
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let mel = log_mel_spectrogram(&[0.0; 4000], &FrameConfig::default()).unwrap();
        assert!(mel.data.iter().all(|&v| v == log_floor()));
    }

    #[test]
    fn empty_signal_is_rejected() {
        assert!(matches!(
            log_mel_spectrogram(&[], &FrameConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn tone_argmax_matches_filter_lookup() {
        let cfg = FrameConfig::default();
        let sig: Vec<f64> = (0..8000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16000.0).sin())
            .collect();
        let mel = log_mel_spectrogram(&sig, &cfg).unwrap();
        // Oracle: a bin-centred tone under a periodic Hann window leaks into exactly
        // three FFT bins with weights 1/2, 1, 1/2 (bins 49, 50, 51 for 1 kHz).
        let fb = cfg.mel_bank().unwrap().matrix(16000, 800);
        let score = |m: usize| 0.5 * fb[[m, 49]] + fb[[m, 50]] + 0.5 * fb[[m, 51]];
        let expected = (0..80).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        // Frames whose window lies entirely inside the signal (no reflected edges).
        for t in 2..mel.frames() - 2 {
            let row = mel.data.row(t);
            let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn cepstrum_of_constant_and_zero() {
        let c = mel_cepstrum(Array1::from_elem(80, 2.5).view(), 13).unwrap();
        assert!((c.coeffs[0] - 2.5 * 80f64.sqrt()).abs() < 1e-12);
        assert!(c.coeffs[1..].iter().all(|v| v.abs() < 1e-12));
        let z = mel_cepstrum(Array1::zeros(80).view(), 13).unwrap();
        assert!(z.coeffs.iter().all(|&v| v == 0.0));
        assert!(mel_cepstrum(Array1::zeros(10).view(), 11).is_err());
    }

    #[test]
    fn cosine_profile_lands_in_coefficient_one() {
        let n = 80;
        let x = Array1::from_shape_fn(n, |i| (PI * (2 * i + 1) as f64 / (2 * n) as f64).cos());
        let c = mel_cepstrum(x.view(), 13).unwrap();
        let energy: f64 = c.coeffs.iter().map(|v| v * v).sum();
        assert!(c.coeffs[1].powi(2) / energy > 1.0 - 1e-12);
    }

    #[test]
    fn mcd_identical_and_single_coefficient() {
        let a = mel_from(Array2::from_shape_fn((5, 80), |(t, m)| (t + m) as f64 * 0.01));
        assert_eq!(mcd_time_averaged(&a, &a, 13).unwrap(), 0.0);

        // Shift the profile along basis function 3 so the cepstra differ by exactly 1 there.
        let basis: Vec<f64> = idct_ii(&{
            let mut c = vec![0.0; 80];
            c[3] = 1.0;
            c
        });
        let mut b = a.clone();
        for mut row in b.data.rows_mut() {
            for (v, d) in row.iter_mut().zip(&basis) {
                *v += d;
            }
        }
        let mcd = mcd_time_averaged(&a, &b, 13).unwrap();
        let expected = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
        assert!((mcd - expected).abs() < 1e-9);
        assert!((expected - 6.1419).abs() < 1e-4);
    }

    #[test]
    fn mcd_input_errors() {
        let a = mel_from(Array2::zeros((2, 80)));
        let cfg = FrameConfig {
            n_mels: 40,
            ..FrameConfig::default()
        };
        let b = MelSpectrogram::new(Array2::zeros((2, 40)), &cfg).unwrap();
        assert!(matches!(mcd_time_averaged(&a, &b, 13), Err(Error::Input(_))));
        assert!(mcd_time_averaged(&a, &a, 1).is_err());
    }

    #[test]
    fn energy_uniform_loud_and_single() {
        let mel = mel_from(Array2::from_elem((6, 80), -1.5));
        let e = phoneme_energy(&mel, &[2, 3, 1]).unwrap();
        assert!(e.iter().all(|v| (v + 1.5).abs() < 1e-12));

        let mut loud = mel.clone();
        for t in 2..5 {
            loud.data.row_mut(t).mapv_inplace(|v| v + 1.0);
        }
        let e = phoneme_energy(&loud, &[2, 3, 1]).unwrap();
        assert!((e[1] - e[0] - 1.0).abs() < 1e-12);
        assert!((e[1] - e[2] - 1.0).abs() < 1e-12);

        let rnd = mel_from(Array2::from_shape_fn((7, 80), |(t, m)| ((t * 31 + m * 17) % 11) as f64 * 0.3));
        let whole = phoneme_energy(&rnd, &[7]).unwrap()[0];
        let mean: f64 = (0..7).map(|t| frame_energy(rnd.data.row(t))).sum::<f64>() / 7.0;
        assert!((whole - mean).abs() < 1e-12);
    }

    #[test]
    fn energy_alignment_error() {
        let mel = mel_from(Array2::zeros((6, 80)));
        assert!(matches!(phoneme_energy(&mel, &[2, 2]), Err(Error::Alignment(_))));
    }

    #[test]
    fn duration_stats_examples() {
        let s = duration_mean_std(&[2, 4, 6]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert!((s.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.std - 1.633).abs() < 1e-3);
        let s = duration_mean_std(&[5, 5, 5]).unwrap();
        assert_eq!((s.mean, s.std), (5.0, 0.0));
        let s = duration_mean_std(&[7]).unwrap();
        assert_eq!((s.mean, s.std), (7.0, 0.0));
        assert!(duration_mean_std(&[]).is_err());
    }

    fn harmonic() -> HarmonicModel {
        HarmonicModel::new(&FrameConfig::default(), 0.05).unwrap()
    }

    #[test]
    fn f0_of_rendered_frame() {
        let model = harmonic();
        let grid = f0_grid(60.0, 400.0, 1.0);
        for f0 in [95.0, 150.0, 200.0, 255.0] {
            // Smooth envelope with a formant bump.
            let frame: Vec<f64> = model
                .voiced_frame(f0, |p| (-(p - 20.0).powi(2) / 200.0).exp() + 0.2)
                .into_iter()
                .map(|v| v.max(LOG_FLOOR).ln())
                .collect();
            let mel = mel_from(Array2::from_shape_vec((1, 80), frame).unwrap());
            let track = estimate_f0_mel(&mel, &grid, &model).unwrap();
            assert!((track.values[0] - f0).abs() <= 10.0, "{f0} -> {}", track.values[0]);
        }
    }

    #[test]
    fn silent_frame_is_unvoiced() {
        let mel = mel_from(Array2::from_elem((3, 80), log_floor()));
        let track = estimate_f0_mel(&mel, &f0_grid(60.0, 400.0, 2.0), &harmonic()).unwrap();
        assert!(track.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        let mel = mel_from(Array2::zeros((1, 80)));
        assert!(matches!(
            estimate_f0_mel(&mel, &[], &harmonic()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let _ = array![1.0];
    }

    proptest! {
        #[test]
        fn dct_round_trip(profile in proptest::collection::vec(-30.0f64..5.0, 80)) {
            let x = Array1::from(profile.clone());
            let c = dct_ii(x.view(), 80);
            let back = idct_ii(&c);
            for (a, b) in back.iter().zip(&profile) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn mcd_is_a_pseudometric(
            a in proptest::collection::vec(-5.0f64..5.0, 160),
            b in proptest::collection::vec(-5.0f64..5.0, 160),
        ) {
            let ma = mel_from(Array2::from_shape_vec((2, 80), a).unwrap());
            let mb = mel_from(Array2::from_shape_vec((2, 80), b).unwrap());
            let ab = mcd_time_averaged(&ma, &mb, 13).unwrap();
            let ba = mcd_time_averaged(&mb, &ma, 13).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(mcd_time_averaged(&ma, &ma, 13).unwrap(), 0.0);
        }

        #[test]
        fn energy_ignores_bin_order(
            frame in proptest::collection::vec(-20.0f64..3.0, 80),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm = frame.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = frame_energy(Array1::from(frame).view());
            let b = frame_energy(Array1::from(perm).view());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
