//! Objective analyses: reconstruction-curve comparison, per-level embedding PCA with
//! speaker separability, MCD voice-transfer trials and style-transfer distributions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, Corpus, Split, Utterance, HELDOUT_TEXT_BASE, SILENCE, STYLE_NAMES};
use crate::dsp::{self, FrameConfig, HarmonicModel};
use crate::error::{Error, Result};
use crate::model::{PhonemeSequence, UnetTts};
use crate::nn::Mat;
use crate::training::LossReport;

/// Two leading principal components of a point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `N x 2` projections of the centred points.
    pub projections: Array2<f64>,
    /// `2 x D` unit components.
    pub components: Array2<f64>,
    pub explained_variance_ratio: [f64; 2],
    pub eigenvalues: [f64; 2],
    /// Set when the points have no variance; projections are then all zero.
    pub degenerate: bool,
}

pub fn pca_2d(points: &Mat) -> Result<Pca> {
    let (n, d) = points.dim();
    if n < 3 {
        return Err(Error::Input(format!("PCA needs at least 3 points, got {n}")));
    }
    let mean = points.mean_axis(Axis(0)).unwrap();
    let centered = points - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let total: f64 = cov.diag().sum();
    if total <= 1e-300 {
        return Ok(Pca {
            projections: Array2::zeros((n, 2)),
            components: Array2::zeros((2, d)),
            explained_variance_ratio: [0.0, 0.0],
            eigenvalues: [0.0, 0.0],
            degenerate: true,
        });
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Array2::zeros((2, d));
    let mut eigenvalues = [0.0; 2];
    for (k, &i) in order.iter().take(2).enumerate() {
        let col = eig.eigenvectors.column(i);
        let biggest = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let sign = if biggest < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[k, j]] = sign * col[j];
        }
        eigenvalues[k] = eig.eigenvalues[i].max(0.0);
    }
    let projections = centered.dot(&components.t());
    Ok(Pca {
        projections,
        components,
        explained_variance_ratio: [eigenvalues[0] / total, eigenvalues[1] / total],
        eigenvalues,
        degenerate: false,
    })
}

/// Between-centroid variance over mean within-speaker variance.
pub fn separability_ratio(vectors: &Mat, labels: &[usize]) -> Result<f64> {
    if vectors.nrows() != labels.len() {
        return Err(Error::Input("one label per vector required".into()));
    }
    let mut groups: Vec<usize> = labels.to_vec();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < 2 {
        return Err(Error::Input("separability needs at least two speakers".into()));
    }
    let grand = vectors.mean_axis(Axis(0)).unwrap();
    let (mut between, mut within) = (0.0, 0.0);
    for g in &groups {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == *g).collect();
        let members = vectors.select(Axis(0), &rows);
        let centroid = members.mean_axis(Axis(0)).unwrap();
        between += (&centroid - &grand).mapv(|v| v * v).sum();
        within += (&members - &centroid).mapv(|v| v * v).sum() / rows.len() as f64;
    }
    let k = groups.len() as f64;
    Ok((between / k) / (within / k).max(1e-300))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelEmbedding {
    /// 1-based IN level (1 is nearest the mel input).
    pub level: usize,
    /// `N x 2H` (mean ‖ std) vectors.
    pub vectors: Array2<f64>,
    pub pca: Pca,
    pub separability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embeddings {
    pub speakers: Vec<usize>,
    pub styles: Vec<String>,
    pub levels: Vec<LevelEmbedding>,
}

/// Style-encoder statistics of each utterance, per level, with PCA and separability.
pub fn embed_levels(model: &UnetTts, utterances: &[&Utterance]) -> Result<Embeddings> {
    let l = model.config.unet_levels;
    let mut per_level: Vec<Vec<Array1<f64>>> = vec![Vec::new(); l];
    for u in utterances {
        let (stats, _) = model.style_encode(&u.mel.data)?;
        for (i, s) in stats.levels.iter().enumerate() {
            per_level[i].push(s.concat());
        }
    }
    let speakers: Vec<usize> = utterances.iter().map(|u| u.speaker_id).collect();
    let levels = per_level
        .into_iter()
        .enumerate()
        .map(|(i, rows)| {
            let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
            let vectors = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            Ok(LevelEmbedding {
                level: i + 1,
                pca: pca_2d(&vectors)?,
                separability: separability_ratio(&vectors, &speakers)?,
                vectors,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Embeddings {
        speakers,
        styles: utterances.iter().map(|u| u.style.clone()).collect(),
        levels,
    })
}

impl Embeddings {
    /// `level,speaker_id,style_id,pc1,pc2`.
    pub fn points_csv(&self) -> String {
        let mut s = String::from("level,speaker_id,style_id,pc1,pc2\n");
        for lvl in &self.levels {
            for (i, p) in lvl.pca.projections.rows().into_iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{:e},{:e}", lvl.level, self.speakers[i], self.styles[i], p[0], p[1]);
            }
        }
        s
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "levels": self.levels.iter().map(|l| serde_json::json!({
                "level": l.level,
                "dim": l.vectors.ncols(),
                "separability": l.separability,
                "explained_variance_ratio": l.pca.explained_variance_ratio,
                "degenerate": l.pca.degenerate,
            })).collect::<Vec<_>>(),
            "points": self.speakers.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdTrial {
    pub speaker_id: usize,
    pub style: String,
    pub text_id: u64,
    pub other_speaker_id: usize,
    pub matched: f64,
    pub mismatched: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdReport {
    pub trials: Vec<McdTrial>,
    pub mean_matched: f64,
    pub mean_mismatched: f64,
    /// Fraction of trials with matched < mismatched.
    pub win_rate: f64,
}

impl McdReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("speaker_id,style,text_id,other_speaker_id,matched_mcd,mismatched_mcd\n");
        for t in &self.trials {
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{:e}",
                t.speaker_id, t.style, t.text_id, t.other_speaker_id, t.matched, t.mismatched
            );
        }
        s
    }
}

fn clone_refs<'a>(corpus: &'a Corpus, speaker: usize, style: &str) -> Vec<&'a Utterance> {
    corpus
        .utterances
        .iter()
        .filter(|u| u.split == Split::Clone && u.speaker_id == speaker && u.style == style && u.id.contains(style))
        .collect()
}

fn clone_speakers(corpus: &Corpus) -> Vec<usize> {
    corpus
        .info
        .speakers
        .iter()
        .filter(|s| s.split == Split::Clone)
        .map(|s| s.speaker_id)
        .collect()
}

/// For every clone speaker, style and held-out text: synthesize from a reference of
/// that speaker and style, then compare against renders of the text by the same
/// speaker and by another clone speaker.
pub fn eval_mcd_transfer(model: &UnetTts, corpus: &Corpus, texts_per_cell: usize, seed: u64) -> Result<McdReport> {
    let speakers = clone_speakers(corpus);
    if speakers.len() < 2 || texts_per_cell == 0 {
        return Err(Error::Config("MCD transfer needs two clone speakers and at least one text".into()));
    }
    let info = &corpus.info;
    let mut trials = Vec::new();
    for &s in &speakers {
        for (style_idx, style_name) in STYLE_NAMES.into_iter().enumerate() {
            let style = info.style(style_name)?;
            let refs = clone_refs(corpus, s, style_name);
            if refs.is_empty() {
                return Err(Error::Config(format!("clone speaker {s} has no {style_name} reference")));
            }
            for k in 0..texts_per_cell {
                let text_id = HELDOUT_TEXT_BASE + k as u64;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[s as u64, k as u64, style_idx as u64]));
                let reference = refs[k % refs.len()];
                let others: Vec<usize> = speakers.iter().copied().filter(|&o| o != s).collect();
                let other = others[rng.random_range(0..others.len())];
                let phones = PhonemeSequence::new(info.phones_for(text_id, style));
                let (synth, _) = model.synthesize(&phones, &reference.mel, reference.durations())?;
                let matched = info.render_text("m", text_id, info.speaker(s)?, style, Split::Clone)?;
                let mismatched = info.render_text("x", text_id, info.speaker(other)?, style, Split::Clone)?;
                trials.push(McdTrial {
                    speaker_id: s,
                    style: style_name.to_string(),
                    text_id,
                    other_speaker_id: other,
                    matched: dsp::mcd_time_averaged(&synth, &matched.mel, dsp::DEFAULT_CEPSTRUM_K)?,
                    mismatched: dsp::mcd_time_averaged(&synth, &mismatched.mel, dsp::DEFAULT_CEPSTRUM_K)?,
                });
            }
        }
    }
    let n = trials.len() as f64;
    Ok(McdReport {
        mean_matched: trials.iter().map(|t| t.matched).sum::<f64>() / n,
        mean_mismatched: trials.iter().map(|t| t.mismatched).sum::<f64>() / n,
        win_rate: trials.iter().filter(|t| t.matched < t.mismatched).count() as f64 / n,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleDistribution {
    pub style: String,
    pub trials: usize,
    pub durations: Vec<f64>,
    pub energies: Vec<f64>,
    pub f0: Vec<f64>,
    pub median_duration: f64,
    pub median_energy: f64,
    pub median_f0: f64,
    pub reference_median_duration: f64,
    pub reference_median_energy: f64,
    pub reference_median_f0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub styles: Vec<StyleDistribution>,
}

impl DistributionReport {
    pub fn style(&self, name: &str) -> Result<&StyleDistribution> {
        self.styles
            .iter()
            .find(|s| s.style == name)
            .ok_or_else(|| Error::Input(format!("no distribution for style {name:?}")))
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(
            "style,trials,samples,median_duration,median_energy,median_f0,ref_median_duration,ref_median_energy,ref_median_f0\n",
        );
        for d in &self.styles {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                d.style,
                d.trials,
                d.durations.len(),
                d.median_duration,
                d.median_energy,
                d.median_f0,
                d.reference_median_duration,
                d.reference_median_energy,
                d.reference_median_f0
            );
        }
        s
    }
}

fn non_silence<'a, T: Copy>(ids: &'a [usize], values: &'a [T]) -> impl Iterator<Item = T> + 'a {
    ids.iter().zip(values).filter(|(&id, _)| id != SILENCE).map(|(_, &v)| v)
}

/// Per style: synthesize every clone reference of that style over `texts` held-out
/// texts and gather phoneme durations, phoneme energies and F0, next to the same
/// measurements on the references themselves.
pub fn eval_distributions(model: &UnetTts, corpus: &Corpus, texts: usize) -> Result<DistributionReport> {
    let config = FrameConfig::default();
    let estimator = dsp::F0Estimator::new(&dsp::f0_grid(dsp::F0_SEARCH_LO, dsp::F0_SEARCH_HI, 1.0), &HarmonicModel::new(&config, 0.05)?)?;
    let info = &corpus.info;
    let mut styles = Vec::new();
    for style_name in STYLE_NAMES {
        let style = info.style(style_name)?;
        let refs: Vec<&Utterance> = clone_speakers(corpus)
            .into_iter()
            .flat_map(|s| clone_refs(corpus, s, style_name))
            .collect();
        let (mut durations, mut energies, mut f0) = (Vec::new(), Vec::new(), Vec::new());
        let (mut ref_d, mut ref_e, mut ref_f0) = (Vec::new(), Vec::new(), Vec::new());
        let mut trials = 0;
        for r in &refs {
            let e = dsp::phoneme_energy(&r.mel, r.durations())?;
            ref_d.extend(non_silence(&r.phones.ids, r.durations()).map(|d| d as f64));
            ref_e.extend(non_silence(&r.phones.ids, &e));
            ref_f0.extend(r.f0_truth.voiced());
            for k in 0..texts {
                let ids = info.phones_for(HELDOUT_TEXT_BASE + k as u64, style);
                let (mel, d) = model.synthesize(&PhonemeSequence::new(ids.clone()), &r.mel, r.durations())?;
                let e = dsp::phoneme_energy(&mel, &d)?;
                durations.extend(non_silence(&ids, &d).map(|d| d as f64));
                energies.extend(non_silence(&ids, &e));
                f0.extend(estimator.track(&mel).voiced());
                trials += 1;
            }
        }
        let med = |v: &[f64]| dsp::median(v).unwrap_or(f64::NAN);
        styles.push(StyleDistribution {
            style: style_name.to_string(),
            trials,
            median_duration: med(&durations),
            median_energy: med(&energies),
            median_f0: med(&f0),
            reference_median_duration: med(&ref_d),
            reference_median_energy: med(&ref_e),
            reference_median_f0: med(&ref_f0),
            durations,
            energies,
            f0,
        });
    }
    Ok(DistributionReport { styles })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveComparison {
    /// `(step, full val l1, ablation val l1)` per logged validation point.
    pub rows: Vec<(u64, f64, f64)>,
    pub final_full: f64,
    pub final_ablation: f64,
    /// `final_full / final_ablation`.
    pub ratio: f64,
}

impl CurveComparison {
    pub fn csv(&self) -> String {
        let mut s = String::from("step,full_l1,ablation_l1\n");
        for (step, a, b) in &self.rows {
            let _ = writeln!(s, "{step},{a:e},{b:e}");
        }
        s
    }
}

/// Aligns two validation curves and compares the means of their last `window` points.
pub fn eval_reconstruction_curves(full: &[LossReport], ablation: &[LossReport], window: usize) -> Result<CurveComparison> {
    if full.is_empty() || full.len() != ablation.len() || full.iter().zip(ablation).any(|(a, b)| a.step != b.step) {
        return Err(Error::Input("validation curves use different step grids".into()));
    }
    let w = window.clamp(1, full.len());
    let tail = |r: &[LossReport]| r[r.len() - w..].iter().map(|x| x.l1_mel).sum::<f64>() / w as f64;
    let (final_full, final_ablation) = (tail(full), tail(ablation));
    Ok(CurveComparison {
        rows: full.iter().zip(ablation).map(|(a, b)| (a.step, a.l1_mel, b.l1_mel)).collect(),
        final_full,
        final_ablation,
        ratio: final_full / final_ablation,
    })
}

/// Running median over a centred window, shrinking at the edges.
pub fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            dsp::median(&values[lo..hi]).unwrap()
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}
