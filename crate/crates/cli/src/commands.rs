use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::{json, Value};

use unet_tts::corpus::{Corpus, Split};
use unet_tts::eval::{embed_levels, eval_distributions, eval_mcd_transfer, eval_reconstruction_curves, write_json, write_text};
use unet_tts::model::{gradient_suite, DecoderStats, ModelConfig, PhonemeSequence, Stage, UnetTts};
use unet_tts::training::{
    load_checkpoint, resume, train_stage1, train_stage2, Checkpoint, LossReport, TrainOutcome, VERSION,
};

use crate::config::{parse_assignment, validate, write_run_config, Resolved, RunConfig};
use crate::{plot, Cli, Command, Common, EvalArgs, Failure, TrainArgs};

const GRAD_TOLERANCE: f64 = 1e-4;

pub fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let c = &cli.common;
    match &cli.command {
        Command::GenCorpus { out } => gen_corpus(c, out.as_deref()),
        Command::Pretrain(args) => pretrain(c, args),
        Command::Train {
            args,
            from,
            single_level_stats,
            train_duration,
        } => train(c, args, from.as_deref(), *single_level_stats, *train_duration),
        Command::Synth {
            text,
            reference,
            out,
            checkpoint,
        } => synth(c, text, reference, out, checkpoint.as_deref()),
        Command::EvalMcd {
            args,
            texts_per_cell,
            null,
        } => eval_mcd(c, args, *texts_per_cell, *null),
        Command::EvalDist { args, texts } => eval_dist(c, args, *texts),
        Command::InspectEmbed { args, all_styles } => inspect_embed(c, args, *all_styles),
        Command::Ablate { args, from } => ablate(c, args, from.as_deref()),
        Command::GradCheck { out, seeds } => grad_check(out.as_deref(), *seeds),
    }
}

fn resolve(c: &Common, seed_key: &str, extra: Vec<(String, Value)>) -> Result<Resolved, Failure> {
    let mut flags = c.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(p) = &c.corpus {
        flags.push(("paths.corpus".into(), json!(p)));
    }
    flags.extend(extra);
    if let Some(seed) = c.seed {
        flags.push((seed_key.into(), seed.into()));
    }
    let env = std::env::var("UTTS_SEED").ok();
    Resolved::resolve(c.config.as_deref(), &flags, env.as_deref(), seed_key)
}

fn train_flags(args: &TrainArgs) -> Vec<(String, Value)> {
    let mut f = Vec::new();
    if let Some(s) = args.steps {
        f.push(("train.steps".into(), s.into()));
    }
    if let Some(lr) = args.lr {
        f.push(("train.learning_rate".into(), lr.into()));
    }
    if let Some(b) = args.batch_size {
        f.push(("train.batch_size".into(), b.into()));
    }
    f
}

fn finish(res: &Resolved) -> Result<RunConfig, Failure> {
    let cfg = res.config()?;
    validate(&cfg)?;
    Ok(cfg)
}

fn open_corpus(res: &mut Resolved) -> Result<Corpus, Failure> {
    let root = res.config()?.paths.corpus;
    let corpus = Corpus::open(&root)
        .with_context(|| format!("cannot open corpus at {} (run `utts gen-corpus` first)", root.display()))?;
    let reason = format!("the corpus at {}", root.display());
    res.pin("corpus", &corpus.info.spec, &reason)?;
    res.pin("model.n_phonemes", &corpus.info.inventory.len(), &reason)?;
    res.pin("model.n_speakers", &corpus.info.spec.n_train, &reason)?;
    Ok(corpus)
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(unet_tts::Error::State(format!("no checkpoint at {}", path.display())).into());
    }
    Ok(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?)
}

/// Loads a stage-2 checkpoint and pins the model section to it.
fn load_trained(res: &mut Resolved, path: Option<&Path>) -> Result<Checkpoint, Failure> {
    let path = path.map_or_else(|| res.config().map(|c| c.paths.runs.join("transfer").join("best.utts")), |p| Ok(p.to_path_buf()))?;
    if !path.exists() {
        return Err(unet_tts::Error::State(format!(
            "no trained checkpoint at {} (run `utts pretrain` and `utts train` first)",
            path.display()
        ))
        .into());
    }
    let ckpt = load(&path)?;
    if ckpt.stage != Stage::Transfer {
        return Err(unet_tts::Error::State(format!(
            "{} is a stage-1 checkpoint; synthesis and evaluation need a stage-2 checkpoint",
            path.display()
        ))
        .into());
    }
    res.pin("model", &ckpt.model.config, &format!("checkpoint {}", path.display()))?;
    Ok(ckpt)
}

fn gen_corpus(c: &Common, out: Option<&Path>) -> Result<(), Failure> {
    let mut res = resolve(c, "corpus.seed", Vec::new())?;
    if let Some(out) = out {
        res.set("paths.corpus", &out);
    }
    let cfg = finish(&res)?;
    let root = &cfg.paths.corpus;
    let corpus = Corpus::generate(&cfg.corpus)?;
    corpus.write(root)?;
    write_run_config(root, &cfg)?;
    let sep = &corpus.info.separability;
    println!(
        "wrote {} utterances to {} (seed {}, speaker separability {:.3} same vs {:.3} cross)",
        corpus.utterances.len(),
        root.display(),
        corpus.info.effective_seed,
        sep.same_speaker,
        sep.cross_speaker
    );
    Ok(())
}

fn resume_from(res: &mut Resolved, path: &Path, stage: Stage) -> Result<Checkpoint, Failure> {
    let mut ckpt = load(path)?;
    if ckpt.stage != stage {
        return Err(unet_tts::Error::State(format!(
            "{} is a stage-{} checkpoint, expected stage {}",
            path.display(),
            ckpt.stage.number(),
            stage.number()
        ))
        .into());
    }
    let reason = format!("resumed checkpoint {}", path.display());
    ckpt.config.steps = res.config()?.train.steps;
    res.pin("train", &ckpt.config, &reason)?;
    res.pin("model", &ckpt.model.config, &reason)?;
    Ok(ckpt)
}

fn report_training(outcome: &TrainOutcome, out: &Path, png: bool) -> Result<(), Failure> {
    let (first, last) = (outcome.val_reports.first(), outcome.val_reports.last());
    if let (Some(a), Some(b)) = (first, last) {
        println!(
            "validation l1_mel {:.4} at step {} -> {:.4} at step {} (ratio {:.3})",
            a.l1_mel,
            a.step,
            b.l1_mel,
            b.step,
            b.l1_mel / a.l1_mel
        );
    }
    if let Some((step, v)) = outcome.best_val {
        println!("best validation total {v:.4} at step {step}");
    }
    println!("checkpoints and loss CSVs in {}", out.display());
    if png {
        let curve = |r: &[LossReport]| r.iter().map(|r| (r.step as f64, r.l1_mel)).collect::<Vec<_>>();
        plot::lines(&[curve(&outcome.train_reports), curve(&outcome.val_reports)], &out.join("loss.png"))?;
    }
    Ok(())
}

fn pretrain(c: &Common, args: &TrainArgs) -> Result<(), Failure> {
    let mut res = resolve(c, "train.seed", train_flags(args))?;
    res.set("train.stage", &Stage::Pretrain);
    let corpus = open_corpus(&mut res)?;
    let resumed = args.resume.as_deref().map(|p| resume_from(&mut res, p, Stage::Pretrain)).transpose()?;
    let cfg = finish(&res)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.runs.join("pretrain"));
    write_run_config(&out, &cfg)?;
    let outcome = match resumed {
        Some(ckpt) => resume(&corpus, ckpt, Some(&out))?,
        None => train_stage1(&corpus, &cfg.model, &cfg.train, Some(&out))?,
    };
    report_training(&outcome, &out, c.png)
}

/// Loads the stage-1 checkpoint and pins the model section, with the decoder
/// wiring following `train.single_level_stats`.
fn stage1_for(res: &mut Resolved, from: Option<&Path>) -> Result<Checkpoint, Failure> {
    let cfg = res.config()?;
    let from = from.map_or_else(|| cfg.paths.runs.join("pretrain").join("best.utts"), Path::to_path_buf);
    let stage1 = load(&from)?;
    let mut model = stage1.model.config.clone();
    model.decoder_stats = if cfg.train.single_level_stats {
        DecoderStats::DeepestOnly
    } else {
        DecoderStats::All
    };
    res.pin("model", &model, &format!("stage-1 checkpoint {}", from.display()))?;
    Ok(stage1)
}

fn train(c: &Common, args: &TrainArgs, from: Option<&Path>, single: bool, duration: bool) -> Result<(), Failure> {
    let mut flags = train_flags(args);
    if single {
        flags.push(("train.single_level_stats".into(), true.into()));
    }
    if duration {
        flags.push(("train.stage2_train_duration".into(), true.into()));
    }
    let mut res = resolve(c, "train.seed", flags)?;
    res.set("train.stage", &Stage::Transfer);
    let corpus = open_corpus(&mut res)?;
    let outcome_src = match args.resume.as_deref() {
        Some(p) => Err(resume_from(&mut res, p, Stage::Transfer)?),
        None => Ok(stage1_for(&mut res, from)?),
    };
    let cfg = finish(&res)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.runs.join("transfer"));
    write_run_config(&out, &cfg)?;
    let outcome = match outcome_src {
        Ok(stage1) => train_stage2(&corpus, &stage1, &cfg.train, Some(&out))?,
        Err(ckpt) => resume(&corpus, ckpt, Some(&out))?,
    };
    report_training(&outcome, &out, c.png)
}

fn synth(c: &Common, text: &str, reference: &str, out: &Path, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let mut res = resolve(c, "eval.seed", Vec::new())?;
    let ckpt = load_trained(&mut res, checkpoint)?;
    let corpus = open_corpus(&mut res)?;
    let cfg = finish(&res)?;
    let ids = corpus
        .info
        .inventory
        .parse(text)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let utt = corpus
        .utterances
        .iter()
        .find(|u| u.id == reference)
        .ok_or_else(|| Failure::Usage(format!("no utterance {reference:?} in {}", cfg.paths.corpus.display())))?;
    let (mel, durations) = ckpt
        .model
        .synthesize(&PhonemeSequence::new(ids), &utt.mel, utt.durations())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    mel.write_csv(out)?;
    write_json(
        &out.with_extension("json"),
        &json!({
            "version": VERSION,
            "config": cfg,
            "text": text,
            "reference": reference,
            "durations": durations,
            "frames": mel.frames(),
        }),
    )?;
    if c.png {
        plot::heatmap(&mel.data, &out.with_extension("png"))?;
    }
    println!("wrote {} frames ({} phonemes) to {}", mel.frames(), durations.len(), out.display());
    Ok(())
}

fn report_dir(cfg: &RunConfig, args: &EvalArgs, name: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| cfg.paths.reports.join(name))
}

fn eval_mcd(c: &Common, args: &EvalArgs, texts: Option<usize>, null: bool) -> Result<(), Failure> {
    let extra = texts.map(|t| ("eval.texts_per_cell".to_string(), t.into())).into_iter().collect();
    let mut res = resolve(c, "eval.seed", extra)?;
    let trained = if null { None } else { Some(load_trained(&mut res, args.checkpoint.as_deref())?) };
    let corpus = open_corpus(&mut res)?;
    let cfg = finish(&res)?;
    let model = match trained {
        Some(ckpt) => ckpt.model,
        None => UnetTts::new(cfg.model.clone(), cfg.eval.seed)?,
    };
    let out = report_dir(&cfg, args, if null { "mcd-null" } else { "mcd" });
    write_run_config(&out, &cfg)?;
    let report = eval_mcd_transfer(&model, &corpus, cfg.eval.texts_per_cell, cfg.eval.seed)?;
    write_text(&out.join("mcd.csv"), &report.csv())?;
    write_json(
        &out.join("mcd_summary.json"),
        &json!({
            "null_model": null,
            "trials": report.trials.len(),
            "mean_matched": report.mean_matched,
            "mean_mismatched": report.mean_mismatched,
            "win_rate": report.win_rate,
        }),
    )?;
    if c.png {
        let mut speakers: Vec<usize> = report.trials.iter().map(|t| t.speaker_id).collect();
        speakers.sort_unstable();
        speakers.dedup();
        let pts: Vec<_> = report
            .trials
            .iter()
            .map(|t| (t.matched, t.mismatched, speakers.binary_search(&t.speaker_id).unwrap_or(0)))
            .collect();
        plot::scatter(&pts, &out.join("mcd.png"))?;
    }
    println!(
        "{} trials: matched {:.3} dB, mismatched {:.3} dB, matched wins {:.1}%",
        report.trials.len(),
        report.mean_matched,
        report.mean_mismatched,
        100.0 * report.win_rate
    );
    Ok(())
}

fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len().max(1) as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

fn eval_dist(c: &Common, args: &EvalArgs, texts: Option<usize>) -> Result<(), Failure> {
    let extra = texts.map(|t| ("eval.dist_texts".to_string(), t.into())).into_iter().collect();
    let mut res = resolve(c, "eval.seed", extra)?;
    let ckpt = load_trained(&mut res, args.checkpoint.as_deref())?;
    let corpus = open_corpus(&mut res)?;
    let cfg = finish(&res)?;
    let out = report_dir(&cfg, args, "dist");
    write_run_config(&out, &cfg)?;
    let report = eval_distributions(&ckpt.model, &corpus, cfg.eval.dist_texts)?;
    write_text(&out.join("distributions.csv"), &report.csv())?;
    write_json(&out.join("distributions.json"), &report)?;
    if c.png {
        let durations: Vec<_> = report.styles.iter().map(|s| cdf(&s.durations)).collect();
        let energies: Vec<_> = report.styles.iter().map(|s| cdf(&s.energies)).collect();
        let f0: Vec<_> = report.styles.iter().map(|s| cdf(&s.f0)).collect();
        plot::lines(&durations, &out.join("duration_cdf.png"))?;
        plot::lines(&energies, &out.join("energy_cdf.png"))?;
        plot::lines(&f0, &out.join("f0_cdf.png"))?;
    }
    println!("style      median dur  (ref)   median energy  (ref)   median f0  (ref)");
    for s in &report.styles {
        println!(
            "{:<10} {:>9.2}  {:>5.2}   {:>12.3}  {:>6.3}   {:>8.1}  {:>6.1}",
            s.style,
            s.median_duration,
            s.reference_median_duration,
            s.median_energy,
            s.reference_median_energy,
            s.median_f0,
            s.reference_median_f0
        );
    }
    Ok(())
}

fn inspect_embed(c: &Common, args: &EvalArgs, all_styles: bool) -> Result<(), Failure> {
    let mut res = resolve(c, "eval.seed", Vec::new())?;
    let ckpt = load_trained(&mut res, args.checkpoint.as_deref())?;
    let corpus = open_corpus(&mut res)?;
    let cfg = finish(&res)?;
    let out = report_dir(&cfg, args, "embed");
    write_run_config(&out, &cfg)?;
    let utts: Vec<_> = corpus
        .select(|u| u.split == Split::Clone && (all_styles || u.style == "neutral"))
        .collect();
    let e = embed_levels(&ckpt.model, &utts)?;
    write_text(&out.join("embed_points.csv"), &e.points_csv())?;
    write_json(&out.join("embed_summary.json"), &e.summary())?;
    let mut speakers = e.speakers.clone();
    speakers.sort_unstable();
    speakers.dedup();
    for lvl in &e.levels {
        println!("level {}: separability {:.4}", lvl.level, lvl.separability);
        if c.png {
            let pts: Vec<_> = lvl
                .pca
                .projections
                .rows()
                .into_iter()
                .zip(&e.speakers)
                .map(|(p, s)| (p[0], p[1], speakers.binary_search(s).unwrap_or(0)))
                .collect();
            plot::scatter(&pts, &out.join(format!("level{}.png", lvl.level)))?;
        }
    }
    Ok(())
}

fn ablate(c: &Common, args: &TrainArgs, from: Option<&Path>) -> Result<(), Failure> {
    if args.resume.is_some() {
        return Err(Failure::Usage("ablate does not support --resume".into()));
    }
    let mut res = resolve(c, "train.seed", train_flags(args))?;
    res.set("train.stage", &Stage::Transfer);
    res.set("train.single_level_stats", &false);
    let corpus = open_corpus(&mut res)?;
    let stage1 = stage1_for(&mut res, from)?;
    let cfg = finish(&res)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.runs.join("ablate"));
    write_run_config(&out, &cfg)?;

    let mut single_cfg = cfg.clone();
    single_cfg.train.single_level_stats = true;
    single_cfg.model.decoder_stats = DecoderStats::DeepestOnly;
    let mut curves = Vec::new();
    for (name, run) in [("full", &cfg), ("single", &single_cfg)] {
        let dir = out.join(name);
        write_run_config(&dir, run)?;
        let o = train_stage2(&corpus, &stage1, &run.train, Some(&dir))?;
        println!("{name}: final validation l1_mel {:.4}", o.val_reports.last().map_or(f64::NAN, |r| r.l1_mel));
        curves.push(o.val_reports);
    }
    let cmp = eval_reconstruction_curves(&curves[0], &curves[1], cfg.eval.curve_window)?;
    write_text(&out.join("curves.csv"), &cmp.csv())?;
    write_json(
        &out.join("ablation.json"),
        &json!({
            "final_full": cmp.final_full,
            "final_ablation": cmp.final_ablation,
            "ratio": cmp.ratio,
            "window": cfg.eval.curve_window,
        }),
    )?;
    if c.png {
        let full: Vec<_> = cmp.rows.iter().map(|r| (r.0 as f64, r.1)).collect();
        let single: Vec<_> = cmp.rows.iter().map(|r| (r.0 as f64, r.2)).collect();
        plot::lines(&[full, single], &out.join("curves.png"))?;
    }
    println!(
        "final-window validation l1_mel: all levels {:.4}, deepest only {:.4}, ratio {:.3}",
        cmp.final_full, cmp.final_ablation, cmp.ratio
    );
    Ok(())
}

fn grad_check(out: Option<&Path>, seeds: u64) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let config = ModelConfig::tiny();
    let results = gradient_suite(&config, seeds)?;
    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.as_str(), *e))
        .unwrap_or(("none", 0.0));
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut csv = String::from("case,max_rel_error\n");
        for (name, err) in &results {
            csv += &format!("{name},{err:e}\n");
        }
        write_text(&dir.join("grad_check.csv"), &csv)?;
        write_json(&dir.join("run.json"), &json!({ "version": VERSION, "model": config, "seeds": seeds }))?;
    }
    println!("{} cases, max relative error {worst:.3e} ({worst_name})", results.len());
    if worst >= GRAD_TOLERANCE {
        return Err(anyhow::anyhow!("gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:e}").into());
    }
    println!("gradient check passed (< {GRAD_TOLERANCE:e})");
    Ok(())
}
