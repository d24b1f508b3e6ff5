use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use tft_core::audio::{read_feature_cache, read_wav, write_feature_cache, FeatureExtractor, LogMelSegment};
use tft_core::evaluation::synthetic::write_tone_corpus;
use tft_core::evaluation::{run_ablations, run_protocol, Corpus, DatasetManifest};
use tft_core::model::export::export_attention;
use tft_core::nn::checkpoint::Checkpoint;
use tft_core::training::{load_model, stack_segments, Trainer, TrainingLog};

use crate::config::RunConfig;

const MANIFEST: &str = "manifest.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates the output directory and records the resolved configuration.
fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.io.out_dir.clone();
    cfg.write_resolved(&out)?;
    Ok(out)
}

fn load_features(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    let manifest = DatasetManifest::read(&dir.join(MANIFEST), cfg.io.labels.clone())
        .with_context(|| format!("{} is not a feature directory written by `tft extract`", dir.display()))?;
    let corpus = Corpus::load_cache(manifest, dir)?;
    let want = (cfg.model.n_bands, cfg.model.n_frames);
    if let Some(s) = corpus.segments.values().flatten().find(|s| (s.n_bands, s.n_frames) != want) {
        bail!(
            "cached segment {}#{} is {}x{} but the model expects {}x{}",
            s.utterance_id,
            s.segment_index,
            s.n_bands,
            s.n_frames,
            want.0,
            want.1
        );
    }
    Ok(corpus)
}

pub fn extract(cfg: &RunConfig, manifest_path: &Path, force: bool) -> Result<()> {
    let out = prepare(cfg)?;
    let mut manifest = DatasetManifest::read(manifest_path, cfg.io.labels.clone())?;
    let extractor = FeatureExtractor::new(cfg.features.clone())?;
    let n_classes = cfg.io.labels.len();
    let (mut utterances, mut segments) = (vec![0usize; n_classes], vec![0usize; n_classes]);
    let (mut done, mut skipped) = (Vec::new(), 0usize);
    let mut failures = Vec::new();
    for entry in &manifest.entries {
        let cache = Corpus::cache_path(&out, &entry.utterance_id);
        let cached = if force || !cache.exists() {
            None
        } else {
            read_feature_cache(&cache).ok()
        };
        let segs = match cached {
            Some(s) => {
                skipped += 1;
                s
            }
            None => {
                let result = read_wav(&entry.path)
                    .and_then(|w| extractor.segments(&w, &entry.utterance_id, entry.label as u16))
                    .and_then(|s| write_feature_cache(&s, &cache).map(|_| s));
                match result {
                    Ok(s) => s,
                    Err(e) => {
                        failures.push(format!("{}: {e}", entry.path.display()));
                        continue;
                    }
                }
            }
        };
        utterances[entry.label] += 1;
        segments[entry.label] += segs.len();
        let mut e = entry.clone();
        e.path = std::path::absolute(&e.path).unwrap_or(e.path);
        done.push(e);
    }
    manifest.entries = done;
    write(&out.join(MANIFEST), &manifest.to_csv(Path::new("")))?;

    let mut summary = String::from("label,utterances,segments\n");
    for (i, name) in cfg.io.labels.names().iter().enumerate() {
        summary += &format!("{name},{},{}\n", utterances[i], segments[i]);
    }
    let (nu, ns): (usize, usize) = (utterances.iter().sum(), segments.iter().sum());
    summary += &format!("total,{nu},{ns}\n");
    write(&out.join("summary.csv"), &summary)?;
    println!("{:<10} {:>10} {:>9}", "label", "utterances", "segments");
    for line in summary.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        println!("{:<10} {:>10} {:>9}", cols[0], cols[1], cols[2]);
    }
    println!("{} extracted, {skipped} cached, {} failed", nu - skipped, failures.len());
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed: {f}");
        }
        bail!("{} of {} files failed", failures.len(), nu + failures.len());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, features: &Path, resume: Option<&Path>) -> Result<()> {
    let out = prepare(cfg)?;
    let corpus = load_features(cfg, features)?;
    let data = corpus.all_segments();
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir.get_or_insert_with(|| out.join("checkpoints"));
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.model.clone(), tc, &Checkpoint::read(path)?)?,
        None => Trainer::new(cfg.model.clone(), tc)?,
    };
    info!(
        "{} segments, {} parameters, starting at epoch {}",
        data.len(),
        trainer.model.parameter_count(),
        trainer.epoch
    );
    let log_path = out.join("training_log.csv");
    let appending = resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(appending)
        .write(true)
        .truncate(!appending)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = TrainingLog::new(BufWriter::new(file), appending)?;
    let history = trainer.fit(&data, Some(&mut log))?;
    match history.last() {
        Some(s) => println!(
            "epoch {}: loss {:.5}, train WAR {}%",
            s.epoch,
            s.mean_loss,
            tft_core::evaluation::format_percent(s.train_war)
        ),
        None => println!("nothing to do: already at epoch {}", trainer.epoch),
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, features: &Path) -> Result<()> {
    let out = prepare(cfg)?;
    let corpus = load_features(cfg, features)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir.get_or_insert_with(|| out.join("folds"));
    let result = run_protocol(&corpus, &cfg.model, &tc, cfg.eval.mode, cfg.eval.jobs)?;
    let text = result.to_text();
    write(&out.join("report.txt"), &text)?;
    write(&out.join("report.csv"), &result.to_csv())?;
    print!("{text}");
    Ok(())
}

pub fn ablate(cfg: &RunConfig, features: &Path) -> Result<()> {
    let out = prepare(cfg)?;
    let corpus = load_features(cfg, features)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir.get_or_insert_with(|| out.join("ablations"));
    let report = run_ablations(&corpus, &cfg.model, &tc, cfg.eval.mode, &cfg.eval.ablations, cfg.eval.jobs)?;
    let text = report.to_text();
    write(&out.join("ablation.txt"), &text)?;
    write(&out.join("ablation.csv"), &report.to_csv())?;
    print!("{text}");
    Ok(())
}

pub fn dump_attention(cfg: &RunConfig, checkpoint: &Path, features: &Path, sample: &str, segment: u32) -> Result<()> {
    let out = prepare(cfg)?;
    let cache = Corpus::cache_path(features, sample);
    if !cache.exists() {
        bail!("unknown sample {sample:?}: no cache file {}", cache.display());
    }
    let segs = read_feature_cache(&cache)?;
    let seg: &LogMelSegment = segs
        .iter()
        .find(|s| s.segment_index == segment)
        .with_context(|| format!("sample {sample:?} has {} segments, no segment {segment}", segs.len()))?;
    let model = load_model(cfg.model.clone(), checkpoint)?;
    let output = model.infer(stack_segments(&[seg])?)?;
    let id = format!("{sample}.seg{segment}");
    let records = export_attention(&out, &id, seg, &output.attention, 0, cfg.eval.per_head)?;
    let probs = output.probs.data();
    let best = tft_core::evaluation::argmax_lowest(&probs.iter().map(|&p| p as f64).collect::<Vec<_>>());
    println!(
        "{id}: predicted {} (p = {:.3}), true {}",
        cfg.io.labels.names()[best],
        probs[best],
        cfg.io.labels.names().get(seg.label as usize).map_or("?", String::as_str)
    );
    for r in &records {
        println!("  {} {}x{} ({} x {})", r.file, r.rows, r.cols, r.row_axis, r.col_axis);
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, speakers: usize, utterances: usize, seconds: f64) -> Result<()> {
    if speakers == 0 || utterances == 0 || seconds.is_nan() || seconds <= 0.0 {
        bail!("need at least one speaker, one utterance and a positive duration");
    }
    let out = prepare(cfg)?;
    let path = write_tone_corpus(&out, &cfg.io.labels, speakers, utterances, seconds, cfg.train.seed)?;
    println!("{}", path.display());
    Ok(())
}
