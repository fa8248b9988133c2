//! Monte Carlo harness: batch execution of attempts, success statistics,
//! line-delimited persistence, and report generation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::phantom::Scenario;
use crate::procedure::{run_attempt, AttemptOutput, Outcome, PhaseEvent};
use crate::ultrasound::UltrasoundFrame;

pub const LOG_SCHEMA: &str = "rva-trial/1";

#[derive(Debug, Error)]
pub enum TrialsError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log schema mismatch: found {found:?}, expected {expected:?}")]
    SchemaMismatch { found: String, expected: String },
    #[error("malformed log line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
}

/// Paths of the saved pre/post frames for one trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePaths {
    pub pre: Option<String>,
    pub post: Option<String>,
}

/// One puncture trial, flattened for persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub scenario_seed: u64,
    pub vessel_diameter_mm: f64,
    pub vessel_depth_mm: f64,
    pub outcome: Outcome,
    pub blood_return: bool,
    pub attempts_used: u32,
    pub phase_trace: Vec<PhaseEvent>,
    pub max_force_n: f64,
    pub frames: Option<FramePaths>,
}

impl TrialRecord {
    pub fn first_attempt_success(&self) -> bool {
        self.blood_return && self.attempts_used == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n_trials: u64,
    pub first_attempt_successes: u64,
    pub overall_successes: u64,
    pub first_attempt_rate: f64,
    pub overall_rate: f64,
    pub mean_success_diameter_mm: Option<f64>,
    pub min_success_diameter_mm: Option<f64>,
}

/// Aggregate a batch. Counts are exact integers; the rates are their exact
/// ratios. Diameter statistics cover successful trials only.
pub fn summarize(records: &[TrialRecord]) -> Result<BatchSummary, TrialsError> {
    if records.is_empty() {
        return Err(TrialsError::EmptyBatch);
    }
    let n = records.len() as u64;
    let first = records.iter().filter(|r| r.first_attempt_success()).count() as u64;
    let overall = records.iter().filter(|r| r.blood_return).count() as u64;
    let diameters: Vec<f64> = records
        .iter()
        .filter(|r| r.blood_return)
        .map(|r| r.vessel_diameter_mm)
        .collect();
    let mean = if diameters.is_empty() {
        None
    } else {
        Some(diameters.iter().sum::<f64>() / diameters.len() as f64)
    };
    let min = diameters.iter().cloned().reduce(f64::min);
    Ok(BatchSummary {
        n_trials: n,
        first_attempt_successes: first,
        overall_successes: overall,
        first_attempt_rate: first as f64 / n as f64,
        overall_rate: overall as f64 / n as f64,
        mean_success_diameter_mm: mean,
        min_success_diameter_mm: min,
    })
}

fn write_frame(frame: &UltrasoundFrame, path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    frame.write_pgm(&mut w)?;
    w.flush()
}

fn record_from_output(
    trial_id: u64,
    scenario_seed: u64,
    out: &AttemptOutput,
    out_dir: Option<&Path>,
    keep_frames: bool,
) -> std::io::Result<TrialRecord> {
    let frames = match (out_dir, keep_frames) {
        (Some(dir), true) => {
            let mut paths = FramePaths {
                pre: None,
                post: None,
            };
            if let Some(f) = &out.pre_frame {
                let p = dir.join(format!("trial_{trial_id:04}_pre.pgm"));
                write_frame(f, &p)?;
                paths.pre = Some(p.to_string_lossy().into_owned());
            }
            if let Some(f) = &out.post_frame {
                let p = dir.join(format!("trial_{trial_id:04}_post.pgm"));
                write_frame(f, &p)?;
                paths.post = Some(p.to_string_lossy().into_owned());
            }
            Some(paths)
        }
        _ => None,
    };
    Ok(TrialRecord {
        trial_id,
        scenario_seed,
        vessel_diameter_mm: out.vessel_diameter_mm,
        vessel_depth_mm: out.vessel_depth_mm,
        outcome: out.outcome,
        blood_return: out.blood_return,
        attempts_used: out.attempts_used,
        phase_trace: out.phase_trace.clone(),
        max_force_n: out.max_force_n,
        frames,
    })
}

/// Run `n` trials with per-trial seeds `base_seed + i`. Each trial draws
/// from its own RNG streams, so results are identical whether the batch
/// runs sequentially or in parallel.
pub fn run_batch(
    scenario: &dyn Scenario,
    n: u64,
    base_seed: u64,
    cfg: &RunConfig,
) -> Result<(Vec<TrialRecord>, BatchSummary), TrialsError> {
    let out_dir = cfg.trials.out_dir.as_ref().map(PathBuf::from);
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
    }
    let run_one = |i: u64| -> std::io::Result<TrialRecord> {
        let seed = base_seed + i;
        let out = run_attempt(scenario, seed, cfg);
        record_from_output(i, seed, &out, out_dir.as_deref(), cfg.trials.keep_frames)
    };
    let records: Vec<TrialRecord> = if cfg.trials.parallel {
        (0..n)
            .into_par_iter()
            .map(run_one)
            .collect::<std::io::Result<Vec<_>>>()?
    } else {
        (0..n).map(run_one).collect::<std::io::Result<Vec<_>>>()?
    };
    let summary = summarize(&records)?;
    Ok((records, summary))
}

/// Write a line-delimited JSON log: a schema header line, then one record
/// per line.
pub fn write_log(records: &[TrialRecord], path: &Path) -> Result<(), TrialsError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &serde_json::json!({ "schema": LOG_SCHEMA }))
        .map_err(|e| TrialsError::MalformedRecord {
            line: 1,
            message: e.to_string(),
        })?;
    w.write_all(b"\n")?;
    for (i, record) in records.iter().enumerate() {
        serde_json::to_writer(&mut w, record).map_err(|e| TrialsError::MalformedRecord {
            line: i + 2,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrialRecord>, TrialsError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(TrialsError::SchemaMismatch {
            found: "<empty file>".to_string(),
            expected: LOG_SCHEMA.to_string(),
        })??;
    #[derive(Deserialize)]
    struct Header {
        schema: String,
    }
    let parsed: Header =
        serde_json::from_str(&header).map_err(|e| TrialsError::MalformedRecord {
            line: 1,
            message: e.to_string(),
        })?;
    if parsed.schema != LOG_SCHEMA {
        return Err(TrialsError::SchemaMismatch {
            found: parsed.schema,
            expected: LOG_SCHEMA.to_string(),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrialRecord =
            serde_json::from_str(&line).map_err(|e| TrialsError::MalformedRecord {
                line: i + 2,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

fn outcome_label(outcome: &Outcome) -> String {
    match outcome {
        Outcome::Success => "success".to_string(),
        Outcome::Miss => "miss".to_string(),
        Outcome::Transfixed => "transfixed".to_string(),
        Outcome::Aborted(r) => format!("aborted({r:?})"),
    }
}

/// Emit `summary.txt` (per-trial table plus batch statistics) and, when
/// every record carries frame paths, `mosaic.pgm`: one row per trial with
/// the pre frame, the post frame, and a blood-return marker column.
pub fn render_report(records: &[TrialRecord], out_dir: &Path) -> Result<Vec<PathBuf>, TrialsError> {
    if records.is_empty() {
        return Err(TrialsError::EmptyBatch);
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let summary = summarize(records)?;
    let mut text = String::new();
    text.push_str("trial  seed        diam_mm  depth_mm  attempts  max_force_n  blood  outcome\n");
    for r in records {
        text.push_str(&format!(
            "{:5}  {:10}  {:7.3}  {:8.3}  {:8}  {:11.3}  {:5}  {}\n",
            r.trial_id,
            r.scenario_seed,
            r.vessel_diameter_mm,
            r.vessel_depth_mm,
            r.attempts_used,
            r.max_force_n,
            if r.blood_return { "yes" } else { "no" },
            outcome_label(&r.outcome),
        ));
    }
    text.push_str(&format!(
        "\nn_trials={} first_attempt_successes={} overall_successes={}\n",
        summary.n_trials, summary.first_attempt_successes, summary.overall_successes
    ));
    text.push_str(&format!(
        "first_attempt_rate={:.3} overall_rate={:.3}\n",
        summary.first_attempt_rate, summary.overall_rate
    ));
    match (summary.mean_success_diameter_mm, summary.min_success_diameter_mm) {
        (Some(mean), Some(min)) => text.push_str(&format!(
            "mean_success_diameter_mm={mean:.3} min_success_diameter_mm={min:.3}\n"
        )),
        _ => text.push_str("no successful trials\n"),
    }
    let summary_path = out_dir.join("summary.txt");
    fs::write(&summary_path, text)?;
    written.push(summary_path);

    // Mosaic only in full-frame batches.
    let all_frames: Option<Vec<(&str, Option<&str>)>> = records
        .iter()
        .map(|r| {
            r.frames
                .as_ref()
                .and_then(|f| f.pre.as_deref().map(|p| (p, f.post.as_deref())))
        })
        .collect();
    if let Some(paths) = all_frames {
        let mut tiles: Vec<(UltrasoundFrame, Option<UltrasoundFrame>)> = Vec::new();
        for (pre, post) in paths {
            let mut r = BufReader::new(fs::File::open(pre)?);
            let pre_frame = UltrasoundFrame::read_pgm(&mut r)?;
            let post_frame = match post {
                Some(p) => {
                    let mut r = BufReader::new(fs::File::open(p)?);
                    Some(UltrasoundFrame::read_pgm(&mut r)?)
                }
                None => None,
            };
            tiles.push((pre_frame, post_frame));
        }
        let tile_w = tiles[0].0.width;
        let tile_h = tiles[0].0.height;
        let marker_w = 16usize;
        let cols = tile_w * 2 + marker_w;
        let rows = tile_h * tiles.len();
        let mut pixels = vec![0u8; cols * rows];
        for (i, (pre, post)) in tiles.iter().enumerate() {
            let row0 = i * tile_h;
            for r in 0..tile_h.min(pre.height) {
                for c in 0..tile_w.min(pre.width) {
                    pixels[(row0 + r) * cols + c] = pre.get(r, c);
                }
            }
            if let Some(post) = post {
                for r in 0..tile_h.min(post.height) {
                    for c in 0..tile_w.min(post.width) {
                        pixels[(row0 + r) * cols + tile_w + c] = post.get(r, c);
                    }
                }
            }
            // Blood-return marker: bright block for yes, dim for no.
            let shade = if records[i].blood_return { 255 } else { 64 };
            for r in 0..tile_h {
                for c in 0..marker_w {
                    pixels[(row0 + r) * cols + 2 * tile_w + c] = shade;
                }
            }
        }
        let mosaic = UltrasoundFrame {
            pixels,
            width: cols,
            height: rows,
            origin: crate::transform::RigidTransform::identity(),
            mm_per_px: tiles[0].0.mm_per_px,
            frame_index: 0,
        };
        let mosaic_path = out_dir.join("mosaic.pgm");
        write_frame(&mosaic, &mosaic_path)?;
        written.push(mosaic_path);
    }

    Ok(written)
}
