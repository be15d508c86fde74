//! Subcommands of the `gulm` binary, exposed as functions for testing.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use gulm_core::eval::{aggregate_rmse, jaccard, match_and_score, render_density, ssim, FrameScore};
use gulm_core::io::rf::RfWriter;
use gulm_core::io::{
    open_rf, parse_channel_spec, read_config, read_locations, read_truth, write_image, write_locations,
    write_scores, write_truth, LocationRecord, RfHeader, RunConfig,
};
use gulm_core::pipeline::{FrameStats, Localizer};
use gulm_core::sim::{add_noise, generate_scene, simulate_frame};
use gulm_core::types::{RFFrame, Vec2};
use gulm_core::{Error, Result};

/// Frames handed to the worker pool per batch, per thread.
const FRAMES_PER_THREAD: usize = 4;

/// Settings shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub channels: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub noise_clutter_db: Option<f64>,
}

impl CommonArgs {
    /// Config file (or the built-in default) with command-line overrides.
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::standard(),
        };
        if let Some(spec) = &self.channels {
            cfg.channels = Some(parse_channel_spec(spec, cfg.acquisition.num_channels)?);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.noise.rng_seed = seed;
        }
        if let Some(lc) = self.noise_clutter_db {
            if !lc.is_finite() {
                return Err(Error::Validation(format!("clutter level {lc} dB")));
            }
            cfg.noise.clutter_db = Some(lc);
        }
        Ok(cfg)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        match self.threads {
            Some(0) => return Err(Error::Validation("--threads must be at least 1".into())),
            Some(n) => b = b.num_threads(n),
            None => {}
        }
        b.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
    }
}

/// SHA-256 of the effective configuration.
pub fn config_digest(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(format!("{cfg:?}").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Maps an error to the process exit code: 1 for invalid input, 2 for
/// runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn with_frame(frame_id: u64, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("frame {frame_id}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("frame {frame_id}: {m}")),
        other => other,
    }
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub const RF_FILE: &str = "frames.gulm";
pub const TRUTH_FILE: &str = "truth.csv";

/// Simulates `frames` frames of `bubbles` bubbles each into `out_dir`.
pub fn cmd_simulate(common: &CommonArgs, frames: u64, bubbles: Option<usize>, out_dir: &Path) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(b) = bubbles {
        cfg.scene.num_bubbles = b;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = common.pool()?;
    let acq = cfg.acquisition;
    let header = RfHeader {
        num_channels: acq.num_channels as u32,
        num_samples: acq.num_samples as u32,
        sample_rate: acq.sample_rate,
    };
    let rf_path = out_dir.join(RF_FILE);
    let mut writer = RfWriter::new(create(&rf_path)?, header)?;
    let batch = (pool.current_num_threads() * FRAMES_PER_THREAD) as u64;
    let mut scenes = Vec::with_capacity(frames as usize);
    let mut start = 0;
    while start < frames {
        let ids: Vec<u64> = (start..frames.min(start + batch)).collect();
        let produced: Vec<_> = pool.install(|| {
            ids.par_iter()
                .map(|&id| {
                    let scene = generate_scene(id, &cfg.scene, cfg.seed)?;
                    let mut frame = simulate_frame(&scene, &cfg.geometry, &cfg.pulse, &cfg.sim_config())?;
                    if cfg.noise.clutter_db.is_some() {
                        frame = add_noise(&frame, &cfg.noise)?;
                    }
                    Ok((scene, frame))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (scene, frame) in produced {
            writer.write_frame(&frame)?;
            scenes.push(scene);
        }
        start += batch;
    }
    writer.finish()?.flush().map_err(|e| Error::io(&rf_path, e))?;
    write_truth(&out_dir.join(TRUTH_FILE), &scenes)?;
    log::info!("simulated {frames} frames into {}", out_dir.display());
    Ok(())
}

/// Path of the report written next to a locations file.
pub fn report_path(locations: &Path) -> PathBuf {
    locations.with_extension("report.json")
}

/// Localizes every frame of `input`, writing locations to `out` and a
/// pipeline report next to it. Returns the report.
pub fn cmd_localize(common: &CommonArgs, input: &Path, out: &Path) -> Result<Value> {
    let cfg = common.load()?;
    let pool = common.pool()?;
    let localizer = Localizer::new(cfg.acquisition, &cfg.geometry, cfg.channels.clone(), cfg.pipeline.clone())?;
    let mut reader = open_rf(input)?;
    let h = reader.header();
    let acq = cfg.acquisition;
    if h.num_channels as usize != acq.num_channels
        || h.num_samples as usize != acq.num_samples
        || h.sample_rate != acq.sample_rate
    {
        return Err(Error::Validation(format!(
            "{}: {} channels x {} samples at {} Hz, config expects {} x {} at {} Hz",
            input.display(),
            h.num_channels,
            h.num_samples,
            h.sample_rate,
            acq.num_channels,
            acq.num_samples,
            acq.sample_rate
        )));
    }

    let started = Instant::now();
    let batch = pool.current_num_threads() * FRAMES_PER_THREAD;
    let mut records = Vec::new();
    let mut totals = FrameStats::default();
    let mut frames = 0usize;
    loop {
        let mut chunk: Vec<RFFrame> = Vec::with_capacity(batch);
        while chunk.len() < batch {
            match reader.next_frame()? {
                Some(f) => chunk.push(f),
                None => break,
            }
        }
        if chunk.is_empty() {
            break;
        }
        let outputs = pool.install(|| {
            chunk
                .par_iter()
                .map(|f| localizer.localize(f).map_err(|e| with_frame(f.frame_id, e)))
                .collect::<Result<Vec<_>>>()
        })?;
        for o in &outputs {
            records.extend(o.locations.iter().map(|l| LocationRecord::new(o.frame_id, l)));
            totals.merge(&o.stats);
        }
        frames += chunk.len();
    }
    write_locations(out, &records)?;

    let t = totals.timings;
    let report = json!({
        "config_digest": config_digest(&cfg),
        "frames": frames,
        "channels": localizer.channels.len(),
        "stages": [
            { "stage": "fit", "seconds": t.fit.as_secs_f64(), "count": totals.echoes, "unit": "echoes" },
            { "stage": "match", "seconds": t.matching.as_secs_f64(), "count": totals.tracks, "unit": "tracks" },
            { "stage": "intersect", "seconds": t.intersection.as_secs_f64(), "count": totals.candidates, "unit": "candidates" },
            { "stage": "cluster", "seconds": t.clustering.as_secs_f64(), "count": totals.clusters, "unit": "locations" },
        ],
        "diverged_fits": totals.diverged_fits,
        "max_focal_error_m": totals.max_focal_error,
        "wall_seconds": started.elapsed().as_secs_f64(),
    });
    let rp = report_path(out);
    let mut w = create(&rp)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| Error::io(&rp, e.into()))?;
    w.flush().map_err(|e| Error::io(&rp, e))?;
    log::info!("{frames} frames, {} locations", records.len());
    Ok(report)
}

fn group_positions(records: &[LocationRecord]) -> std::collections::BTreeMap<u64, Vec<Vec2>> {
    let mut m = std::collections::BTreeMap::<u64, Vec<Vec2>>::new();
    for r in records {
        m.entry(r.frame_id).or_default().push(r.position);
    }
    m
}

fn metric(r: Result<f64>) -> Result<Value> {
    match r {
        Ok(v) => Ok(json!(v)),
        Err(Error::UndefinedMetric(_)) => Ok(Value::Null),
        Err(e) => Err(e),
    }
}

/// Scores `locations` against `truth`, writing per-frame scores to `out`
/// and returning the summary (also written as `<out>.summary.json`).
pub fn cmd_evaluate(common: &CommonArgs, locations: &Path, truth: &Path, out: &Path) -> Result<Value> {
    let cfg = common.load()?;
    let wavelength = cfg.acquisition.wavelength();
    let truth = read_truth(truth)?;
    let estimates = group_positions(&read_locations(locations)?);
    if let Some(id) = estimates.keys().find(|&&id| truth.binary_search_by_key(&id, |s| s.frame_id).is_err()) {
        return Err(Error::Validation(format!("frame {id} has locations but no ground truth")));
    }
    let empty = Vec::new();
    let scores: Vec<FrameScore> = truth
        .iter()
        .map(|s| match_and_score(s.frame_id, estimates.get(&s.frame_id).unwrap_or(&empty), &s.positions, wavelength))
        .collect::<Result<_>>()?;
    write_scores(out, &scores)?;

    let all_est: Vec<Vec2> = estimates.values().flatten().copied().collect();
    let all_truth: Vec<Vec2> = truth.iter().flat_map(|s| s.positions.iter().copied()).collect();
    let ssim_value = render_density(&all_est, &cfg.render)
        .and_then(|a| render_density(&all_truth, &cfg.render).and_then(|b| ssim(&a, &b)));
    let (rmse_mean, rmse_std) = match aggregate_rmse(&scores, wavelength) {
        Ok((m, s)) => (json!(m), json!(s)),
        Err(Error::UndefinedMetric(_)) => (Value::Null, Value::Null),
        Err(e) => return Err(e),
    };
    let sum = |f: fn(&FrameScore) -> usize| scores.iter().map(f).sum::<usize>();
    let summary = json!({
        "frames": scores.len(),
        "true_positives": sum(|s| s.true_positives),
        "false_positives": sum(|s| s.false_positives),
        "false_negatives": sum(|s| s.false_negatives),
        "jaccard_percent": metric(jaccard(&scores))?,
        "rmse_mean_lambda10": rmse_mean,
        "rmse_std_lambda10": rmse_std,
        "ssim_percent": metric(ssim_value)?,
    });
    let sp = out.with_extension("summary.json");
    let mut w = create(&sp)?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| Error::io(&sp, e.into()))?;
    w.flush().map_err(|e| Error::io(&sp, e))?;
    Ok(summary)
}

/// Renders a density image of `locations` on the configured grid.
pub fn cmd_render(common: &CommonArgs, locations: &Path, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    let points: Vec<Vec2> = read_locations(locations)?.iter().map(|r| r.position).collect();
    let img = render_density(&points, &cfg.render).map_err(|e| Error::Validation(e.to_string()))?;
    write_image(out, &img)
}
