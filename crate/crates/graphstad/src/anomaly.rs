//! Reconstruction-error scoring: per-channel errors, windowed aggregation,
//! score standardization against healthy-data statistics, and flag maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SegmentationMap;
use crate::model::{Autoencoder, STWindow};
use crate::tensor::BatchNormMode;
use crate::training::ScalingStats;

/// Lower bound on the per-channel standard deviation used for score
/// standardization; keeps channels with constant healthy error finite.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// Standardize single-lumisection errors e.
    Isolated,
    /// Standardize window-averaged errors e_mae.
    Windowed,
}

/// Per-channel standard deviations of the healthy reconstruction error,
/// floored at `SIGMA_FLOOR`. Indexed by flat cell index; inactive cells
/// carry the floor and are never reported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreCalibration {
    pub mode: CalibrationMode,
    pub sigma: Vec<f64>,
}

impl ScoreCalibration {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| Error::Calibration(format!("serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ScoreCalibration> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Absolute per-channel reconstruction error in scaled space.
pub fn channel_errors(x: &[f64], xbar: &[f64]) -> Vec<f64> {
    assert_eq!(
        x.len(),
        xbar.len(),
        "op `channel_errors`: input length {} vs reconstruction length {}",
        x.len(),
        xbar.len()
    );
    x.iter().zip(xbar).map(|(a, b)| (a - b).abs()).collect()
}

/// Arithmetic mean of per-channel errors over a time window.
pub fn windowed_mae(errors: &[Vec<f64>]) -> Vec<f64> {
    assert!(!errors.is_empty(), "op `windowed_mae`: empty window");
    let n = errors[0].len();
    let mut acc = vec![0.0; n];
    for e in errors {
        assert_eq!(e.len(), n, "op `windowed_mae`: ragged error vectors");
        for (a, v) in acc.iter_mut().zip(e) {
            *a += v;
        }
    }
    let t = errors.len() as f64;
    for a in &mut acc {
        *a /= t;
    }
    acc
}

/// Run the model on a window of raw maps and return per-step scaled-space
/// errors. Inference mode: batch statistics frozen, latent z = mu.
pub fn window_errors(
    model: &Autoencoder<f32>,
    scaler: &ScalingStats,
    window: &STWindow,
) -> Vec<Vec<f64>> {
    let scaled: Vec<Vec<f64>> = window.steps.iter().map(|s| scaler.scale(s)).collect();
    let steps: Vec<Vec<f32>> = scaled
        .iter()
        .map(|s| s.iter().map(|&v| v as f32).collect())
        .collect();
    let out = model.forward(&steps, BatchNormMode::Eval, None);
    let n = scaled[0].len();
    let recon = out.recon.data();
    scaled
        .iter()
        .enumerate()
        .map(|(t, x)| {
            let xbar: Vec<f64> = recon[t * n..(t + 1) * n].iter().map(|&v| v as f64).collect();
            channel_errors(x, &xbar)
        })
        .collect()
}

/// Population standard deviation per channel over error samples, floored.
/// Population (not sample) convention: sigma is a normalizer, not an
/// estimator of spread.
pub fn calibrate_from_errors(samples: &[Vec<f64>], mode: CalibrationMode) -> Result<ScoreCalibration> {
    if samples.len() < 2 {
        return Err(Error::Calibration(format!(
            "need at least 2 healthy error samples, got {}",
            samples.len()
        )));
    }
    let n = samples[0].len();
    let m = samples.len() as f64;
    let mut mean = vec![0.0; n];
    for s in samples {
        assert_eq!(s.len(), n, "op `calibrate`: ragged error samples");
        for (a, v) in mean.iter_mut().zip(s) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= m;
    }
    let mut var = vec![0.0; n];
    for s in samples {
        for ((a, v), mu) in var.iter_mut().zip(s).zip(&mean) {
            let d = v - mu;
            *a += d * d;
        }
    }
    let sigma = var.iter().map(|v| (v / m).sqrt().max(SIGMA_FLOOR)).collect();
    Ok(ScoreCalibration { mode, sigma })
}

/// Calibrate on a healthy dataset: isolated mode collects one sample per
/// lumisection, windowed mode one e_mae sample per window.
pub fn calibrate(
    model: &Autoencoder<f32>,
    scaler: &ScalingStats,
    windows: &[STWindow],
    mode: CalibrationMode,
) -> Result<ScoreCalibration> {
    let mut samples = Vec::new();
    for w in windows {
        let errs = window_errors(model, scaler, w);
        match mode {
            CalibrationMode::Isolated => samples.extend(errs),
            CalibrationMode::Windowed => samples.push(windowed_mae(&errs)),
        }
    }
    calibrate_from_errors(&samples, mode)
}

/// One scored channel at one lumisection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelScore {
    pub run: u32,
    pub ls: u32,
    pub ieta: i32,
    pub iphi: i32,
    pub depth: i32,
    pub e: f64,
    pub e_mae: f64,
    pub s: f64,
    pub flag: bool,
}

#[derive(Debug, Clone)]
pub struct AnomalyReport {
    pub alpha: f64,
    pub mode: CalibrationMode,
    pub records: Vec<ChannelScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub alpha: f64,
    pub n_scores: usize,
    pub n_flagged: usize,
    pub max_score: f64,
    pub mean_score: f64,
}

impl AnomalyReport {
    pub fn summary(&self) -> ReportSummary {
        let n = self.records.len();
        let mut max = 0.0f64;
        let mut sum = 0.0;
        let mut flagged = 0;
        for r in &self.records {
            max = max.max(r.s);
            sum += r.s;
            flagged += r.flag as usize;
        }
        ReportSummary {
            alpha: self.alpha,
            n_scores: n,
            n_flagged: flagged,
            max_score: max,
            mean_score: if n == 0 { 0.0 } else { sum / n as f64 },
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Standardize errors and apply the strictly-greater threshold.
/// Returns (scores, flags) over the full grid; callers mask inactive cells.
pub fn score_and_flag(errors: &[f64], calib: &ScoreCalibration, alpha: f64) -> (Vec<f64>, Vec<bool>) {
    assert_eq!(
        errors.len(),
        calib.sigma.len(),
        "op `score_and_flag`: {} errors vs {} sigmas",
        errors.len(),
        calib.sigma.len()
    );
    let s: Vec<f64> = errors.iter().zip(&calib.sigma).map(|(e, sg)| e / sg).collect();
    let flags = s.iter().map(|&v| v > alpha).collect();
    (s, flags)
}

/// Score every lumisection of a window: one record per active channel per
/// LS. In windowed mode the score standardizes e_mae (shared across the
/// window); in isolated mode each LS error is scored independently.
pub fn score_window(
    model: &Autoencoder<f32>,
    scaler: &ScalingStats,
    calib: &ScoreCalibration,
    window: &STWindow,
    seg: &SegmentationMap,
    alpha: f64,
) -> AnomalyReport {
    let errs = window_errors(model, scaler, window);
    let mae = windowed_mae(&errs);
    let (mae_s, mae_flags) = score_and_flag(&mae, calib, alpha);
    let mut records = Vec::new();
    for (t, e) in errs.iter().enumerate() {
        let (iso_s, iso_flags) = score_and_flag(e, calib, alpha);
        let (run, ls) = window
            .metas
            .get(t)
            .map(|m| (m.run_id, m.ls))
            .unwrap_or((0, t as u32));
        for flat in 0..e.len() {
            if !seg.is_active(flat) {
                continue;
            }
            let c = seg.geom.coordinate_of(flat);
            let (s, flag) = match calib.mode {
                CalibrationMode::Isolated => (iso_s[flat], iso_flags[flat]),
                CalibrationMode::Windowed => (mae_s[flat], mae_flags[flat]),
            };
            records.push(ChannelScore {
                run,
                ls,
                ieta: c.ieta,
                iphi: c.iphi,
                depth: c.depth,
                e: e[flat],
                e_mae: mae[flat],
                s,
                flag,
            });
        }
    }
    AnomalyReport {
        alpha,
        mode: calib.mode,
        records,
    }
}
