//! Synthetic world: healthy digi-occupancy stream generation, fault
//! injection, and recall-anchored detection evaluation.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::anomaly::{self, CalibrationMode};
use crate::error::{Error, Result};
use crate::geometry::{
    ChannelCoordinate, DigiOccupancyMap, GeometryConfig, LumisectionMeta, SegmentationMap,
};
use crate::model::STWindow;
use crate::tensor::serialize::{read_tensor_file, write_tensor_file};

// ---------------------------------------------------------------------------
// Synthetic world

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Mean expected count of a typical depth-1 channel at reference
    /// conditions.
    pub base_intensity: f64,
    /// Range of the per-lumisection event count.
    pub events_range: (f64, f64),
    /// Range of the per-lumisection integrated luminosity.
    pub lumi_range: (f64, f64),
    /// Strength of the nonlinear events term in the intensity law. Zero
    /// makes expected totals exactly linear in luminosity.
    pub nonlinearity: f64,
    /// Time constant (in lumisections) of the within-run decay.
    pub decay_tau: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            base_intensity: 30.0,
            events_range: (500.0, 2250.0),
            lumi_range: (0.05, 0.4),
            nonlinearity: 0.3,
            decay_tau: 80.0,
        }
    }
}

/// Frozen generative model of healthy occupancy: a smooth per-channel
/// baseline field modulated by per-run operating conditions, with Poisson
/// counting noise on top.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub cfg: WorldConfig,
    pub seg: SegmentationMap,
    pub baseline: Vec<f64>,
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn new(cfg: WorldConfig, geom: &GeometryConfig, seed: u64) -> SyntheticWorld {
        let seg = SegmentationMap::synthetic(geom);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x776f726c64);
        // One multiplicative gain factor per readout box, fixed for the
        // lifetime of the world.
        let rbx_gain: Vec<(String, f64)> = seg
            .rbx_ids()
            .into_iter()
            .map(|id| (id.to_string(), rng.random_range(0.85..1.15)))
            .collect();
        let max_abs_ieta = geom.active_abs_ieta.1 as f64;
        let mut baseline = vec![0.0; geom.n_cells()];
        for flat in 0..geom.n_cells() {
            if !seg.is_active(flat) {
                continue;
            }
            let c = geom.coordinate_of(flat);
            let depth_scale = 1.0 / (1.0 + 0.35 * (c.depth as f64 - 1.0));
            let phi = 2.0 * std::f64::consts::PI * (c.iphi as f64 - 1.0) / geom.n_iphi as f64;
            let smooth = 1.0 + 0.3 * phi.sin();
            let eta = 1.2 - 0.5 * (c.ieta.abs() as f64 / max_abs_ieta);
            let gain = seg
                .rbx_of(flat)
                .and_then(|id| rbx_gain.iter().find(|(g, _)| g == id))
                .map(|(_, g)| *g)
                .unwrap_or(1.0);
            let b = cfg.base_intensity * depth_scale * smooth * eta * gain;
            assert!(b > 0.0, "op `world`: nonpositive baseline at flat {flat}");
            baseline[flat] = b;
        }
        SyntheticWorld {
            cfg,
            seg,
            baseline,
            seed,
        }
    }

    /// Operating conditions of one lumisection: peak conditions at the
    /// start of a run, exponential decay, and one mid-run step change.
    pub fn conditions(&self, run: usize, ls: usize, ls_per_run: usize) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (run as u64).wrapping_mul(0x9E3779B97F4A7C15) ^ 0x73636865,
        );
        let (e_lo, e_hi) = self.cfg.events_range;
        let (l_lo, l_hi) = self.cfg.lumi_range;
        let events0 = rng.random_range(0.6 * e_hi..e_hi);
        let lumi0 = rng.random_range(0.6 * l_hi..l_hi);
        let step_at = rng.random_range(ls_per_run / 3..ls_per_run.max(2));
        let step = rng.random_range(0.7..0.95);
        let mut decay = 0.55 + 0.45 * (-(ls as f64) / self.cfg.decay_tau).exp();
        if ls >= step_at {
            decay *= step;
        }
        ((events0 * decay).clamp(e_lo, e_hi), (lumi0 * decay).clamp(l_lo, l_hi))
    }

    /// Intensity law: linear in luminosity, mildly nonlinear in the event
    /// count so the renormalization regressor has something to learn.
    pub fn intensity(&self, events: f64, lumi: f64) -> f64 {
        let (_, e_hi) = self.cfg.events_range;
        let (_, l_hi) = self.cfg.lumi_range;
        let nl = self.cfg.nonlinearity;
        (lumi / l_hi) * (1.0 + nl * (events / e_hi).powf(0.7)) / (1.0 + nl)
    }

    pub fn expected_map(&self, events: f64, lumi: f64) -> Vec<f64> {
        let f = self.intensity(events, lumi);
        self.baseline.iter().map(|b| b * f).collect()
    }
}

/// Generate `runs` runs of `ls_per_run` lumisections each. Deterministic
/// per world seed; map order is run-major.
pub fn generate_dataset(world: &SyntheticWorld, runs: usize, ls_per_run: usize) -> Vec<DigiOccupancyMap> {
    generate_runs(world, 0..runs, ls_per_run)
}

/// Generate a specific range of run indices from the same world, so a
/// held-out stream shares the baseline field with the training stream.
pub fn generate_runs(
    world: &SyntheticWorld,
    runs: std::ops::Range<usize>,
    ls_per_run: usize,
) -> Vec<DigiOccupancyMap> {
    let mut maps = Vec::with_capacity(runs.len() * ls_per_run);
    for run in runs {
        for ls in 0..ls_per_run {
            let (events, lumi) = world.conditions(run, ls, ls_per_run);
            let mut rng = ChaCha8Rng::seed_from_u64(
                world.seed
                    ^ (run as u64).wrapping_mul(0x9E3779B97F4A7C15)
                    ^ (ls as u64).wrapping_mul(0xBF58476D1CE4E5B9),
            );
            let values = world
                .expected_map(events, lumi)
                .iter()
                .map(|&lambda| {
                    if lambda <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(lambda).expect("positive lambda").sample(&mut rng)
                    }
                })
                .collect();
            maps.push(DigiOccupancyMap {
                meta: LumisectionMeta {
                    run_id: 1000 + run as u32,
                    ls: ls as u32 + 1,
                    events,
                    lumi,
                },
                values,
            });
        }
    }
    maps
}

// ---------------------------------------------------------------------------
// Dataset storage

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    seed: u64,
    geom: GeometryConfig,
    runs: Vec<u32>,
    n_maps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    run: u32,
    ls: u32,
    events: f64,
    lumi: f64,
}

pub fn save_dataset(dir: &Path, geom: &GeometryConfig, seed: u64, maps: &[DigiOccupancyMap]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut runs: Vec<u32> = maps.iter().map(|m| m.meta.run_id).collect();
    runs.dedup();
    let manifest = DatasetManifest {
        version: 1,
        seed,
        geom: geom.clone(),
        runs,
        n_maps: maps.len(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Dataset(format!("manifest serialization failed: {e}")))?;
    let mpath = dir.join("manifest.toml");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let cpath = dir.join("metas.csv");
    let mut w = csv::Writer::from_path(&cpath).map_err(|e| Error::Csv(e.to_string()))?;
    for (i, m) in maps.iter().enumerate() {
        w.serialize(MetaRow {
            run: m.meta.run_id,
            ls: m.meta.ls,
            events: m.meta.events,
            lumi: m.meta.lumi,
        })
        .map_err(|e| Error::Csv(e.to_string()))?;
        write_tensor_file(
            &dir.join(format!("map_{i:05}.gstn")),
            &[m.values.len()],
            &m.values,
        )?;
    }
    w.flush().map_err(|e| Error::io(&cpath, e))
}

pub fn load_dataset(dir: &Path) -> Result<(GeometryConfig, u64, Vec<DigiOccupancyMap>)> {
    let mpath = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::parse(&mpath, e.to_string()))?;
    let cpath = dir.join("metas.csv");
    let mut r = csv::Reader::from_path(&cpath).map_err(|e| Error::Csv(e.to_string()))?;
    let mut maps = Vec::with_capacity(manifest.n_maps);
    for (i, row) in r.deserialize::<MetaRow>().enumerate() {
        let row = row.map_err(|e| Error::Csv(e.to_string()))?;
        let (shape, values): (Vec<usize>, Vec<f64>) =
            read_tensor_file(&dir.join(format!("map_{i:05}.gstn")))?;
        if shape != [manifest.geom.n_cells()] {
            return Err(Error::Dataset(format!(
                "map {i} has shape {shape:?}, expected [{}]",
                manifest.geom.n_cells()
            )));
        }
        maps.push(DigiOccupancyMap {
            meta: LumisectionMeta {
                run_id: row.run,
                ls: row.ls,
                events: row.events,
                lumi: row.lumi,
            },
            values,
        });
    }
    if maps.len() != manifest.n_maps {
        return Err(Error::Dataset(format!(
            "manifest promises {} maps, found {}",
            manifest.n_maps,
            maps.len()
        )));
    }
    Ok((manifest.geom, manifest.seed, maps))
}

// ---------------------------------------------------------------------------
// Anomaly injection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Dead,
    Hot,
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Persistence {
    Isolated,
    Window,
}

#[derive(Debug, Clone)]
pub struct InjectionSpec {
    /// Degrading factor applied to the healthy value: dead 0.0, hot 2.0,
    /// degraded in (0, 1).
    pub r_d: f64,
    /// Map indices at which faults start.
    pub target_ls: Vec<usize>,
    pub channels: Vec<ChannelCoordinate>,
    pub persistence: Persistence,
    /// Number of consecutive lumisections a window-persistent fault spans.
    pub window: usize,
}

impl InjectionSpec {
    pub fn kind(&self) -> AnomalyKind {
        if self.r_d == 0.0 {
            AnomalyKind::Dead
        } else if self.r_d > 1.0 {
            AnomalyKind::Hot
        } else {
            AnomalyKind::Degraded
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub run: u32,
    pub ls: u32,
    pub ieta: i32,
    pub iphi: i32,
    pub depth: i32,
    pub r_d: f64,
    #[serde(skip, default)]
    pub map_idx: usize,
    #[serde(skip, default)]
    pub flat: usize,
}

/// Sample a reusable (target LS, target channel) selection. The same
/// selection is meant to be shared across anomaly types so their results
/// are comparable.
pub fn random_targets(
    seg: &SegmentationMap,
    n_maps: usize,
    n_starts: usize,
    n_channels: usize,
    window: usize,
    seed: u64,
) -> (Vec<usize>, Vec<ChannelCoordinate>) {
    assert!(window >= 1 && n_maps >= window, "op `random_targets`: window exceeds dataset");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696e6a656374);
    let active: Vec<usize> = (0..seg.geom.n_cells()).filter(|&f| seg.is_active(f)).collect();
    assert!(n_channels <= active.len(), "op `random_targets`: too many target channels");
    let mut chosen = HashSet::new();
    while chosen.len() < n_channels {
        chosen.insert(active[rng.random_range(0..active.len())]);
    }
    let mut channels: Vec<usize> = chosen.into_iter().collect();
    channels.sort_unstable();
    // Faults occupy whole T-step windows: starts are sampled on the window
    // grid so a persistent fault covers every step of the windows it hits.
    let mut starts = HashSet::new();
    let slots = n_maps / window;
    let n_starts = n_starts.min(slots);
    while starts.len() < n_starts {
        starts.insert(rng.random_range(0..slots) * window);
    }
    let mut target_ls: Vec<usize> = starts.into_iter().collect();
    target_ls.sort_unstable();
    let coords = channels.iter().map(|&f| seg.geom.coordinate_of(f)).collect();
    (target_ls, coords)
}

/// Apply gamma_a = R_D * gamma_h at every targeted (lumisection, channel)
/// cell. Non-target cells are bit-identical to the input.
pub fn inject(
    maps: &[DigiOccupancyMap],
    seg: &SegmentationMap,
    spec: &InjectionSpec,
) -> Result<(Vec<DigiOccupancyMap>, Vec<GroundTruth>)> {
    let geom = &seg.geom;
    let span = match spec.persistence {
        Persistence::Isolated => 1,
        Persistence::Window => spec.window,
    };
    if span == 0 {
        return Err(Error::Dataset("injection window must be at least 1".into()));
    }
    let mut flats = Vec::with_capacity(spec.channels.len());
    for c in &spec.channels {
        if !geom.coordinate_in_bounds(c) {
            return Err(Error::CoordinateOutOfBounds {
                ieta: c.ieta,
                iphi: c.iphi,
                depth: c.depth,
            });
        }
        let flat = geom.flat_index(c);
        if !seg.is_active(flat) {
            return Err(Error::Dataset(format!(
                "injection target (ieta={}, iphi={}, depth={}) is masked",
                c.ieta, c.iphi, c.depth
            )));
        }
        flats.push(flat);
    }
    let mut out = maps.to_vec();
    let mut labels = Vec::new();
    for &start in &spec.target_ls {
        if start + span > maps.len() {
            return Err(Error::Dataset(format!(
                "injection at map {start} spans past the dataset end ({} maps)",
                maps.len()
            )));
        }
        for idx in start..start + span {
            for &flat in &flats {
                out[idx].values[flat] *= spec.r_d;
                let c = geom.coordinate_of(flat);
                labels.push(GroundTruth {
                    run: out[idx].meta.run_id,
                    ls: out[idx].meta.ls,
                    ieta: c.ieta,
                    iphi: c.iphi,
                    depth: c.depth,
                    r_d: spec.r_d,
                    map_idx: idx,
                    flat,
                });
            }
        }
    }
    Ok((out, labels))
}

pub fn write_ground_truth(path: &Path, labels: &[GroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    for l in labels {
        w.serialize(l).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Recall-anchored evaluation

pub const DEFAULT_ANCHORS: [f64; 3] = [0.90, 0.95, 0.99];

#[derive(Debug, Clone, Serialize)]
pub struct OperatingPoint {
    pub anchor: f64,
    pub reachable: bool,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub points: Vec<OperatingPoint>,
    pub n_anomalies: usize,
    pub population: usize,
}

impl EvalResult {
    pub fn point_at(&self, anchor: f64) -> Option<&OperatingPoint> {
        self.points.iter().find(|p| p.anchor == anchor)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        for p in &self.points {
            w.serialize(p).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn metrics_from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> (f64, f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let fpr = if fp + tn == 0 { 0.0 } else { fp as f64 / (fp + tn) as f64 };
    (precision, recall, f1, fpr)
}

/// Characterize operating points on a scored population. `cells` holds one
/// (score, is_anomaly) pair per active channel-lumisection cell. For each
/// anchor the threshold is the largest distinct score value whose
/// "flag everything scoring at least this" rule captures at least the
/// anchored fraction of anomalies. Thresholds never split tied scores.
pub fn evaluate(cells: &[(f64, bool)], anchors: &[f64]) -> Result<EvalResult> {
    let n_pos = cells.iter().filter(|(_, a)| *a).count();
    if n_pos == 0 {
        return Err(Error::Evaluation("no labeled anomalies in the population".into()));
    }
    if cells.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite score in the population".into()));
    }
    let population = cells.len();
    let mut order: Vec<usize> = (0..population).collect();
    order.sort_by(|&a, &b| cells[b].0.partial_cmp(&cells[a].0).unwrap());
    // Prefix confusion counts per distinct score value, descending.
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    let mut tp = 0usize;
    let mut flagged = 0usize;
    let mut i = 0;
    while i < population {
        let s = cells[order[i]].0;
        while i < population && cells[order[i]].0 == s {
            flagged += 1;
            tp += cells[order[i]].1 as usize;
            i += 1;
        }
        groups.push((s, tp, flagged));
    }
    let mut points = Vec::with_capacity(anchors.len());
    for &anchor in anchors {
        let hit = groups
            .iter()
            .find(|(_, tp, _)| *tp as f64 / n_pos as f64 >= anchor);
        let (reachable, (threshold, tp, flagged)) = match hit {
            Some(&g) => (true, g),
            None => (false, *groups.last().unwrap()),
        };
        let fp = flagged - tp;
        let fn_ = n_pos - tp;
        let tn = population - n_pos - fp;
        let (precision, recall, f1, fpr) = metrics_from_counts(tp, fp, fn_, tn);
        points.push(OperatingPoint {
            anchor,
            reachable,
            threshold,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            fpr,
        });
    }
    Ok(EvalResult {
        points,
        n_anomalies: n_pos,
        population,
    })
}

// ---------------------------------------------------------------------------
// Windowing and the end-to-end detection experiment

/// Chop a map stream into non-overlapping windows of `t` steps, never
/// crossing a run boundary. Leftover lumisections are dropped.
pub fn windows_from_maps(maps: &[DigiOccupancyMap], t: usize) -> Vec<STWindow> {
    assert!(t >= 1, "op `windows_from_maps`: empty window");
    let mut windows = Vec::new();
    let mut i = 0;
    while i + t <= maps.len() {
        let chunk = &maps[i..i + t];
        if chunk.iter().any(|m| m.meta.run_id != chunk[0].meta.run_id) {
            i += 1;
            continue;
        }
        windows.push(STWindow {
            steps: chunk.iter().map(|m| m.values.clone()).collect(),
            metas: chunk.iter().map(|m| m.meta.clone()).collect(),
        });
        i += t;
    }
    windows
}

/// One row of an ablation or severity sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub r_d: f64,
    pub seed: u64,
    pub anchor: f64,
    pub reachable: bool,
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Build the per-cell (score, truth) population for an injected test
/// stream: every active channel of every scored lumisection is one cell.
pub fn scored_population(
    model: &crate::model::Autoencoder<f32>,
    scaler: &crate::training::ScalingStats,
    calib: &anomaly::ScoreCalibration,
    test_maps: &[DigiOccupancyMap],
    seg: &SegmentationMap,
    labels: &[GroundTruth],
    t: usize,
) -> Vec<(f64, bool)> {
    let truth: HashSet<(usize, usize)> = labels.iter().map(|l| (l.map_idx, l.flat)).collect();
    let n = seg.geom.n_cells();
    let mut cells = Vec::new();
    let mut i = 0;
    while i + t <= test_maps.len() {
        let chunk = &test_maps[i..i + t];
        if chunk.iter().any(|m| m.meta.run_id != chunk[0].meta.run_id) {
            i += 1;
            continue;
        }
        let window = STWindow {
            steps: chunk.iter().map(|m| m.values.clone()).collect(),
            metas: chunk.iter().map(|m| m.meta.clone()).collect(),
        };
        let errs = anomaly::window_errors(model, scaler, &window);
        let mae = anomaly::windowed_mae(&errs);
        for (step, e) in errs.iter().enumerate() {
            let map_idx = i + step;
            for flat in 0..n {
                if !seg.is_active(flat) {
                    continue;
                }
                let err = match calib.mode {
                    CalibrationMode::Isolated => e[flat],
                    CalibrationMode::Windowed => mae[flat],
                };
                let s = err / calib.sigma[flat];
                cells.push((s, truth.contains(&(map_idx, flat))));
            }
        }
        i += t;
    }
    cells
}

// ---------------------------------------------------------------------------
// End-to-end experiment runner

/// Everything produced by one generate -> renorm -> train -> inject ->
/// score -> evaluate chain.
pub struct DetectionOutcome {
    pub eval: EvalResult,
    pub history: crate::training::TrainHistory,
    pub n_labels: usize,
}

/// Trained artifacts of one (variant, seed) cell, reusable across
/// injection severities: the model does not depend on the faults it will
/// be asked to find.
pub struct DetectionContext {
    pub cfg: crate::config::PipelineConfig,
    pub seg: SegmentationMap,
    pub renorm: crate::renorm::RenormModel,
    pub scaler: crate::training::ScalingStats,
    pub model: crate::model::Autoencoder<f32>,
    pub calib: anomaly::ScoreCalibration,
    pub history: crate::training::TrainHistory,
    pub test_maps: Vec<DigiOccupancyMap>,
    pub seed: u64,
}

impl DetectionContext {
    /// Generate the healthy streams, fit the renormalizer, train the
    /// autoencoder and calibrate the scores. The held-out test stream is
    /// kept for later injection.
    pub fn prepare(
        cfg: &crate::config::PipelineConfig,
        variant: &str,
        seed: u64,
    ) -> Result<DetectionContext> {
        let arch = cfg.arch.clone().with_variant(variant)?;
        let t = arch.t;
        let world = SyntheticWorld::new(cfg.world.clone(), &cfg.geometry, seed);
        let seg = world.seg.clone();
        let train_maps = generate_runs(&world, 0..cfg.data.train_runs, cfg.data.ls_per_run);
        let test_maps = generate_runs(
            &world,
            cfg.data.train_runs..cfg.data.train_runs + cfg.data.test_runs,
            cfg.data.ls_per_run,
        );

        // Stage 1: occupancy renormalization, fit on the training runs only.
        let mut ren_cfg = cfg.renorm.clone();
        ren_cfg.seed = seed;
        let ren_data: Vec<_> = train_maps
            .iter()
            .map(|m| (m.meta.clone(), m.values.clone()))
            .collect();
        let renorm = crate::renorm::train_renorm(&ren_data, &seg, &ren_cfg)?;
        let train_norm: Vec<DigiOccupancyMap> = train_maps
            .iter()
            .map(|m| crate::renorm::renormalize(m, &renorm, &seg))
            .collect::<Result<_>>()?;

        // Stage 2: per-channel scaling and autoencoder training.
        let scaler =
            crate::training::ScalingStats::fit(train_norm.iter().map(|m| m.values.as_slice()));
        let scaled: Vec<DigiOccupancyMap> = train_norm
            .iter()
            .map(|m| DigiOccupancyMap {
                meta: m.meta.clone(),
                values: scaler.scale(&m.values),
            })
            .collect();
        let windows = windows_from_maps(&scaled, t);
        let mut model = crate::model::Autoencoder::<f32>::new(arch, cfg.geometry.clone(), seed)?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let history = crate::training::train(&mut model, &windows, &seg, &cfg.loss, &train_cfg)?;

        // Stage 3: calibrate on the healthy training stream.
        let mode = match cfg.injection.persistence {
            Persistence::Isolated => CalibrationMode::Isolated,
            Persistence::Window => CalibrationMode::Windowed,
        };
        let healthy_norm: Vec<STWindow> = windows_from_maps(&train_norm, t);
        let calib = anomaly::calibrate(&model, &scaler, &healthy_norm, mode)?;
        Ok(DetectionContext {
            cfg: cfg.clone(),
            seg,
            renorm,
            scaler,
            model,
            calib,
            history,
            test_maps,
            seed,
        })
    }

    /// Inject one severity into the held-out stream and evaluate. The
    /// fault span follows the pipeline's window length so every variant
    /// faces identical ground truth; only the scoring window tracks the
    /// model (a nontemporal model scores isolated maps).
    pub fn score(&self, r_d: f64) -> Result<EvalResult> {
        let cfg = &self.cfg;
        let fault_t = cfg.arch.t;
        let t = self.model.arch.t;
        let n_sites =
            ((self.seg.n_active() as f64 * cfg.injection.density).round() as usize).max(1);
        let (target_ls, channels) = random_targets(
            &self.seg,
            self.test_maps.len(),
            cfg.injection.n_starts,
            n_sites,
            fault_t,
            self.seed,
        );
        let spec = InjectionSpec {
            r_d,
            target_ls,
            channels,
            persistence: cfg.injection.persistence,
            window: fault_t,
        };
        let (injected, labels) = inject(&self.test_maps, &self.seg, &spec)?;
        let injected_norm: Vec<DigiOccupancyMap> = injected
            .iter()
            .map(|m| crate::renorm::renormalize(m, &self.renorm, &self.seg))
            .collect::<Result<_>>()?;
        let cells = scored_population(
            &self.model,
            &self.scaler,
            &self.calib,
            &injected_norm,
            &self.seg,
            &labels,
            t,
        );
        evaluate(&cells, &cfg.evaluation.anchors)
    }
}

/// Run the full detection pipeline for one (variant, degrading factor,
/// seed) cell. The healthy stream trains the renormalizer and the
/// autoencoder; a held-out stream from the same world receives the
/// injected faults and is scored against the healthy calibration.
pub fn run_detection(
    cfg: &crate::config::PipelineConfig,
    variant: &str,
    r_d: f64,
    seed: u64,
) -> Result<DetectionOutcome> {
    let ctx = DetectionContext::prepare(cfg, variant, seed)?;
    let eval = ctx.score(r_d)?;
    let n_labels = eval.n_anomalies;
    Ok(DetectionOutcome {
        eval,
        history: ctx.history,
        n_labels,
    })
}

/// One detection run per (variant, degrading factor, seed); one output row
/// per operating point of each run.
pub fn ablation_sweep(
    cfg: &crate::config::PipelineConfig,
    variants: &[&str],
    r_ds: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let ctx = DetectionContext::prepare(cfg, variant, seed)?;
            for &r_d in r_ds {
                let eval = ctx.score(r_d)?;
                for p in &eval.points {
                    rows.push(SweepRow {
                        variant: variant.to_string(),
                        r_d,
                        seed,
                        anchor: p.anchor,
                        reachable: p.reachable,
                        fpr: p.fpr,
                        precision: p.precision,
                        recall: p.recall,
                        f1: p.f1,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "op `median`: empty sample");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_world(seed: u64) -> SyntheticWorld {
        SyntheticWorld::new(WorldConfig::default(), &GeometryConfig::toy(), seed)
    }

    #[test]
    fn baseline_positive_on_active_channels() {
        let w = toy_world(1);
        for flat in 0..w.seg.geom.n_cells() {
            if w.seg.is_active(flat) {
                assert!(w.baseline[flat] > 0.0);
            } else {
                assert_eq!(w.baseline[flat], 0.0);
            }
        }
    }

    #[test]
    fn sample_mean_tracks_expectation() {
        let w = toy_world(2);
        let maps = generate_dataset(&w, 1, 500);
        // Pick an active channel and compare its sample mean over 500 LS
        // against the per-LS expected values.
        let flat = (0..w.seg.geom.n_cells()).find(|&f| w.seg.is_active(f)).unwrap();
        let mut sample = 0.0;
        let mut expect = 0.0;
        for (ls, m) in maps.iter().enumerate() {
            sample += m.values[flat];
            let (ev, lu) = w.conditions(0, ls, 500);
            expect += w.baseline[flat] * w.intensity(ev, lu);
        }
        assert!(
            (sample - expect).abs() / expect < 0.05,
            "sample mean {sample} vs expectation {expect}"
        );
    }

    #[test]
    fn linear_world_doubles_with_lumi() {
        let mut cfg = WorldConfig::default();
        cfg.nonlinearity = 0.0;
        let w = SyntheticWorld::new(cfg, &GeometryConfig::toy(), 3);
        let a: f64 = w.expected_map(1000.0, 0.1).iter().sum();
        let b: f64 = w.expected_map(1000.0, 0.2).iter().sum();
        assert!((b / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn datasets_deterministic_per_seed() {
        let a = generate_dataset(&toy_world(5), 2, 10);
        let b = generate_dataset(&toy_world(5), 2, 10);
        let c = generate_dataset(&toy_world(6), 2, 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values, y.values);
        }
        assert!(a.iter().zip(&c).any(|(x, y)| x.values != y.values));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let geom = GeometryConfig::toy();
        let maps = generate_dataset(&toy_world(7), 2, 5);
        save_dataset(dir.path(), &geom, 7, &maps).unwrap();
        let (g2, seed, maps2) = load_dataset(dir.path()).unwrap();
        assert_eq!(g2.n_cells(), geom.n_cells());
        assert_eq!(seed, 7);
        assert_eq!(maps.len(), maps2.len());
        for (a, b) in maps.iter().zip(&maps2) {
            assert_eq!(a.values, b.values);
            assert_eq!(a.meta.run_id, b.meta.run_id);
        }
    }

    fn injection_fixture() -> (Vec<DigiOccupancyMap>, SegmentationMap, ChannelCoordinate) {
        let geom = GeometryConfig::toy();
        let seg = SegmentationMap::synthetic(&geom);
        let maps = generate_dataset(&toy_world(8), 1, 12);
        let flat = (0..geom.n_cells()).find(|&f| seg.is_active(f)).unwrap();
        let coord = geom.coordinate_of(flat);
        (maps, seg, coord)
    }

    #[test]
    fn injection_scales_targets_and_preserves_everything_else() {
        let (maps, seg, coord) = injection_fixture();
        let flat = seg.geom.flat_index(&coord);
        for (r_d, kind) in [(0.0, AnomalyKind::Dead), (2.0, AnomalyKind::Hot), (0.2, AnomalyKind::Degraded)] {
            let spec = InjectionSpec {
                r_d,
                target_ls: vec![3],
                channels: vec![coord.clone()],
                persistence: Persistence::Isolated,
                window: 1,
            };
            assert_eq!(spec.kind(), kind);
            let (out, labels) = inject(&maps, &seg, &spec).unwrap();
            assert_eq!(labels.len(), 1);
            assert_eq!(out[3].values[flat], maps[3].values[flat] * r_d);
            for (i, m) in out.iter().enumerate() {
                for f in 0..m.values.len() {
                    if i == 3 && f == flat {
                        continue;
                    }
                    assert_eq!(m.values[f], maps[i].values[f]);
                }
            }
        }
    }

    #[test]
    fn window_persistence_spans_consecutive_ls() {
        let (maps, seg, coord) = injection_fixture();
        let spec = InjectionSpec {
            r_d: 0.0,
            target_ls: vec![2],
            channels: vec![coord],
            persistence: Persistence::Window,
            window: 5,
        };
        let (out, labels) = inject(&maps, &seg, &spec).unwrap();
        assert_eq!(labels.len(), 5);
        let flat = labels[0].flat;
        for idx in 2..7 {
            assert_eq!(out[idx].values[flat], 0.0);
        }
    }

    #[test]
    fn injection_rejects_bad_targets() {
        let (maps, seg, coord) = injection_fixture();
        let late = InjectionSpec {
            r_d: 0.0,
            target_ls: vec![11],
            channels: vec![coord],
            persistence: Persistence::Window,
            window: 5,
        };
        assert!(inject(&maps, &seg, &late).is_err());
        let masked = InjectionSpec {
            r_d: 0.0,
            target_ls: vec![0],
            channels: vec![ChannelCoordinate { ieta: 0, iphi: 1, depth: 1 }],
            persistence: Persistence::Isolated,
            window: 1,
        };
        assert!(inject(&maps, &seg, &masked).is_err());
    }

    #[test]
    fn random_targets_are_active_and_reproducible() {
        let geom = GeometryConfig::toy();
        let seg = SegmentationMap::synthetic(&geom);
        let (ls1, ch1) = random_targets(&seg, 100, 10, 8, 5, 42);
        let (ls2, ch2) = random_targets(&seg, 100, 10, 8, 5, 42);
        assert_eq!(ls1, ls2);
        assert_eq!(ch1, ch2);
        assert_eq!(ch1.len(), 8);
        for c in &ch1 {
            assert!(seg.is_active(geom.flat_index(c)));
        }
        for &s in &ls1 {
            assert!(s + 5 <= 100);
        }
    }

    #[test]
    fn perfect_separation_gives_unit_precision_zero_fpr() {
        let mut cells = vec![(0.1, false); 100];
        cells.extend(vec![(5.0, true); 10]);
        let r = evaluate(&cells, &DEFAULT_ANCHORS).unwrap();
        for p in &r.points {
            assert!(p.reachable);
            assert_eq!(p.precision, 1.0);
            assert_eq!(p.fpr, 0.0);
            assert_eq!(p.tp + p.fn_, 10);
            assert_eq!(p.fp + p.tn, 100);
        }
    }

    #[test]
    fn worked_confusion_example() {
        let (_, recall, _, fpr) = metrics_from_counts(99, 2, 1, 999998);
        assert!((recall - 0.99).abs() < 1e-12);
        assert!((fpr - 2.0e-6).abs() < 1e-12);
    }

    #[test]
    fn evaluate_matches_exhaustive_count_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cells: Vec<(f64, bool)> = (0..2000)
            .map(|_| {
                let anomalous = rng.random_bool(0.02);
                let s = if anomalous {
                    rng.random_range(0.5..4.0)
                } else {
                    rng.random_range(0.0..2.0)
                };
                (s, anomalous)
            })
            .collect();
        let r = evaluate(&cells, &[0.90]).unwrap();
        let p = &r.points[0];
        // Brute-force count at the chosen threshold.
        let mut tp = 0;
        let mut fp = 0;
        for &(s, a) in &cells {
            if s >= p.threshold {
                if a {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        assert_eq!((tp, fp), (p.tp, p.fp));
        assert!(p.recall >= 0.90);
        // The next larger threshold must fall below the anchor.
        let mut above: Vec<f64> = cells.iter().map(|c| c.0).filter(|&s| s > p.threshold).collect();
        above.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if let Some(&next) = above.first() {
            let tp_next = cells.iter().filter(|&&(s, a)| a && s >= next).count();
            assert!((tp_next as f64) / (r.n_anomalies as f64) < 0.90);
        }
    }

    #[test]
    fn unreachable_anchor_is_reported() {
        let cells = vec![(1.0, true), (1.0, false), (0.5, true)];
        let r = evaluate(&cells, &[1.5]).unwrap();
        assert!(!r.points[0].reachable);
    }

    #[test]
    fn windows_respect_run_boundaries() {
        let w = toy_world(10);
        let maps = generate_dataset(&w, 2, 7);
        let windows = windows_from_maps(&maps, 5);
        for win in &windows {
            assert_eq!(win.steps.len(), 5);
            let run = win.metas[0].run_id;
            assert!(win.metas.iter().all(|m| m.run_id == run));
        }
        // 7 LS per run fit exactly one window of 5 each.
        assert_eq!(windows.len(), 2);
    }
}
