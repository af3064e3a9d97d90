//! Command-line front end: each pipeline stage is a subcommand that reads
//! and writes on-disk artifacts, so stages can be rerun independently.

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graphstad::anomaly::{self, AnomalyReport, ChannelScore, ScoreCalibration};
use graphstad::check;
use graphstad::config::PipelineConfig;
use graphstad::geometry::{GeometryConfig, SegmentationMap};
use graphstad::model::Autoencoder;
use graphstad::renorm::{self, RenormModel};
use graphstad::simlab::{
    self, GroundTruth, InjectionSpec, Persistence, SyntheticWorld,
};
use graphstad::training::{self, ScalingStats};
use graphstad::{Error, Result};

#[derive(Parser)]
#[command(
    name = "graphstad",
    version,
    about = "Spatio-temporal anomaly detection on synthetic digi-occupancy streams"
)]
struct Cli {
    /// TOML configuration file; GRAPHSTAD_* environment overrides apply on
    /// top of it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for generation, initialization and injection. Defaults
    /// to the configured training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Geometry preset override: toy or full.
    #[arg(long, global = true)]
    geometry: Option<String>,
    /// Architecture variant: graphstad, no-gnn, nontemporal, gru, bilstm.
    #[arg(long, global = true, default_value = "graphstad")]
    variant: String,
    /// Training worker threads; 0 picks the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a healthy digi-occupancy dataset.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Which stream to generate: train or test. Both come from the same
        /// world, so a test stream composes with a model trained on the
        /// train stream of the same seed.
        #[arg(long, default_value = "train")]
        stream: String,
    },
    /// Fit the occupancy renormalization regressor on a healthy dataset.
    TrainRenorm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reconstruction autoencoder on a healthy dataset.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the trained renormalizer.
        #[arg(long)]
        renorm: PathBuf,
        /// Output directory: model checkpoint, scaler, score calibration
        /// and training history.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inject channel faults of one severity into a dataset.
    Inject {
        #[arg(long)]
        data: PathBuf,
        /// Degrading factor: 0 dead, 2 hot, (0, 1) degraded.
        #[arg(long)]
        r_d: f64,
        /// Output: injected dataset plus ground_truth.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every active channel of a dataset against a trained model.
    Score {
        #[arg(long)]
        data: PathBuf,
        /// Model directory produced by train-ae.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        renorm: PathBuf,
        /// Output directory for report.csv.
        #[arg(long)]
        out: PathBuf,
        /// Flagging threshold on standardized scores; defaults to the
        /// configured value.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Join a score report with injection ground truth and characterize
    /// recall-anchored operating points.
    Evaluate {
        /// report.csv from the score subcommand.
        #[arg(long)]
        scores: PathBuf,
        /// ground_truth.csv from the inject subcommand.
        #[arg(long)]
        truth: PathBuf,
        /// Optional CSV of the operating-point table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep variants, severities and seeds through the whole pipeline.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant names.
        #[arg(long, default_value = "graphstad,nontemporal")]
        variants: String,
        /// Comma-separated degrading factors.
        #[arg(long, default_value = "0.0,0.3,0.6")]
        r_ds: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1")]
        seeds: String,
    },
    /// Verify every layer's analytic gradient against finite differences.
    Gradcheck,
    /// Summarize a dataset: per-depth totals before and after
    /// renormalization, and their coefficients of variation.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        renorm: PathBuf,
        /// Output CSV of per-lumisection depth totals.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, u64)> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(g) = &cli.geometry {
        cfg.geometry = match g.as_str() {
            "toy" => GeometryConfig::toy(),
            "full" => GeometryConfig::full(),
            other => return Err(Error::Config(format!("unknown geometry preset `{other}`"))),
        };
    }
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    cfg.train.seed = seed;
    cfg.renorm.seed = seed;
    if let Some(t) = cli.threads {
        cfg.train.threads = t;
    }
    cfg.arch = cfg.arch.clone().with_variant(&cli.variant)?;
    Ok((cfg, seed))
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, seed) = load_config(cli)?;
    match &cli.cmd {
        Cmd::GenData { out, stream } => {
            let world = SyntheticWorld::new(cfg.world.clone(), &cfg.geometry, seed);
            let runs = match stream.as_str() {
                "train" => 0..cfg.data.train_runs,
                "test" => {
                    cfg.data.train_runs..cfg.data.train_runs + cfg.data.test_runs
                }
                other => {
                    return Err(Error::Config(format!("unknown stream `{other}`")))
                }
            };
            let n_runs = runs.len();
            let maps = simlab::generate_runs(&world, runs, cfg.data.ls_per_run);
            simlab::save_dataset(out, &cfg.geometry, seed, &maps)?;
            println!(
                "gen-data: {} maps in {} runs -> {}",
                maps.len(),
                n_runs,
                out.display()
            );
        }
        Cmd::TrainRenorm { data, out } => {
            let (geom, _, maps) = simlab::load_dataset(data)?;
            let seg = SegmentationMap::synthetic(&geom);
            let pairs: Vec<_> = maps
                .iter()
                .map(|m| (m.meta.clone(), m.values.clone()))
                .collect();
            let model = renorm::train_renorm(&pairs, &seg, &cfg.renorm)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            model.save(out)?;
            println!(
                "train-renorm: fitted on {} lumisections -> {}",
                pairs.len(),
                out.display()
            );
        }
        Cmd::TrainAe { data, renorm: renorm_dir, out } => {
            let (geom, _, maps) = simlab::load_dataset(data)?;
            let seg = SegmentationMap::synthetic(&geom);
            let ren = RenormModel::load(renorm_dir)?;
            let norm = maps
                .iter()
                .map(|m| renorm::renormalize(m, &ren, &seg))
                .collect::<Result<Vec<_>>>()?;
            let scaler = ScalingStats::fit(norm.iter().map(|m| m.values.as_slice()));
            let scaled: Vec<_> = norm
                .iter()
                .map(|m| graphstad::geometry::DigiOccupancyMap {
                    meta: m.meta.clone(),
                    values: scaler.scale(&m.values),
                })
                .collect();
            let windows = simlab::windows_from_maps(&scaled, cfg.arch.t);
            let mut model = Autoencoder::<f32>::new(cfg.arch.clone(), geom, seed)?;
            let history =
                training::train(&mut model, &windows, &seg, &cfg.loss, &cfg.train)?;
            let mode = match cfg.injection.persistence {
                Persistence::Isolated => anomaly::CalibrationMode::Isolated,
                Persistence::Window => anomaly::CalibrationMode::Windowed,
            };
            let healthy = simlab::windows_from_maps(&norm, cfg.arch.t);
            let calib = anomaly::calibrate(&model, &scaler, &healthy, mode)?;
            let model_dir = out.join("model");
            std::fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
            model.save(&model_dir)?;
            scaler.save(&out.join("scaler.toml"))?;
            calib.save(&out.join("calibration.toml"))?;
            history.write_csv(&out.join("history.csv"))?;
            println!(
                "train-ae: {} epochs, best val {:.6} at epoch {} -> {}",
                history.records.len(),
                history.best_val,
                history.best_epoch,
                out.display()
            );
        }
        Cmd::Inject { data, r_d, out } => {
            let (geom, dataset_seed, maps) = simlab::load_dataset(data)?;
            let seg = SegmentationMap::synthetic(&geom);
            let inj_seed = cli.seed.unwrap_or(dataset_seed);
            let n_sites = ((seg.n_active() as f64 * cfg.injection.density).round()
                as usize)
                .max(1);
            let (target_ls, channels) = simlab::random_targets(
                &seg,
                maps.len(),
                cfg.injection.n_starts,
                n_sites,
                cfg.arch.t,
                inj_seed,
            );
            let spec = InjectionSpec {
                r_d: *r_d,
                target_ls,
                channels,
                persistence: cfg.injection.persistence,
                window: cfg.arch.t,
            };
            let (injected, labels) = simlab::inject(&maps, &seg, &spec)?;
            simlab::save_dataset(out, &geom, dataset_seed, &injected)?;
            simlab::write_ground_truth(&out.join("ground_truth.csv"), &labels)?;
            println!(
                "inject: {} labeled cells at r_d = {} -> {}",
                labels.len(),
                r_d,
                out.display()
            );
        }
        Cmd::Score { data, model: model_dir, renorm: renorm_dir, out, alpha } => {
            let (geom, _, maps) = simlab::load_dataset(data)?;
            let seg = SegmentationMap::synthetic(&geom);
            let ren = RenormModel::load(renorm_dir)?;
            let model = Autoencoder::<f32>::load(&model_dir.join("model"))?;
            let scaler = ScalingStats::load(&model_dir.join("scaler.toml"))?;
            let calib = ScoreCalibration::load(&model_dir.join("calibration.toml"))?;
            let alpha = alpha.unwrap_or(cfg.evaluation.alpha);
            let norm = maps
                .iter()
                .map(|m| renorm::renormalize(m, &ren, &seg))
                .collect::<Result<Vec<_>>>()?;
            let windows = simlab::windows_from_maps(&norm, model.arch.t);
            let mut records = Vec::new();
            for w in &windows {
                records.extend(
                    anomaly::score_window(&model, &scaler, &calib, w, &seg, alpha)
                        .records,
                );
            }
            let report = AnomalyReport {
                alpha,
                mode: calib.mode,
                records,
            };
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            report.write_csv(&out.join("report.csv"))?;
            let s = report.summary();
            println!(
                "score: {} cells, {} flagged at alpha = {}, max score {:.3} -> {}",
                s.n_scores,
                s.n_flagged,
                s.alpha,
                s.max_score,
                out.display()
            );
        }
        Cmd::Evaluate { scores, truth, out } => {
            let rows: Vec<ChannelScore> = read_csv(scores)?;
            let labels: Vec<GroundTruth> = read_csv(truth)?;
            let truth_set: HashSet<(u32, u32, i32, i32, i32)> = labels
                .iter()
                .map(|l| (l.run, l.ls, l.ieta, l.iphi, l.depth))
                .collect();
            let cells: Vec<(f64, bool)> = rows
                .iter()
                .map(|r| {
                    let key = (r.run, r.ls, r.ieta, r.iphi, r.depth);
                    (r.s, truth_set.contains(&key))
                })
                .collect();
            let eval = simlab::evaluate(&cells, &cfg.evaluation.anchors)?;
            println!(
                "evaluate: {} cells, {} anomalies",
                eval.population, eval.n_anomalies
            );
            println!(
                "{:>7} {:>9} {:>10} {:>8} {:>8} {:>8} {:>10} {:>9} {:>8} {:>8} {:>10}",
                "anchor", "reachable", "threshold", "tp", "fp", "fn", "tn",
                "precision", "recall", "f1", "fpr"
            );
            for p in &eval.points {
                println!(
                    "{:>7.2} {:>9} {:>10.4} {:>8} {:>8} {:>8} {:>10} {:>9.4} {:>8.4} {:>8.4} {:>10.3e}",
                    p.anchor, p.reachable, p.threshold, p.tp, p.fp, p.fn_, p.tn,
                    p.precision, p.recall, p.f1, p.fpr
                );
            }
            if let Some(path) = out {
                eval.write_csv(path)?;
            }
        }
        Cmd::Ablate { out, variants, r_ds, seeds } => {
            let variants: Vec<&str> = variants.split(',').map(str::trim).collect();
            let r_ds = parse_list::<f64>(r_ds, "r-ds")?;
            let seeds = parse_list::<u64>(seeds, "seeds")?;
            let rows = simlab::ablation_sweep(&cfg, &variants, &r_ds, &seeds)?;
            simlab::write_sweep_csv(out, &rows)?;
            println!("ablate: {} sweep rows -> {}", rows.len(), out.display());
        }
        Cmd::Gradcheck => {
            let entries = check::gradient_suite();
            let mut failed = 0;
            for e in &entries {
                println!(
                    "{:<24} max_rel {:>10.3e}  tol {:>8.1e}  {}",
                    e.op,
                    e.max_rel,
                    e.tol,
                    if e.passed() { "ok" } else { "FAIL" }
                );
                failed += !e.passed() as usize;
            }
            if failed > 0 {
                return Err(Error::Training(format!(
                    "{failed} of {} gradient checks failed",
                    entries.len()
                )));
            }
            println!("gradcheck: all {} checks passed", entries.len());
        }
        Cmd::Report { data, renorm: renorm_dir, out } => {
            let (geom, _, maps) = simlab::load_dataset(data)?;
            let seg = SegmentationMap::synthetic(&geom);
            let ren = RenormModel::load(renorm_dir)?;
            let n_depth = geom.n_depth;
            let mut w = csv::Writer::from_path(out).map_err(|e| Error::Csv(e.to_string()))?;
            w.write_record(["run", "ls", "depth", "raw_total", "renorm_total"])
                .map_err(|e| Error::Csv(e.to_string()))?;
            let mut raw_cols = vec![Vec::new(); n_depth];
            let mut ren_cols = vec![Vec::new(); n_depth];
            for m in &maps {
                let raw = renorm::depth_totals(&m.values, &seg);
                let rn = renorm::depth_totals(
                    &renorm::renormalize(m, &ren, &seg)?.values,
                    &seg,
                );
                for d in 0..n_depth {
                    raw_cols[d].push(raw[d]);
                    ren_cols[d].push(rn[d]);
                    w.write_record([
                        m.meta.run_id.to_string(),
                        m.meta.ls.to_string(),
                        (d + 1).to_string(),
                        format!("{}", raw[d]),
                        format!("{}", rn[d]),
                    ])
                    .map_err(|e| Error::Csv(e.to_string()))?;
                }
            }
            w.flush().map_err(|e| Error::io(out, e))?;
            for d in 0..n_depth {
                println!(
                    "report: depth {} CoV raw {:.4} -> renormalized {:.4}",
                    d + 1,
                    cov(&raw_cols[d]),
                    cov(&ren_cols[d])
                );
            }
            println!("report: {} lumisections -> {}", maps.len(), out.display());
        }
    }
    Ok(())
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Csv(e.to_string())))
        .collect()
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("bad {what} entry `{s}`")))
        })
        .collect()
}

/// Coefficient of variation of a sample.
fn cov(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Contract violations abort with a panic naming the failing stage; keep
    // the failure to one parsable stderr line.
    std::panic::set_hook(Box::new(|_| {}));
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("unknown panic");
            eprintln!("error: aborted: {msg}");
            ExitCode::FAILURE
        }
    }
}
