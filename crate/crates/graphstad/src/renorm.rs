//! Run-setting renormalization: a small regressor maps (events, luminosity)
//! to per-depth occupancy normalizers so maps from different run conditions
//! become comparable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{DigiOccupancyMap, LumisectionMeta, SegmentationMap};
use crate::tensor::{fc, mean, relu, square, sub, ParamSet, Tensor};
use crate::training::Adam;

/// Predicted normalizers below this floor abort renormalization.
pub const NORMALIZER_FLOOR: f64 = 1e-6;

const HIDDEN: usize = 64;

/// Per-depth sums of active-channel occupancy. Index d holds the total for
/// depth d+1.
pub fn depth_totals(values: &[f64], seg: &SegmentationMap) -> Vec<f64> {
    let geom = &seg.geom;
    assert_eq!(values.len(), geom.n_cells(), "depth_totals: map size mismatch");
    let mut totals = vec![0.0; geom.n_depth];
    for (flat, v) in values.iter().enumerate() {
        if seg.is_active(flat) {
            totals[flat % geom.n_depth] += v;
        }
    }
    totals
}

/// FC(2->64) -> ReLU -> FC(64->64) -> ReLU -> FC(64->n_depth) -> ReLU, with
/// input standardization and per-depth target scaling around it.
pub struct RenormModel {
    pub params: ParamSet<f64>,
    pub n_depth: usize,
    pub in_mean: [f64; 2],
    pub in_std: [f64; 2],
    /// Targets are regressed in units of their per-depth training mean; the
    /// prediction multiplies back.
    pub target_scale: Vec<f64>,
    /// Scaling factor K compensating for channel-count differences per depth.
    pub k: f64,
    /// Set when the training inputs carried no spread; the model then
    /// predicts a constant.
    pub degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct RenormMeta {
    n_depth: usize,
    in_mean: [f64; 2],
    in_std: [f64; 2],
    target_scale: Vec<f64>,
    k: f64,
    degenerate: bool,
}

fn init_fc(params: &mut ParamSet<f64>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    params.insert(format!("{name}.weight"), Tensor::param(&[fan_in, fan_out], w));
    // small positive bias keeps ReLU units alive at zero input (the
    // standardized input of a degenerate constant dataset is exactly zero)
    params.insert(format!("{name}.bias"), Tensor::param(&[fan_out], vec![0.01; fan_out]));
}

impl RenormModel {
    fn new(n_depth: usize, k: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_fc(&mut params, "fc1", 2, HIDDEN, &mut rng);
        init_fc(&mut params, "fc2", HIDDEN, HIDDEN, &mut rng);
        init_fc(&mut params, "fc3", HIDDEN, n_depth, &mut rng);
        RenormModel {
            params,
            n_depth,
            in_mean: [0.0; 2],
            in_std: [1.0; 2],
            target_scale: vec![1.0; n_depth],
            k,
            degenerate: false,
        }
    }

    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let p = &self.params;
        let h = relu(&fc(x, p.get("fc1.weight"), p.get("fc1.bias")));
        let h = relu(&fc(&h, p.get("fc2.weight"), p.get("fc2.bias")));
        relu(&fc(&h, p.get("fc3.weight"), p.get("fc3.bias")))
    }

    fn standardize(&self, meta: &LumisectionMeta) -> [f64; 2] {
        [
            (meta.events - self.in_mean[0]) / self.in_std[0],
            (meta.lumi - self.in_mean[1]) / self.in_std[1],
        ]
    }

    /// Predicted per-depth normalizers for one lumisection.
    pub fn predict(&self, meta: &LumisectionMeta) -> Vec<f64> {
        let x = self.standardize(meta);
        let out = self.forward(&Tensor::from_vec(&[1, 2], x.to_vec()));
        out.to_vec()
            .iter()
            .zip(&self.target_scale)
            .map(|(o, s)| o * s)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_params(dir, &self.params)?;
        let meta = RenormMeta {
            n_depth: self.n_depth,
            in_mean: self.in_mean,
            in_std: self.in_std,
            target_scale: self.target_scale.clone(),
            k: self.k,
            degenerate: self.degenerate,
        };
        let text = toml::to_string(&meta)
            .map_err(|e| Error::Checkpoint(format!("renorm metadata serialization failed: {e}")))?;
        let path = dir.join("renorm.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<RenormModel> {
        let path = dir.join("renorm.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: RenormMeta = toml::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        let params = checkpoint::load_params(dir)?;
        for layer in ["fc1", "fc2", "fc3"] {
            for part in ["weight", "bias"] {
                let name = format!("{layer}.{part}");
                if !params.contains(&name) {
                    return Err(Error::Checkpoint(format!("missing renorm tensor `{name}`")));
                }
            }
        }
        Ok(RenormModel {
            params,
            n_depth: meta.n_depth,
            in_mean: meta.in_mean,
            in_std: meta.in_std,
            target_scale: meta.target_scale,
            k: meta.k,
            degenerate: meta.degenerate,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenormTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    /// Scaling factor K; `None` selects mean active channels per depth.
    pub k: Option<f64>,
}

impl Default for RenormTrainConfig {
    fn default() -> Self {
        RenormTrainConfig {
            epochs: 800,
            lr: 1e-2,
            patience: 60,
            seed: 0,
            k: None,
        }
    }
}

/// Fit the normalizer regressor on (meta, map) pairs. The last 20% of the
/// dataset is held out for early stopping; the best-validation parameters are
/// restored before returning.
pub fn train_renorm(
    data: &[(LumisectionMeta, Vec<f64>)],
    seg: &SegmentationMap,
    cfg: &RenormTrainConfig,
) -> Result<RenormModel> {
    if data.len() < 2 {
        return Err(Error::Training(
            "renorm training needs at least 2 lumisections".into(),
        ));
    }
    let n_depth = seg.geom.n_depth;
    let k = cfg
        .k
        .unwrap_or_else(|| seg.n_active() as f64 / n_depth as f64);
    let mut model = RenormModel::new(n_depth, k, cfg.seed);

    let inputs: Vec<[f64; 2]> = data
        .iter()
        .map(|(m, _)| [m.events, m.lumi])
        .collect();
    let targets: Vec<Vec<f64>> = data.iter().map(|(_, v)| depth_totals(v, seg)).collect();

    // standardization constants from the whole training input set
    for j in 0..2 {
        let mean: f64 = inputs.iter().map(|x| x[j]).sum::<f64>() / inputs.len() as f64;
        let var: f64 =
            inputs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / inputs.len() as f64;
        model.in_mean[j] = mean;
        model.in_std[j] = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
    }
    let distinct = inputs.iter().any(|x| x != &inputs[0]);
    model.degenerate = !distinct;

    for d in 0..n_depth {
        let mean: f64 = targets.iter().map(|t| t[d]).sum::<f64>() / targets.len() as f64;
        model.target_scale[d] = if mean.abs() > NORMALIZER_FLOOR { mean } else { 1.0 };
    }

    let n_val = (data.len() / 5).max(1).min(data.len() - 1);
    let n_train = data.len() - n_val;
    let build = |range: std::ops::Range<usize>, model: &RenormModel| {
        let rows = range.len();
        let mut xv = Vec::with_capacity(rows * 2);
        let mut yv = Vec::with_capacity(rows * n_depth);
        for i in range {
            let s = model.standardize(&data[i].0);
            xv.extend_from_slice(&s);
            for d in 0..n_depth {
                yv.push(targets[i][d] / model.target_scale[d]);
            }
        }
        (
            Tensor::from_vec(&[rows, 2], xv),
            Tensor::from_vec(&[rows, n_depth], yv),
        )
    };
    let (x_train, y_train) = build(0..n_train, &model);
    let (x_val, y_val) = build(n_train..data.len(), &model);

    let mut opt = Adam::new(cfg.lr);
    let mut best = (f64::INFINITY, model.params.snapshot());
    let mut since_best = 0usize;
    for _ in 0..cfg.epochs {
        let loss = mean(&square(&sub(&model.forward(&x_train), &y_train)));
        loss.backward();
        opt.step(&model.params);
        let val = mean(&square(&sub(&model.forward(&x_val), &y_val))).item();
        if val < best.0 {
            best = (val, model.params.snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params.load_snapshot(&best.1);
    Ok(model)
}

/// Renormalize against explicit per-depth normalizers: for active channels,
/// scaled value = K * v / gamma_bar[depth]; inactive channels stay 0.
pub fn renormalize_with(
    map: &DigiOccupancyMap,
    gamma_bar: &[f64],
    k: f64,
    seg: &SegmentationMap,
) -> Result<DigiOccupancyMap> {
    let geom = &seg.geom;
    assert_eq!(map.values.len(), geom.n_cells(), "renormalize: map size mismatch");
    assert_eq!(gamma_bar.len(), geom.n_depth, "renormalize: normalizer length mismatch");
    for (d, g) in gamma_bar.iter().enumerate() {
        if *g < NORMALIZER_FLOOR {
            return Err(Error::NormalizerFloor {
                depth: d + 1,
                value: *g,
            });
        }
    }
    let values = map
        .values
        .iter()
        .enumerate()
        .map(|(flat, v)| {
            if seg.is_active(flat) {
                k * v / gamma_bar[flat % geom.n_depth]
            } else {
                0.0
            }
        })
        .collect();
    Ok(DigiOccupancyMap {
        meta: map.meta.clone(),
        values,
    })
}

/// Renormalize one map using the trained regressor's normalizer prediction.
pub fn renormalize(
    map: &DigiOccupancyMap,
    model: &RenormModel,
    seg: &SegmentationMap,
) -> Result<DigiOccupancyMap> {
    renormalize_with(map, &model.predict(&map.meta), model.k, seg)
}
