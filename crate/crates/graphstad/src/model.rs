//! The spatio-temporal autoencoder: CNN + GNN spatial encoders per time step,
//! LSTM temporal context, variational bottleneck, and a mirrored
//! unpool/deconv decoder. Ablation variants toggle the GNN, RNN, and VAE
//! parts.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{build_graph, ChannelGraph, GeometryConfig, LumisectionMeta, SegmentationMap};
use crate::tensor::{
    add, add_scalar, batchnorm, concat_last, conv3d, deconv3d, fc, gcn_layer,
    global_attention_pool, gru_layer, index0, lstm_layer, maxpool3d, maxpool3d_partition,
    maxunpool3d, mul, pooled_extent, relu, reshape, softplus, stack0, BatchNormMode, GruParams,
    LstmParams, ParamSet, PoolIndices, RunningStats, Scalar, Tensor,
};

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnnKind {
    Lstm,
    Gru,
    Bilstm,
}

/// Architecture hyperparameters plus ablation switches.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub cnn_features: Vec<usize>,
    pub gnn_features: Vec<usize>,
    pub lstm_sizes: Vec<usize>,
    pub n_z: usize,
    pub t: usize,
    pub use_gnn: bool,
    pub use_rnn: bool,
    pub use_vae: bool,
    pub rnn_kind: RnnKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            cnn_features: vec![16, 32, 64, 128],
            gnn_features: vec![32, 64, 128, 128],
            lstm_sizes: vec![64, 32],
            n_z: 32,
            t: 5,
            use_gnn: true,
            use_rnn: true,
            use_vae: true,
            rnn_kind: RnnKind::Lstm,
        }
    }
}

impl ArchConfig {
    /// Named pipeline variants used by the CLI and the ablation sweep.
    pub fn variant(name: &str) -> Result<ArchConfig> {
        ArchConfig::default().with_variant(name)
    }

    /// Apply a named variant's switches on top of this configuration.
    pub fn with_variant(self, name: &str) -> Result<ArchConfig> {
        let mut cfg = self;
        match name {
            "graphstad" => {}
            "no-gnn" => cfg.use_gnn = false,
            "nontemporal" => {
                cfg.use_gnn = false;
                cfg.use_rnn = false;
                cfg.t = 1;
            }
            "gru" => cfg.rnn_kind = RnnKind::Gru,
            "bilstm" => cfg.rnn_kind = RnnKind::Bilstm,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (expected graphstad|no-gnn|nontemporal|gru|bilstm)"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn l_c(&self) -> usize {
        self.cnn_features.len()
    }
}

/// One model input: T consecutive scaled maps of one run.
#[derive(Debug, Clone)]
pub struct STWindow {
    /// Flat `[n_ieta * n_iphi * n_depth]` scaled values per step.
    pub steps: Vec<Vec<f64>>,
    pub metas: Vec<LumisectionMeta>,
}

impl STWindow {
    pub fn steps_as<S: Scalar>(&self) -> Vec<Vec<S>> {
        self.steps
            .iter()
            .map(|s| s.iter().map(|v| S::c(*v)).collect())
            .collect()
    }
}

/// Spatial extents before/after each pooling block, plus the final
/// extent-alignment step where the halving trajectory overshoots the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialPlan {
    /// extents[l] before block l; extents[l_c] after the last halving pool.
    pub extents: Vec<[usize; 3]>,
    /// `floor(input_extent / 2^l_c)`, clamped to 1.
    pub target: [usize; 3],
    pub needs_alignment: bool,
}

impl SpatialPlan {
    pub fn compute(geom: &GeometryConfig, l_c: usize) -> SpatialPlan {
        let mut e = [geom.n_ieta, geom.n_iphi, geom.n_depth];
        let target = e.map(|x| (x >> l_c).max(1));
        let mut extents = vec![e];
        for _ in 0..l_c {
            e = e.map(pooled_extent);
            extents.push(e);
        }
        SpatialPlan {
            extents,
            target,
            needs_alignment: e != target,
        }
    }

    pub fn bottleneck_cells(&self) -> usize {
        self.target.iter().product()
    }
}

/// Reparameterized latent draw.
pub struct LatentSample<S: Scalar> {
    pub mu: Tensor<S>,
    pub sigma: Tensor<S>,
    pub z: Tensor<S>,
}

pub struct ForwardOut<S: Scalar> {
    /// `[T, 1, n_ieta, n_iphi, n_depth]` reconstruction.
    pub recon: Tensor<S>,
    pub latent: Option<LatentSample<S>>,
}

pub struct Autoencoder<S: Scalar> {
    pub arch: ArchConfig,
    pub geom: GeometryConfig,
    pub params: ParamSet<S>,
    pub plan: SpatialPlan,
    graph: Option<ChannelGraph>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    arch: ArchConfig,
    geom: GeometryConfig,
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<S> {
    (0..n).map(|_| S::c(rng.random_range(-bound..bound))).collect()
}

fn init_matrix<S: Scalar>(
    params: &mut ParamSet<S>,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    params.insert(
        format!("{name}.weight"),
        Tensor::param(&[rows, cols], uniform(rng, rows * cols, bound)),
    );
    params.insert(format!("{name}.bias"), Tensor::param(&[cols], vec![S::zero(); cols]));
}

fn init_conv<S: Scalar>(
    params: &mut ParamSet<S>,
    name: &str,
    shape: [usize; 2], // [out, in] for conv, [in, out] for deconv
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    let fan = (shape[0] + shape[1]) * k * k * k;
    let bound = (6.0 / fan as f64).sqrt();
    let n = shape[0] * shape[1] * k * k * k;
    params.insert(
        format!("{name}.weight"),
        Tensor::param(&[shape[0], shape[1], k, k, k], uniform(rng, n, bound)),
    );
}

fn init_bn<S: Scalar>(params: &mut ParamSet<S>, name: &str, c: usize) {
    params.insert(format!("{name}.gamma"), Tensor::param(&[c], vec![S::one(); c]));
    params.insert(format!("{name}.beta"), Tensor::param(&[c], vec![S::zero(); c]));
    params.insert(format!("{name}.running_mean"), Tensor::from_vec(&[c], vec![S::zero(); c]));
    params.insert(format!("{name}.running_var"), Tensor::from_vec(&[c], vec![S::one(); c]));
}

fn init_lstm<S: Scalar>(
    params: &mut ParamSet<S>,
    name: &str,
    feat: usize,
    hidden: usize,
    gates: usize,
    rng: &mut ChaCha8Rng,
) {
    let bound = 1.0 / (hidden as f64).sqrt();
    params.insert(
        format!("{name}.ih.weight"),
        Tensor::param(&[feat, gates * hidden], uniform(rng, feat * gates * hidden, bound)),
    );
    params.insert(
        format!("{name}.hh.weight"),
        Tensor::param(&[hidden, gates * hidden], uniform(rng, hidden * gates * hidden, bound)),
    );
    params.insert(
        format!("{name}.bias"),
        Tensor::param(&[gates * hidden], vec![S::zero(); gates * hidden]),
    );
    if gates == 3 {
        // GRU keeps separate hidden-side biases
        params.insert(
            format!("{name}.bias_hh"),
            Tensor::param(&[gates * hidden], vec![S::zero(); gates * hidden]),
        );
    }
}

impl<S: Scalar> Autoencoder<S> {
    pub fn new(arch: ArchConfig, geom: GeometryConfig, seed: u64) -> Result<Self> {
        assert!(!arch.cnn_features.is_empty(), "cnn_features must be nonempty");
        if arch.use_rnn {
            assert_eq!(arch.lstm_sizes.len(), 2, "two recurrent layers expected");
        } else {
            assert_eq!(arch.t, 1, "nontemporal variant consumes single maps");
        }
        if !arch.use_vae && arch.use_rnn {
            assert_eq!(
                *arch.lstm_sizes.last().unwrap(),
                arch.n_z,
                "without the VAE, the last recurrent size must equal n_z"
            );
        }
        let plan = SpatialPlan::compute(&geom, arch.l_c());
        let graph = if arch.use_gnn {
            let seg = SegmentationMap::synthetic(&geom);
            Some(build_graph(&seg)?)
        } else {
            None
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6d6f64656c));
        let mut params = ParamSet::new();
        let feats = &arch.cnn_features;
        for l in 0..arch.l_c() {
            let ci = if l == 0 { 1 } else { feats[l - 1] };
            init_conv(&mut params, &format!("enc{l}.conv"), [feats[l], ci], 3, &mut rng);
            params.insert(
                format!("enc{l}.conv.bias"),
                Tensor::param(&[feats[l]], vec![S::zero(); feats[l]]),
            );
            init_bn(&mut params, &format!("enc{l}.bn"), feats[l]);
        }
        if arch.use_gnn {
            for (l, width) in arch.gnn_features.iter().enumerate() {
                let fi = if l == 0 { 1 } else { arch.gnn_features[l - 1] };
                init_matrix(&mut params, &format!("gnn{l}"), fi, *width, &mut rng);
            }
            let last = *arch.gnn_features.last().unwrap();
            init_matrix(&mut params, "gnn.pool", last, 1, &mut rng);
        }

        let feat_c = plan.bottleneck_cells() * feats[arch.l_c() - 1];
        let feat = feat_c + if arch.use_gnn { *arch.gnn_features.last().unwrap() } else { 0 };
        let gates = match arch.rnn_kind {
            RnnKind::Gru => 3,
            _ => 4,
        };
        let head_in = if arch.use_rnn {
            let sizes = &arch.lstm_sizes;
            init_lstm(&mut params, "enc.rnn0", feat, sizes[0], gates, &mut rng);
            init_lstm(&mut params, "enc.rnn1", sizes[0], sizes[1], gates, &mut rng);
            if arch.rnn_kind == RnnKind::Bilstm {
                init_lstm(&mut params, "enc.rnn0.rev", feat, sizes[0], gates, &mut rng);
                init_lstm(&mut params, "enc.rnn1.rev", sizes[0], sizes[1], gates, &mut rng);
                init_matrix(&mut params, "enc.rnn.proj", 2 * sizes[1], sizes[1], &mut rng);
            }
            sizes[1]
        } else {
            init_matrix(&mut params, "enc.fc", feat, arch.n_z, &mut rng);
            arch.n_z
        };
        if arch.use_vae {
            init_matrix(&mut params, "vae.mu", head_in, arch.n_z, &mut rng);
            init_matrix(&mut params, "vae.sigma", head_in, arch.n_z, &mut rng);
        }

        if arch.use_rnn {
            let dec0 = *arch.lstm_sizes.last().unwrap();
            let dec1 = arch.lstm_sizes[0];
            init_lstm(&mut params, "dec.rnn0", arch.n_z, dec0, gates, &mut rng);
            init_lstm(&mut params, "dec.rnn1", dec0, dec1, gates, &mut rng);
            init_matrix(&mut params, "dec.proj", dec1, feat_c, &mut rng);
        } else {
            init_matrix(&mut params, "dec.proj", arch.n_z, feat_c, &mut rng);
        }
        for l in (0..arch.l_c()).rev() {
            let co = if l == 0 { feats[0] } else { feats[l - 1] };
            init_conv(&mut params, &format!("dec{l}.deconv"), [feats[l], co], 3, &mut rng);
            params.insert(format!("dec{l}.deconv.bias"), Tensor::param(&[co], vec![S::zero(); co]));
            init_bn(&mut params, &format!("dec{l}.bn"), co);
        }
        init_conv(&mut params, "dec.out", [feats[0], 1], 1, &mut rng);
        params.insert("dec.out.bias", Tensor::param(&[1], vec![S::zero()]));

        Ok(Autoencoder {
            arch,
            geom,
            params,
            plan,
            graph,
        })
    }

    pub fn graph(&self) -> Option<&ChannelGraph> {
        self.graph.as_ref()
    }

    /// CNN feature length per step (2048 at the default geometry).
    pub fn feat_cnn(&self) -> usize {
        self.plan.bottleneck_cells() * *self.arch.cnn_features.last().unwrap()
    }

    fn running(&self, name: &str) -> RunningStats<S> {
        RunningStats {
            mean: self.params.get(&format!("{name}.running_mean")).clone(),
            var: self.params.get(&format!("{name}.running_var")).clone(),
        }
    }

    fn bn(&self, name: &str, x: &Tensor<S>, mode: BatchNormMode) -> Tensor<S> {
        batchnorm(
            x,
            self.params.get(&format!("{name}.gamma")),
            self.params.get(&format!("{name}.beta")),
            &self.running(name),
            mode,
            S::c(1e-5),
            S::c(0.1),
        )
    }

    /// Spatial CNN encoder over a `[B, 1, n_ieta, n_iphi, n_depth]` batch
    /// (the window's steps ride in the batch axis). Returns flattened
    /// features `[B, feat_cnn]` and the pooling indices per block.
    pub fn encode_cnn(&self, x: &Tensor<S>, mode: BatchNormMode) -> (Tensor<S>, Vec<PoolIndices>) {
        let b = x.shape()[0];
        assert_eq!(
            &x.shape()[1..],
            &[1, self.geom.n_ieta, self.geom.n_iphi, self.geom.n_depth],
            "encode_cnn: input does not match geometry"
        );
        let mut h = x.clone();
        let mut psi = Vec::with_capacity(self.arch.l_c() + 1);
        for l in 0..self.arch.l_c() {
            let w = self.params.get(&format!("enc{l}.conv.weight"));
            let bias = self.params.get(&format!("enc{l}.conv.bias"));
            h = relu(&self.bn(&format!("enc{l}.bn"), &conv3d(&h, w, bias, 1), mode));
            let (pooled, idx) = maxpool3d(&h);
            psi.push(idx);
            h = pooled;
        }
        if self.plan.needs_alignment {
            let (pooled, idx) = maxpool3d_partition(&h, self.plan.target);
            psi.push(idx);
            h = pooled;
        }
        (reshape(&h, &[b, self.feat_cnn()]), psi)
    }

    /// Graph encoder for one step's flat map values.
    pub fn encode_gnn(&self, values: &[S]) -> Tensor<S> {
        let graph = self.graph.as_ref().expect("encode_gnn: variant has no graph");
        let mut h = graph.map_to_node_features(values, self.geom.n_cells());
        for l in 0..self.arch.gnn_features.len() {
            let w = self.params.get(&format!("gnn{l}.weight"));
            let b = self.params.get(&format!("gnn{l}.bias"));
            h = relu(&gcn_layer(&h, &graph.prop, w, b));
        }
        let pooled = global_attention_pool(
            &h,
            self.params.get("gnn.pool.weight"),
            self.params.get("gnn.pool.bias"),
        );
        reshape(&pooled, &[1, *self.arch.gnn_features.last().unwrap()])
    }

    fn lstm_params(&self, name: &str) -> LstmParams<S> {
        LstmParams {
            w_ih: self.params.get(&format!("{name}.ih.weight")).clone(),
            w_hh: self.params.get(&format!("{name}.hh.weight")).clone(),
            b: self.params.get(&format!("{name}.bias")).clone(),
        }
    }

    fn gru_params(&self, name: &str) -> GruParams<S> {
        GruParams {
            w_ih: self.params.get(&format!("{name}.ih.weight")).clone(),
            w_hh: self.params.get(&format!("{name}.hh.weight")).clone(),
            b_ih: self.params.get(&format!("{name}.bias")).clone(),
            b_hh: self.params.get(&format!("{name}.bias_hh")).clone(),
        }
    }

    fn rnn_stack(&self, seq: &Tensor<S>, prefix: &str) -> Tensor<S> {
        match self.arch.rnn_kind {
            RnnKind::Gru => {
                let h = gru_layer(seq, &self.gru_params(&format!("{prefix}0")));
                gru_layer(&h, &self.gru_params(&format!("{prefix}1")))
            }
            _ => {
                let h = lstm_layer(seq, &self.lstm_params(&format!("{prefix}0")));
                lstm_layer(&h, &self.lstm_params(&format!("{prefix}1")))
            }
        }
    }

    fn reverse_time(seq: &Tensor<S>) -> Tensor<S> {
        let t = seq.shape()[0];
        let parts: Vec<Tensor<S>> = (0..t).rev().map(|i| index0(seq, i)).collect();
        stack0(&parts)
    }

    /// Temporal summary of the per-step features `[T, 1, F]`.
    fn temporal_head(&self, seq: &Tensor<S>) -> Tensor<S> {
        let t = seq.shape()[0];
        if self.arch.rnn_kind == RnnKind::Bilstm {
            let fwd = self.rnn_stack(seq, "enc.rnn");
            let bwd = {
                let rev = Self::reverse_time(seq);
                let h = lstm_layer(&rev, &self.lstm_params("enc.rnn0.rev"));
                lstm_layer(&h, &self.lstm_params("enc.rnn1.rev"))
            };
            let both = concat_last(&index0(&fwd, t - 1), &index0(&bwd, t - 1));
            fc(
                &both,
                self.params.get("enc.rnn.proj.weight"),
                self.params.get("enc.rnn.proj.bias"),
            )
        } else {
            index0(&self.rnn_stack(seq, "enc.rnn"), t - 1)
        }
    }

    /// Encode a window into its latent code. `eps` supplies the
    /// reparameterization noise `[1, n_z]`; `None` uses the mean (z = mu).
    pub fn encode(
        &self,
        steps: &[Vec<S>],
        mode: BatchNormMode,
        eps: Option<&Tensor<S>>,
    ) -> (Tensor<S>, Option<LatentSample<S>>, Vec<PoolIndices>) {
        let t = steps.len();
        assert_eq!(t, self.arch.t, "encode: window length mismatch");
        let n = self.geom.n_cells();
        let mut flat = Vec::with_capacity(t * n);
        for s in steps {
            assert_eq!(s.len(), n, "encode: step does not match geometry");
            flat.extend_from_slice(s);
        }
        let x = Tensor::from_vec(
            &[t, 1, self.geom.n_ieta, self.geom.n_iphi, self.geom.n_depth],
            flat,
        );
        let (y_c, psi) = self.encode_cnn(&x, mode);
        let y = if self.arch.use_gnn {
            let gs: Vec<Tensor<S>> = steps.iter().map(|s| self.encode_gnn(s)).collect();
            let y_g = reshape(&stack0(&gs), &[t, *self.arch.gnn_features.last().unwrap()]);
            concat_last(&y_c, &y_g)
        } else {
            y_c
        };
        let f = y.shape()[1];

        let h = if self.arch.use_rnn {
            self.temporal_head(&reshape(&y, &[t, 1, f]))
        } else {
            relu(&fc(
                &y,
                self.params.get("enc.fc.weight"),
                self.params.get("enc.fc.bias"),
            ))
        };

        if self.arch.use_vae {
            let mu = fc(&h, self.params.get("vae.mu.weight"), self.params.get("vae.mu.bias"));
            let sigma = add_scalar(
                &softplus(&fc(
                    &h,
                    self.params.get("vae.sigma.weight"),
                    self.params.get("vae.sigma.bias"),
                )),
                S::c(SIGMA_FLOOR),
            );
            let z = match eps {
                Some(e) => add(&mu, &mul(&sigma, e)),
                None => mu.clone(),
            };
            (z.clone(), Some(LatentSample { mu, sigma, z }), psi)
        } else {
            (h, None, psi)
        }
    }

    /// Decode a latent code back to a `[T, 1, ...]` reconstruction using the
    /// encoder's pooling indices.
    pub fn decode(&self, z: &Tensor<S>, psi: &[PoolIndices], mode: BatchNormMode) -> Tensor<S> {
        let t = self.arch.t;
        let expected = self.arch.l_c() + usize::from(self.plan.needs_alignment);
        assert_eq!(psi.len(), expected, "decode: pooling index arity mismatch");
        let feats = &self.arch.cnn_features;
        let c_last = *feats.last().unwrap();

        let h = if self.arch.use_rnn {
            let seq = stack0(&vec![z.clone(); t]);
            let out = self.rnn_stack(&seq, "dec.rnn");
            reshape(&out, &[t, self.arch.lstm_sizes[0]])
        } else {
            z.clone()
        };
        let proj = fc(&h, self.params.get("dec.proj.weight"), self.params.get("dec.proj.bias"));
        let [t1, t2, t3] = self.plan.target;
        let mut x = reshape(&proj, &[t, c_last, t1, t2, t3]);
        let mut next = psi.len();
        if self.plan.needs_alignment {
            next -= 1;
            x = maxunpool3d(&x, &psi[next]);
        }
        for l in (0..self.arch.l_c()).rev() {
            next -= 1;
            x = maxunpool3d(&x, &psi[next]);
            let w = self.params.get(&format!("dec{l}.deconv.weight"));
            let b = self.params.get(&format!("dec{l}.deconv.bias"));
            x = relu(&self.bn(&format!("dec{l}.bn"), &deconv3d(&x, w, b, 1), mode));
        }
        relu(&deconv3d(
            &x,
            self.params.get("dec.out.weight"),
            self.params.get("dec.out.bias"),
            0,
        ))
    }

    pub fn forward(
        &self,
        steps: &[Vec<S>],
        mode: BatchNormMode,
        eps: Option<&Tensor<S>>,
    ) -> ForwardOut<S> {
        let (z, latent, psi) = self.encode(steps, mode, eps);
        ForwardOut {
            recon: self.decode(&z, &psi, mode),
            latent,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_params(dir, &self.params)?;
        let meta = ModelMeta {
            arch: self.arch.clone(),
            geom: self.geom.clone(),
        };
        let text = toml::to_string(&meta)
            .map_err(|e| Error::Checkpoint(format!("model metadata serialization failed: {e}")))?;
        let path = dir.join("model.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Autoencoder<S>> {
        let path = dir.join("model.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelMeta = toml::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        let fresh = Autoencoder::new(meta.arch, meta.geom, 0)?;
        let params = checkpoint::load_params(dir)?;
        for (name, t) in fresh.params.iter() {
            if !params.contains(name) {
                return Err(Error::Checkpoint(format!("missing model tensor `{name}`")));
            }
            if params.get(name).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("model tensor `{name}` has wrong shape")));
            }
        }
        Ok(Autoencoder { params, ..fresh })
    }
}

/// z = mu + sigma .* eps.
pub fn reparameterize<S: Scalar>(mu: &Tensor<S>, sigma: &Tensor<S>, eps: &Tensor<S>) -> Tensor<S> {
    add(mu, &mul(sigma, eps))
}

/// Standard-normal noise tensor for the reparameterization, Box-Muller from
/// the given stream.
pub fn sample_eps<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        data.push(S::c(r * th.cos()));
        if data.len() < n {
            data.push(S::c(r * th.sin()));
        }
    }
    Tensor::from_vec(shape, data)
}
