//! The 24 joint-node pathways and the shared pose regressor.
//!
//! Each node owns unshared parameters:
//!
//! * motion encoder: `9 → d_in` linear + ReLU, then `n_mfe` LSTM layers of
//!   width `d_h`;
//! * coordinate encoder: a `24 × d_e` region embedding and `film_layers`
//!   fully connected layers, each emitting `2·d_h` values split into a gain
//!   and a shift;
//! * modulator: `film_layers` LSTM layers of width `d_h`, each fed
//!   `gain ⊙ z + shift`;
//! * five two-layer kinematic heads (velocity 3, position 3, local 6D 6,
//!   global 6D 6, root velocity 3) with hidden width `kr_hidden`.
//!
//! The pose regressor maps the `24·d_h` concatenated features through a
//! hidden layer of `pr_hidden` units to `24 × 6` global rotations.
//!
//! Parameter count, with `q = 6·n_freq + d_e`, `k = kr_hidden`,
//! `p = pr_hidden`, `L = film_layers`:
//!
//! ```text
//! lstm(i)  = 4·d_h·(i + d_h + 1)
//! node     = 10·d_in + lstm(d_in) + (n_mfe − 1)·lstm(d_h)
//!          + 24·d_e + 2·d_h·(q + 1) + (L − 1)·2·d_h·(2·d_h + 1)
//!          + L·lstm(d_h)
//!          + 5·k·(d_h + 1) + 21·(k + 1)
//! total    = 24·node + p·(24·d_h + 1) + 144·(p + 1)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{lstm_sequence, Graph, LstmCell, Tensor, Var};
use crate::body_model::{BodyModel, JOINT_COUNT};
use crate::error::{ensure, Error, Result};
use crate::math::Vec3;
use crate::vimu_synth::{encode_channels, ImuTrack, PlacementCoordinate, CHANNELS};

pub const POSE_WIDTH: usize = 6 * JOINT_COUNT;
pub const KR_OUTPUTS: [usize; 5] = [3, 3, 6, 6, 3];
pub const KR_NAMES: [&str; 5] = ["velocity", "position", "local", "global", "root_velocity"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub d_in: usize,
    pub d_h: usize,
    pub d_e: usize,
    pub n_freq: usize,
    pub n_mfe: usize,
    pub film_layers: usize,
    pub kr_hidden: usize,
    pub pr_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_in: 32,
            d_h: 64,
            d_e: 16,
            n_freq: 6,
            n_mfe: 1,
            film_layers: 2,
            kr_hidden: 64,
            pr_hidden: 128,
        }
    }
}

impl NetConfig {
    pub const KEYS: [&'static str; 8] = [
        "d_in",
        "d_h",
        "d_e",
        "n_freq",
        "n_mfe",
        "film_layers",
        "kr_hidden",
        "pr_hidden",
    ];

    /// Small sizes for tests and desk runs.
    pub fn tiny() -> Self {
        NetConfig {
            d_in: 8,
            d_h: 8,
            d_e: 4,
            n_freq: 2,
            n_mfe: 1,
            film_layers: 2,
            kr_hidden: 8,
            pr_hidden: 16,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: usize = value
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{value}'")))?;
        match key {
            "d_in" => self.d_in = v,
            "d_h" => self.d_h = v,
            "d_e" => self.d_e = v,
            "n_freq" => self.n_freq = v,
            "n_mfe" => self.n_mfe = v,
            "film_layers" => self.film_layers = v,
            "kr_hidden" => self.kr_hidden = v,
            "pr_hidden" => self.pr_hidden = v,
            _ => return Err(Error::Config(format!("unknown network key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in Self::KEYS.iter().zip(self.values()) {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        Ok(())
    }

    fn values(&self) -> [usize; 8] {
        [
            self.d_in,
            self.d_h,
            self.d_e,
            self.n_freq,
            self.n_mfe,
            self.film_layers,
            self.kr_hidden,
            self.pr_hidden,
        ]
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn sce_input_width(&self) -> usize {
        6 * self.n_freq + self.d_e
    }

    /// Closed-form parameter count; see the module docs.
    pub fn parameter_count(&self) -> usize {
        let (d_in, d_h, k, p, l) = (self.d_in, self.d_h, self.kr_hidden, self.pr_hidden, self.film_layers);
        let lstm = |i: usize| 4 * d_h * (i + d_h + 1);
        let node = 10 * d_in
            + lstm(d_in)
            + (self.n_mfe - 1) * lstm(d_h)
            + 24 * self.d_e
            + 2 * d_h * (self.sce_input_width() + 1)
            + (l - 1) * 2 * d_h * (2 * d_h + 1)
            + l * lstm(d_h)
            + 5 * k * (d_h + 1)
            + 21 * (k + 1);
        JOINT_COUNT * node + p * (JOINT_COUNT * d_h + 1) + POSE_WIDTH * (p + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_x: usize,
    pub w_h: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

/// Parameter indices for one joint node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeParams {
    pub mfe_in: Linear,
    pub mfe_lstm: Vec<LstmParams>,
    pub embedding: usize,
    pub sce_fc: Vec<Linear>,
    pub jnm: Vec<LstmParams>,
    pub krs: [Head; 5],
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Weight(usize),
    ReluWeight(usize),
    Zero,
    FilmBias,
    Embedding,
    Rotation6d,
}

/// All learnable tensors in a flat, named store plus their index layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub nodes: Vec<NodeParams>,
    pub pr: Head,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    init: &'a mut dyn FnMut(&[usize], Init) -> Tensor,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.tensors.push((self.init)(shape, init));
        self.tensors.len() - 1
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.w"), &[input, output], Init::Weight(input)),
            b: self.add(format!("{prefix}.b"), &[1, output], Init::Zero),
        }
    }

    /// Linear layer feeding a ReLU.
    fn relu_linear(&mut self, prefix: &str, input: usize, output: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.w"), &[input, output], Init::ReluWeight(input)),
            b: self.add(format!("{prefix}.b"), &[1, output], Init::Zero),
        }
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w_x: self.add(format!("{prefix}.w_x"), &[input, 4 * hidden], Init::Weight(hidden)),
            w_h: self.add(format!("{prefix}.w_h"), &[hidden, 4 * hidden], Init::Weight(hidden)),
            b: self.add(format!("{prefix}.b"), &[1, 4 * hidden], Init::Zero),
        }
    }

    fn head(&mut self, prefix: &str, input: usize, hidden: usize, output: usize) -> Head {
        Head {
            hidden: self.relu_linear(&format!("{prefix}.hidden"), input, hidden),
            out: self.linear(&format!("{prefix}.out"), hidden, output),
        }
    }

    /// Head that starts out predicting identity rotations in 6D: zero output
    /// weights and an identity output bias.
    fn rotation_head(&mut self, prefix: &str, input: usize, hidden: usize, output: usize) -> Head {
        let width = hidden;
        let hidden = self.relu_linear(&format!("{prefix}.hidden"), input, width);
        let out = Linear {
            w: self.add(format!("{prefix}.out.w"), &[width, output], Init::Zero),
            b: self.add(format!("{prefix}.out.b"), &[1, output], Init::Rotation6d),
        };
        Head { hidden, out }
    }
}

impl ModelParams {
    fn build(config: &NetConfig, init: &mut dyn FnMut(&[usize], Init) -> Tensor) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            init,
        };
        let mut nodes = Vec::with_capacity(JOINT_COUNT);
        for j in 0..JOINT_COUNT {
            let p = format!("node{j:02}");
            let mfe_in = b.relu_linear(&format!("{p}.mfe.in"), CHANNELS, c.d_in);
            let mfe_lstm = (0..c.n_mfe)
                .map(|l| b.lstm(&format!("{p}.mfe.lstm{l}"), if l == 0 { c.d_in } else { c.d_h }, c.d_h))
                .collect();
            let embedding = b.add(format!("{p}.sce.embedding"), &[JOINT_COUNT, c.d_e], Init::Embedding);
            let sce_fc = (0..c.film_layers)
                .map(|l| {
                    let input = if l == 0 { c.sce_input_width() } else { 2 * c.d_h };
                    let w = b.add(format!("{p}.sce.fc{l}.w"), &[input, 2 * c.d_h], Init::Weight(input));
                    let bias = b.add(format!("{p}.sce.fc{l}.b"), &[1, 2 * c.d_h], Init::FilmBias);
                    Linear { w, b: bias }
                })
                .collect();
            let jnm = (0..c.film_layers)
                .map(|l| b.lstm(&format!("{p}.jnm.lstm{l}"), c.d_h, c.d_h))
                .collect();
            let krs = std::array::from_fn(|k| {
                let name = format!("{p}.kr.{}", KR_NAMES[k]);
                if KR_OUTPUTS[k] == 6 {
                    b.rotation_head(&name, c.d_h, c.kr_hidden, 6)
                } else {
                    b.head(&name, c.d_h, c.kr_hidden, KR_OUTPUTS[k])
                }
            });
            nodes.push(NodeParams {
                mfe_in,
                mfe_lstm,
                embedding,
                sce_fc,
                jnm,
                krs,
            });
        }
        let pr = b.rotation_head("pr", JOINT_COUNT * c.d_h, c.pr_hidden, POSE_WIDTH);
        Ok(ModelParams {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            nodes,
            pr,
        })
    }

    /// Random initialization: weights uniform in `±1/√fan_in` (`±√(6/fan_in)`
    /// for layers feeding a ReLU), biases zero
    /// except the gain half of each coordinate-encoder layer, which starts
    /// at one. Orientation heads start at the identity with zero output
    /// weights.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: &[usize], kind: Init| {
            let n: usize = shape.iter().product();
            let data = match kind {
                Init::ReluWeight(fan_in) => {
                    let a = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Weight(fan_in) => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Embedding => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                Init::Zero => vec![0.0; n],
                Init::FilmBias => (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect(),
                Init::Rotation6d => (0..n).map(|i| if i % 6 == 0 || i % 6 == 4 { 1.0 } else { 0.0 }).collect(),
            };
            Tensor::new(shape.to_vec(), data).expect("shape product")
        };
        Self::build(config, &mut init)
    }

    pub fn zeros(config: &NetConfig) -> Result<Self> {
        Self::build(config, &mut |shape, _| Tensor::zeros(shape))
    }

    /// Rebuilds the layout for `config` and fills it from named tensors.
    pub fn from_named(config: &NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        ensure!(
            named.len() == model.names.len(),
            "expected {} parameter tensors, found {}",
            model.names.len(),
            named.len()
        );
        for (i, (name, t)) in named.into_iter().enumerate() {
            ensure!(name == model.names[i], "parameter {i}: expected '{}', found '{name}'", model.names[i]);
            ensure!(
                t.shape() == model.tensors[i].shape(),
                "parameter '{name}': expected shape {:?}, found {:?}",
                model.tensors[i].shape(),
                t.shape()
            );
            model.tensors[i] = t;
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// True for parameters of the per-node kinematic heads.
    pub fn is_kinematic_head(&self, index: usize) -> bool {
        self.names[index].contains(".kr.")
    }

    /// Parameter indices owned by node `j`.
    pub fn node_indices(&self, j: usize) -> Vec<usize> {
        let prefix = format!("node{j:02}.");
        (0..self.names.len()).filter(|&i| self.names[i].starts_with(&prefix)).collect()
    }
}

/// A graph with model parameters bound lazily as leaves.
pub struct Session<'m> {
    pub g: Graph,
    model: &'m ModelParams,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'m> Session<'m> {
    /// `trainable` controls whether bound parameters require gradients.
    pub fn new(model: &'m ModelParams, trainable: bool) -> Self {
        Session {
            g: Graph::new(),
            model,
            bound: vec![None; model.tensors.len()],
            trainable,
        }
    }

    pub fn model(&self) -> &'m ModelParams {
        self.model
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.bound[index] {
            return v;
        }
        let v = self.g.leaf(self.model.tensors[index].clone(), self.trainable);
        self.bound[index] = Some(v);
        v
    }

    /// Binds parameter `index` to an existing variable of `self.g`.
    pub fn bind(&mut self, index: usize, var: Var) {
        self.bound[index] = Some(var);
    }

    /// Gradients of every bound parameter after `backward`, zero for the rest.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.model
            .tensors
            .iter()
            .zip(&self.bound)
            .map(|(t, b)| {
                b.and_then(|v| self.g.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    /// Adds this session's parameter gradients into `acc`.
    pub fn accumulate_grads(&self, acc: &mut [Tensor]) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(g) = b.and_then(|v| self.g.grad(v)) {
                acc[i].data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x);
            }
        }
    }

    pub fn linear(&mut self, lin: Linear, x: Var) -> Result<Var> {
        let (w, b) = (self.param(lin.w), self.param(lin.b));
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    fn head(&mut self, head: Head, x: Var) -> Result<Var> {
        let h = self.linear(head.hidden, x)?;
        let h = self.g.relu(h);
        self.linear(head.out, h)
    }

    fn lstm(&mut self, p: LstmParams, x: Var) -> Result<Var> {
        let cell = LstmCell {
            w_x: self.param(p.w_x),
            w_h: self.param(p.w_h),
            b: self.param(p.b),
        };
        lstm_sequence(&mut self.g, &cell, x)
    }
}

/// `(r − r_j) / (r_max − r_min)` component-wise, `r_j` the T-pose joint.
pub fn standardize_coordinate(r: Vec3, j: usize, body: &BodyModel) -> Vec3 {
    let rel = r - body.tpose_joint_pos[j];
    let span = body.r_max - body.r_min;
    Vec3::new(rel.x() / span.x(), rel.y() / span.y(), rel.z() / span.z())
}

pub fn positional_encode(r: Vec3, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * n_freq);
    for p in 0..n_freq {
        let w = 2.0 * std::f64::consts::PI * (1u64 << p) as f64;
        out.extend(r.0.iter().map(|c| (w * c).sin()));
        out.extend(r.0.iter().map(|c| (w * c).cos()));
    }
    out
}

/// Per-layer `(gain, shift)` rows, each `1 × d_h`.
#[derive(Debug, Clone)]
pub struct PlacementCodes {
    pub layers: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct KinematicPreds {
    pub velocity: Var,
    pub position: Var,
    pub local_orientation: Var,
    pub global_orientation: Var,
    pub root_velocity: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NodeOutput {
    pub z: Var,
    pub preds: KinematicPreds,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Feed the coordinate encoder the origin instead of the standardized
    /// coordinate (the region embedding is kept).
    pub zero_coordinate: bool,
}

/// Coordinate-encoder codes from a standardized coordinate and region.
pub fn sce_forward_standardized(s: &mut Session, j: usize, r_st: Vec3, region: usize) -> Result<PlacementCodes> {
    ensure!(region < JOINT_COUNT, "region {region} out of range 0..{JOINT_COUNT}");
    let node = &s.model().nodes[j];
    let cfg = &s.model().config;
    let pe = s.g.constant(Tensor::row(positional_encode(r_st, cfg.n_freq)));
    let table = s.param(node.embedding);
    let emb = s.g.embedding_lookup(table, region)?;
    let mut q = s.g.concat(&[pe, emb], 1)?;
    let d_h = cfg.d_h;
    let mut layers = Vec::with_capacity(node.sce_fc.len());
    for (l, fc) in node.sce_fc.iter().enumerate() {
        if l > 0 {
            q = s.g.relu(q);
        }
        q = s.linear(*fc, q)?;
        let gain = s.g.slice(q, 1, 0, d_h)?;
        let shift = s.g.slice(q, 1, d_h, d_h)?;
        layers.push((gain, shift));
    }
    Ok(PlacementCodes { layers })
}

pub fn sce_forward(s: &mut Session, j: usize, placement: &PlacementCoordinate, body: &BodyModel) -> Result<PlacementCodes> {
    let r_st = standardize_coordinate(placement.r, j, body);
    sce_forward_standardized(s, j, r_st, placement.region)
}

/// Motion encoder over `T × 9` channels.
pub fn mfe_forward(s: &mut Session, j: usize, channels: Var) -> Result<Var> {
    let shape = s.g.shape(channels).to_vec();
    ensure!(
        shape.len() == 2 && shape[1] == CHANNELS,
        "mfe_forward: expected T × {CHANNELS} channels, got {shape:?}"
    );
    let node = &s.model().nodes[j];
    let mut h = s.linear(node.mfe_in, channels)?;
    h = s.g.relu(h);
    for p in &node.mfe_lstm {
        h = s.lstm(*p, h)?;
    }
    Ok(h)
}

pub fn jnm_forward(s: &mut Session, j: usize, h: Var, codes: &PlacementCodes) -> Result<Var> {
    let node = &s.model().nodes[j];
    ensure!(
        codes.layers.len() == node.jnm.len(),
        "jnm_forward: {} code layers for depth {}",
        codes.layers.len(),
        node.jnm.len()
    );
    let mut z = h;
    for (p, &(gain, shift)) in node.jnm.iter().zip(&codes.layers) {
        let scaled = s.g.mul_row(z, gain)?;
        let modulated = s.g.add_row(scaled, shift)?;
        z = s.lstm(*p, modulated)?;
    }
    Ok(z)
}

pub fn kr_forward(s: &mut Session, j: usize, z: Var) -> Result<KinematicPreds> {
    let krs = s.model().nodes[j].krs;
    Ok(KinematicPreds {
        velocity: s.head(krs[0], z)?,
        position: s.head(krs[1], z)?,
        local_orientation: s.head(krs[2], z)?,
        global_orientation: s.head(krs[3], z)?,
        root_velocity: s.head(krs[4], z)?,
    })
}

/// Pose regressor over the 24 node features in joint order, `T × 144`.
pub fn pr_forward(s: &mut Session, features: &[Var]) -> Result<Var> {
    ensure!(
        features.len() == JOINT_COUNT,
        "pr_forward: expected {JOINT_COUNT} features, got {}",
        features.len()
    );
    let x = s.g.concat(features, 1)?;
    let pr = s.model().pr;
    s.head(pr, x)
}

pub fn channels_tensor(track: &ImuTrack) -> Result<Tensor> {
    Tensor::matrix(track.len(), CHANNELS, encode_channels(track))
}

pub fn node_forward_with(
    s: &mut Session,
    j: usize,
    track: &ImuTrack,
    body: &BodyModel,
    opts: ForwardOptions,
) -> Result<NodeOutput> {
    ensure!(j < JOINT_COUNT, "joint {j} out of range");
    let x = s.g.constant(channels_tensor(track)?);
    let h = mfe_forward(s, j, x)?;
    let r_st = if opts.zero_coordinate {
        Vec3::ZERO
    } else {
        standardize_coordinate(track.placement.r, j, body)
    };
    let codes = sce_forward_standardized(s, j, r_st, track.placement.region)?;
    let z = jnm_forward(s, j, h, &codes)?;
    let preds = kr_forward(s, j, z)?;
    Ok(NodeOutput { z, preds })
}

pub fn node_forward(s: &mut Session, j: usize, track: &ImuTrack, body: &BodyModel) -> Result<NodeOutput> {
    node_forward_with(s, j, track, body, ForwardOptions::default())
}

/// Detached node outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeValues {
    pub z: Tensor,
    pub velocity: Tensor,
    pub position: Tensor,
    pub local_orientation: Tensor,
    pub global_orientation: Tensor,
    pub root_velocity: Tensor,
}

impl NodeValues {
    fn read(s: &Session, out: &NodeOutput) -> Self {
        let v = |x: Var| s.g.value(x).clone();
        NodeValues {
            z: v(out.z),
            velocity: v(out.preds.velocity),
            position: v(out.preds.position),
            local_orientation: v(out.preds.local_orientation),
            global_orientation: v(out.preds.global_orientation),
            root_velocity: v(out.preds.root_velocity),
        }
    }
}

/// Gradient-free node evaluation.
pub fn evaluate_node(model: &ModelParams, j: usize, track: &ImuTrack, body: &BodyModel, opts: ForwardOptions) -> Result<NodeValues> {
    let mut s = Session::new(model, false);
    let out = node_forward_with(&mut s, j, track, body, opts)?;
    Ok(NodeValues::read(&s, &out))
}

/// Gradient-free pose regressor on precomputed features.
pub fn evaluate_pose(model: &ModelParams, features: &[Tensor]) -> Result<Tensor> {
    let mut s = Session::new(model, false);
    let vars: Vec<Var> = features.iter().map(|f| s.g.constant(f.clone())).collect();
    let out = pr_forward(&mut s, &vars)?;
    Ok(s.g.value(out).clone())
}
