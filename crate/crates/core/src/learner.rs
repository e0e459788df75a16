//! Models, gradients and the per-round federated pipeline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{round_report, BoundParams, RoundBoundReport};
use crate::channel::{aggregate_analog, draw_channel_gains, post_process, SchedulingDecision, WorkerProfile};
use crate::cs_codec::{
    compress_1bit, gen_measurement_matrix, reconstruct_sparse, top_k_sparsify, GradientVector, MatrixKind,
    MeasurementMatrix, RecoveryConfig, RecoveryMode,
};
use crate::error::{check_len, Error, Result};
use crate::scheduler::{self, AdmmParams, SchedulerInstance};
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One ReLU hidden layer.
    Mlp { input: usize, hidden: usize, output: usize },
    /// Multinomial logistic regression.
    Logistic { features: usize, classes: usize },
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::Mlp { input, hidden, output } => input * hidden + hidden + hidden * output + output,
            Architecture::Logistic { features, classes } => features * classes + classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            Architecture::Mlp { input, .. } => input,
            Architecture::Logistic { features, .. } => features,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Mlp { output, .. } => output,
            Architecture::Logistic { classes, .. } => classes,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Architecture::Mlp { input, hidden, output } => input > 0 && hidden > 0 && output > 1,
            Architecture::Logistic { features, classes } => features > 0 && classes > 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param("architecture", format!("degenerate layer sizes in {self:?}")))
        }
    }
}

/// Flat parameter vector plus its layout.
///
/// MLP layout: `W1` input-major (`w1[j·H + h]`), `b1`, `W2` hidden-major
/// (`w2[h·C + c]`), `b2`. Logistic layout: `W` feature-major, then `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    architecture: Architecture,
    weights: Vec<f64>,
}

impl Model {
    /// Glorot-uniform weights, zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = seed::rng(seed);
        let mut weights = Vec::with_capacity(architecture.param_count());
        let mut layer = |fan_in: usize, fan_out: usize, w: &mut Vec<f64>| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            w.extend(std::iter::repeat_n(0.0, fan_out));
        };
        match architecture {
            Architecture::Mlp { input, hidden, output } => {
                layer(input, hidden, &mut weights);
                layer(hidden, output, &mut weights);
            }
            Architecture::Logistic { features, classes } => layer(features, classes, &mut weights),
        }
        Ok(Self { architecture, weights })
    }

    pub fn from_weights(architecture: Architecture, weights: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        check_len("model weights", architecture.param_count(), weights.len())?;
        Ok(Self { architecture, weights })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Class scores for one sparse input.
    fn logits(&self, idx: &[u32], val: &[f32], hidden_buf: &mut [f64], out: &mut [f64]) {
        match self.architecture {
            Architecture::Mlp { input, hidden, output } => {
                let (w1, rest) = self.weights.split_at(input * hidden);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden * output);
                hidden_buf.copy_from_slice(b1);
                for (&j, &x) in idx.iter().zip(val) {
                    let x = f64::from(x);
                    let row = &w1[j as usize * hidden..(j as usize + 1) * hidden];
                    for (z, &w) in hidden_buf.iter_mut().zip(row) {
                        *z += w * x;
                    }
                }
                out.copy_from_slice(b2);
                for (h, z) in hidden_buf.iter_mut().enumerate() {
                    *z = z.max(0.0);
                    if *z > 0.0 {
                        let row = &w2[h * output..(h + 1) * output];
                        for (o, &w) in out.iter_mut().zip(row) {
                            *o += w * *z;
                        }
                    }
                }
            }
            Architecture::Logistic { features, classes } => {
                let (w, b) = self.weights.split_at(features * classes);
                out.copy_from_slice(b);
                for (&j, &x) in idx.iter().zip(val) {
                    let x = f64::from(x);
                    let row = &w[j as usize * classes..(j as usize + 1) * classes];
                    for (o, &wv) in out.iter_mut().zip(row) {
                        *o += wv * x;
                    }
                }
            }
        }
    }
}

/// In-place softmax; returns `log Σ exp(logits)`.
fn softmax(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Labelled samples with sparse single-precision features.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    dim: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
    labels: Vec<u32>,
}

impl LocalDataset {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Appends one sample; zero features are not stored.
    pub fn push(&mut self, features: &[f32], label: u32) -> Result<()> {
        check_len("sample features", self.dim, features.len())?;
        if let Some(j) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite feature {j}")));
        }
        for (j, &v) in features.iter().enumerate() {
            if v != 0.0 {
                self.indices.push(j as u32);
                self.values.push(v);
            }
        }
        self.offsets.push(self.indices.len());
        self.labels.push(label);
        Ok(())
    }

    pub fn from_dense(dim: usize, rows: &[Vec<f32>], labels: &[u32]) -> Result<Self> {
        check_len("dataset labels", rows.len(), labels.len())?;
        let mut ds = Self::empty(dim);
        for (row, &y) in rows.iter().zip(labels) {
            ds.push(row, y)?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self, k: usize) -> u32 {
        self.labels[k]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Nonzero `(indices, values)` of sample `k`.
    pub fn sparse_row(&self, k: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.offsets[k], self.offsets[k + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn dense_row(&self, k: usize) -> Vec<f32> {
        let mut row = vec![0.0; self.dim];
        let (idx, val) = self.sparse_row(k);
        for (&j, &v) in idx.iter().zip(val) {
            row[j as usize] = v;
        }
        row
    }

    /// The samples at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut ds = Self::empty(self.dim);
        for &k in rows {
            let (idx, val) = self.sparse_row(k);
            ds.indices.extend_from_slice(idx);
            ds.values.extend_from_slice(val);
            ds.offsets.push(ds.indices.len());
            ds.labels.push(self.labels[k]);
        }
        ds
    }

    fn check_against(&self, arch: Architecture) -> Result<()> {
        check_len("dataset feature dimension", arch.input_dim(), self.dim)?;
        let classes = arch.classes() as u32;
        if let Some(k) = self.labels.iter().position(|&y| y >= classes) {
            return Err(Error::Input(format!("label {} of sample {k} exceeds {classes} classes", self.labels[k])));
        }
        Ok(())
    }
}

/// Mean cross-entropy and its gradient over `data`.
pub fn loss_and_gradient(model: &Model, data: &LocalDataset) -> Result<(f64, GradientVector)> {
    data.check_against(model.architecture)?;
    if data.is_empty() {
        return Err(Error::Input("local dataset is empty".into()));
    }
    let classes = model.architecture.classes();
    let mut grad = vec![0.0; model.dim()];
    let mut loss = 0.0;
    let mut probs = vec![0.0; classes];
    match model.architecture {
        Architecture::Mlp { input, hidden, output } => {
            let w2_start = input * hidden + hidden;
            let w2 = &model.weights[w2_start..w2_start + hidden * output];
            let mut act = vec![0.0; hidden];
            let mut delta_h = vec![0.0; hidden];
            for k in 0..data.len() {
                let (idx, val) = data.sparse_row(k);
                model.logits(idx, val, &mut act, &mut probs);
                let y = data.labels[k] as usize;
                let logit_y = probs[y];
                loss += softmax(&mut probs) - logit_y;
                probs[y] -= 1.0;
                let (gw1, rest) = grad.split_at_mut(input * hidden);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(hidden * output);
                for (g, &p) in gb2.iter_mut().zip(&probs) {
                    *g += p;
                }
                for h in 0..hidden {
                    let a = act[h];
                    let row = &w2[h * output..(h + 1) * output];
                    if a > 0.0 {
                        let grow = &mut gw2[h * output..(h + 1) * output];
                        let mut back = 0.0;
                        for c in 0..output {
                            grow[c] += a * probs[c];
                            back += row[c] * probs[c];
                        }
                        delta_h[h] = back;
                    } else {
                        delta_h[h] = 0.0;
                    }
                }
                for (g, &d) in gb1.iter_mut().zip(&delta_h) {
                    *g += d;
                }
                for (&j, &x) in idx.iter().zip(val) {
                    let x = f64::from(x);
                    let grow = &mut gw1[j as usize * hidden..(j as usize + 1) * hidden];
                    for (g, &d) in grow.iter_mut().zip(&delta_h) {
                        *g += x * d;
                    }
                }
            }
        }
        Architecture::Logistic { features, classes } => {
            let mut scratch = [0.0; 0];
            for k in 0..data.len() {
                let (idx, val) = data.sparse_row(k);
                model.logits(idx, val, &mut scratch, &mut probs);
                let y = data.labels[k] as usize;
                let logit_y = probs[y];
                loss += softmax(&mut probs) - logit_y;
                probs[y] -= 1.0;
                let (gw, gb) = grad.split_at_mut(features * classes);
                for (g, &p) in gb.iter_mut().zip(&probs) {
                    *g += p;
                }
                for (&j, &x) in idx.iter().zip(val) {
                    let x = f64::from(x);
                    let grow = &mut gw[j as usize * classes..(j as usize + 1) * classes];
                    for (g, &p) in grow.iter_mut().zip(&probs) {
                        *g += x * p;
                    }
                }
            }
        }
    }
    let n = data.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    let loss = loss / n;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok((loss, GradientVector::new(grad)?))
}

/// Mean gradient of the cross-entropy over `data`.
pub fn local_gradient(model: &Model, data: &LocalDataset) -> Result<GradientVector> {
    loss_and_gradient(model, data).map(|(_, g)| g)
}

/// Sample-weighted average `Σ K_i g_i / Σ K_i`.
pub fn exact_global_gradient(locals: &[&GradientVector], counts: &[usize]) -> Result<GradientVector> {
    check_len("global gradient: counts", locals.len(), counts.len())?;
    let first = locals
        .first()
        .ok_or_else(|| Error::Input("no local gradients to combine".into()))?;
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Input("total sample count is zero".into()));
    }
    let mut out = vec![0.0; first.len()];
    for (g, &k) in locals.iter().zip(counts) {
        check_len("global gradient: dimension", out.len(), g.len())?;
        for (o, &v) in out.iter_mut().zip(g.as_slice()) {
            *o += k as f64 * v;
        }
    }
    let total = total as f64;
    GradientVector::new(out.into_iter().map(|v| v / total).collect())
}

/// `w ← w − α g`.
pub fn apply_update(model: &mut Model, g: &GradientVector, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::param("learning_rate", format!("must be > 0, got {learning_rate}")));
    }
    check_len("model update", model.dim(), g.len())?;
    for (w, &d) in model.weights.iter_mut().zip(g.as_slice()) {
        *w -= learning_rate * d;
    }
    Ok(())
}

/// Mean cross-entropy and top-1 accuracy. Ties in the argmax go to the lower
/// class index.
pub fn evaluate(model: &Model, test: &LocalDataset) -> Result<(f64, f64)> {
    test.check_against(model.architecture)?;
    if test.is_empty() {
        return Err(Error::Input("test set is empty".into()));
    }
    let mut hidden = vec![0.0; if let Architecture::Mlp { hidden, .. } = model.architecture { hidden } else { 0 }];
    let mut probs = vec![0.0; model.architecture.classes()];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for k in 0..test.len() {
        let (idx, val) = test.sparse_row(k);
        model.logits(idx, val, &mut hidden, &mut probs);
        let y = test.labels[k] as usize;
        let pred = argmax(&probs);
        let logit_y = probs[y];
        loss += softmax(&mut probs) - logit_y;
        correct += usize::from(pred == y);
    }
    let n = test.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite test loss".into()));
    }
    Ok((loss / n, correct as f64 / n))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Uncompressed, noise-free gradient descent over all workers.
    Perfect,
    Obcsaa,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Perfect => "perfect",
            Mode::Obcsaa => "obcsaa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    /// Workers transmit `sign(Φ g̃_i)`.
    OneBit,
    /// Workers transmit `Φ g̃_i` unquantized. Diagnostics only.
    Bypass,
}

/// How the scale of the recovered update is restored after 1-bit recovery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeRule {
    /// Each scheduled worker also reports `‖g̃_i‖`; the server uses their
    /// sample-weighted mean.
    SideChannel,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerChoice {
    /// Enumeration up to the cap, ADMM above it.
    Auto,
    Enumeration,
    Admm,
    AllWorkers,
}

/// Everything the round pipeline needs besides data and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub kappa: usize,
    pub measurements: usize,
    pub matrix: MatrixKind,
    pub quantization: Quantization,
    pub recovery: RecoveryMode,
    pub recovery_max_iterations: usize,
    pub recovery_step_size: f64,
    pub recovery_tolerance: f64,
    /// `None` uses `min(κ·U_scheduled, S/4)`.
    pub sparsity_budget: Option<usize>,
    pub magnitude: MagnitudeRule,
    pub scheduler: SchedulerChoice,
    pub enumeration_cap: usize,
    pub admm: AdmmParams,
    pub noise_variance: f64,
    pub max_power: f64,
    pub learning_rate: f64,
    pub lipschitz: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub grad_bound: f64,
    /// Replace `grad_bound` by the running max of observed `‖g_i‖`.
    pub grad_bound_running_max: bool,
    pub delta: f64,
}

impl PipelineConfig {
    /// Default settings for a model of dimension `dim`.
    pub fn with_defaults(dim: usize) -> Self {
        Self {
            kappa: 10.min(dim),
            measurements: 1000.min(dim.saturating_sub(1)).max(1),
            matrix: MatrixKind::Gaussian,
            quantization: Quantization::OneBit,
            recovery: RecoveryMode::IhtReal,
            recovery_max_iterations: 300,
            recovery_step_size: 1.0,
            recovery_tolerance: 1e-6,
            sparsity_budget: None,
            magnitude: MagnitudeRule::SideChannel,
            scheduler: SchedulerChoice::Auto,
            enumeration_cap: scheduler::ENUMERATION_CAP,
            admm: AdmmParams::default(),
            noise_variance: 10.0 / 10f64.powf(0.5),
            max_power: 10.0,
            learning_rate: 0.1,
            lipschitz: 10.0,
            rho1: 20.0,
            rho2: 0.5,
            grad_bound: 1.0,
            grad_bound_running_max: false,
            delta: 0.2,
        }
    }

    fn needs_bounds(&self) -> bool {
        self.scheduler != SchedulerChoice::AllWorkers
    }
}

/// One row of the per-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Sample-weighted training loss of the model the round starts from.
    pub train_loss: f64,
    /// Test accuracy of the model the round starts from.
    pub test_accuracy: f64,
    pub grad_error_sq: f64,
    /// `None` in perfect mode and whenever the bound parameters are not
    /// admissible (for example `S = D`).
    pub bound_report: Option<RoundBoundReport>,
    /// Scheduler objective at the realized decision.
    pub objective_r: Option<f64>,
    /// `None` in perfect mode.
    pub decision: Option<SchedulingDecision>,
    pub scheduled: usize,
    pub recovery_iterations: usize,
}

/// The full federated state: server model, per-worker copies and data.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: PipelineConfig,
    model: Model,
    worker_models: Vec<Model>,
    data: Vec<LocalDataset>,
    profiles: Vec<WorkerProfile>,
    test: LocalDataset,
    phi: Option<MeasurementMatrix>,
    master_seed: u64,
    round: usize,
    observed_grad_bound: f64,
}

impl Simulation {
    /// `mode` decides whether a measurement matrix is built.
    pub fn new(
        config: PipelineConfig,
        model: Model,
        data: Vec<LocalDataset>,
        test: LocalDataset,
        master_seed: u64,
        mode: Mode,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::param("U", "need at least one worker"));
        }
        for d in &data {
            d.check_against(model.architecture)?;
            if d.is_empty() {
                return Err(Error::Input("a worker holds no samples".into()));
            }
        }
        test.check_against(model.architecture)?;
        let profiles = data
            .iter()
            .map(|d| WorkerProfile::new(d.len(), config.max_power))
            .collect::<Result<Vec<_>>>()?;
        if !(config.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be > 0"));
        }
        let dim = model.dim();
        let phi = match mode {
            Mode::Perfect => None,
            Mode::Obcsaa => {
                if config.kappa < 1 || config.kappa > dim {
                    return Err(Error::param("kappa", format!("need 1 <= kappa <= D = {dim}")));
                }
                Some(match config.matrix {
                    MatrixKind::Identity => {
                        check_len("identity measurement matrix needs S = D", dim, config.measurements)?;
                        MeasurementMatrix::identity(dim)
                    }
                    MatrixKind::Gaussian => gen_measurement_matrix(
                        config.measurements,
                        dim,
                        seed::derive(master_seed, Purpose::MeasurementMatrix, 0, 0),
                        1.0 / config.measurements as f64,
                    )?,
                })
            }
        };
        let worker_models = vec![model.clone(); data.len()];
        Ok(Self {
            config,
            model,
            worker_models,
            data,
            profiles,
            test,
            phi,
            master_seed,
            round: 0,
            observed_grad_bound: 0.0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn worker_models(&self) -> &[Model] {
        &self.worker_models
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn profiles(&self) -> &[WorkerProfile] {
        &self.profiles
    }

    pub fn measurement_matrix(&self) -> Option<&MeasurementMatrix> {
        self.phi.as_ref()
    }

    fn bound_params(&self, grad_bound: f64) -> BoundParams {
        let c = &self.config;
        BoundParams {
            lipschitz: c.lipschitz,
            rho1: c.rho1,
            rho2: c.rho2,
            grad_bound,
            delta: c.delta,
            kappa: c.kappa,
            measurements: c.measurements,
            dim: self.model.dim(),
            noise_variance: c.noise_variance,
            sample_counts: self.profiles.iter().map(|p| p.sample_count).collect(),
            learning_rate: c.learning_rate,
        }
    }
}

/// Executes one communication round and advances the state.
pub fn run_fl_round(sim: &mut Simulation, mode: Mode) -> Result<RoundMetrics> {
    let t = sim.round;
    let metrics = round_inner(sim, mode).map_err(|e| e.in_round(t))?;
    sim.round += 1;
    Ok(metrics)
}

fn round_inner(sim: &mut Simulation, mode: Mode) -> Result<RoundMetrics> {
    let t = sim.round;
    let (_, test_accuracy) = evaluate(&sim.model, &sim.test)?;

    let mut losses = Vec::with_capacity(sim.data.len());
    let mut locals = Vec::with_capacity(sim.data.len());
    for (m, d) in sim.worker_models.iter().zip(&sim.data) {
        let (loss, g) = loss_and_gradient(m, d)?;
        losses.push(loss);
        locals.push(g);
    }
    let counts: Vec<usize> = sim.data.iter().map(LocalDataset::len).collect();
    let total = counts.iter().sum::<usize>() as f64;
    let train_loss = losses.iter().zip(&counts).map(|(l, &k)| l * k as f64).sum::<f64>() / total;

    let metrics = match mode {
        Mode::Perfect => {
            let refs: Vec<&GradientVector> = locals.iter().collect();
            let g = exact_global_gradient(&refs, &counts)?;
            apply_update(&mut sim.model, &g, sim.config.learning_rate)?;
            RoundMetrics {
                round: t,
                train_loss,
                test_accuracy,
                grad_error_sq: 0.0,
                bound_report: None,
                objective_r: None,
                decision: None,
                scheduled: sim.data.len(),
                recovery_iterations: 0,
            }
        }
        Mode::Obcsaa => obcsaa_step(sim, &locals, &counts, train_loss, test_accuracy)?,
    };
    for w in &mut sim.worker_models {
        w.weights.copy_from_slice(&sim.model.weights);
    }
    Ok(metrics)
}

fn obcsaa_step(
    sim: &mut Simulation,
    locals: &[GradientVector],
    counts: &[usize],
    train_loss: f64,
    test_accuracy: f64,
) -> Result<RoundMetrics> {
    let t = sim.round;
    let u = locals.len();
    let cfg = sim.config.clone();
    let phi = sim
        .phi
        .as_ref()
        .ok_or_else(|| Error::Config("simulation was built for perfect mode".into()))?;
    let s = phi.rows();

    let grad_bound = if cfg.grad_bound_running_max {
        let round_max = locals.iter().map(GradientVector::norm).fold(0.0, f64::max);
        sim.observed_grad_bound = sim.observed_grad_bound.max(round_max);
        sim.observed_grad_bound
    } else {
        cfg.grad_bound
    };
    let params = sim.bound_params(grad_bound);
    let params_ok = params.validate();
    if cfg.needs_bounds() {
        params_ok.as_ref().map_err(|e| Error::Config(format!("bound parameters: {e}")))?;
    }

    let round = draw_channel_gains(u, sim.master_seed, t, cfg.noise_variance)?;
    let instance = if params_ok.is_ok() {
        Some(SchedulerInstance::new(round.gains().to_vec(), sim.profiles.clone(), params.clone())?)
    } else {
        None
    };
    let decision = match (cfg.scheduler, &instance) {
        (SchedulerChoice::AllWorkers, _) => {
            let all = vec![true; u];
            let b = sim
                .profiles
                .iter()
                .zip(round.gains())
                .map(|(w, h)| h * w.max_power.sqrt() / w.k())
                .fold(f64::INFINITY, f64::min);
            SchedulingDecision {
                selected: all,
                power_scale: b,
            }
        }
        (choice, Some(inst)) => {
            let res = match choice {
                SchedulerChoice::Enumeration => scheduler::solve_enumeration_capped(inst, cfg.enumeration_cap)?,
                SchedulerChoice::Admm => scheduler::solve_admm(inst, &cfg.admm)?,
                _ if u <= cfg.enumeration_cap => scheduler::solve_enumeration_capped(inst, cfg.enumeration_cap)?,
                _ => scheduler::solve_admm(inst, &cfg.admm)?,
            };
            res.decision
        }
        (_, None) => unreachable!("bound parameters were validated above"),
    };

    // worker side: sparsify, project, quantize
    let mut symbols: Vec<Option<Vec<f64>>> = vec![None; u];
    let mut magnitude_num = 0.0;
    for i in 0..u {
        if !decision.selected[i] {
            continue;
        }
        let sparse = top_k_sparsify(&locals[i], cfg.kappa)?;
        magnitude_num += counts[i] as f64 * sparse.norm();
        symbols[i] = Some(match cfg.quantization {
            Quantization::OneBit => compress_1bit(&sparse, phi)?.to_f64(),
            Quantization::Bypass => phi.apply_sparse(sparse.values(), sparse.support()),
        });
    }
    let scheduled_samples = decision.scheduled_samples(&sim.profiles);
    let gamma = match cfg.magnitude {
        MagnitudeRule::SideChannel => magnitude_num / scheduled_samples,
        MagnitudeRule::Fixed(v) => v,
    };

    let refs: Vec<Option<&[f64]>> = symbols.iter().map(Option::as_deref).collect();
    let noise_seed = seed::derive(sim.master_seed, Purpose::ChannelNoise, t as u64, 0);
    let y = aggregate_analog(&refs, &round, &sim.profiles, &decision, noise_seed)?;
    let y = post_process(&y, &sim.profiles, &decision)?;

    let scheduled = decision.scheduled_count();
    let recovery_cfg = RecoveryConfig {
        sparsity_budget: cfg
            .sparsity_budget
            .unwrap_or_else(|| RecoveryConfig::default_budget(cfg.kappa, scheduled, s)),
        max_iterations: cfg.recovery_max_iterations,
        step_size: cfg.recovery_step_size,
        tolerance: cfg.recovery_tolerance,
        mode: cfg.recovery,
        magnitude: Some(gamma),
    };
    let recovery = reconstruct_sparse(&y, phi, &recovery_cfg)?;
    let recovery_iterations = recovery.iterations;
    let mut estimate = recovery.estimate.into_inner();
    if cfg.quantization == Quantization::OneBit && cfg.recovery == RecoveryMode::IhtReal {
        // IHT on sign measurements returns about √(2S/π)·g̃/‖g̃‖
        let scale = gamma * (std::f64::consts::PI / (2.0 * s as f64)).sqrt();
        for v in &mut estimate {
            *v *= scale;
        }
    }
    let estimate = GradientVector::new(estimate)?;

    let (sched_refs, sched_counts): (Vec<&GradientVector>, Vec<usize>) = (0..u)
        .filter(|&i| decision.selected[i])
        .map(|i| (&locals[i], counts[i]))
        .unzip();
    let reference = exact_global_gradient(&sched_refs, &sched_counts)?;
    let grad_error_sq = estimate.dist_sq(&reference);
    if log::log_enabled!(log::Level::Debug) {
        let dot: f64 = estimate.as_slice().iter().zip(reference.as_slice()).map(|(a, b)| a * b).sum();
        log::debug!(
            "round {t}: |g| {:.4e} |g_hat| {:.4e} cos {:.3} gamma {gamma:.4e} recovery iterations {}",
            reference.norm(),
            estimate.norm(),
            dot / (estimate.norm() * reference.norm()).max(f64::MIN_POSITIVE),
            recovery_iterations
        );
    }

    let (bound_report, objective_r) = match &instance {
        Some(inst) => (
            Some(round_report(&params, &decision.selected, decision.power_scale)?),
            Some(scheduler::objective_r(inst, &decision.selected, decision.power_scale)?),
        ),
        None => (None, None),
    };

    apply_update(&mut sim.model, &estimate, cfg.learning_rate)?;
    Ok(RoundMetrics {
        round: t,
        train_loss,
        test_accuracy,
        grad_error_sq,
        bound_report,
        objective_r,
        decision: Some(decision),
        scheduled,
        recovery_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_dataset(n: usize, dim: usize, classes: u32, seed_: u64) -> LocalDataset {
        let mut rng = seed::rng(seed_);
        let mut ds = LocalDataset::empty(dim);
        for _ in 0..n {
            let row: Vec<f32> = (0..dim)
                .map(|_| if rng.random_bool(0.6) { rng.random_range(0.0..1.0) } else { 0.0 })
                .collect();
            ds.push(&row, rng.random_range(0..classes)).unwrap();
        }
        ds
    }

    fn random_gradient(d: usize, rng: &mut impl Rng) -> GradientVector {
        GradientVector::new((0..d).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn parameter_counts() {
        let mlp = |h| Architecture::Mlp { input: 784, hidden: h, output: 10 };
        assert_eq!(mlp(64).param_count(), 50890);
        assert_eq!(mlp(16).param_count(), 12730);
        assert_eq!(Architecture::Logistic { features: 199, classes: 10 }.param_count(), 2000);
        assert_eq!(Model::init(mlp(64), 1).unwrap().dim(), 50890);
    }

    #[test]
    fn glorot_range_and_zero_biases() {
        let arch = Architecture::Mlp { input: 30, hidden: 5, output: 3 };
        let m = Model::init(arch, 2).unwrap();
        let w = m.weights();
        let l1 = (6.0f64 / 35.0).sqrt();
        assert!(w[..150].iter().all(|v| v.abs() <= l1));
        assert!(w[150..155].iter().all(|&v| v == 0.0));
        let l2 = (6.0f64 / 8.0).sqrt();
        assert!(w[155..170].iter().all(|v| v.abs() <= l2));
        assert!(w[170..].iter().all(|&v| v == 0.0));
        assert_eq!(m, Model::init(arch, 2).unwrap());
    }

    #[test]
    fn output_gradient_at_uniform_prediction() {
        // all-zero weights give uniform probabilities: db = mean(p − onehot)
        let arch = Architecture::Logistic { features: 3, classes: 4 };
        let model = Model::from_weights(arch, vec![0.0; 16]).unwrap();
        let ds = LocalDataset::from_dense(3, &[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]], &[1, 3]).unwrap();
        let (loss, g) = loss_and_gradient(&model, &ds).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let gb = &g.as_slice()[12..];
        let expected = [0.25, 0.25 - 0.5, 0.25, 0.25 - 0.5];
        for (a, b) in gb.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // weight of feature 2, class 1 sees only sample 0: x·(p − 1)/2
        assert!((g.as_slice()[2 * 4 + 1] - 2.0 * (0.25 - 1.0) / 2.0).abs() < 1e-12);
    }

    fn finite_difference_check(arch: Architecture, seed_: u64) {
        let model = Model::init(arch, seed_).unwrap();
        let ds = random_dataset(7, arch.input_dim(), arch.classes() as u32, seed_ + 1);
        let (_, g) = loss_and_gradient(&model, &ds).unwrap();
        let h = 1e-5;
        for j in 0..model.dim() {
            let mut plus = model.clone();
            plus.weights[j] += h;
            let mut minus = model.clone();
            minus.weights[j] -= h;
            let fd = (loss_and_gradient(&plus, &ds).unwrap().0 - loss_and_gradient(&minus, &ds).unwrap().0) / (2.0 * h);
            let an = g.as_slice()[j];
            let tol = 1e-6 * an.abs().max(1e-3);
            assert!((fd - an).abs() <= tol, "coordinate {j}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_logistic() {
        // 3 features, 4 classes: 16 parameters
        finite_difference_check(Architecture::Logistic { features: 3, classes: 4 }, 3);
    }

    #[test]
    fn gradient_matches_finite_differences_mlp() {
        // 3·2 + 2 + 2·3 + 3 = 17 parameters; random init keeps ReLUs away
        // from their kink with probability one
        finite_difference_check(Architecture::Mlp { input: 3, hidden: 2, output: 3 }, 4);
    }

    #[test]
    fn duplicated_samples_leave_gradient_unchanged() {
        let arch = Architecture::Mlp { input: 6, hidden: 4, output: 3 };
        let model = Model::init(arch, 5).unwrap();
        let ds = random_dataset(5, 6, 3, 6);
        let doubled = ds.subset(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
        let (l1, g1) = loss_and_gradient(&model, &ds).unwrap();
        let (l2, g2) = loss_and_gradient(&model, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.dist_sq(&g2) < 1e-24);
    }

    #[test]
    fn global_gradient_cases() {
        let mut rng = seed::rng(7);
        let gs: Vec<GradientVector> = (0..4).map(|_| random_gradient(9, &mut rng)).collect();
        let refs: Vec<&GradientVector> = gs.iter().collect();

        let mean = exact_global_gradient(&refs, &[5; 4]).unwrap();
        for j in 0..9 {
            let m = gs.iter().map(|g| g.as_slice()[j]).sum::<f64>() / 4.0;
            assert!((mean.as_slice()[j] - m).abs() < 1e-12);
        }
        assert_eq!(exact_global_gradient(&refs[..1], &[17]).unwrap(), gs[0]);

        let counts = [3, 11, 1, 40];
        let weighted = exact_global_gradient(&refs, &counts).unwrap();
        for j in 0..9 {
            let num: f64 = (0..4).map(|i| counts[i] as f64 * gs[i].as_slice()[j]).sum();
            assert!((weighted.as_slice()[j] - num / 55.0).abs() <= 1e-12 * num.abs().max(1.0));
        }
        assert!(exact_global_gradient(&refs, &[1, 2]).is_err());
    }

    #[test]
    fn update_rules() {
        let arch = Architecture::Logistic { features: 2, classes: 2 };
        let mut m = Model::init(arch, 8).unwrap();
        let before = m.clone();
        apply_update(&mut m, &GradientVector::zeros(6), 0.1).unwrap();
        assert_eq!(m, before);

        let mut rng = seed::rng(9);
        let (g1, g2) = (random_gradient(6, &mut rng), random_gradient(6, &mut rng));
        let sum = GradientVector::new(g1.as_slice().iter().zip(g2.as_slice()).map(|(a, b)| a + b).collect()).unwrap();
        let mut a = before.clone();
        apply_update(&mut a, &g1, 0.1).unwrap();
        apply_update(&mut a, &g2, 0.1).unwrap();
        let mut b = before.clone();
        apply_update(&mut b, &sum, 0.1).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(apply_update(&mut a, &g1, 0.0).is_err());
        assert!(apply_update(&mut a, &GradientVector::zeros(5), 0.1).is_err());
    }

    #[test]
    fn evaluate_cases() {
        let arch = Architecture::Logistic { features: 1, classes: 2 };
        // logit gap of 1000 puts probability one on class 1
        let sure = Model::from_weights(arch, vec![0.0, 1000.0, 0.0, 0.0]).unwrap();
        let one = LocalDataset::from_dense(1, &[vec![1.0]], &[1]).unwrap();
        let (loss, acc) = evaluate(&sure, &one).unwrap();
        assert!(loss.abs() < 1e-12);
        assert_eq!(acc, 1.0);

        let arch = Architecture::Logistic { features: 4, classes: 10 };
        let uniform = Model::from_weights(arch, vec![0.0; 50]).unwrap();
        let labels: Vec<u32> = (0..100).map(|k| k % 10).collect();
        let rows = vec![vec![0.5f32; 4]; 100];
        let balanced = LocalDataset::from_dense(4, &rows, &labels).unwrap();
        let (loss, acc) = evaluate(&uniform, &balanced).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((acc - 0.1).abs() < 1e-12);

        assert!(evaluate(&uniform, &LocalDataset::empty(4)).is_err());
    }

    #[test]
    fn accuracy_matches_recount() {
        let arch = Architecture::Mlp { input: 8, hidden: 5, output: 4 };
        let m = Model::init(arch, 10).unwrap();
        let ds = random_dataset(200, 8, 4, 11);
        let (_, acc) = evaluate(&m, &ds).unwrap();
        let mut correct = 0;
        for k in 0..ds.len() {
            let single = ds.subset(&[k]);
            let (_, a) = evaluate(&m, &single).unwrap();
            correct += a as usize;
        }
        assert!((acc - correct as f64 / 200.0).abs() < 1e-15);
    }

    #[test]
    fn dataset_rejects_bad_input() {
        let mut ds = LocalDataset::empty(2);
        assert!(ds.push(&[1.0], 0).is_err());
        assert!(ds.push(&[f32::NAN, 0.0], 0).is_err());
        ds.push(&[0.0, 2.0], 5).unwrap();
        assert_eq!(ds.dense_row(0), vec![0.0, 2.0]);
        let model = Model::init(Architecture::Logistic { features: 2, classes: 3 }, 1).unwrap();
        assert!(loss_and_gradient(&model, &ds).is_err());
    }

    fn tiny_sim(config: PipelineConfig, workers: usize, mode: Mode) -> Simulation {
        let arch = Architecture::Mlp { input: 12, hidden: 6, output: 3 };
        let model = Model::init(arch, 20).unwrap();
        let data = (0..workers).map(|i| random_dataset(15 + i, 12, 3, 30 + i as u64)).collect();
        let test = random_dataset(40, 12, 3, 99);
        Simulation::new(config, model, data, test, 77, mode).unwrap()
    }

    fn lossless(dim: usize) -> PipelineConfig {
        PipelineConfig {
            kappa: dim,
            measurements: dim,
            matrix: MatrixKind::Identity,
            quantization: Quantization::Bypass,
            recovery: RecoveryMode::PassThrough,
            scheduler: SchedulerChoice::AllWorkers,
            noise_variance: 0.0,
            ..PipelineConfig::with_defaults(dim)
        }
    }

    #[test]
    fn lossless_pipeline_reproduces_perfect() {
        let dim = Architecture::Mlp { input: 12, hidden: 6, output: 3 }.param_count();
        for workers in [1, 3] {
            let mut perfect = tiny_sim(lossless(dim), workers, Mode::Perfect);
            let mut ob = tiny_sim(lossless(dim), workers, Mode::Obcsaa);
            for _ in 0..10 {
                let a = run_fl_round(&mut perfect, Mode::Perfect).unwrap();
                let b = run_fl_round(&mut ob, Mode::Obcsaa).unwrap();
                assert!(b.bound_report.is_none());
                assert!((a.train_loss - b.train_loss).abs() <= 1e-10 * a.train_loss);
                for (x, y) in perfect.model().weights().iter().zip(ob.model().weights()) {
                    assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn workers_hold_the_broadcast_model() {
        let dim = Architecture::Mlp { input: 12, hidden: 6, output: 3 }.param_count();
        let cfg = PipelineConfig {
            kappa: 20,
            measurements: 60,
            ..PipelineConfig::with_defaults(dim)
        };
        let mut sim = tiny_sim(cfg, 4, Mode::Obcsaa);
        for _ in 0..3 {
            let m = run_fl_round(&mut sim, Mode::Obcsaa).unwrap();
            assert!(m.scheduled >= 1);
            assert!(m.grad_error_sq.is_finite());
            let report = m.bound_report.unwrap();
            assert!((2.0 * 10.0 * report.b_term - m.objective_r.unwrap()).abs() <= 1e-9 * m.objective_r.unwrap());
            for w in sim.worker_models() {
                assert_eq!(w, sim.model());
            }
        }
        assert_eq!(sim.round(), 3);
    }

    #[test]
    fn perfect_mode_loss_decreases() {
        let dim = Architecture::Mlp { input: 12, hidden: 6, output: 3 }.param_count();
        let mut sim = tiny_sim(PipelineConfig::with_defaults(dim), 3, Mode::Perfect);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let m = run_fl_round(&mut sim, Mode::Perfect).unwrap();
            assert!(m.train_loss <= prev + 1e-6);
            prev = m.train_loss;
        }
    }

    #[test]
    fn unscheduled_gradients_do_not_matter() {
        // zeroing the data of an unscheduled worker changes nothing on the
        // air; compare the received vectors directly
        let dim = Architecture::Mlp { input: 12, hidden: 6, output: 3 }.param_count();
        let cfg = PipelineConfig {
            kappa: 20,
            measurements: 60,
            noise_variance: 0.0,
            ..PipelineConfig::with_defaults(dim)
        };
        let sim = tiny_sim(cfg.clone(), 3, Mode::Obcsaa);
        let phi = sim.measurement_matrix().unwrap();
        let mut rng = seed::rng(3);
        let gs: Vec<GradientVector> = (0..3).map(|_| random_gradient(dim, &mut rng)).collect();
        let round = draw_channel_gains(3, 1, 0, 0.0).unwrap();
        let decision = SchedulingDecision {
            selected: vec![true, false, true],
            power_scale: 1e-3,
        };
        let send = |gs: &[GradientVector]| {
            let syms: Vec<Vec<f64>> = gs
                .iter()
                .map(|g| compress_1bit(&top_k_sparsify(g, 20).unwrap(), phi).unwrap().to_f64())
                .collect();
            let refs: Vec<Option<&[f64]>> =
                syms.iter().zip(&decision.selected).map(|(s, &b)| b.then_some(s.as_slice())).collect();
            aggregate_analog(&refs, &round, sim.profiles(), &decision, 5).unwrap()
        };
        let mut zeroed = gs.clone();
        zeroed[1] = GradientVector::zeros(dim);
        assert_eq!(send(&gs), send(&zeroed));
    }

    #[test]
    fn errors_carry_the_round() {
        let dim = Architecture::Mlp { input: 12, hidden: 6, output: 3 }.param_count();
        let cfg = PipelineConfig {
            delta: 0.9,
            measurements: 60,
            ..PipelineConfig::with_defaults(dim)
        };
        let mut sim = tiny_sim(cfg, 2, Mode::Obcsaa);
        match run_fl_round(&mut sim, Mode::Obcsaa) {
            Err(Error::Round { round: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
