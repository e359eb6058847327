//! Desk-scale split inference: a small classifier is cut in two, the client
//! half becomes the encoder, and calibrated Gaussian noise is added at the
//! cut. Also covers training a fresh head on encodings from a frozen client.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::loss::softmax;
use crate::diff::optim::Adam;
use crate::diff::{Activation, Layer, SmoothMap};
use crate::encoders::{jacobian_trace, NoisyEncoder};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::exec::Execution;
use crate::rng::{self, TAG_BATCH, TAG_DATA, TAG_INIT, TAG_NOISE, TAG_SPLIT};

/// Labelled points, one input per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, DVector::len)
    }
}

/// Gaussian clusters with unit within-class spread. Centres sit at distance
/// `separation` from the origin in uniformly random directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 4,
            n_train: 4000,
            n_test: 1000,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// A task over a disjoint set of cluster centres, used to pretrain a
    /// client before it is frozen.
    pub fn pretraining(&self) -> Self {
        Self {
            classes: 2 * self.classes,
            seed: rng::derive_seed(self.seed, TAG_SPLIT, u64::MAX),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTask {
    pub centers: Vec<DVector<f64>>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

pub fn cluster_task(spec: &TaskSpec) -> Result<ClusterTask> {
    if spec.dim == 0 || spec.classes < 2 || spec.n_train == 0 || spec.n_test == 0 {
        return Err(invalid("cluster task needs a positive dimension, two classes and non-empty splits"));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(invalid(format!("separation must be non-negative, got {}", spec.separation)));
    }
    let mut r = rng::stream(spec.seed, TAG_DATA, 0);
    let centers: Vec<DVector<f64>> = (0..spec.classes)
        .map(|_| {
            let u = rng::standard_normal(&mut r, spec.dim);
            u.normalize() * spec.separation
        })
        .collect();
    let draw = |n: usize, stream: u64| {
        let mut r = rng::stream(spec.seed, TAG_DATA, stream);
        let mut set = LabeledSet {
            inputs: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            classes: spec.classes,
        };
        for _ in 0..n {
            let label = r.random_range(0..spec.classes);
            set.inputs.push(&centers[label] + rng::standard_normal(&mut r, spec.dim));
            set.labels.push(label);
        }
        set
    };
    let train = draw(spec.n_train, 1);
    let test = draw(spec.n_test, 2);
    Ok(ClusterTask { centers, train, test })
}

/// How noise is calibrated during noise-aware training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSchedule {
    /// One sigma per batch, calibrated on the batch-mean `trace(J^T J)`.
    #[default]
    BatchMean,
    /// One sigma per sample, calibrated on that sample's Jacobian.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// dFIL the deployed encoder will be calibrated to.
    pub target_dfil: f64,
    /// Inject calibrated noise at the cut during training.
    pub noise_aware: bool,
    #[serde(default)]
    pub noise_schedule: NoiseSchedule,
    /// Width of the compression layer appended to the client.
    pub compression: Option<usize>,
    /// Weight of the `trace(J^T J) / |z|^2` penalty.
    pub snr_lambda: f64,
    pub hidden_width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_dfil: 1.0,
            noise_aware: false,
            noise_schedule: NoiseSchedule::BatchMean,
            compression: None,
            snr_lambda: 0.0,
            hidden_width: 32,
            epochs: 20,
            learning_rate: 3e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Noise-aware training, a width-4 compression layer and the SNR penalty.
    pub fn with_optimizations(self) -> Self {
        Self {
            noise_aware: true,
            compression: Some(4),
            snr_lambda: 0.1,
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.target_dfil > 0.0) || self.target_dfil.is_nan() {
            return Err(invalid(format!("target dFIL must be positive, got {}", self.target_dfil)));
        }
        if !(self.snr_lambda >= 0.0 && self.snr_lambda.is_finite()) {
            return Err(invalid(format!("SNR weight must be non-negative, got {}", self.snr_lambda)));
        }
        if self.batch_size == 0 || self.hidden_width == 0 || self.compression == Some(0) {
            return Err(invalid("batch size, hidden width and compression width must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// A classifier cut into a client encoder and a server head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub client: SmoothMap,
    pub server: SmoothMap,
    /// Number of primitives on the client side.
    pub split_point: usize,
    pub classes: usize,
}

impl SplitModel {
    pub fn new(client: SmoothMap, server: SmoothMap, classes: usize) -> Result<Self> {
        ensure_dim("server input", client.output_dim(), server.input_dim())?;
        ensure_dim("server output", classes, server.output_dim())?;
        Ok(Self {
            split_point: client.layers().len(),
            client,
            server,
            classes,
        })
    }

    /// Four-layer tanh MLP cut after the second layer, with an optional
    /// compression/decompression pair around the cut.
    pub fn init(input_dim: usize, classes: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut r = rng::stream(cfg.seed, TAG_INIT, 2);
        let h = cfg.hidden_width;
        let mut client = SmoothMap::mlp(&[input_dim, h, h], Activation::Tanh, &mut r)?.push(Layer::Tanh)?;
        if let Some(w) = cfg.compression {
            client = client.then(&SmoothMap::mlp(&[h, w], Activation::Tanh, &mut r)?)?;
        }
        let server = init_head(client.output_dim(), h, classes, &mut r)?;
        Self::new(client, server, classes)
    }

    pub fn encoding_dim(&self) -> usize {
        self.client.output_dim()
    }
}

/// Server head: an optional linear decompression back to width `h`, then
/// tanh and a linear classifier.
fn init_head<R: Rng + ?Sized>(k: usize, h: usize, classes: usize, r: &mut R) -> Result<SmoothMap> {
    let body = SmoothMap::mlp(&[h, h, classes], Activation::Tanh, r)?;
    if k == h {
        return Ok(body);
    }
    SmoothMap::mlp(&[k, h], Activation::Tanh, r)?.then(&body)
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Test accuracy with per-sample calibrated noise at the target dFIL.
    pub accuracy: f64,
    pub mean_snr_reg: f64,
}

struct StepOutcome {
    loss: f64,
    client_grad: Vec<f64>,
    server_grad: Vec<f64>,
}

fn cross_entropy_grads(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let mut g = DMatrix::zeros(logits.nrows(), logits.ncols());
    let mut total = 0.0;
    for (i, col) in logits.column_iter().enumerate() {
        let mut p = softmax(&col.into_owned());
        total -= p[labels[i]].max(f64::MIN_POSITIVE).ln();
        p[labels[i]] -= 1.0;
        g.set_column(i, &p);
    }
    (total, g)
}

fn batch_step(
    model: &SplitModel,
    cfg: &TrainConfig,
    xs: &[&DVector<f64>],
    labels: &[usize],
    noise: &mut impl Rng,
) -> Result<StepOutcome> {
    let need_jacobian = cfg.noise_aware || cfg.snr_lambda > 0.0;
    let d = model.client.input_dim() as f64;
    let traces = xs
        .iter()
        .map(|x| model.client.trace(x, need_jacobian))
        .collect::<Result<Vec<_>>>()?;
    let jac_traces: Vec<f64> = traces
        .iter()
        .map(|t| t.jacobian.as_ref().map_or(0.0, DMatrix::norm_squared))
        .collect();

    // Calibrated sigma is treated as a constant of the step.
    let sigmas: Vec<f64> = if cfg.noise_aware && cfg.target_dfil.is_finite() {
        match cfg.noise_schedule {
            NoiseSchedule::BatchMean => {
                let mean = jac_traces.iter().sum::<f64>() / jac_traces.len() as f64;
                vec![(mean / (d * cfg.target_dfil)).sqrt(); xs.len()]
            }
            NoiseSchedule::PerSample => jac_traces.iter().map(|t| (t / (d * cfg.target_dfil)).sqrt()).collect(),
        }
    } else {
        vec![0.0; xs.len()]
    };
    let k = model.encoding_dim();
    let z = DMatrix::from_fn(k, xs.len(), |r, c| {
        let n: f64 = StandardNormal.sample(noise);
        traces[c].output[r] + sigmas[c] * n
    });
    let (inputs, logits) = model.server.forward_batch(z)?;
    let (mut loss, g_logits) = cross_entropy_grads(&logits, labels);
    let mut server_grad = vec![0.0; model.server.num_params()];
    let g_z = model.server.backprop_batch(&inputs, g_logits, &mut server_grad);

    let mut client_grad = vec![0.0; model.client.num_params()];
    for (i, traced) in traces.iter().enumerate() {
        let mut g_out = g_z.column(i).into_owned();
        let mut g_jac = None;
        if cfg.snr_lambda > 0.0 {
            let energy = traced.output.norm_squared().max(1e-12);
            let jt = jac_traces[i];
            loss += cfg.snr_lambda * jt / energy;
            g_out -= &traced.output * (2.0 * cfg.snr_lambda * jt / (energy * energy));
            g_jac = traced.jacobian.as_ref().map(|j| j * (2.0 * cfg.snr_lambda / energy));
        }
        model.client.backprop(traced, &g_out, g_jac.as_ref(), &mut client_grad)?;
    }
    let n = xs.len() as f64;
    client_grad.iter_mut().chain(server_grad.iter_mut()).for_each(|g| *g /= n);
    loss /= n;
    if !loss.is_finite() || client_grad.iter().chain(&server_grad).any(|g| !g.is_finite()) {
        return Err(Error::Training("loss or gradient became non-finite".into()));
    }
    Ok(StepOutcome {
        loss,
        client_grad,
        server_grad,
    })
}

/// Trains client and server end to end. Returns metrics after every epoch.
pub fn train_split(
    mut model: SplitModel,
    data: &LabeledSet,
    test: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<(SplitModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if data.is_empty() || test.is_empty() {
        return Err(invalid("training and test sets must be non-empty"));
    }
    ensure_dim("training input", model.client.input_dim(), data.dim())?;
    let mut cp = model.client.params_flat();
    let mut sp = model.server.params_flat();
    let mut c_adam = Adam::new(cp.len(), cfg.learning_rate);
    let mut s_adam = Adam::new(sp.len(), cfg.learning_rate);
    let mut noise = rng::stream(cfg.seed, TAG_NOISE, 2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let total_steps = (cfg.epochs * data.len().div_ceil(cfg.batch_size)).max(1);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, TAG_BATCH, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&DVector<f64>> = chunk.iter().map(|&i| &data.inputs[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let out = batch_step(&model, cfg, &xs, &ys, &mut noise)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            // Linear decay to a tenth of the initial rate.
            let lr = cfg.learning_rate * (1.0 - 0.9 * step as f64 / total_steps as f64);
            c_adam.set_lr(lr);
            s_adam.set_lr(lr);
            c_adam.step(&mut cp, &out.client_grad);
            s_adam.step(&mut sp, &out.server_grad);
            model.client.set_params_flat(&cp)?;
            model.server.set_params_flat(&sp)?;
            epoch_loss += out.loss;
            batches += 1;
            step += 1;
        }
        let eval = evaluate_split(&model, test, cfg.target_dfil, cfg.seed, Execution::default())?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batches as f64,
            accuracy: eval.accuracy,
            mean_snr_reg: eval.mean_snr_reg,
        });
    }
    Ok((model, metrics))
}

/// Scores for one input together with the noise actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub scores: DVector<f64>,
    pub sigma: f64,
    /// dFIL of the deployed encoder at this input; infinite when noiseless.
    pub realized_dfil: f64,
}

/// Encodes `x` with sigma calibrated to `target_dfil` at `x` and runs the
/// server on the noisy encoding. An infinite target disables the noise.
pub fn infer_split(model: &SplitModel, x: &DVector<f64>, target_dfil: f64, seed: u64) -> Result<Inference> {
    let (z, sigma, realized_dfil) = encode_calibrated(&model.client, x, target_dfil, seed)?;
    Ok(Inference {
        scores: model.server.eval_vec(&z)?,
        sigma,
        realized_dfil,
    })
}

fn encode_calibrated(client: &SmoothMap, x: &DVector<f64>, target_dfil: f64, seed: u64) -> Result<(DVector<f64>, f64, f64)> {
    if target_dfil.is_infinite() && target_dfil > 0.0 {
        return Ok((client.eval_vec(x)?, 0.0, f64::INFINITY));
    }
    if !(target_dfil > 0.0 && target_dfil.is_finite()) {
        return Err(invalid(format!("target dFIL must be positive, got {target_dfil}")));
    }
    let trace = jacobian_trace(client, x)?;
    if trace <= 0.0 {
        return Err(Error::DegenerateEncoder("client Jacobian vanishes at the input".into()));
    }
    let sigma = (trace / (client.input_dim() as f64 * target_dfil)).sqrt();
    let enc = NoisyEncoder::new(client.clone(), sigma, seed)?;
    let realized = trace / (sigma * sigma * client.input_dim() as f64);
    Ok((enc.encode_vec(x, 0)?, sigma, realized))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub accuracy: f64,
    pub mean_snr_reg: f64,
    /// Largest relative gap between realized and target dFIL.
    pub max_dfil_error: f64,
}

fn argmax(v: &DVector<f64>) -> usize {
    v.argmax().0
}

/// Accuracy of per-sample calibrated split inference over `set`. Sample `i`
/// draws its noise from stream `i` of `seed`.
pub fn evaluate_split(model: &SplitModel, set: &LabeledSet, target_dfil: f64, seed: u64, exec: Execution) -> Result<SplitEval> {
    if set.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let rows = exec.try_map_indexed(set.len(), |i| {
        let x = &set.inputs[i];
        let inf = infer_split(model, x, target_dfil, rng::derive_seed(seed, TAG_SPLIT, i as u64))?;
        let z = model.client.eval_vec(x)?;
        let snr = jacobian_trace(&model.client, x)? / z.norm_squared().max(1e-300);
        let err = if target_dfil.is_finite() {
            (inf.realized_dfil - target_dfil).abs() / target_dfil
        } else {
            0.0
        };
        Ok::<_, Error>((argmax(&inf.scores) == set.labels[i], snr, err))
    })?;
    let n = rows.len() as f64;
    Ok(SplitEval {
        accuracy: rows.iter().filter(|r| r.0).count() as f64 / n,
        mean_snr_reg: rows.iter().map(|r| r.1).sum::<f64>() / n,
        max_dfil_error: rows.iter().map(|r| r.2).fold(0.0, f64::max),
    })
}

/// Mean SNR regularizer of the client over `set`.
pub fn mean_snr_regularizer(client: &SmoothMap, set: &LabeledSet) -> Result<f64> {
    let mut total = 0.0;
    for x in &set.inputs {
        let z = client.eval_vec(x)?;
        total += jacobian_trace(client, x)? / z.norm_squared().max(1e-300);
    }
    Ok(total / set.len() as f64)
}

/// Encodings released once at a fixed dFIL, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub encodings: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub target_dfil: f64,
}

pub fn encode_dataset(client: &SmoothMap, set: &LabeledSet, target_dfil: f64, seed: u64) -> Result<EncodedSet> {
    let encodings = Execution::default().try_map_indexed(set.len(), |i| {
        encode_calibrated(client, &set.inputs[i], target_dfil, rng::derive_seed(seed, TAG_SPLIT, i as u64)).map(|r| r.0)
    })?;
    Ok(EncodedSet {
        encodings,
        labels: set.labels.clone(),
        classes: set.classes,
        target_dfil,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            epochs: 20,
            learning_rate: 3e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub head: SmoothMap,
    pub test_accuracy: f64,
    pub client_fingerprint: u64,
}

/// Trains a fresh head on `(encoding, label)` pairs only. The client is
/// borrowed immutably and its fingerprint is checked on the way out.
pub fn finetune_on_encodings(
    frozen_client: &SmoothMap,
    train: &EncodedSet,
    test: &EncodedSet,
    cfg: &HeadConfig,
) -> Result<FinetuneOutcome> {
    if train.encodings.is_empty() || test.encodings.is_empty() {
        return Err(invalid("encoded sets must be non-empty"));
    }
    if cfg.batch_size == 0 || cfg.hidden_width == 0 {
        return Err(invalid("batch size and hidden width must be positive"));
    }
    for e in train.encodings.iter().chain(&test.encodings) {
        ensure_dim("encoding", frozen_client.output_dim(), e.len())?;
    }
    let before = frozen_client.fingerprint();
    let mut r = rng::stream(cfg.seed, TAG_INIT, 3);
    let mut head = init_head(frozen_client.output_dim(), cfg.hidden_width, train.classes, &mut r)?;
    let mut params = head.params_flat();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.encodings.len()).collect();
    let total_steps = (cfg.epochs * order.len().div_ceil(cfg.batch_size)).max(1);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, TAG_BATCH, 1_000_000 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let z = DMatrix::from_columns(&chunk.iter().map(|&i| train.encodings[i].clone()).collect::<Vec<_>>());
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (inputs, logits) = head.forward_batch(z)?;
            let (loss, g) = cross_entropy_grads(&logits, &labels);
            let mut grad = vec![0.0; params.len()];
            head.backprop_batch(&inputs, g, &mut grad);
            let n = chunk.len() as f64;
            grad.iter_mut().for_each(|v| *v /= n);
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("head epoch {epoch}: non-finite loss or gradient")));
            }
            adam.set_lr(cfg.learning_rate * (1.0 - 0.9 * step as f64 / total_steps as f64));
            adam.step(&mut params, &grad);
            head.set_params_flat(&params)?;
            step += 1;
        }
    }
    let scores = head.eval_many(&test.encodings)?;
    let correct = scores.iter().zip(&test.labels).filter(|(s, &l)| argmax(s) == l).count();
    let after = frozen_client.fingerprint();
    if before != after {
        return Err(Error::Training("frozen client changed during finetuning".into()));
    }
    Ok(FinetuneOutcome {
        head,
        test_accuracy: correct as f64 / test.encodings.len() as f64,
        client_fingerprint: after,
    })
}

/// Settings for the full set of trend runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitExperiment {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub head: HeadConfig,
    /// Values of `1/dFIL` for split inference.
    pub one_over_dfil: Vec<f64>,
    /// Values of `1/dFIL` for finetuning on encodings.
    pub finetune_one_over_dfil: Vec<f64>,
    /// `1/dFIL` the frozen client is pretrained at.
    pub pretrain_one_over_dfil: f64,
}

impl Default for SplitExperiment {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            one_over_dfil: vec![1.0, 10.0, 100.0],
            finetune_one_over_dfil: vec![1.0, 10.0, 100.0],
            pretrain_one_over_dfil: 10.0,
        }
    }
}

/// One metrics row. `split` names the run: `baseline` (noiseless), `no-opt`
/// (noiseless training, noisy inference), `opts` (all three optimizations)
/// or `finetune` (head trained on released encodings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub one_over_dfil: f64,
    pub accuracy: f64,
    pub mean_snr_reg: f64,
}

pub fn run_split_experiment(exp: &SplitExperiment) -> Result<Vec<MetricRow>> {
    for v in exp.one_over_dfil.iter().chain(&exp.finetune_one_over_dfil) {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(invalid(format!("1/dFIL grid values must be positive, got {v}")));
        }
    }
    let task = cluster_task(&exp.task)?;
    let (d, c) = (exp.task.dim, exp.task.classes);
    let mut rows = Vec::new();
    let row = |split: &str, epoch: usize, inv: f64, accuracy: f64, snr: f64| MetricRow {
        epoch,
        split: split.to_string(),
        one_over_dfil: inv,
        accuracy,
        mean_snr_reg: snr,
    };

    let plain = TrainConfig {
        target_dfil: f64::INFINITY,
        noise_aware: false,
        compression: None,
        snr_lambda: 0.0,
        ..exp.train
    };
    let (baseline, metrics) = train_split(SplitModel::init(d, c, &plain)?, &task.train, &task.test, &plain)?;
    for m in &metrics {
        rows.push(row("baseline", m.epoch, 0.0, m.accuracy, m.mean_snr_reg));
    }
    for &inv in &exp.one_over_dfil {
        let eval = evaluate_split(&baseline, &task.test, 1.0 / inv, exp.train.seed, Execution::default())?;
        rows.push(row("no-opt", exp.train.epochs, inv, eval.accuracy, eval.mean_snr_reg));
    }
    for &inv in &exp.one_over_dfil {
        let cfg = TrainConfig {
            target_dfil: 1.0 / inv,
            ..exp.train.with_optimizations()
        };
        let (_, metrics) = train_split(SplitModel::init(d, c, &cfg)?, &task.train, &task.test, &cfg)?;
        for m in &metrics {
            rows.push(row("opts", m.epoch, inv, m.accuracy, m.mean_snr_reg));
        }
    }

    let pre_spec = exp.task.pretraining();
    let pre = cluster_task(&pre_spec)?;
    let pre_cfg = TrainConfig {
        target_dfil: 1.0 / exp.pretrain_one_over_dfil,
        ..exp.train.with_optimizations()
    };
    let (pretrained, _) = train_split(
        SplitModel::init(d, pre_spec.classes, &pre_cfg)?,
        &pre.train,
        &pre.test,
        &pre_cfg,
    )?;
    let client = pretrained.client;
    let snr = mean_snr_regularizer(&client, &task.test)?;
    for &inv in &exp.finetune_one_over_dfil {
        let seed = exp.train.seed;
        let train = encode_dataset(&client, &task.train, 1.0 / inv, rng::derive_seed(seed, TAG_NOISE, 10))?;
        let test = encode_dataset(&client, &task.test, 1.0 / inv, rng::derive_seed(seed, TAG_NOISE, 11))?;
        let out = finetune_on_encodings(&client, &train, &test, &exp.head)?;
        rows.push(row("finetune", exp.head.epochs, inv, out.test_accuracy, snr));
    }
    Ok(rows)
}

/// Final-epoch accuracy of `split` at `one_over_dfil`.
pub fn final_accuracy(rows: &[MetricRow], split: &str, one_over_dfil: f64) -> Option<f64> {
    rows.iter()
        .filter(|r| r.split == split && r.one_over_dfil == one_over_dfil)
        .max_by_key(|r| r.epoch)
        .map(|r| r.accuracy)
}
