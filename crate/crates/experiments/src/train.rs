//! Training loops of the three harnesses.
//!
//! Differentiable methods add `lambda * R` to the prediction loss and take
//! one optimizer step per mini-batch. Proximal methods step on the
//! prediction loss alone and then apply the prox to the free gates.

use rand::seq::SliceRandom;
use sparsegrad::autodiff::{concat, Tape, Var};
use sparsegrad::models::channel::GatedChannelNet;
use sparsegrad::models::gcn::GcnModel;
use sparsegrad::models::metrics::{mape, mre_loss, relationship_score};
use sparsegrad::models::wiring::WiringNet;
use sparsegrad::normalization::StrengthMap;
use sparsegrad::optim::{Adam, Optimizer, ParamId, ParamRole, ParamStore, Sgd};
use sparsegrad::proximal::{prox_step, ProxKind, ProxSpec};
use sparsegrad::regularizers::{penalty_per_group, Grouping, RegularizerSpec};
use sparsegrad::Tensor64;

use crate::config::{ExperimentConfig, Harness, Method, RegTarget};
use crate::data::{
    generate_classify, generate_traffic, generate_wiring, read_dataset, rng_for, split_ranges, Dataset, LabeledData,
    LabeledSplit, Stream, TrafficData,
};
use crate::error::{ExperimentError, Result};
use crate::metrics::MetricsRecord;
use crate::model::{build_model, sparsity_report, Model};

/// Outcome of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<MetricsRecord>,
    pub model: Model,
}

impl RunOutput {
    pub fn final_metrics(&self) -> &MetricsRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// The dataset named by the config, generated or read from disk.
pub fn load_data(config: &ExperimentConfig) -> Result<Dataset> {
    if let Some(path) = &config.data.path {
        return Ok(read_dataset(path)?.0);
    }
    let seed = config.data_seed();
    Ok(match config.harness {
        Harness::Channel => Dataset::Labeled(generate_classify(&config.data.classify, seed)?),
        Harness::Wiring => Dataset::Labeled(generate_wiring(&config.data.wiring, seed)?),
        Harness::Gcn => Dataset::Traffic(generate_traffic(&config.data.traffic, seed)?),
    })
}

pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let data = load_data(config)?;
    run_with_data(config, &data)
}

/// Train on an already loaded dataset; sweeps share one dataset this way.
pub fn run_with_data(config: &ExperimentConfig, data: &Dataset) -> Result<RunOutput> {
    config.validate()?;
    let mut model = build_model(config, data)?;
    let records = match (&mut model, data) {
        (Model::Channel(net), Dataset::Labeled(d)) => LabeledTrainer::new(config, d).train(net)?,
        (Model::Wiring(net), Dataset::Labeled(d)) => LabeledTrainer::new(config, d).train(net)?,
        (Model::Gcn(m), Dataset::Traffic(d)) => GcnTrainer::new(config, d)?.train(m)?,
        _ => return Err(ExperimentError::Config("dataset does not match the harness".into())),
    };
    Ok(RunOutput { config: config.clone(), records, model })
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(ExperimentError::NonFiniteLoss { epoch, step, loss })
    }
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // a trailing batch of one has no batch statistics
    order.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

fn prox_kind(method: Method, nonneg: bool) -> Option<ProxKind> {
    match method {
        Method::ProxL1 => Some(ProxKind::L1),
        Method::ProxGroup => Some(ProxKind::GroupL21),
        Method::ProxExclusive if nonneg => Some(ProxKind::ExclusiveNonneg),
        Method::ProxExclusive => Some(ProxKind::ExclusiveL12Linearized),
        _ => None,
    }
}

fn optimizer(harness: Harness) -> Box<dyn Optimizer<f64>> {
    match harness {
        Harness::Channel | Harness::Wiring => Box::new(Sgd::new(0.9)),
        Harness::Gcn => Box::new(Adam::default()),
    }
}

/// `g += decay * w` for weight parameters.
fn add_weight_decay(params: &ParamStore<f64>, grads: &mut [Tensor64], decay: f64) {
    if decay == 0.0 {
        return;
    }
    for (id, g) in params.ids().zip(grads.iter_mut()) {
        if params.role(id) == ParamRole::Weight {
            g.data_mut().iter_mut().zip(params.get(id).data()).for_each(|(g, w)| *g += decay * w);
        }
    }
}

/// What a labeled-data harness exposes to the shared loop.
trait GatedClassifier {
    fn params(&self) -> &ParamStore<f64>;
    fn params_mut(&mut self) -> &mut ParamStore<f64>;
    fn free_gates(&self) -> Vec<ParamId>;
    /// Logits and gate groups on the tape.
    fn step_forward<'t>(&self, tape: &'t Tape<f64>, x: Tensor64) -> Result<StepForward<'t>>;
    /// Receives the batch statistics of the step, if the model keeps any.
    fn after_step(&mut self, _stats: Option<Vec<(Vec<f64>, Vec<f64>)>>) {}
    fn logits(&self, x: &Tensor64) -> Result<Tensor64>;
    fn as_model(&self) -> Model;
}

struct StepForward<'t> {
    logits: Var<'t, f64>,
    gates: Vec<Var<'t, f64>>,
    bound: sparsegrad::optim::Bound<'t, f64>,
    stats: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl GatedClassifier for GatedChannelNet<f64> {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }
    fn free_gates(&self) -> Vec<ParamId> {
        self.free_gate_ids()
    }
    fn step_forward<'t>(&self, tape: &'t Tape<f64>, x: Tensor64) -> Result<StepForward<'t>> {
        let bound = self.params.bind(tape);
        let fwd = self.record(&bound, tape.leaf(x))?;
        let stats = Some(fwd.batch_stats().to_vec());
        Ok(StepForward { logits: fwd.logits, gates: fwd.gates, bound, stats })
    }
    fn after_step(&mut self, stats: Option<Vec<(Vec<f64>, Vec<f64>)>>) {
        if let Some(s) = stats {
            self.fold_batch_stats(&s);
        }
    }
    fn logits(&self, x: &Tensor64) -> Result<Tensor64> {
        Ok(self.freeze()?.forward(x)?)
    }
    fn as_model(&self) -> Model {
        Model::Channel(self.clone())
    }
}

impl GatedClassifier for WiringNet<f64> {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }
    fn free_gates(&self) -> Vec<ParamId> {
        self.free_gate_ids()
    }
    fn step_forward<'t>(&self, tape: &'t Tape<f64>, x: Tensor64) -> Result<StepForward<'t>> {
        let bound = self.params.bind(tape);
        let (logits, gates) = self.record(&bound, tape.leaf(x))?;
        Ok(StepForward { logits, gates, bound, stats: None })
    }
    fn logits(&self, x: &Tensor64) -> Result<Tensor64> {
        Ok(self.predict(x)?)
    }
    fn as_model(&self) -> Model {
        Model::Wiring(self.clone())
    }
}

fn error_rate(logits: &Tensor64, labels: &[usize]) -> f64 {
    let c = logits.cols();
    let wrong = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best != label
        })
        .count();
    wrong as f64 / labels.len().max(1) as f64
}

struct LabeledTrainer<'a> {
    config: &'a ExperimentConfig,
    data: &'a LabeledData,
}

impl<'a> LabeledTrainer<'a> {
    fn new(config: &'a ExperimentConfig, data: &'a LabeledData) -> Self {
        LabeledTrainer { config, data }
    }

    fn train<M: GatedClassifier>(&self, net: &mut M) -> Result<Vec<MetricsRecord>> {
        let config = self.config;
        let epochs = config.epochs_or_default();
        let batch = config.batch_size_or_default();
        let schedule = config.learning_rate_or_default();
        let lambda = config.lambda();
        let decay = config.weight_decay_or_default();
        let regularize = config.method.is_ds() && lambda > 0.0;
        let prox = prox_kind(config.method, false);
        let mut opt = optimizer(config.harness);
        let mut rng = rng_for(config.seed, Stream::Batches);
        let mut records = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let lr = schedule.rate(epoch, epochs);
            let batches = shuffled_batches(self.data.train.len(), batch, &mut rng);
            let mut loss_sum = 0.0;
            for (step, indices) in batches.iter().enumerate() {
                let (x, labels) = self.data.train.batch(indices);
                let tape = Tape::new();
                let fwd = net.step_forward(&tape, x)?;
                let loss = fwd.logits.softmax_cross_entropy(&labels)?;
                let objective = if regularize {
                    let gates = concat(&fwd.gates, 0)?;
                    let groups = match &config.regularizer.grouping {
                        Some(g) => g.clone(),
                        None => group_by_sizes(fwd.gates.iter().map(|g| g.value().numel())),
                    };
                    loss.add(penalty_per_group(&config.regularizer, gates, &groups)?.mul_scalar(lambda))?
                } else {
                    loss
                };
                let value = objective.value().item()?;
                check_finite(value, epoch, step)?;
                loss_sum += loss.value().item()?;
                let mut grads = fwd.bound.grads(&tape.backward(objective)?);
                add_weight_decay(net.params(), &mut grads, decay);
                opt.step(net.params_mut(), &grads, lr, None)?;
                net.after_step(fwd.stats);
                if let Some(kind) = prox {
                    for id in net.free_gates() {
                        let spec = ProxSpec::new(kind, lambda, lr);
                        let next = prox_step(&spec, net.params().get(id))?;
                        net.params_mut().set(id, next)?;
                    }
                }
            }
            records.push(labeled_record(net, self.data, epoch, loss_sum / batches.len().max(1) as f64)?);
        }
        Ok(records)
    }
}

fn labeled_record<M: GatedClassifier>(
    net: &M,
    data: &LabeledData,
    epoch: usize,
    train_loss: f64,
) -> Result<MetricsRecord> {
    let report = sparsity_report(&net.as_model())?;
    let error = |split: &LabeledSplit| -> Result<f64> { Ok(error_rate(&net.logits(&split.x)?, &split.labels)) };
    Ok(MetricsRecord {
        epoch,
        train_loss,
        eval_error: error(&data.eval)?,
        test_error: error(&data.test)?,
        sparsity_rate: report.sparsity_rate,
        nonzero_count: report.nonzero_count,
        total_count: report.total_count,
        remaining_parameters: report.remaining_parameters,
        lr_score_k1: None,
        lr_score_k2: None,
        degenerate_group_count: report.degenerate_group_count,
    })
}

/// Mean softmax cross-entropy of `logits` rows.
fn cross_entropy(logits: &Tensor64, labels: &[usize]) -> f64 {
    let c = logits.cols();
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &label)| {
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - top).exp()).sum::<f64>().ln() + top;
            log_sum - row[label]
        })
        .sum();
    total / labels.len().max(1) as f64
}

/// Metrics of a finished model. The train loss is the prediction loss over
/// the whole training split in evaluation mode.
pub fn evaluate_model(config: &ExperimentConfig, model: &Model, data: &Dataset) -> Result<MetricsRecord> {
    // index of the last training epoch
    let epoch = config.epochs_or_default().saturating_sub(1);
    match (model, data) {
        (Model::Channel(net), Dataset::Labeled(d)) => {
            let loss = cross_entropy(&net.logits(&d.train.x)?, &d.train.labels);
            labeled_record(net, d, epoch, loss)
        }
        (Model::Wiring(net), Dataset::Labeled(d)) => {
            let loss = cross_entropy(&net.logits(&d.train.x)?, &d.train.labels);
            labeled_record(net, d, epoch, loss)
        }
        (Model::Gcn(m), Dataset::Traffic(d)) => {
            let trainer = GcnTrainer::new(config, d)?;
            let loss = traffic_mape(m, &trainer.samples, trainer.samples.train.clone())? / 100.0;
            trainer.record(m, epoch, loss)
        }
        _ => Err(ExperimentError::Config("dataset does not match the harness".into())),
    }
}

/// Consecutive groups with the given sizes.
pub fn group_by_sizes(sizes: impl IntoIterator<Item = usize>) -> Grouping {
    let mut start = 0;
    Grouping(
        sizes
            .into_iter()
            .map(|s| {
                let g = (start..start + s).collect();
                start += s;
                g
            })
            .collect(),
    )
}

/// Windowed samples of a traffic series.
///
/// Node features are the last `window` speeds minus the node's training
/// mean, divided by one training standard deviation. The model predicts the
/// standardized change, so `pred = last + scale * output`.
pub struct TrafficSamples {
    pub nodes: usize,
    pub window: usize,
    pub scale: f64,
    standardized: Vec<f64>,
    series: Tensor64,
    /// Target time of every sample, chronological.
    pub targets: Vec<usize>,
    pub train: std::ops::Range<usize>,
    pub eval: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

impl TrafficSamples {
    pub fn new(data: &TrafficData, window: usize) -> Result<Self> {
        let (steps, nodes) = (data.steps(), data.nodes());
        if steps <= window + 10 {
            return Err(ExperimentError::Config(format!("{steps} steps are too few for window {window}")));
        }
        let targets: Vec<usize> = (window..steps).collect();
        let [train, eval, test] = split_ranges(targets.len());
        // statistics over the steps seen by training samples only
        let seen = targets[train.end - 1] + 1;
        let s = data.series.data();
        let means: Vec<f64> =
            (0..nodes).map(|i| (0..seen).map(|t| s[t * nodes + i]).sum::<f64>() / seen as f64).collect();
        let var = (0..seen)
            .flat_map(|t| (0..nodes).map(move |i| (t, i)))
            .map(|(t, i)| (s[t * nodes + i] - means[i]).powi(2))
            .sum::<f64>()
            / (seen * nodes) as f64;
        let scale = var.sqrt().max(1e-12);
        let standardized = s.iter().enumerate().map(|(k, v)| (v - means[k % nodes]) / scale).collect();
        Ok(TrafficSamples {
            nodes,
            window,
            scale,
            standardized,
            series: data.series.clone(),
            targets,
            train,
            eval,
            test,
        })
    }

    /// Features `[len * nodes, window]`, last speeds and targets `[len * nodes]`.
    pub fn batch(&self, samples: &[usize]) -> (Tensor64, Tensor64, Tensor64) {
        let (n, w) = (self.nodes, self.window);
        let mut x = Vec::with_capacity(samples.len() * n * w);
        let mut last = Vec::with_capacity(samples.len() * n);
        let mut target = Vec::with_capacity(samples.len() * n);
        for &k in samples {
            let t = self.targets[k];
            for i in 0..n {
                x.extend((t - w..t).map(|s| self.standardized[s * n + i]));
                last.push(self.series.at2(t - 1, i));
                target.push(self.series.at2(t, i));
            }
        }
        let rows = samples.len() * n;
        (
            Tensor64::new(vec![rows, w], x).expect("finite features"),
            Tensor64::new(vec![rows], last).expect("finite speeds"),
            Tensor64::new(vec![rows], target).expect("finite speeds"),
        )
    }
}

/// Samples per evaluation chunk.
const EVAL_CHUNK: usize = 64;

/// MAPE of `model` over the sample range.
pub fn traffic_mape(model: &GcnModel<f64>, samples: &TrafficSamples, range: std::ops::Range<usize>) -> Result<f64> {
    let idx: Vec<usize> = range.collect();
    let mut preds = Vec::with_capacity(idx.len() * samples.nodes);
    let mut targets = Vec::with_capacity(idx.len() * samples.nodes);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, last, target) = samples.batch(chunk);
        let out = model.predict(&x)?;
        preds.extend(out.data().iter().zip(last.data()).map(|(o, l)| l + samples.scale * o));
        targets.extend_from_slice(target.data());
    }
    let n = preds.len();
    Ok(mape(&Tensor64::new(vec![n], preds)?, &Tensor64::new(vec![n], targets)?)?)
}

struct GcnTrainer<'a> {
    config: &'a ExperimentConfig,
    data: &'a TrafficData,
    samples: TrafficSamples,
    rows: Grouping,
    cols: Grouping,
}

impl<'a> GcnTrainer<'a> {
    fn new(config: &'a ExperimentConfig, data: &'a TrafficData) -> Result<Self> {
        let samples = TrafficSamples::new(data, config.model.gcn.window)?;
        let (rows, cols) = Grouping::rows_and_cols(data.nodes());
        Ok(GcnTrainer { config, data, samples, rows, cols })
    }

    /// `lambda / 2 * sum_i [R(A_i,:) + R(A_:,i)]`.
    fn penalty<'t>(&self, spec: &RegularizerSpec, a: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let rows = penalty_per_group(spec, a, &self.rows)?;
        let cols = penalty_per_group(spec, a, &self.cols)?;
        Ok(rows.add(cols)?.mul_scalar(0.5 * spec.lambda))
    }

    fn record(&self, model: &GcnModel<f64>, epoch: usize, train_loss: f64) -> Result<MetricsRecord> {
        let report = sparsity_report(&Model::Gcn(model.clone()))?;
        let a = model.adjacency()?;
        Ok(MetricsRecord {
            epoch,
            train_loss,
            eval_error: traffic_mape(model, &self.samples, self.samples.eval.clone())?,
            test_error: traffic_mape(model, &self.samples, self.samples.test.clone())?,
            sparsity_rate: report.sparsity_rate,
            nonzero_count: report.nonzero_count,
            total_count: report.total_count,
            remaining_parameters: report.remaining_parameters,
            lr_score_k1: Some(relationship_score(&a, 1, &self.data.geodesic)?),
            lr_score_k2: Some(relationship_score(&a, 2, &self.data.geodesic)?),
            degenerate_group_count: report.degenerate_group_count,
        })
    }

    fn train(&self, model: &mut GcnModel<f64>) -> Result<Vec<MetricsRecord>> {
        let config = self.config;
        let gcn = &config.model.gcn;
        let epochs = config.epochs_or_default();
        let batch = config.batch_size_or_default();
        let schedule = config.learning_rate_or_default();
        let lambda = config.lambda();
        let decay = config.weight_decay_or_default();
        let regularize = config.method.is_ds() && lambda > 0.0;
        let prox = prox_kind(config.method, true);
        let clamp_alpha = prox.is_some() || (config.method.is_ds() && gcn.strength == StrengthMap::Linear);
        let mut opt = optimizer(config.harness);
        let mut rng = rng_for(config.seed, Stream::Batches);
        let mut records = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let lr = schedule.rate(epoch, epochs);
            let batches = shuffled_batches(self.samples.train.len(), batch, &mut rng);
            let mut loss_sum = 0.0;
            for (step, indices) in batches.iter().enumerate() {
                let (x, last, target) = self.samples.batch(indices);
                let tape = Tape::new();
                let bound = model.params.bind(&tape);
                let fwd = model.record(&bound, &tape, tape.leaf(x))?;
                let rows = fwd.output.value().numel();
                let pred = fwd.output.reshape(&[rows])?.mul_scalar(self.samples.scale).add(tape.leaf(last))?;
                let loss = mre_loss(pred, &target)?;
                let objective = if regularize {
                    let reg_input = match gcn.reg_target {
                        RegTarget::Normalized => fwd.adjacency,
                        RegTarget::Thresholded => fwd.unnormalized,
                        RegTarget::Alpha => bound.var(model.alpha_id().expect("learned adjacency")),
                    };
                    loss.add(self.penalty(&config.regularizer, reg_input)?)?
                } else {
                    loss
                };
                let value = objective.value().item()?;
                check_finite(value, epoch, step)?;
                loss_sum += loss.value().item()?;
                let mut grads = bound.grads(&tape.backward(objective)?);
                add_weight_decay(&model.params, &mut grads, decay);
                opt.step(&mut model.params, &grads, lr, None)?;
                if let Some(id) = model.alpha_id().filter(|_| clamp_alpha) {
                    let mut alpha = model.params.get(id).map(|v| v.max(0.0));
                    if let Some(kind) = prox {
                        for groups in [&self.rows, &self.cols] {
                            let spec = ProxSpec::new(kind, lambda, lr).with_grouping(groups.clone());
                            alpha = prox_step(&spec, &alpha)?;
                        }
                    }
                    model.params.set(id, alpha)?;
                }
            }
            records.push(self.record(model, epoch, loss_sum / batches.len().max(1) as f64)?);
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrafficParams;
    use sparsegrad::regularizers::RegularizerKind;

    #[test]
    fn traffic_samples_reconstruct_speeds() {
        let d = generate_traffic(&TrafficParams { nodes: 5, steps: 200, ..Default::default() }, 2).unwrap();
        let s = TrafficSamples::new(&d, 4).unwrap();
        assert_eq!(s.targets.len(), 196);
        let (x, last, target) = s.batch(&[0, 10]);
        assert_eq!(x.shape(), &[10, 4]);
        assert_eq!(target.data()[0], d.series.at2(4, 0));
        assert_eq!(last.data()[7], d.series.at2(13, 2));
        // the last feature is the standardized last speed
        let back = x.at2(7, 3) * s.scale;
        let shifted = last.data()[7] - back;
        let x2 = s.batch(&[11]).0;
        assert!((d.series.at2(13, 2) - (x2.at2(2, 2) * s.scale + shifted)).abs() < 1e-9);
    }

    #[test]
    fn channel_run_is_deterministic() {
        let mut c =
            ExperimentConfig::new(Harness::Channel, Method::DsExact, RegularizerSpec::new(RegularizerKind::L1, 0.01));
        c.epochs = Some(2);
        c.data.classify.samples = 200;
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn zero_lambda_prox_equals_unregularized_free_gates() {
        let mut c =
            ExperimentConfig::new(Harness::Wiring, Method::ProxL1, RegularizerSpec::new(RegularizerKind::L1, 0.0));
        c.epochs = Some(2);
        c.data.wiring.samples = 200;
        let prox = run(&c).unwrap();
        c.method = Method::DenseBaseline;
        let plain = run(&c).unwrap();
        assert_eq!(prox.records, plain.records);
        assert_eq!(prox.model.params(), plain.model.params());
    }
}
