//! ADAM training loops for the three architectures and the action-error
//! metrics.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{make_windows, shuffled_indices, Dataset, Episode, StepRecord, Window};
use crate::policy::{
    cnn_graph, frame_inputs, hist_features, kmeans_assign, kmeans_fit, rcnn_graph, Bound,
    ClusterModel, CnnParams, Model, ParamSet, PolicyError, RcnnParams, LSTM_HIDDEN,
};
use crate::tensor::{Adam, AdamConfig, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("cluster {0} has no records")]
    EmptyPartition(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cnn,
    Hcnn,
    Rcnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::Hcnn, ModelKind::Rcnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Hcnn => "hcnn",
            ModelKind::Rcnn => "rcnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Reduced budgets for a single-machine run.
    pub fn desk_iterations(self) -> usize {
        match self {
            ModelKind::Cnn => 20_000,
            ModelKind::Hcnn => 20_000,
            ModelKind::Rcnn => 2_000,
        }
    }

    /// Budgets of the original experiments.
    pub fn paper_scale_iterations(self) -> usize {
        match self {
            ModelKind::Cnn => 1_000_000,
            ModelKind::Hcnn => 150_000,
            ModelKind::Rcnn => 3_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub max_iterations: usize,
    /// Records per CNN / H-CNN minibatch.
    pub batch_size: usize,
    /// Windows per R-CNN minibatch.
    pub windows_per_batch: usize,
    pub window: usize,
    pub adam: AdamConfig,
    pub clusters: usize,
    pub seed: u64,
    /// Curve sampling period in iterations; 0 records only the endpoints.
    pub eval_every: usize,
    /// Records used for the curve's error estimates.
    pub eval_subsample: usize,
    /// Stop early once a curve point's train E_rms falls below this.
    pub stop_below: Option<f64>,
}

impl TrainConfig {
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            kind,
            max_iterations: kind.desk_iterations(),
            batch_size: 32,
            windows_per_batch: 1,
            window: 100,
            adam: AdamConfig::default(),
            clusters: 4,
            seed: 0,
            eval_every: 1000,
            eval_subsample: 1000,
            stop_below: None,
        }
    }

    pub fn paper_scale(kind: ModelKind) -> Self {
        Self {
            max_iterations: kind.paper_scale_iterations(),
            ..Self::desk(kind)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if self.batch_size == 0 || self.windows_per_batch == 0 || self.window == 0 {
            return bad("batch sizes and window must be positive");
        }
        if self.kind == ModelKind::Hcnn && self.clusters == 0 {
            return bad("clusters must be positive");
        }
        Ok(())
    }

    /// One `key=value` per field, used for logs and file headers.
    pub fn describe(&self) -> String {
        format!(
            "model={} iterations={} batch_size={} windows_per_batch={} window={} lr={} beta1={} beta2={} epsilon={} clusters={} seed={} eval_every={} eval_subsample={} stop_below={}",
            self.kind.name(),
            self.max_iterations,
            self.batch_size,
            self.windows_per_batch,
            self.window,
            self.adam.lr,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.epsilon,
            self.clusters,
            self.seed,
            self.eval_every,
            self.eval_subsample,
            self.stop_below.map(|v| v.to_string()).unwrap_or_else(|| "none".into())
        )
    }
}

/// Root-mean-square and mean Euclidean action error.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ErrorStats {
    pub e_rms: f64,
    pub e_mean: f64,
    pub n: usize,
}

impl ErrorStats {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a [f32; 3], &'a [f32; 3])>) -> Self {
        let (mut sq, mut lin, mut n) = (0.0f64, 0.0f64, 0usize);
        for (p, t) in pairs {
            let d2: f64 = p
                .iter()
                .zip(t)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            sq += d2;
            lin += d2.sqrt();
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            e_rms: (sq / n as f64).sqrt(),
            e_mean: lin / n as f64,
            n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Mean minibatch MSE since the previous point (the current batch at 0).
    pub loss: f64,
    pub train_e_rms: f64,
    pub test_e_rms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainReport {
    pub model: String,
    pub iterations: usize,
    pub curve: Vec<CurvePoint>,
    pub train: ErrorStats,
    pub test: Option<ErrorStats>,
    pub wall_seconds: f64,
    /// H-CNN: records per cluster and iterations given to each member.
    pub partition_sizes: Vec<usize>,
    pub member_iterations: Vec<usize>,
    /// H-CNN: minibatch records a member drew from outside its cluster.
    pub foreign_records_seen: usize,
    /// H-CNN: `[cluster][fsm label]` record counts.
    pub contingency: Vec<[usize; 4]>,
}

impl TrainReport {
    pub fn to_csv(&self, header: &str) -> String {
        let mut s = String::new();
        for line in header.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("iteration,loss,train_E_rms,test_E_rms\n");
        for p in &self.curve {
            let test = p.test_e_rms.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.6},{:.6},{}", p.iteration, p.loss, p.train_e_rms, test);
        }
        s
    }

    pub fn contingency_table(&self) -> String {
        let mut s = String::from("cluster  search    goto   align dribble\n");
        for (j, row) in self.contingency.iter().enumerate() {
            let _ = writeln!(s, "{j:>7} {:>7} {:>7} {:>7} {:>7}", row[0], row[1], row[2], row[3]);
        }
        s
    }
}

fn targets(records: &[&StepRecord]) -> Vec<f32> {
    records.iter().flat_map(|r| r.action).collect()
}

const MICRO_BATCH: usize = 4;

/// Mean loss of one minibatch; gradients are accumulated into `params`.
///
/// The batch is processed in small slices so the activations stay in cache;
/// each slice's loss is weighted by its share of the batch.
fn cnn_batch_grad(params: &mut CnnParams, batch: &[&StepRecord]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for part in batch.chunks(MICRO_BATCH) {
        let weight = part.len() as f32 / batch.len() as f32;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, params, true);
        let tops: Vec<_> = part.iter().map(|r| &r.top).collect();
        let bottoms: Vec<_> = part.iter().map(|r| &r.bottom).collect();
        let (t, b) = frame_inputs(&mut tape, &tops, &bottoms)?;
        let out = cnn_graph(&mut tape, &bound, t, b)?;
        let target = tape.constant(&[part.len(), 3], targets(part))?;
        let loss = tape.mse_loss(out, target)?;
        total += tape.value(loss)[0] as f64 * weight as f64;
        let scaled = tape.scale(loss, weight);
        tape.backward(scaled)?;
        bound.accumulate_grads(&tape, params)?;
    }
    Ok(total)
}

/// Mean loss over one window from zero hidden state; gradients scaled by
/// `weight` are accumulated into `params`.
fn rcnn_window_grad(params: &mut RcnnParams, records: &[&StepRecord], weight: f32) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, params, true);
    let tops: Vec<_> = records.iter().map(|r| &r.top).collect();
    let bottoms: Vec<_> = records.iter().map(|r| &r.bottom).collect();
    let (t, b) = frame_inputs(&mut tape, &tops, &bottoms)?;
    let out = rcnn_graph(&mut tape, &bound, t, b)?;
    let target = tape.constant(&[records.len(), 3], targets(records))?;
    let loss = tape.mse_loss(out, target)?;
    let value = tape.value(loss)[0] as f64;
    let scaled = tape.scale(loss, weight);
    tape.backward(scaled)?;
    bound.accumulate_grads(&tape, params)?;
    Ok(value)
}

fn adam_step<P: ParamSet<f32>>(adam: &mut Adam<f32>, params: &mut P) -> Result<(), TrainError> {
    let mut refs: Vec<_> = params.named_mut().into_iter().map(|(_, t)| t).collect();
    adam.step(&mut refs)?;
    params.zero_grad();
    Ok(())
}

const PREDICT_CHUNK: usize = 64;

/// Raw CNN predictions for the given records.
pub fn cnn_predict(params: &CnnParams, records: &[&StepRecord]) -> Result<Vec<[f32; 3]>, PolicyError> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(PREDICT_CHUNK) {
        let tops: Vec<_> = chunk.iter().map(|r| &r.top).collect();
        let bottoms: Vec<_> = chunk.iter().map(|r| &r.bottom).collect();
        out.extend(crate::policy::cnn_forward_batch(params, &tops, &bottoms)?);
    }
    Ok(out)
}

fn hcnn_predict(model: &ClusterModel, records: &[&StepRecord]) -> Result<Vec<[f32; 3]>, PolicyError> {
    let mut out = vec![[0.0; 3]; records.len()];
    let assign: Vec<usize> = records
        .iter()
        .map(|r| model.dispatch(&r.top, &r.bottom))
        .collect();
    for (j, member) in model.members.iter().enumerate() {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| assign[i] == j).collect();
        let sel: Vec<&StepRecord> = idx.iter().map(|&i| records[i]).collect();
        for (i, p) in idx.into_iter().zip(cnn_predict(member, &sel)?) {
            out[i] = p;
        }
    }
    if assign.iter().any(|&j| j >= model.members.len()) {
        return Err(PolicyError::MissingMember {
            k: model.k(),
            members: model.members.len(),
        });
    }
    Ok(out)
}

/// Runs the recurrent model over consecutive records, starting from zero
/// hidden state and carrying it across the whole sequence.
pub fn rcnn_predict_sequence(params: &RcnnParams, records: &[&StepRecord]) -> Result<Vec<[f32; 3]>, PolicyError> {
    let mut h = vec![0.0f32; LSTM_HIDDEN];
    let mut c = vec![0.0f32; LSTM_HIDDEN];
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(PREDICT_CHUNK) {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, params, false);
        let tops: Vec<_> = chunk.iter().map(|r| &r.top).collect();
        let bottoms: Vec<_> = chunk.iter().map(|r| &r.bottom).collect();
        let (t, b) = frame_inputs(&mut tape, &tops, &bottoms)?;
        let f = crate::policy::trunk_forward(&mut tape, &bound.vars[..8], t, b)?;
        let h0 = tape.constant(&[1, LSTM_HIDDEN], h)?;
        let c0 = tape.constant(&[1, LSTM_HIDDEN], c)?;
        let (y, h1, c1) = crate::policy::rcnn_sequence(&mut tape, &bound, f, h0, c0)?;
        h = tape.value(h1).to_vec();
        c = tape.value(c1).to_vec();
        out.extend(tape.value(y).chunks_exact(3).map(|v| [v[0], v[1], v[2]]));
    }
    Ok(out)
}

/// Predictions for every step of an episode; the recurrent model is replayed
/// statefully from the episode start.
pub fn predict_episode(model: &Model, ep: &Episode) -> Result<Vec<[f32; 3]>, PolicyError> {
    let recs: Vec<&StepRecord> = ep.steps.iter().collect();
    match model {
        Model::Cnn(p) => cnn_predict(p, &recs),
        Model::Hcnn(m) => hcnn_predict(m, &recs),
        Model::Rcnn(p) => rcnn_predict_sequence(p, &recs),
    }
}

/// `(E_rms, E_mean)` of a model's predictions against the recorded actions.
pub fn eval_error(model: &Model, episodes: &[Episode]) -> Result<ErrorStats, PolicyError> {
    let preds: Vec<Vec<[f32; 3]>> = episodes
        .par_iter()
        .map(|ep| predict_episode(model, ep))
        .collect::<Result<_, _>>()?;
    Ok(ErrorStats::from_pairs(
        preds
            .iter()
            .flatten()
            .zip(episodes.iter().flat_map(|e| e.steps.iter().map(|s| &s.action))),
    ))
}

/// Fixed record sample for curve estimates.
fn subsample(index: &[(usize, usize)], n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut order = shuffled_indices(index.len(), seed);
    order.truncate(n.min(index.len()));
    order.sort_unstable();
    order.into_iter().map(|i| index[i]).collect()
}

fn cnn_subsample_error(params: &CnnParams, data: &Dataset, sample: &[(usize, usize)]) -> Result<f64, TrainError> {
    let recs: Vec<&StepRecord> = sample.iter().map(|&at| data.record(at)).collect();
    let preds = cnn_predict(params, &recs)?;
    Ok(ErrorStats::from_pairs(preds.iter().zip(recs.iter().map(|r| &r.action))).e_rms)
}

struct Curve<'a> {
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    train_sample: Vec<(usize, usize)>,
    test_sample: Vec<(usize, usize)>,
    every: usize,
    points: Vec<CurvePoint>,
    loss_sum: f64,
    loss_n: usize,
}

impl<'a> Curve<'a> {
    fn new(train: &'a Dataset, test: Option<&'a Dataset>, pool: &[(usize, usize)], cfg: &TrainConfig) -> Self {
        let test_sample = test
            .map(|t| subsample(&t.index(), cfg.eval_subsample, cfg.seed ^ 0x7e57))
            .unwrap_or_default();
        Self {
            train,
            test,
            train_sample: subsample(pool, cfg.eval_subsample, cfg.seed ^ 0x7a1),
            test_sample,
            every: cfg.eval_every,
            points: vec![],
            loss_sum: 0.0,
            loss_n: 0,
        }
    }

    fn due(&self, iteration: usize, last: usize) -> bool {
        iteration == 0 || iteration == last || (self.every > 0 && iteration % self.every == 0)
    }

    fn below(&self, target: Option<f64>) -> bool {
        match (target, self.points.last()) {
            (Some(t), Some(p)) => p.train_e_rms < t,
            _ => false,
        }
    }

    fn add_loss(&mut self, loss: f64) {
        self.loss_sum += loss;
        self.loss_n += 1;
    }

    fn record_cnn(&mut self, iteration: usize, params: &CnnParams) -> Result<(), TrainError> {
        let train = cnn_subsample_error(params, self.train, &self.train_sample)?;
        let test = match self.test {
            Some(t) => Some(cnn_subsample_error(params, t, &self.test_sample)?),
            None => None,
        };
        self.push(iteration, train, test);
        Ok(())
    }

    fn push(&mut self, iteration: usize, train: f64, test: Option<f64>) {
        let loss = self.loss_sum / self.loss_n.max(1) as f64;
        self.points.push(CurvePoint {
            iteration,
            loss,
            train_e_rms: train,
            test_e_rms: test,
        });
        self.loss_sum = 0.0;
        self.loss_n = 0;
    }
}

/// Endless seeded reshuffled passes over a record pool.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: shuffled_indices(n, seed),
            pos: 0,
            epoch: 0,
            seed,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.order = shuffled_indices(self.order.len(), self.seed.wrapping_add(self.epoch));
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains a CNN on the records in `pool`. `allowed` flags records the
/// caller permits; draws outside it are counted, never prevented.
fn fit_cnn(
    train: &Dataset,
    test: Option<&Dataset>,
    pool: &[(usize, usize)],
    iterations: usize,
    cfg: &TrainConfig,
    seed: u64,
    allowed: &dyn Fn((usize, usize)) -> bool,
) -> Result<(CnnParams, Vec<CurvePoint>, usize, usize), TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = CnnParams::init(&mut rng);
    let mut adam = Adam::new(cfg.adam, params.named().into_iter().map(|(_, t)| t));
    let mut sampler = Sampler::new(pool.len(), seed);
    let mut curve = Curve::new(train, test, pool, &TrainConfig { seed, ..cfg.clone() });
    let mut foreign = 0;
    let mut used = iterations;
    for it in 0..iterations {
        let batch: Vec<&StepRecord> = (0..cfg.batch_size)
            .map(|_| {
                let at = pool[sampler.next()];
                if !allowed(at) {
                    foreign += 1;
                }
                train.record(at)
            })
            .collect();
        let loss = cnn_batch_grad(&mut params, &batch)?;
        if it == 0 {
            curve.add_loss(loss);
            curve.record_cnn(0, &params)?;
        }
        curve.add_loss(loss);
        adam_step(&mut adam, &mut params)?;
        if curve.due(it + 1, iterations) {
            curve.record_cnn(it + 1, &params)?;
            if curve.below(cfg.stop_below) {
                used = it + 1;
                break;
            }
        }
    }
    Ok((params, curve.points, foreign, used))
}

fn finish(model: &Model, train: &Dataset, test: Option<&Dataset>, report: &mut TrainReport) -> Result<(), TrainError> {
    report.train = eval_error(model, &train.episodes)?;
    report.test = match test {
        Some(t) => Some(eval_error(model, &t.episodes)?),
        None => None,
    };
    Ok(())
}

/// Minibatch ADAM on uniformly shuffled records.
pub fn train_cnn(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(CnnParams, TrainReport), TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = train.index();
    if pool.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (params, curve, _, used) = fit_cnn(train, test, &pool, cfg.max_iterations, cfg, cfg.seed, &|_| true)?;
    let model = Model::Cnn(params);
    let mut report = TrainReport {
        model: "cnn".into(),
        iterations: used,
        curve,
        ..Default::default()
    };
    finish(&model, train, test, &mut report)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    let Model::Cnn(params) = model else { unreachable!() };
    Ok((params, report))
}

/// Iterations per member, proportional to partition size, at least one.
pub fn split_budget(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    sizes
        .iter()
        .map(|&s| ((total as f64 * s as f64 / n.max(1) as f64).round() as usize).max(1))
        .collect()
}

/// Clusters the records by histogram features and trains one CNN per
/// cluster on that cluster's records only.
pub fn train_hcnn(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(ClusterModel, TrainReport), TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let index = train.index();
    if index.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let features: Vec<Vec<f64>> = index
        .iter()
        .map(|&at| {
            let r = train.record(at);
            hist_features(&r.top, &r.bottom).to_vec()
        })
        .collect();
    let fit = kmeans_fit(&features, cfg.clusters, cfg.seed)?;
    let k = cfg.clusters;
    let assign: Vec<usize> = features
        .iter()
        .map(|f| kmeans_assign(&fit.centroids, f))
        .collect();
    let mut parts: Vec<Vec<(usize, usize)>> = vec![vec![]; k];
    let mut contingency = vec![[0usize; 4]; k];
    for (&at, &j) in index.iter().zip(&assign) {
        parts[j].push(at);
        let label = train.record(at).fsm_label as usize;
        if label < 4 {
            contingency[j][label] += 1;
        }
    }
    if let Some(j) = parts.iter().position(|p| p.is_empty()) {
        return Err(TrainError::EmptyPartition(j));
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
    let budgets = split_budget(cfg.max_iterations, &sizes);
    let cluster_of: std::collections::HashMap<(usize, usize), usize> =
        index.iter().copied().zip(assign.iter().copied()).collect();
    let mut members = Vec::with_capacity(k);
    let mut foreign = 0;
    let mut curve = vec![];
    let mut used = Vec::with_capacity(k);
    for j in 0..k {
        let seed = cfg.seed.wrapping_add(j as u64);
        let allowed = |at: (usize, usize)| cluster_of[&at] == j;
        let (p, c, f, u) = fit_cnn(train, test, &parts[j], budgets[j], cfg, seed, &allowed)?;
        used.push(u);
        if j == 0 {
            curve = c;
        }
        foreign += f;
        members.push(p);
    }
    let model = Model::Hcnn(ClusterModel {
        centroids: fit.centroids,
        members,
    });
    let mut report = TrainReport {
        model: "hcnn".into(),
        iterations: used.iter().sum(),
        curve,
        partition_sizes: sizes,
        member_iterations: used,
        foreign_records_seen: foreign,
        contingency,
        ..Default::default()
    };
    finish(&model, train, test, &mut report)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    let Model::Hcnn(m) = model else { unreachable!() };
    Ok((m, report))
}

/// All `(episode, window)` pairs with stride 1.
pub fn dataset_windows(data: &Dataset, window: usize) -> Vec<(usize, Window)> {
    data.episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| make_windows(ep.steps.len(), window, 1).into_iter().map(move |w| (e, w)))
        .collect()
}

fn window_records<'a>(data: &'a Dataset, (e, w): &(usize, Window)) -> Vec<&'a StepRecord> {
    w.indices().map(|i| &data.episodes[*e].steps[i]).collect()
}

fn rcnn_window_error(params: &RcnnParams, data: &Dataset, windows: &[(usize, Window)]) -> Result<f64, TrainError> {
    let mut preds = vec![];
    let mut truth = vec![];
    for w in windows {
        let recs = window_records(data, w);
        preds.extend(rcnn_predict_sequence(params, &recs)?);
        truth.extend(recs.iter().map(|r| r.action));
    }
    Ok(ErrorStats::from_pairs(preds.iter().zip(&truth)).e_rms)
}

fn sample_windows(all: &[(usize, Window)], n: usize, seed: u64) -> Vec<(usize, Window)> {
    shuffled_indices(all.len(), seed)
        .into_iter()
        .take(n)
        .map(|i| all[i])
        .collect()
}

/// Truncated BPTT over randomly drawn windows, hidden state zero at each
/// window start, loss averaged over every step of the window.
pub fn train_rcnn(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(RcnnParams, TrainReport), TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let windows = dataset_windows(train, cfg.window);
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = RcnnParams::init(&mut rng);
    let mut adam = Adam::new(cfg.adam, params.named().into_iter().map(|(_, t)| t));
    let mut sampler = Sampler::new(windows.len(), cfg.seed);

    let n_eval = cfg.eval_subsample.div_ceil(cfg.window).max(1);
    let train_eval = sample_windows(&windows, n_eval, cfg.seed ^ 0x7a1);
    let test_eval = test
        .map(|t| sample_windows(&dataset_windows(t, cfg.window), n_eval, cfg.seed ^ 0x7e57))
        .unwrap_or_default();
    let mut curve = Curve::new(train, test, &[], cfg);
    let record = |curve: &mut Curve, it: usize, p: &RcnnParams| -> Result<(), TrainError> {
        let tr = rcnn_window_error(p, train, &train_eval)?;
        let te = match test {
            Some(t) => Some(rcnn_window_error(p, t, &test_eval)?),
            None => None,
        };
        curve.push(it, tr, te);
        Ok(())
    };
    let weight = 1.0 / cfg.windows_per_batch as f32;
    let mut used = cfg.max_iterations;
    for it in 0..cfg.max_iterations {
        let mut loss = 0.0;
        for _ in 0..cfg.windows_per_batch {
            let recs = window_records(train, &windows[sampler.next()]);
            loss += rcnn_window_grad(&mut params, &recs, weight)? * weight as f64;
        }
        if it == 0 {
            curve.add_loss(loss);
            record(&mut curve, 0, &params)?;
        }
        curve.add_loss(loss);
        adam_step(&mut adam, &mut params)?;
        if curve.due(it + 1, cfg.max_iterations) {
            record(&mut curve, it + 1, &params)?;
            if curve.below(cfg.stop_below) {
                used = it + 1;
                break;
            }
        }
    }
    let points = std::mem::take(&mut curve.points);
    let model = Model::Rcnn(params);
    let mut report = TrainReport {
        model: "rcnn".into(),
        iterations: used,
        curve: points,
        ..Default::default()
    };
    finish(&model, train, test, &mut report)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    let Model::Rcnn(params) = model else { unreachable!() };
    Ok((params, report))
}

/// Dispatches on `cfg.kind`.
pub fn train_model(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(Model, TrainReport), TrainError> {
    Ok(match cfg.kind {
        ModelKind::Cnn => {
            let (p, r) = train_cnn(train, test, cfg)?;
            (Model::Cnn(p), r)
        }
        ModelKind::Hcnn => {
            let (m, r) = train_hcnn(train, test, cfg)?;
            (Model::Hcnn(m), r)
        }
        ModelKind::Rcnn => {
            let (p, r) = train_rcnn(train, test, cfg)?;
            (Model::Rcnn(p), r)
        }
    })
}

/// A freshly initialised model of the given kind, for baselines.
pub fn untrained_model(kind: ModelKind, seed: u64, clusters: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        ModelKind::Cnn => Model::Cnn(CnnParams::init(&mut rng)),
        ModelKind::Rcnn => Model::Rcnn(RcnnParams::init(&mut rng)),
        ModelKind::Hcnn => Model::Hcnn(ClusterModel {
            centroids: (0..clusters)
                .map(|_| (0..10).map(|_| rng.gen::<f64>()).collect())
                .collect(),
            members: (0..clusters).map(|_| CnnParams::init(&mut rng)).collect(),
        }),
    }
}

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub iterations: usize,
    pub train: ErrorStats,
    pub test: Option<ErrorStats>,
    pub goals: Option<usize>,
    pub episodes: usize,
}

/// Reference rows from the original experiments: iterations, train and
/// test RMS error, goals out of 20.
pub const REFERENCE_ROWS: [(&str, usize, f64, f64, usize); 3] = [
    ("CNN", 1_000_000, 0.12, 0.16, 3),
    ("H-CNN", 150_000, 0.15, 0.17, 3),
    ("R-CNN", 3_000, 0.036, 0.14, 4),
];

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>10} {:>10} {:>10} {:>11} {:>11} {:>8}",
        "model", "iterations", "train_rms", "test_rms", "train_mean", "test_mean", "goals"
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for r in rows {
        let goals = r
            .goals
            .map(|g| format!("{g}/{}", r.episodes))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>10.4} {:>10} {:>11.4} {:>11} {:>8}",
            r.model,
            r.iterations,
            r.train.e_rms,
            opt(r.test.map(|t| t.e_rms)),
            r.train.e_mean,
            opt(r.test.map(|t| t.e_mean)),
            goals
        );
    }
    for (name, it, tr, te, g) in REFERENCE_ROWS {
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>10.4} {:>10.4} {:>11} {:>11} {:>8}",
            format!("ref {name}"),
            it,
            tr,
            te,
            "-",
            "-",
            format!("{g}/20")
        );
    }
    s
}
