use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::dataset::{train_len, StreamDataset};
use super::eval::{evaluate, EvalOutcome};
use super::report::{AvgReport, PruneRecord, WindowReport, REPORT_SCHEMA_VERSION};
use super::schedule::{EarlyStopping, WindowSchedule};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{count_tensors, XsmoeModel};
use crate::numerics::{rng_for, Adam, AdamConfig, Graph};
use crate::seqrec::{batch_loss, InBatchCandidates, PopularityTable};

/// Hooks into a running stream. Both default to no-ops.
pub trait StreamObserver {
    /// Called right after the model grew for `window`, before any training.
    fn after_expand(&mut self, _window: usize, _model: &XsmoeModel) -> Result<()> {
        Ok(())
    }

    /// Called once per test window after pruning, with the training RNG.
    fn after_window(&mut self, _report: &WindowReport, _model: &XsmoeModel, _rng: &ChaCha8Rng) -> Result<()> {
        Ok(())
    }
}

impl StreamObserver for () {}

/// Summary of training on one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTraining {
    pub epochs: usize,
    /// 1-based epoch whose weights were kept; 0 without validation.
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    /// No validation split was available, so early stopping was skipped.
    pub degenerate: bool,
    pub train_examples: usize,
    pub last_loss: f32,
}

#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub warmup: WindowTraining,
    pub reports: Vec<WindowReport>,
    pub avg: AvgReport,
    pub model: XsmoeModel,
}

/// Sorted distinct items of a batch's prefixes and targets.
fn batch_items(prefixes: &[Vec<usize>], targets: &[usize]) -> Vec<usize> {
    let mut items: Vec<usize> = prefixes.iter().flatten().chain(targets).copied().collect();
    items.sort_unstable();
    items.dedup();
    items
}

fn local(items: &[usize], item: usize) -> usize {
    items.binary_search(&item).expect("item collected into the batch")
}

/// One Adam step on the in-batch debiased loss. Returns the loss value and
/// the tape's peak value memory in bytes.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut XsmoeModel,
    data: &StreamDataset,
    history: &[HashSet<usize>],
    positions: &[usize],
    pop: &PopularityTable,
    adam: &mut Adam,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, usize)> {
    let max_len = model.dims.encoder.max_len;
    let prefixes: Vec<Vec<usize>> = positions.iter().map(|&p| data.prefix(p, max_len)).collect();
    let targets: Vec<usize> = positions.iter().map(|&p| data.event(p).item).collect();
    let users: Vec<usize> = positions.iter().map(|&p| data.event(p).user).collect();
    let items = batch_items(&prefixes, &targets);
    let stacks = data.features(&items);
    let local_prefixes: Vec<Vec<usize>> = prefixes
        .iter()
        .map(|pre| pre.iter().map(|&i| local(&items, i)).collect())
        .collect();

    let mut g = Graph::new(true);
    let emb = model.embed_items(&mut g, &stacks.view())?;
    let user_vecs = model.encode_users(&mut g, emb.emb, &local_prefixes, rng)?;
    let cands = InBatchCandidates::build(&targets, |r, item| history[users[r]].contains(&item));
    let cols: Vec<Option<usize>> = cands.columns.iter().map(|&i| Some(local(&items, i))).collect();
    let target_vecs = g.gather(emb.emb, &cols)?;
    let loss = batch_loss(&mut g, user_vecs, target_vecs, &cands, pop)?;
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss became {value}")));
    }
    let bytes = g.value_bytes();
    let grads = g.backward(loss)?;
    if !grads.all_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    let mut params = model.params_mut();
    for p in params.iter_mut() {
        grads.apply(p)?;
    }
    adam.step(params, lr)?;
    Ok((value, bytes))
}

/// Drives warm-up and every test window over a dataset.
pub struct StreamRunner<'a> {
    data: &'a StreamDataset,
    cfg: RunConfig,
    model: XsmoeModel,
    rng: ChaCha8Rng,
    /// Items each user interacted with up to the current training portion.
    history: Vec<HashSet<usize>>,
    last_good: Option<XsmoeModel>,
    peak_graph_bytes: usize,
}

impl<'a> StreamRunner<'a> {
    pub fn new(data: &'a StreamDataset, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if data.num_chunks() != cfg.chunks {
            return Err(Error::Config(format!(
                "dataset has {} chunks, config asks for {}",
                data.num_chunks(),
                cfg.chunks
            )));
        }
        let model = XsmoeModel::new(cfg.model_dims(), cfg.variant, cfg.seed)?;
        for m in cfg.variant.modalities() {
            let Some(depth) = data.feature_depth(m) else {
                return Err(Error::Config(format!("variant {} needs {m} features", cfg.variant)));
            };
            if let Some(net) = model.side(m) {
                if depth != net.required_depth() {
                    return Err(Error::Data(format!(
                        "{m} features have {depth} layers, the side network needs {}",
                        net.required_depth()
                    )));
                }
            }
        }
        Ok(StreamRunner {
            data,
            cfg: cfg.clone(),
            model,
            rng: rng_for(cfg.seed, "stream/train"),
            history: vec![HashSet::new(); data.num_users()],
            last_good: None,
            peak_graph_bytes: 0,
        })
    }

    pub fn model(&self) -> &XsmoeModel {
        &self.model
    }

    /// Model as of the last completed epoch, kept for numerical aborts.
    pub fn last_good(&self) -> Option<&XsmoeModel> {
        self.last_good.as_ref()
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Positions in `range` whose user has earlier history.
    fn encodable(&self, range: std::ops::Range<usize>) -> Vec<usize> {
        range.filter(|&p| self.data.event(p).prev.is_some()).collect()
    }

    fn seen(&self) -> Option<&[HashSet<usize>]> {
        self.cfg.filter_seen.then_some(self.history.as_slice())
    }

    fn train_window(&mut self, s: usize) -> Result<WindowTraining> {
        let range = self.data.chunk(s);
        let split = range.start + train_len(range.len(), self.cfg.train_fraction);
        for p in range.start..split {
            let e = self.data.event(p);
            self.history[e.user].insert(e.item);
        }
        let train = self.encodable(range.start..split);
        let val = self.encodable(split..range.end);
        let catalog = self.data.catalog_len(s);
        let degenerate = range.len() < 2 || val.is_empty();

        let mut summary = WindowTraining {
            epochs: 0,
            best_epoch: 0,
            best_val_ndcg: 0.0,
            degenerate,
            train_examples: train.len(),
            last_loss: 0.0,
        };
        if !train.is_empty() {
            let train_items: Vec<usize> = (range.start..split).map(|p| self.data.event(p).item).collect();
            let pop = PopularityTable::build(&train_items, catalog)?;
            let schedule = WindowSchedule::from_config(&self.cfg);
            let mut adam = Adam::new(AdamConfig::default());
            let mut stopper = EarlyStopping::new(self.cfg.patience);
            let mut order = train.clone();
            while let Some(lr) = schedule.next_lr(summary.epochs) {
                order.shuffle(&mut self.rng);
                for batch in order.chunks(self.cfg.batch_size) {
                    let (loss, bytes) = train_step(
                        &mut self.model,
                        self.data,
                        &self.history,
                        batch,
                        &pop,
                        &mut adam,
                        lr as f32,
                        &mut self.rng,
                    )?;
                    summary.last_loss = loss;
                    self.peak_graph_bytes = self.peak_graph_bytes.max(bytes);
                }
                summary.epochs += 1;
                if !self.model.all_finite() {
                    return Err(Error::Numerical(format!("non-finite parameters in window {s}")));
                }
                self.last_good = Some(self.model.clone());
                if !degenerate {
                    let score = evaluate(&self.model, self.data, &val, catalog, self.seen(), self.cfg.eval_threads())?;
                    if stopper.observe(summary.epochs, score.ndcg_at_10, &self.model) {
                        break;
                    }
                }
            }
            summary.best_epoch = stopper.best_epoch().unwrap_or(0);
            summary.best_val_ndcg = stopper.best_score().unwrap_or(0.0);
            if let Some(best) = stopper.into_best() {
                self.model = best;
            }
        }
        for p in split..range.end {
            let e = self.data.event(p);
            self.history[e.user].insert(e.item);
        }
        Ok(summary)
    }

    /// Accumulates expert utilization over the window's training batches
    /// with the kept weights and no dropout.
    fn measure_utilization(&mut self, s: usize) -> Result<()> {
        self.model.reset_utilization();
        let range = self.data.chunk(s);
        let split = range.start + train_len(range.len(), self.cfg.train_fraction);
        let max_len = self.cfg.max_seq_len;
        let positions: Vec<usize> = (range.start..split).collect();
        for batch in positions.chunks(self.cfg.batch_size) {
            let prefixes: Vec<Vec<usize>> = batch.iter().map(|&p| self.data.prefix(p, max_len)).collect();
            let targets: Vec<usize> = batch.iter().map(|&p| self.data.event(p).item).collect();
            let stacks = self.data.features(&batch_items(&prefixes, &targets));
            let mut g = Graph::new(false);
            let emb = self.model.embed_items(&mut g, &stacks.view())?;
            self.model.record_utilization(&g, &emb)?;
        }
        Ok(())
    }

    fn test(&self, s: usize) -> Result<(EvalOutcome, usize)> {
        let range = self.data.chunk(s + 1);
        let keep = ((range.len() as f64 * self.cfg.eval_next_chunk_fraction).ceil() as usize).min(range.len());
        let cases = range.start..range.start + keep;
        let encodable = self.encodable(cases.clone());
        let cold = cases.len() - encodable.len();
        let catalog = self.data.catalog_len(s);
        let before = self.model.param_digest();
        let out = evaluate(&self.model, self.data, &encodable, catalog, self.seen(), self.cfg.eval_threads())?;
        if self.model.param_digest() != before {
            return Err(Error::Invariant("evaluation changed model parameters".into()));
        }
        Ok((out, cold))
    }

    fn census(&self) -> BTreeMap<String, Vec<usize>> {
        self.model
            .expert_counts()
            .into_iter()
            .map(|(m, c)| (m.to_string(), c))
            .collect()
    }

    fn memory_bytes(&self) -> usize {
        let p = self.model.model_param_count();
        // values, gradients, and two Adam moments for trainable tensors
        4 * p.total + 12 * p.trainable + self.peak_graph_bytes
    }

    pub fn run(&mut self, observer: &mut dyn StreamObserver) -> Result<StreamOutcome> {
        let chunks = self.data.num_chunks();
        if chunks < 3 {
            return Err(Error::Config(format!("a stream needs at least 3 chunks, found {chunks}")));
        }
        let warmup = self.train_window(0)?;
        let expands = self.cfg.variant.expands();
        let mut reports = Vec::with_capacity(chunks - 2);
        for s in 1..chunks - 1 {
            let started = Instant::now();
            if expands {
                self.model.expand(s)?;
                observer.after_expand(s, &self.model)?;
            }
            let train_side = self.model.side_param_count();
            let trained = self.train_window(s)?;
            let (test, cold) = self.test(s)?;
            let before = self.census();
            let mut pruning = Vec::new();
            if expands {
                self.measure_utilization(s)?;
                let outcomes = self
                    .model
                    .finalize_and_prune(self.cfg.tau, self.cfg.utilization_includes_backbone)?;
                for (m, layers) in outcomes {
                    pruning.extend(layers.into_iter().map(|o| PruneRecord {
                        modality: m.to_string(),
                        layer: o.layer,
                        utilization: o.utilization.scores,
                        degenerate: o.utilization.degenerate,
                        pruned: o.pruned,
                    }));
                }
            }
            let side = self.model.side_param_count();
            let whole = count_tensors(self.model.params());
            let report = WindowReport {
                schema_version: REPORT_SCHEMA_VERSION,
                window: s,
                test_chunk: s + 1,
                hr_at_10: test.hr_at_10,
                ndcg_at_10: test.ndcg_at_10,
                epochs: trained.epochs,
                best_epoch: trained.best_epoch,
                best_val_ndcg_at_10: trained.best_val_ndcg,
                experts_per_layer: self.census(),
                experts_before_prune: before,
                pruning,
                total_params: side.total,
                trainable_params: side.trainable,
                train_total_params: train_side.total,
                train_trainable_params: train_side.trainable,
                model_total_params: whole.total,
                model_trainable_params: whole.trainable,
                memory_bytes: self.memory_bytes(),
                test_cases: test.cases,
                test_misses: test.misses,
                test_cold_skipped: cold,
                wall_clock_s: if self.cfg.timing { started.elapsed().as_secs_f64() } else { 0.0 },
            };
            observer.after_window(&report, &self.model, &self.rng)?;
            reports.push(report);
        }
        let avg = AvgReport::from_windows(&reports, &self.cfg);
        Ok(StreamOutcome {
            warmup,
            reports,
            avg,
            model: self.model.clone(),
        })
    }
}

/// Runs the whole protocol with no observer.
pub fn run_stream(data: &StreamDataset, cfg: &RunConfig) -> Result<StreamOutcome> {
    StreamRunner::new(data, cfg)?.run(&mut ())
}
