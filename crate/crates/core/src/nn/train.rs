//! Minibatch momentum SGD over chunks of labelled frame sequences.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Grads, NetworkGraph};
use super::ops::softmax_xent;
use super::tensor::{Mat, Real, Segments};
use crate::error::{invalid, Error, Result};

/// One labelled utterance. `labels[t]` is the class of frame `t`.
pub struct Sequence<'a, R: Real> {
    pub input: &'a Mat<R>,
    pub aux: Option<&'a Mat<R>>,
    pub labels: &'a [u32],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Chunks per minibatch.
    pub batch_chunks: usize,
    /// Labelled frames per chunk.
    pub chunk_frames: usize,
    pub chunks_per_utt: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Relative validation-loss improvement needed to keep the rate.
    pub min_improvement: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_chunks: 8,
            chunk_frames: 32,
            chunks_per_utt: 1,
            max_epochs: 4,
            seed: 1,
            min_improvement: 0.01,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

/// Mutable training state: schedule position, momentum buffers, history.
pub struct TrainState<R: Real> {
    pub config: TrainConfig,
    pub learning_rate: f64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    velocity: Option<Grads<R>>,
    best_valid: f64,
    stale_epochs: usize,
}

impl<R: Real> TrainState<R> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(invalid!("learning rate must be > 0 (got {})", config.learning_rate));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(invalid!("momentum must be in [0, 1) (got {})", config.momentum));
        }
        if config.batch_chunks == 0 || config.chunk_frames == 0 {
            return Err(invalid!("batch_chunks and chunk_frames must be >= 1"));
        }
        Ok(TrainState {
            learning_rate: config.learning_rate,
            config,
            epoch: 0,
            history: Vec::new(),
            velocity: None,
            best_valid: f64::INFINITY,
            stale_epochs: 0,
        })
    }

    /// `v <- mu v - lr g; theta <- theta + v`.
    pub fn sgd_step(&mut self, graph: &mut NetworkGraph<R>, grads: &Grads<R>) {
        let mu = R::from_f64c(self.config.momentum);
        let lr = R::from_f64c(self.learning_rate);
        let vel = self.velocity.get_or_insert_with(|| graph.zero_grads());
        for ((pg, gg), vg) in graph.params_mut().iter_mut().zip(grads).zip(vel.iter_mut()) {
            for ((p, g), v) in pg.iter_mut().zip(gg).zip(vg.iter_mut()) {
                for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                    *vv = mu * *vv - lr * gv;
                    *pv += *vv;
                }
            }
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.history.last()
    }
}

/// Mean cross-entropy and frame accuracy over labelled rows. Returns the
/// gradient at the logits, already divided by the labelled-row count.
pub fn batch_loss<R: Real>(logits: &Mat<R>, labels: &[Option<u32>]) -> Result<(f64, f64, Mat<R>)> {
    let n = labels.iter().filter(|l| l.is_some()).count().max(1);
    let scale = R::from_f64c(1.0 / n as f64);
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (t, lab) in labels.iter().enumerate() {
        let Some(lab) = lab else { continue };
        let row = logits.row(t);
        let (l, g) = softmax_xent(row, *lab as usize)?;
        loss += l;
        if argmax(row) == *lab as usize {
            correct += 1;
        }
        for (o, v) in grad.row_mut(t).iter_mut().zip(g) {
            *o = v * scale;
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64, grad))
}

pub fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and frame accuracy over whole sequences.
pub fn evaluate<R: Real>(graph: &NetworkGraph<R>, data: &[Sequence<'_, R>]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0.0;
    let mut frames = 0usize;
    for s in data {
        let logits = graph.infer(s.input, s.aux, &Segments::single(s.input.rows), usize::MAX)?;
        let labels: Vec<Option<u32>> = s.labels.iter().map(|&l| Some(l)).collect();
        let (l, a, _) = batch_loss(&logits, &labels)?;
        loss += l * labels.len() as f64;
        correct += a * labels.len() as f64;
        frames += labels.len();
    }
    let n = frames.max(1) as f64;
    Ok((loss / n, correct / n))
}

struct Chunk {
    utt: usize,
    start: usize,
    len: usize,
}

/// Concatenate chunks (with `left`/`right` context frames that carry no
/// label) into one minibatch.
fn assemble<R: Real>(
    data: &[Sequence<'_, R>],
    chunks: &[Chunk],
    left: usize,
    right: usize,
) -> (Mat<R>, Option<Mat<R>>, Segments, Vec<Option<u32>>) {
    let feat = data[0].input.cols;
    let aux_dim = data[0].aux.map(|a| a.cols);
    let mut x = Vec::new();
    let mut aux = Vec::new();
    let mut labels = Vec::new();
    let mut lens = Vec::new();
    for c in chunks {
        let s = &data[c.utt];
        let last = s.input.rows as i64 - 1;
        let lo = c.start as i64 - left as i64;
        let hi = (c.start + c.len + right) as i64;
        for t in lo..hi {
            let src = t.clamp(0, last) as usize;
            x.extend_from_slice(s.input.row(src));
            if let Some(a) = s.aux {
                aux.extend_from_slice(a.row(src));
            }
            let inside = t >= c.start as i64 && t < (c.start + c.len) as i64;
            labels.push(inside.then(|| s.labels[src]));
        }
        lens.push((hi - lo) as usize);
    }
    let rows = labels.len();
    let aux = aux_dim.map(|d| Mat::from_vec(rows, d, aux));
    (Mat::from_vec(rows, feat, x), aux, Segments::from_lengths(&lens), labels)
}

/// Run the schedule: shuffle chunks with the state seed each epoch, halve
/// the rate when validation loss improves by less than `min_improvement`,
/// stop after `max_epochs` or `patience` consecutive stale epochs.
pub fn train<R: Real>(
    graph: &mut NetworkGraph<R>,
    data: &[Sequence<'_, R>],
    valid: &[Sequence<'_, R>],
    state: &mut TrainState<R>,
) -> Result<()> {
    if data.is_empty() || state.config.max_epochs == 0 {
        return Ok(());
    }
    for (i, s) in data.iter().chain(valid).enumerate() {
        if s.input.rows == 0 || s.labels.len() != s.input.rows {
            return Err(invalid!("sequence {i}: {} frames but {} labels", s.input.rows, s.labels.len()));
        }
    }
    let (left, right) = graph.context();
    let cfg = state.config.clone();
    while state.epoch < cfg.max_epochs && state.stale_epochs < cfg.patience {
        let mut rng = crate::util::rng(crate::util::derive_seed(cfg.seed, &format!("epoch{}", state.epoch)));
        let mut chunks = Vec::new();
        for (u, s) in data.iter().enumerate() {
            let len = cfg.chunk_frames.min(s.input.rows);
            for _ in 0..cfg.chunks_per_utt {
                let start = rng.random_range(0..=s.input.rows - len);
                chunks.push(Chunk { utt: u, start, len });
            }
        }
        chunks.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut batches = 0usize;
        for batch in chunks.chunks(cfg.batch_chunks) {
            let (x, aux, segs, labels) = assemble(data, batch, left, right);
            let logits = graph.forward(&x, aux.as_ref(), &segs).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {} batch {batches}: {m}", state.epoch)),
                other => other,
            })?;
            let (loss, acc, grad) = batch_loss(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("epoch {} batch {batches}: loss is {loss}", state.epoch)));
            }
            let grads = graph.backward(&grad)?;
            state.sgd_step(graph, &grads);
            loss_sum += loss;
            acc_sum += acc;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let train_accuracy = acc_sum / batches.max(1) as f64;
        let (valid_loss, valid_accuracy) = if valid.is_empty() {
            (train_loss, train_accuracy)
        } else {
            evaluate(graph, valid)?
        };
        log::info!(
            "epoch {} lr {:.5}: train loss {train_loss:.4} acc {train_accuracy:.3}, valid loss {valid_loss:.4} acc {valid_accuracy:.3}",
            state.epoch, state.learning_rate
        );
        state.history.push(EpochRecord {
            epoch: state.epoch,
            learning_rate: state.learning_rate,
            train_loss,
            train_accuracy,
            valid_loss,
            valid_accuracy,
        });
        if valid_loss <= state.best_valid * (1.0 - cfg.min_improvement) {
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
            state.learning_rate *= 0.5;
        }
        state.best_valid = state.best_valid.min(valid_loss);
        state.epoch += 1;
    }
    Ok(())
}
