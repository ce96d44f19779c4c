//! Heteroscedastic reward critic.
//!
//! A user's history is pooled into `[signal-weighted mean embedding, mean
//! embedding, mean signal]` and encoded by `Linear -> LayerNorm -> ReLU ->
//! Dropout -> Linear` into a user vector `u` with the embedding width. A
//! candidate embedding `c` is combined into `[u, c, u*c, u.c]`, and two
//! linear heads read the mean and the log-variance of the engagement signal.
//! Training minimizes beta-NLL, whose per-sample weight `sigma^(2 beta)` is
//! held constant when differentiating.

pub mod knn;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointKind, FlatCheckpoint};
use crate::data::{dot, EmbeddingTable, InteractionLog};
use crate::error::{Error, Result};
use crate::ranking::{HistoryEntry, ItemId, Ranking, UserId};
use crate::stats::pearson;

pub use knn::{knn_cf_impute, knn_cf_impute_many, CfMode, InteractionMatrix};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 6.0;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticPrediction {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaNll {
    pub loss: f64,
    /// `sigma^(2 beta)`, treated as a constant.
    pub weight: f64,
    pub d_mean: f64,
    /// Gradient with respect to the log-variance.
    pub d_logvar: f64,
}

/// `w * (0.5 log var + (target - mean)^2 / (2 var))` with `w = var^beta`
/// supplied by the caller, so the weight can be frozen for checks.
pub fn beta_nll_with_weight(mean: f64, logvar: f64, target: f64, weight: f64) -> BetaNll {
    let var = logvar.exp();
    let r = target - mean;
    BetaNll {
        loss: weight * (0.5 * logvar + r * r / (2.0 * var)),
        weight,
        d_mean: -weight * r / var,
        d_logvar: weight * (0.5 - r * r / (2.0 * var)),
    }
}

pub fn beta_nll_loss(pred: CriticPrediction, target: f64, beta: f64) -> Result<BetaNll> {
    if !target.is_finite() {
        return Err(Error::NonFinite("critic target"));
    }
    if !(pred.variance > 0.0) || !pred.variance.is_finite() || !pred.mean.is_finite() {
        return Err(Error::InvalidArgument("prediction needs a finite mean and positive variance".into()));
    }
    Ok(beta_nll_with_weight(pred.mean, pred.variance.ln(), target, pred.variance.powf(beta)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    emb: usize,
    hidden: usize,
}

impl Layout {
    fn input(&self) -> usize {
        2 * self.emb + 1
    }
    fn interaction(&self) -> usize {
        3 * self.emb + 1
    }
    fn sizes(&self) -> [usize; 11] {
        let (i, h, e, z) = (self.input(), self.hidden, self.emb, self.interaction());
        // w1, b1, gamma, beta, w2, b2, default_u, w_mean, b_mean, w_logvar, b_logvar
        [h * i, h, h, h, e * h, e, e, z, 1, z, 1]
    }
    fn range(&self, which: usize) -> Range<usize> {
        let s = self.sizes();
        let start: usize = s[..which].iter().sum();
        start..start + s[which]
    }
    fn total(&self) -> usize {
        self.sizes().iter().sum()
    }
}

const W1: usize = 0;
const B1: usize = 1;
const GAMMA: usize = 2;
const BETA: usize = 3;
const W2: usize = 4;
const B2: usize = 5;
const DEFAULT_U: usize = 6;
const WM: usize = 7;
const BM: usize = 8;
const WV: usize = 9;
const BV: usize = 10;

/// Critic weights in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    layout: Layout,
    pub dropout: f64,
    pub values: Vec<f64>,
}

/// Forward-pass intermediates of the history encoder.
struct EncoderTrace {
    x: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: f64,
    /// Post-LayerNorm pre-activation.
    a: Vec<f64>,
    /// ReLU output times the dropout mask.
    dropped: Vec<f64>,
    mask: Vec<f64>,
    u: Vec<f64>,
}

impl CriticParams {
    /// He-initialized encoder, zero heads with the log-variance bias at 0.
    pub fn init(emb_dim: usize, hidden: usize, dropout: f64, seed: u64) -> Result<Self> {
        if emb_dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("critic widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        let layout = Layout { emb: emb_dim, hidden };
        let mut values = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he1 = Normal::new(0.0, (2.0 / layout.input() as f64).sqrt()).expect("valid std");
        let he2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).expect("valid std");
        let small = Normal::new(0.0, 0.01).expect("valid std");
        values[layout.range(W1)].iter_mut().for_each(|w| *w = he1.sample(&mut rng));
        values[layout.range(GAMMA)].iter_mut().for_each(|g| *g = 1.0);
        values[layout.range(W2)].iter_mut().for_each(|w| *w = he2.sample(&mut rng));
        values[layout.range(WM)].iter_mut().for_each(|w| *w = small.sample(&mut rng));
        values[layout.range(WV)].iter_mut().for_each(|w| *w = small.sample(&mut rng));
        Ok(Self { layout, dropout, values })
    }

    pub fn emb_dim(&self) -> usize {
        self.layout.emb
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    fn part(&self, which: usize) -> &[f64] {
        &self.values[self.layout.range(which)]
    }

    /// Sets both heads to constants: every prediction becomes
    /// `(mean_bias, exp(logvar_bias))`.
    pub fn set_constant_heads(&mut self, mean_bias: f64, logvar_bias: f64) {
        for which in [WM, WV] {
            let r = self.layout.range(which);
            self.values[r].iter_mut().for_each(|w| *w = 0.0);
        }
        self.values[self.layout.range(BM).start] = mean_bias;
        self.values[self.layout.range(BV).start] = logvar_bias;
    }

    pub fn history_input(&self, history: &[HistoryEntry], embeddings: &EmbeddingTable) -> Result<Option<Vec<f64>>> {
        if history.is_empty() {
            return Ok(None);
        }
        let e = self.layout.emb;
        if embeddings.dim != e {
            return Err(Error::Dimension(format!("embeddings have dim {}, critic expects {e}", embeddings.dim)));
        }
        let n = history.len() as f64;
        let mut x = vec![0.0; 2 * e + 1];
        for h in history {
            let v = embeddings.get(h.item)?;
            for d in 0..e {
                x[d] += h.signal * v[d] / n;
                x[e + d] += v[d] / n;
            }
            x[2 * e] += h.signal / n;
        }
        Ok(Some(x))
    }

    fn encode_trace<R: Rng + ?Sized>(&self, x: Option<Vec<f64>>, rng: Option<&mut R>) -> EncoderTrace {
        let Layout { emb, hidden } = self.layout;
        let Some(x) = x else {
            return EncoderTrace {
                x: vec![],
                xhat: vec![],
                inv_std: 0.0,
                a: vec![],
                dropped: vec![],
                mask: vec![],
                u: self.part(DEFAULT_U).to_vec(),
            };
        };
        let (w1, b1) = (self.part(W1), self.part(B1));
        let h1: Vec<f64> = (0..hidden)
            .map(|j| b1[j] + dot(&w1[j * x.len()..(j + 1) * x.len()], &x))
            .collect();
        let m = h1.iter().sum::<f64>() / hidden as f64;
        let var = h1.iter().map(|h| (h - m).powi(2)).sum::<f64>() / hidden as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = h1.iter().map(|h| (h - m) * inv_std).collect();
        let (gamma, beta) = (self.part(GAMMA), self.part(BETA));
        let a: Vec<f64> = (0..hidden).map(|j| gamma[j] * xhat[j] + beta[j]).collect();
        let mask: Vec<f64> = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout);
                (0..hidden)
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                    .collect()
            }
            _ => vec![1.0; hidden],
        };
        let dropped: Vec<f64> = a.iter().zip(&mask).map(|(&v, &k)| v.max(0.0) * k).collect();
        let (w2, b2) = (self.part(W2), self.part(B2));
        let u: Vec<f64> = (0..emb)
            .map(|d| b2[d] + dot(&w2[d * hidden..(d + 1) * hidden], &dropped))
            .collect();
        EncoderTrace {
            x,
            xhat,
            inv_std,
            a,
            dropped,
            mask,
            u,
        }
    }

    /// User vector in inference mode.
    pub fn encode(&self, history: &[HistoryEntry], embeddings: &EmbeddingTable) -> Result<Vec<f64>> {
        let x = self.history_input(history, embeddings)?;
        Ok(self.encode_trace::<ChaCha8Rng>(x, None).u)
    }

    /// `[u, c, u*c, u.c]`.
    pub fn interaction(u: &[f64], c: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(3 * u.len() + 1);
        z.extend_from_slice(u);
        z.extend_from_slice(c);
        z.extend(u.iter().zip(c).map(|(a, b)| a * b));
        z.push(dot(u, c));
        z
    }

    /// Mean and unclamped log-variance.
    fn heads(&self, z: &[f64]) -> (f64, f64) {
        let mean = self.part(BM)[0] + dot(self.part(WM), z);
        let logvar = self.part(BV)[0] + dot(self.part(WV), z);
        (mean, logvar)
    }

    pub fn predict_from_user(&self, u: &[f64], candidate: &[f64]) -> CriticPrediction {
        let (mean, raw) = self.heads(&Self::interaction(u, candidate));
        CriticPrediction {
            mean,
            variance: raw.clamp(LOGVAR_MIN, LOGVAR_MAX).exp(),
        }
    }

    pub fn predict(&self, history: &[HistoryEntry], item: ItemId, embeddings: &EmbeddingTable) -> Result<CriticPrediction> {
        let u = self.encode(history, embeddings)?;
        Ok(self.predict_from_user(&u, embeddings.get(item)?))
    }

    /// Loss and gradient for one user's targets, accumulated as sums.
    /// `frozen_weights`, when given, replaces `sigma^(2 beta)` per target.
    fn user_loss_grad<R: Rng + ?Sized>(
        &self,
        example: &CriticExample,
        embeddings: &EmbeddingTable,
        beta: f64,
        rng: Option<&mut R>,
        frozen_weights: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Result<f64> {
        let Layout { emb, hidden } = self.layout;
        let trace = self.encode_trace(self.history_input(&example.history, embeddings)?, rng);
        let mut du = vec![0.0; emb];
        let mut total = 0.0;
        let (wm, wv) = (self.part(WM).to_vec(), self.part(WV).to_vec());
        let (rwm, rbm, rwv, rbv) = (self.layout.range(WM), self.layout.range(BM), self.layout.range(WV), self.layout.range(BV));
        for (t, &(item, target)) in example.targets.iter().enumerate() {
            let c = embeddings.get(item)?;
            let z = Self::interaction(&trace.u, c);
            let (mean, raw) = self.heads(&z);
            let logvar = raw.clamp(LOGVAR_MIN, LOGVAR_MAX);
            let weight = match frozen_weights {
                Some(w) => w[t],
                None => (beta * logvar).exp(),
            };
            let l = beta_nll_with_weight(mean, logvar, target, weight);
            if !l.loss.is_finite() {
                return Err(Error::Diverged {
                    stage: "critic",
                    index: example.user.0 as usize,
                    detail: format!("non-finite loss for item {item}"),
                });
            }
            total += l.loss;
            let dv = if raw > LOGVAR_MIN && raw < LOGVAR_MAX { l.d_logvar } else { 0.0 };
            let mut dz = vec![0.0; z.len()];
            for i in 0..z.len() {
                grad[rwm.start + i] += l.d_mean * z[i];
                grad[rwv.start + i] += dv * z[i];
                dz[i] = l.d_mean * wm[i] + dv * wv[i];
            }
            grad[rbm.start] += l.d_mean;
            grad[rbv.start] += dv;
            for d in 0..emb {
                du[d] += dz[d] + dz[2 * emb + d] * c[d] + dz[3 * emb] * c[d];
            }
        }
        if trace.x.is_empty() {
            let r = self.layout.range(DEFAULT_U);
            for d in 0..emb {
                grad[r.start + d] += du[d];
            }
            return Ok(total);
        }
        // back through the encoder
        let w2 = self.part(W2);
        let (rw2, rb2) = (self.layout.range(W2), self.layout.range(B2));
        let mut d_dropped = vec![0.0; hidden];
        for d in 0..emb {
            grad[rb2.start + d] += du[d];
            let row = &w2[d * hidden..(d + 1) * hidden];
            for j in 0..hidden {
                grad[rw2.start + d * hidden + j] += du[d] * trace.dropped[j];
                d_dropped[j] += du[d] * row[j];
            }
        }
        let gamma = self.part(GAMMA);
        let (rg, rbeta) = (self.layout.range(GAMMA), self.layout.range(BETA));
        let mut dxhat = vec![0.0; hidden];
        for j in 0..hidden {
            let da = if trace.a[j] > 0.0 { d_dropped[j] * trace.mask[j] } else { 0.0 };
            grad[rg.start + j] += da * trace.xhat[j];
            grad[rbeta.start + j] += da;
            dxhat[j] = da * gamma[j];
        }
        let n = hidden as f64;
        let mean_dx = dxhat.iter().sum::<f64>() / n;
        let mean_dx_xhat = dxhat.iter().zip(&trace.xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        let (rw1, rb1) = (self.layout.range(W1), self.layout.range(B1));
        let in_dim = trace.x.len();
        for j in 0..hidden {
            let dh = trace.inv_std * (dxhat[j] - mean_dx - trace.xhat[j] * mean_dx_xhat);
            grad[rb1.start + j] += dh;
            for (i, xi) in trace.x.iter().enumerate() {
                grad[rw1.start + j * in_dim + i] += dh * xi;
            }
        }
        Ok(total)
    }

    /// Mean beta-NLL over every target in `examples` and its gradient, in
    /// inference mode (no dropout). With `frozen_from`, weights are taken
    /// from that parameter point instead of the current one.
    pub fn loss_and_grad(
        &self,
        examples: &[CriticExample],
        embeddings: &EmbeddingTable,
        beta: f64,
        frozen_from: Option<&CriticParams>,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.n_params()];
        let mut total = 0.0;
        let mut n = 0usize;
        for ex in examples {
            let frozen = match frozen_from {
                Some(p) => {
                    let u = p.encode(&ex.history, embeddings)?;
                    Some(
                        ex.targets
                            .iter()
                            .map(|&(item, _)| Ok(p.predict_from_user(&u, embeddings.get(item)?).variance.powf(beta)))
                            .collect::<Result<Vec<f64>>>()?,
                    )
                }
                None => None,
            };
            total += self.user_loss_grad::<ChaCha8Rng>(ex, embeddings, beta, None, frozen.as_deref(), &mut grad)?;
            n += ex.targets.len();
        }
        if n == 0 {
            return Err(Error::Empty("critic targets"));
        }
        grad.iter_mut().for_each(|g| *g /= n as f64);
        Ok((total / n as f64, grad))
    }

    pub fn to_checkpoint(&self) -> FlatCheckpoint {
        FlatCheckpoint {
            kind: CheckpointKind::Critic,
            header: vec![self.layout.emb as u64, self.layout.hidden as u64],
            scalars: vec![self.dropout],
            values: self.values.clone(),
        }
    }

    pub fn from_checkpoint(ck: &FlatCheckpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::Critic || ck.header.len() != 2 || ck.scalars.len() != 1 {
            return Err(Error::Checkpoint("not a critic checkpoint".into()));
        }
        let layout = Layout {
            emb: ck.header[0] as usize,
            hidden: ck.header[1] as usize,
        };
        if ck.values.len() != layout.total() {
            return Err(Error::Checkpoint(format!("expected {} values, found {}", layout.total(), ck.values.len())));
        }
        Ok(Self {
            layout,
            dropout: ck.scalars[0],
            values: ck.values.clone(),
        })
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        self.to_checkpoint().write(w)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        Self::from_checkpoint(&FlatCheckpoint::read(r)?)
    }
}

/// One user's history and the held-out signals the critic must predict.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticExample {
    pub user: UserId,
    pub history: Vec<HistoryEntry>,
    pub targets: Vec<(ItemId, f64)>,
}

/// For each user in `users`: the `history_len` most recent interactions form
/// the history, the rest become targets. Users with no targets are skipped.
pub fn critic_examples(log: &InteractionLog, users: &BTreeSet<UserId>, history_len: usize) -> Vec<CriticExample> {
    let by_user = log.by_user();
    users
        .iter()
        .filter_map(|u| {
            let mut recs: Vec<_> = by_user.get(u)?.iter().map(|&i| &log.records[i]).collect();
            recs.sort_by_key(|r| (r.timestamp, r.item_id));
            let split = recs.len().saturating_sub(history_len);
            let history = recs[split..]
                .iter()
                .map(|r| HistoryEntry {
                    item: r.item_id,
                    signal: r.signal_value,
                    timestamp: r.timestamp,
                })
                .collect();
            let targets: Vec<_> = recs[..split].iter().map(|r| (r.item_id, r.signal_value)).collect();
            (!targets.is_empty()).then_some(CriticExample {
                user: *u,
                history,
                targets,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Users per mini-batch.
    pub batch_users: usize,
    pub beta: f64,
    pub history_len: usize,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            dropout: 0.05,
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 30,
            batch_users: 8,
            beta: 1.0,
            history_len: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationReport {
    pub mse: f64,
    pub mae: f64,
    pub pearson_mean: f64,
    pub pearson_var: f64,
    pub pearson_mean_p: f64,
    pub pearson_var_p: f64,
    /// 1-based epoch of the kept checkpoint; 0 means the initial weights.
    pub epoch_best: usize,
}

impl CalibrationReport {
    pub const CSV_HEADER: &'static str = "mse,mae,pearson_mean,pearson_var,epoch_best";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(
            w,
            "{},{},{},{},{}",
            crate::needs::format_f64_17(self.mse),
            crate::needs::format_f64_17(self.mae),
            crate::needs::format_f64_17(self.pearson_mean),
            crate::needs::format_f64_17(self.pearson_var),
            self.epoch_best
        )?;
        Ok(())
    }
}

/// Predictions against targets: MSE, MAE and both calibration correlations.
pub fn evaluate_critic(params: &CriticParams, examples: &[CriticExample], embeddings: &EmbeddingTable) -> Result<CalibrationReport> {
    let rows: Vec<Vec<(f64, f64, f64)>> = examples
        .par_iter()
        .map(|ex| {
            let u = params.encode(&ex.history, embeddings)?;
            ex.targets
                .iter()
                .map(|&(item, y)| {
                    let p = params.predict_from_user(&u, embeddings.get(item)?);
                    Ok((p.mean, p.variance, y))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<(f64, f64, f64)> = rows.concat();
    if rows.is_empty() {
        return Err(Error::Empty("critic evaluation targets"));
    }
    let n = rows.len() as f64;
    let mse = rows.iter().map(|(m, _, y)| (m - y).powi(2)).sum::<f64>() / n;
    let mae = rows.iter().map(|(m, _, y)| (m - y).abs()).sum::<f64>() / n;
    let means: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let vars: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let sq: Vec<f64> = rows.iter().map(|(m, _, y)| (m - y).powi(2)).collect();
    let (pm, pv) = if rows.len() >= 3 {
        (pearson(&means, &ys)?, pearson(&vars, &sq)?)
    } else {
        let none = crate::stats::Correlation { r: 0.0, p_value: 1.0, n: rows.len() };
        (none, none)
    };
    Ok(CalibrationReport {
        mse,
        mae,
        pearson_mean: pm.r,
        pearson_var: pv.r,
        pearson_mean_p: pm.p_value,
        pearson_var_p: pv.p_value,
        epoch_best: 0,
    })
}

#[derive(Clone, Debug)]
pub struct TrainedCritic {
    pub params: CriticParams,
    /// Validation metrics of the kept checkpoint.
    pub validation: CalibrationReport,
    /// Per epoch: mean training loss and validation MSE.
    pub history: Vec<(f64, f64)>,
}

/// Momentum SGD on beta-NLL, keeping the epoch with the lowest validation
/// MSE. Per-user gradients run in parallel and are reduced in user order,
/// and each user's dropout stream is seeded from `(seed, epoch, position)`.
pub fn train_critic(
    train: &[CriticExample],
    val: &[CriticExample],
    embeddings: &EmbeddingTable,
    cfg: &CriticConfig,
) -> Result<TrainedCritic> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("critic train/validation split"));
    }
    if !(cfg.learning_rate >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) || cfg.batch_users == 0 {
        return Err(Error::InvalidArgument("critic optimizer settings out of range".into()));
    }
    let mut params = CriticParams::init(embeddings.dim, cfg.hidden, cfg.dropout, cfg.seed)?;
    let mut velocity = vec![0.0; params.n_params()];
    let mut best = params.clone();
    let mut best_report = evaluate_critic(&params, val, embeddings)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c417);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_targets = 0usize;
        for (b, batch) in order.chunks(cfg.batch_users).enumerate() {
            let parts: Vec<(f64, usize, Vec<f64>)> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let ex = &train[idx];
                    let stream = (epoch as u64) << 40 ^ ((b * cfg.batch_users + slot) as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream);
                    let mut g = vec![0.0; params.n_params()];
                    let l = params.user_loss_grad(ex, embeddings, cfg.beta, Some(&mut rng), None, &mut g)?;
                    Ok((l, ex.targets.len(), g))
                })
                .collect::<Result<_>>()?;
            let n: usize = parts.iter().map(|p| p.1).sum();
            let mut grad = vec![0.0; params.n_params()];
            for (l, _, g) in &parts {
                epoch_loss += l;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            epoch_targets += n;
            let scale = 1.0 / n as f64;
            for ((p, v), g) in params.values.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g * scale;
                *p -= cfg.learning_rate * *v;
            }
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                stage: "critic",
                index: epoch,
                detail: "parameters became non-finite".into(),
            });
        }
        let mut report = evaluate_critic(&params, val, embeddings)?;
        history.push((epoch_loss / epoch_targets as f64, report.mse));
        if report.mse < best_report.mse {
            report.epoch_best = epoch;
            best_report = report;
            best = params.clone();
        }
    }
    Ok(TrainedCritic {
        params: best,
        validation: best_report,
        history,
    })
}

/// Observed signals pass through with variance 0; the rest come from the
/// critic, in ranking order.
pub fn impute_rewards(
    params: &CriticParams,
    history: &[HistoryEntry],
    ranking: &Ranking,
    observed: &BTreeMap<ItemId, f64>,
    embeddings: &EmbeddingTable,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let needs_critic = ranking.items.iter().any(|i| !observed.contains_key(i));
    let u = if needs_critic { Some(params.encode(history, embeddings)?) } else { None };
    let mut rewards = Vec::with_capacity(ranking.len());
    let mut vars = Vec::with_capacity(ranking.len());
    for item in &ranking.items {
        match (observed.get(item), &u) {
            (Some(&s), _) => {
                rewards.push(s);
                vars.push(0.0);
            }
            (None, Some(u)) => {
                let p = params.predict_from_user(u, embeddings.get(*item)?);
                rewards.push(p.mean);
                vars.push(p.variance);
            }
            (None, None) => unreachable!("user vector exists whenever an item is unobserved"),
        }
    }
    Ok((rewards, vars))
}
