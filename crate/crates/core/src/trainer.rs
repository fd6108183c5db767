//! Embedding training with the alignment + γ·uniformity objective.
//!
//! The default `mf` mode never touches the interaction graph: batches of
//! positive pairs pull user/item embeddings together (alignment) while both
//! sides spread out on the unit sphere (uniformity). Gradients are exact
//! analytic derivatives, including through the L2 normalization, and are
//! applied with a sparse Adam that only updates rows a batch touched. The
//! `gcn` comparison mode instead differentiates the same objective through a
//! K-layer convolution, reproducing the train-time message-passing paradigm
//! this design replaces.
//!
//! Losses and gradients are computed in f64 from the f32 parameters; this
//! keeps central finite differences meaningful at step 1e-4.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapipe::Dataset;
use crate::embedding::{EmbeddingSet, Flavor};
use crate::eval::{self, EvalSplit};
use crate::graph::{build_graph, BipartiteGraph};
use crate::postconv::{conv_discrete, Readout};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TrainMode {
    /// Pure embedding training; convolution happens after, if at all.
    Mf,
    /// Losses evaluated on K-layer-convolved embeddings every batch.
    Gcn { k: u32, self_loop: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Uniformity weight γ.
    pub gamma: f64,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            batch_size: 256,
            lr: 1e-3,
            gamma: 2.0,
            patience: 10,
            max_epochs: 100,
            seed: 42,
            mode: TrainMode::Mf,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::InvalidConfig("embedding dim must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 (uniformity needs two users and two items)".into(),
            ));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be > 0".into()));
        }
        Ok(())
    }
}

/// N(0, (0.1/√d)²) initialization; mean row norm concentrates near 0.1.
pub fn init_embeddings(n_users: usize, n_items: usize, d: usize, seed: u64) -> Result<EmbeddingSet> {
    if n_users == 0 || n_items == 0 || d == 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot initialize {n_users} x {n_items} x {d} embeddings"
        )));
    }
    let std = 0.1 / (d as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng) as f32);
    let users = draw(n_users);
    let items = draw(n_items);
    EmbeddingSet::new(users, items, Flavor::Initial)
}

/// A batch's unique embedding rows, L2-normalized in f64.
struct SideView {
    /// Unique row ids in first-appearance order.
    rows: Vec<u32>,
    /// Entry count per unique row (duplicates retained).
    counts: Vec<f64>,
    /// Normalized rows.
    hats: Vec<Vec<f64>>,
    /// Pre-normalization L2 norms.
    norms: Vec<f64>,
    /// For each batch entry, the index into `rows`.
    of_entry: Vec<usize>,
}

fn gather_side(
    ids: impl Iterator<Item = u32>,
    matrix: &Array2<f32>,
    matrix_name: &'static str,
) -> Result<SideView> {
    let mut rows: Vec<u32> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut of_entry = Vec::new();
    let mut index = std::collections::HashMap::new();
    for id in ids {
        let slot = *index.entry(id).or_insert_with(|| {
            rows.push(id);
            counts.push(0.0);
            rows.len() - 1
        });
        counts[slot] += 1.0;
        of_entry.push(slot);
    }
    let mut hats = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len());
    for &r in &rows {
        let mut v: Vec<f64> = matrix.row(r as usize).iter().map(|&x| x as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNormRow {
                matrix: matrix_name,
                row: r as usize,
            });
        }
        v.iter_mut().for_each(|x| *x /= n);
        hats.push(v);
        norms.push(n);
    }
    Ok(SideView {
        rows,
        counts,
        hats,
        norms,
        of_entry,
    })
}

/// (1/|B|)·Σ ‖û − v̂‖² over the batch's positive pairs. Range [0, 4].
pub fn align_loss(pairs: &[(u32, u32)], e: &EmbeddingSet) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::BatchTooSmall {
            what: "alignment batch",
            needed: 1,
            found: 0,
        });
    }
    let users = gather_side(pairs.iter().map(|&(u, _)| u), &e.users, "users")?;
    let items = gather_side(pairs.iter().map(|&(_, i)| i), &e.items, "items")?;
    let mut total = 0.0;
    for p in 0..pairs.len() {
        total += crate::embedding::sq_dist(
            &users.hats[users.of_entry[p]],
            &items.hats[items.of_entry[p]],
        );
    }
    Ok(total / pairs.len() as f64)
}

/// Uniformity kernel on a normalized-space distance.
#[cfg(not(feature = "squared-uniformity"))]
fn kernel(dist: f64) -> f64 {
    (-2.0 * dist).exp()
}
#[cfg(feature = "squared-uniformity")]
fn kernel(dist: f64) -> f64 {
    (-2.0 * dist * dist).exp()
}

/// One side's uniformity log(mean over ordered entry pairs of kernel), plus
/// (optionally) its gradient in normalized space per unique row.
fn side_uniformity(side: &SideView, want_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let n: f64 = side.counts.iter().sum();
    let d = side.hats[0].len();
    let u = side.rows.len();
    // Σ over ordered entry pairs (a ≠ b). Entries sharing a row contribute
    // kernel(0) = 1 and no gradient (distance-0 convention).
    let mut s = 0.0;
    for c in &side.counts {
        s += c * (c - 1.0);
    }
    let mut pair_terms: Vec<(usize, usize, f64, f64)> = Vec::new(); // (p, q, dist, kernel)
    for p in 0..u {
        for q in (p + 1)..u {
            let dist = crate::embedding::sq_dist(&side.hats[p], &side.hats[q]).sqrt();
            let k = kernel(dist);
            s += 2.0 * side.counts[p] * side.counts[q] * k;
            if want_grad {
                pair_terms.push((p, q, dist, k));
            }
        }
    }
    let loss = (s / (n * (n - 1.0))).ln();

    let mut grads = Vec::new();
    if want_grad {
        grads = vec![vec![0.0; d]; u];
        for (p, q, dist, k) in pair_terms {
            if dist == 0.0 {
                continue;
            }
            // d/dx̂_p of the ordered-pair sum: 2·c_p·c_q·K'(dist)·(x̂p−x̂q)/dist,
            // divided by S for the log.
            #[cfg(not(feature = "squared-uniformity"))]
            let kprime = -2.0 * k;
            #[cfg(feature = "squared-uniformity")]
            let kprime = -4.0 * dist * k;
            let scale = 2.0 * side.counts[p] * side.counts[q] * kprime / (s * dist);
            for x in 0..d {
                let diff = side.hats[p][x] - side.hats[q][x];
                grads[p][x] += scale * diff;
                grads[q][x] -= scale * diff;
            }
        }
    }
    (loss, grads)
}

/// (L^U + L^V)/2 with L^U = log of the mean pairwise kernel over the batch's
/// users (ordered pairs, self-pairs excluded, duplicates retained). Range
/// [−4, 0] for the un-squared kernel on the unit sphere.
pub fn uniform_loss(user_ids: &[u32], item_ids: &[u32], e: &EmbeddingSet) -> Result<f64> {
    for (ids, what) in [(user_ids, "uniformity users"), (item_ids, "uniformity items")] {
        if ids.len() < 2 {
            return Err(Error::BatchTooSmall {
                what,
                needed: 2,
                found: ids.len(),
            });
        }
    }
    let users = gather_side(user_ids.iter().copied(), &e.users, "users")?;
    let items = gather_side(item_ids.iter().copied(), &e.items, "items")?;
    let (lu, _) = side_uniformity(&users, false);
    let (lv, _) = side_uniformity(&items, false);
    Ok((lu + lv) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub align: f64,
    /// (L^U + L^V)/2, before the γ weight.
    pub uniform: f64,
}

/// Gradients for the rows a batch touched; rows absent from the batch have,
/// by definition, zero gradient and are not listed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub user_rows: Vec<u32>,
    pub user_grad: Array2<f32>,
    pub item_rows: Vec<u32>,
    pub item_grad: Array2<f32>,
}

/// Loss and exact analytic gradients of align + γ·uniform at the batch.
pub fn loss_and_grad(
    pairs: &[(u32, u32)],
    e: &EmbeddingSet,
    gamma: f64,
) -> Result<(LossParts, BatchGrads)> {
    if pairs.len() < 2 {
        return Err(Error::BatchTooSmall {
            what: "training batch",
            needed: 2,
            found: pairs.len(),
        });
    }
    let users = gather_side(pairs.iter().map(|&(u, _)| u), &e.users, "users")?;
    let items = gather_side(pairs.iter().map(|&(_, i)| i), &e.items, "items")?;
    let d = e.dim();
    let b = pairs.len() as f64;

    // Alignment value and gradient in normalized space.
    let mut gu_hat = vec![vec![0.0f64; d]; users.rows.len()];
    let mut gv_hat = vec![vec![0.0f64; d]; items.rows.len()];
    let mut align = 0.0;
    for p in 0..pairs.len() {
        let (a, bq) = (users.of_entry[p], items.of_entry[p]);
        for x in 0..d {
            let diff = users.hats[a][x] - items.hats[bq][x];
            align += diff * diff;
            gu_hat[a][x] += 2.0 * diff / b;
            gv_hat[bq][x] -= 2.0 * diff / b;
        }
    }
    align /= b;

    // Uniformity, weighted γ/2 per side.
    let (lu, gu_uni) = side_uniformity(&users, gamma != 0.0);
    let (lv, gv_uni) = side_uniformity(&items, gamma != 0.0);
    if gamma != 0.0 {
        for (g, gu) in gu_hat.iter_mut().zip(&gu_uni) {
            for (gx, ux) in g.iter_mut().zip(gu) {
                *gx += gamma / 2.0 * ux;
            }
        }
        for (g, gv) in gv_hat.iter_mut().zip(&gv_uni) {
            for (gx, vx) in g.iter_mut().zip(gv) {
                *gx += gamma / 2.0 * vx;
            }
        }
    }

    // Chain through x̂ = x/‖x‖: g_raw = (g_hat − (g_hat·x̂)x̂)/‖x‖.
    let to_raw = |side: &SideView,
                  g_hat: Vec<Vec<f64>>,
                  kind: &'static str|
     -> Result<Array2<f32>> {
        let mut out = Array2::<f32>::zeros((side.rows.len(), d));
        for (slot, g) in g_hat.iter().enumerate() {
            let hat = &side.hats[slot];
            let dot: f64 = g.iter().zip(hat).map(|(a, b)| a * b).sum();
            for x in 0..d {
                let raw = (g[x] - dot * hat[x]) / side.norms[slot];
                if !raw.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("gradient for {kind} row {}", side.rows[slot]),
                    });
                }
                out[[slot, x]] = raw as f32;
            }
        }
        Ok(out)
    };
    let user_grad = to_raw(&users, gu_hat, "user")?;
    let item_grad = to_raw(&items, gv_hat, "item")?;

    let uniform = (lu + lv) / 2.0;
    Ok((
        LossParts {
            total: align + gamma * uniform,
            align,
            uniform,
        },
        BatchGrads {
            user_rows: users.rows,
            user_grad,
            item_rows: items.rows,
            item_grad,
        },
    ))
}

/// Lazy (sparse) Adam: first and second moments per parameter, updated only
/// on rows present in a batch; bias correction uses the global step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_users: Array2<f32>,
    v_users: Array2<f32>,
    m_items: Array2<f32>,
    v_items: Array2<f32>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_users: usize, n_items: usize, d: usize, lr: f64) -> Self {
        AdamState {
            m_users: Array2::zeros((n_users, d)),
            v_users: Array2::zeros((n_users, d)),
            m_items: Array2::zeros((n_items, d)),
            v_items: Array2::zeros((n_items, d)),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update over the rows listed in `grads`.
    pub fn step(&mut self, e: &mut EmbeddingSet, grads: &BatchGrads) {
        self.step_count += 1;
        let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        let d = e.dim();
        let update =
            |rows: &[u32], g: &Array2<f32>, p: &mut Array2<f32>, m: &mut Array2<f32>, v: &mut Array2<f32>| {
                for (slot, &row) in rows.iter().enumerate() {
                    let r = row as usize;
                    for x in 0..d {
                        let gx = g[[slot, x]] as f64;
                        let mx = beta1 * m[[r, x]] as f64 + (1.0 - beta1) * gx;
                        let vx = beta2 * v[[r, x]] as f64 + (1.0 - beta2) * gx * gx;
                        m[[r, x]] = mx as f32;
                        v[[r, x]] = vx as f32;
                        let step = lr * (mx / bc1) / ((vx / bc2).sqrt() + eps);
                        p[[r, x]] = (p[[r, x]] as f64 - step) as f32;
                    }
                }
            };
        update(
            &grads.user_rows,
            &grads.user_grad,
            &mut e.users,
            &mut self.m_users,
            &mut self.v_users,
        );
        update(
            &grads.item_rows,
            &grads.item_grad,
            &mut e.items,
            &mut self.m_items,
            &mut self.v_items,
        );
    }
}

/// Applies one sparse Adam update; thin named wrapper over [`AdamState::step`].
pub fn adam_step(e: &mut EmbeddingSet, grads: &BatchGrads, state: &mut AdamState) {
    state.step(e, grads);
}

/// Training-time K-layer convolution for the `gcn` comparison mode; exactly
/// the post-training operator with a layer-sum readout.
pub fn gcn_forward(
    g: &BipartiteGraph,
    e: &EmbeddingSet,
    k: u32,
    self_loop: bool,
) -> Result<EmbeddingSet> {
    conv_discrete(g, e, k, self_loop, Readout::LayerSum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub align: f64,
    pub uniform: f64,
    pub valid_ndcg20: f64,
    /// Optimization wall-clock for the epoch, excluding validation.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub total_seconds: f64,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,align,uniform,valid_ndcg20,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.4}\n",
                e.epoch, e.loss, e.align, e.uniform, e.valid_ndcg20, e.seconds
            ));
        }
        out
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }
}

/// Stop after `patience` consecutive epochs without strict improvement.
#[derive(Debug)]
pub(crate) struct EarlyStopper {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// Trains embeddings on the dataset's train split with early stopping on
/// validation NDCG@20. Returns the base (un-convolved) embeddings of the best
/// epoch — in `gcn` mode the convolution is part of the loss, but the model
/// parameters are still the layer-0 embeddings.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<(EmbeddingSet, TrainingLog)> {
    config.validate()?;
    if config.max_epochs == 0 {
        return Err(Error::NoTraining);
    }
    if dataset.train.is_empty() {
        return Err(Error::EmptySplit { split: "train" });
    }
    if dataset.valid.is_empty() {
        return Err(Error::EmptySplit { split: "valid" });
    }

    let graph = match config.mode {
        TrainMode::Mf => None,
        TrainMode::Gcn { .. } => Some(build_graph(dataset)?),
    };

    let mut e = init_embeddings(dataset.n_users, dataset.n_items, config.d, config.seed)?;
    let mut adam = AdamState::new(dataset.n_users, dataset.n_items, config.d, config.lr);
    let mut order = dataset.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5u64 << 32));

    let mut log = TrainingLog::default();
    let mut stopper = EarlyStopper::new(config.patience.max(1));
    let mut best = e.clone();
    let total_timer = Instant::now();

    for epoch in 1..=config.max_epochs {
        let timer = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut align_sum, mut uniform_sum, mut n_pairs) = (0.0, 0.0, 0.0, 0usize);

        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue; // a lone trailing pair cannot form uniformity pairs
            }
            let (parts, grads) = match (&config.mode, &graph) {
                (TrainMode::Mf, _) => loss_and_grad(batch, &e, config.gamma)?,
                (TrainMode::Gcn { k, self_loop }, Some(g)) => {
                    let conv = gcn_forward(g, &e, *k, *self_loop)?;
                    let (parts, conv_grads) = loss_and_grad(batch, &conv, config.gamma)?;
                    (parts, backprop_through_conv(g, &conv_grads, *k, *self_loop, config.d)?)
                }
                (TrainMode::Gcn { .. }, None) => unreachable!("graph built for gcn mode"),
            };
            adam.step(&mut e, &grads);
            let w = batch.len() as f64;
            loss_sum += parts.total * w;
            align_sum += parts.align * w;
            uniform_sum += parts.uniform * w;
            n_pairs += batch.len();
        }
        let seconds = timer.elapsed().as_secs_f64();
        e.check_finite()?;

        let scored = match (&config.mode, &graph) {
            (TrainMode::Mf, _) => eval::evaluate(dataset, &e, &[20], EvalSplit::Validation)?,
            (TrainMode::Gcn { k, self_loop }, Some(g)) => {
                let conv = gcn_forward(g, &e, *k, *self_loop)?;
                eval::evaluate(dataset, &conv, &[20], EvalSplit::Validation)?
            }
            (TrainMode::Gcn { .. }, None) => unreachable!(),
        };
        let ndcg20 = scored.ndcg[0];

        let denom = n_pairs.max(1) as f64;
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / denom,
            align: align_sum / denom,
            uniform: uniform_sum / denom,
            valid_ndcg20: ndcg20,
            seconds,
        });

        match stopper.observe(epoch, ndcg20) {
            StopDecision::Improved => best = e.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    log.best_epoch = stopper.best_epoch;
    log.total_seconds = total_timer.elapsed().as_secs_f64();
    Ok((best, log))
}

/// Pulls batch gradients on convolved embeddings back to the layer-0
/// parameters. The stacked layer-sum operator Σ_{k=0..K} M^k is symmetric
/// (M is), so the adjoint pass is the same convolution applied to the
/// gradient field.
fn backprop_through_conv(
    g: &BipartiteGraph,
    conv_grads: &BatchGrads,
    k: u32,
    self_loop: bool,
    d: usize,
) -> Result<BatchGrads> {
    let mut gu = Array2::<f32>::zeros((g.n_users, d));
    let mut gv = Array2::<f32>::zeros((g.n_items, d));
    for (slot, &row) in conv_grads.user_rows.iter().enumerate() {
        gu.row_mut(row as usize)
            .assign(&conv_grads.user_grad.row(slot));
    }
    for (slot, &row) in conv_grads.item_rows.iter().enumerate() {
        gv.row_mut(row as usize)
            .assign(&conv_grads.item_grad.row(slot));
    }
    let field = EmbeddingSet::new(gu, gv, Flavor::Initial)?;
    let back = conv_discrete(g, &field, k, self_loop, Readout::LayerSum)?;

    let gather = |m: &Array2<f32>| -> (Vec<u32>, Array2<f32>) {
        let rows: Vec<u32> = (0..m.nrows() as u32)
            .filter(|&r| m.row(r as usize).iter().any(|&x| x != 0.0))
            .collect();
        let mut out = Array2::<f32>::zeros((rows.len(), d));
        for (slot, &r) in rows.iter().enumerate() {
            out.row_mut(slot).assign(&m.row(r as usize));
        }
        (rows, out)
    };
    let (user_rows, user_grad) = gather(&back.users);
    let (item_rows, item_grad) = gather(&back.items);
    Ok(BatchGrads {
        user_rows,
        user_grad,
        item_rows,
        item_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{split, Dataset};
    use crate::synth::{generate, SynthConfig};
    use ndarray::array;

    fn set_of(users: Array2<f32>, items: Array2<f32>) -> EmbeddingSet {
        EmbeddingSet::new(users, items, Flavor::Initial).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = init_embeddings(2000, 50, 64, 3).unwrap();
        let b = init_embeddings(2000, 50, 64, 3).unwrap();
        assert_eq!(a.users, b.users);
        assert_eq!(a.items, b.items);
        assert_ne!(a.users, init_embeddings(2000, 50, 64, 4).unwrap().users);

        let mean_norm: f64 = a
            .users
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 2000.0;
        assert!(
            (0.08..=0.12).contains(&mean_norm),
            "mean row norm {mean_norm}"
        );
    }

    #[test]
    fn align_loss_hand_values() {
        // Identical pair → 0; orthogonal unit pair → 2.
        let e = set_of(
            array![[0.5f32, 0.0], [1.0, 0.0]],
            array![[2.0f32, 0.0], [0.0, 3.0]],
        );
        assert!(align_loss(&[(0, 0)], &e).unwrap().abs() < 1e-12);
        assert!((align_loss(&[(1, 1)], &e).unwrap() - 2.0).abs() < 1e-12);
        // Mean over the two pairs.
        assert!((align_loss(&[(0, 0), (1, 1)], &e).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn align_loss_matches_scalar_recomputation() {
        let e = init_embeddings(6, 7, 5, 11).unwrap();
        let pairs = [(0u32, 3u32), (2, 2), (5, 6)];
        let got = align_loss(&pairs, &e).unwrap();
        let mut want = 0.0;
        for &(u, i) in &pairs {
            let nu: f64 = e.users.row(u as usize).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let ni: f64 = e.items.row(i as usize).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            want += e
                .users
                .row(u as usize)
                .iter()
                .zip(e.items.row(i as usize).iter())
                .map(|(&a, &b)| (a as f64 / nu - b as f64 / ni).powi(2))
                .sum::<f64>();
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn align_loss_rejects_zero_norm_row() {
        let e = set_of(array![[0.0f32, 0.0]], array![[1.0f32, 0.0]]);
        assert!(matches!(
            align_loss(&[(0, 0)], &e),
            Err(Error::ZeroNormRow { matrix: "users", row: 0 })
        ));
    }

    #[cfg(not(feature = "squared-uniformity"))]
    #[test]
    fn uniform_loss_hand_values() {
        // Two identical users and items: every cross pair has distance 0,
        // kernel 1, log 1 = 0 — the worst possible uniformity.
        let e = set_of(
            array![[1.0f32, 0.0], [2.0, 0.0]],
            array![[0.0f32, 1.0], [0.0, 5.0]],
        );
        assert!(uniform_loss(&[0, 1], &[0, 1], &e).unwrap().abs() < 1e-12);

        // Orthogonal unit users (1,0),(0,1) and the same for items:
        // distance √2 → log e^{−2√2} = −2√2 per side.
        let e = set_of(
            array![[1.0f32, 0.0], [0.0, 1.0]],
            array![[0.0f32, 1.0], [1.0, 0.0]],
        );
        let want = -2.0 * 2f64.sqrt();
        assert!((uniform_loss(&[0, 1], &[0, 1], &e).unwrap() - want).abs() < 1e-12);
    }

    #[cfg(feature = "squared-uniformity")]
    #[test]
    fn uniform_loss_squared_kernel_hand_value() {
        // Orthogonal unit vectors: squared distance 2 → log e^{−4} = −4.
        let e = set_of(
            array![[1.0f32, 0.0], [0.0, 1.0]],
            array![[0.0f32, 1.0], [1.0, 0.0]],
        );
        assert!((uniform_loss(&[0, 1], &[0, 1], &e).unwrap() + 4.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_loss_matches_scalar_oracle() {
        let e = init_embeddings(10, 12, 6, 13).unwrap();
        let users = [0u32, 3, 3, 7, 9, 1, 0, 5];
        let items = [2u32, 2, 4, 8, 11, 0, 6, 6];
        let got = uniform_loss(&users, &items, &e).unwrap();

        // Direct double loop over entries, the definition with no shortcuts.
        let side = |ids: &[u32], m: &Array2<f32>| -> f64 {
            let hat = |r: u32| -> Vec<f64> {
                let v: Vec<f64> = m.row(r as usize).iter().map(|&x| x as f64).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            };
            let n = ids.len();
            let mut s = 0.0;
            for a in 0..n {
                for bq in 0..n {
                    if a == bq {
                        continue;
                    }
                    let (ha, hb) = (hat(ids[a]), hat(ids[bq]));
                    let dist = ha
                        .iter()
                        .zip(&hb)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    s += kernel(dist);
                }
            }
            (s / (n * (n - 1)) as f64).ln()
        };
        let want = (side(&users, &e.users) + side(&items, &e.items)) / 2.0;
        assert!((got - want).abs() < 1e-12);
        assert!((-4.0..=0.0).contains(&got));
    }

    #[test]
    fn uniform_loss_needs_two_per_side() {
        let e = init_embeddings(3, 3, 4, 1).unwrap();
        assert!(matches!(
            uniform_loss(&[0], &[0, 1], &e),
            Err(Error::BatchTooSmall { needed: 2, found: 1, .. })
        ));
    }

    #[test]
    fn loss_is_zero_at_perfect_alignment_with_gamma_zero() {
        let e = set_of(array![[0.6f32, 0.8], [0.0, 1.0]], array![[0.6f32, 0.8], [0.0, 2.0]]);
        let (parts, grads) = loss_and_grad(&[(0, 0), (1, 1)], &e, 0.0).unwrap();
        assert!(parts.total.abs() < 1e-12);
        assert!(grads.user_grad.iter().all(|&g| g.abs() < 1e-12));
        assert!(grads.item_grad.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn doubling_gamma_doubles_uniform_share() {
        let e = init_embeddings(8, 8, 4, 5).unwrap();
        let pairs = [(0u32, 1u32), (2, 3), (4, 5), (6, 7)];
        let (p1, _) = loss_and_grad(&pairs, &e, 1.5).unwrap();
        let (p2, _) = loss_and_grad(&pairs, &e, 3.0).unwrap();
        assert!((p1.align - p2.align).abs() < 1e-12);
        assert!(((p2.total - p2.align) - 2.0 * (p1.total - p1.align)).abs() < 1e-10);
    }

    /// Central finite differences through the f32 parameters; the step is the
    /// actually-realized f32 difference.
    fn fd_check(e: &EmbeddingSet, pairs: &[(u32, u32)], gamma: f64, coords: &[(bool, u32, usize)]) {
        let (_, grads) = loss_and_grad(pairs, e, gamma).unwrap();
        let loss_of = |set: &EmbeddingSet| -> f64 {
            let a = align_loss(pairs, set).unwrap();
            let us: Vec<u32> = pairs.iter().map(|&(u, _)| u).collect();
            let is: Vec<u32> = pairs.iter().map(|&(_, i)| i).collect();
            a + gamma * uniform_loss(&us, &is, set).unwrap()
        };
        for &(is_user, row, col) in coords {
            let mut plus = e.clone();
            let mut minus = e.clone();
            let (m_plus, m_minus) = if is_user {
                (&mut plus.users, &mut minus.users)
            } else {
                (&mut plus.items, &mut minus.items)
            };
            let orig = m_plus[[row as usize, col]];
            m_plus[[row as usize, col]] = (orig as f64 + 1e-4) as f32;
            m_minus[[row as usize, col]] = (orig as f64 - 1e-4) as f32;
            let h = m_plus[[row as usize, col]] as f64 - m_minus[[row as usize, col]] as f64;
            let fd = (loss_of(&plus) - loss_of(&minus)) / h;

            let analytic = if is_user {
                grads
                    .user_rows
                    .iter()
                    .position(|&r| r == row)
                    .map(|slot| grads.user_grad[[slot, col]] as f64)
                    .unwrap_or(0.0)
            } else {
                grads
                    .item_rows
                    .iter()
                    .position(|&r| r == row)
                    .map(|slot| grads.item_grad[[slot, col]] as f64)
                    .unwrap_or(0.0)
            };
            let err = (analytic - fd).abs() / f64::max(1.0, fd.abs());
            assert!(
                err < 1e-4,
                "γ={gamma} coord=({is_user},{row},{col}): analytic {analytic} vs fd {fd} (rel {err:.2e})"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::Rng;
        for (case, gamma) in [(0u64, 0.0f64), (1, 0.5), (2, 5.0)] {
            let e = init_embeddings(9, 10, 16, 100 + case).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(200 + case);
            let pairs: Vec<(u32, u32)> = (0..8)
                .map(|_| (rng.random_range(0..9), rng.random_range(0..10)))
                .collect();
            let coords: Vec<(bool, u32, usize)> = (0..10)
                .map(|_| {
                    let from_pair = &pairs[rng.random_range(0..pairs.len())];
                    let is_user = rng.random::<bool>();
                    let row = if is_user { from_pair.0 } else { from_pair.1 };
                    (is_user, row, rng.random_range(0..16))
                })
                .collect();
            fd_check(&e, &pairs, gamma, &coords);
        }
    }

    #[test]
    fn untouched_rows_have_no_gradient() {
        let e = init_embeddings(6, 6, 4, 7).unwrap();
        let pairs = [(0u32, 0u32), (1, 1)];
        let (_, grads) = loss_and_grad(&pairs, &e, 1.0).unwrap();
        assert_eq!(grads.user_rows, vec![0, 1]);
        assert_eq!(grads.item_rows, vec![0, 1]);
    }

    /// Rotating every row by one orthogonal matrix leaves both losses
    /// unchanged (they only see norms and pairwise distances).
    #[test]
    fn losses_are_rotation_invariant() {
        use rand::Rng;
        let d = 8;
        let e = init_embeddings(7, 7, d, 17).unwrap();
        let pairs = [(0u32, 2u32), (1, 1), (3, 5), (6, 0)];
        let us: Vec<u32> = pairs.iter().map(|&(u, _)| u).collect();
        let is: Vec<u32> = pairs.iter().map(|&(_, i)| i).collect();

        // Orthogonal matrix as a product of random Givens rotations.
        let rotate = |m: &Array2<f32>| -> Array2<f32> {
            let mut out = m.mapv(|x| x as f64);
            let mut local = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            for _ in 0..20 {
                let i = local.random_range(0..d);
                let mut j = local.random_range(0..d - 1);
                if j >= i {
                    j += 1;
                }
                let theta: f64 = local.random_range(0.0..std::f64::consts::TAU);
                let (c, s) = (theta.cos(), theta.sin());
                for r in 0..out.nrows() {
                    let (a, b) = (out[[r, i]], out[[r, j]]);
                    out[[r, i]] = c * a - s * b;
                    out[[r, j]] = s * a + c * b;
                }
            }
            out.mapv(|x| x as f32)
        };
        let rotated = set_of(rotate(&e.users), rotate(&e.items));

        let a0 = align_loss(&pairs, &e).unwrap();
        let a1 = align_loss(&pairs, &rotated).unwrap();
        assert!((a0 - a1).abs() < 1e-5, "{a0} vs {a1}");
        let u0 = uniform_loss(&us, &is, &e).unwrap();
        let u1 = uniform_loss(&us, &is, &rotated).unwrap();
        assert!((u0 - u1).abs() < 1e-5, "{u0} vs {u1}");
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut e = set_of(array![[0.5f32]], array![[0.5f32]]);
        let mut adam = AdamState::new(1, 1, 1, 1e-3);
        let grads = BatchGrads {
            user_rows: vec![0],
            user_grad: array![[1.0f32]],
            item_rows: vec![],
            item_grad: Array2::zeros((0, 1)),
        };
        adam.step(&mut e, &grads);
        let delta = e.users[[0, 0]] as f64 - 0.5;
        // m̂ = g, √v̂ = |g| = 1 after bias correction, so Δ = −lr/(1 + ε).
        // Parameters are stored in f32: allow an ulp of slack around 0.5.
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((delta - want).abs() < 1e-7, "delta {delta}");
        // Item row untouched.
        assert_eq!(e.items[[0, 0]], 0.5);
    }

    #[test]
    fn adam_zero_gradient_changes_nothing() {
        let mut e = init_embeddings(3, 3, 4, 23).unwrap();
        let before = e.clone();
        let mut adam = AdamState::new(3, 3, 4, 1e-3);
        let grads = BatchGrads {
            user_rows: vec![1],
            user_grad: Array2::zeros((1, 4)),
            item_rows: vec![2],
            item_grad: Array2::zeros((1, 4)),
        };
        adam.step(&mut e, &grads);
        assert_eq!(e.users, before.users);
        assert_eq!(e.items, before.items);
    }

    #[test]
    fn adam_updates_only_listed_rows() {
        let mut e = init_embeddings(5, 5, 3, 29).unwrap();
        let before = e.clone();
        let mut adam = AdamState::new(5, 5, 3, 1e-3);
        let grads = BatchGrads {
            user_rows: vec![0, 3],
            user_grad: Array2::from_elem((2, 3), 0.5),
            item_rows: vec![4],
            item_grad: Array2::from_elem((1, 3), -0.5),
        };
        adam.step(&mut e, &grads);
        for r in [1usize, 2, 4] {
            assert_eq!(e.users.row(r), before.users.row(r), "user row {r}");
        }
        for r in [0usize, 1, 2, 3] {
            assert_eq!(e.items.row(r), before.items.row(r), "item row {r}");
        }
        assert_ne!(e.users.row(0), before.users.row(0));
        assert_ne!(e.items.row(4), before.items.row(4));
    }

    #[test]
    fn early_stopper_scripted_sequence() {
        // Strictly decreasing metric: best is epoch 1, training stops after
        // `patience` non-improving epochs, i.e. at epoch 11.
        let mut stopper = EarlyStopper::new(10);
        assert_eq!(stopper.observe(1, 0.5), StopDecision::Improved);
        for epoch in 2..=10 {
            assert_eq!(
                stopper.observe(epoch, 0.5 - epoch as f64 * 0.01),
                StopDecision::Continue
            );
        }
        assert_eq!(stopper.observe(11, 0.1), StopDecision::Stop);
        assert_eq!(stopper.best_epoch, 1);
    }

    #[test]
    fn early_stopper_resets_on_improvement() {
        let mut stopper = EarlyStopper::new(2);
        stopper.observe(1, 0.1);
        assert_eq!(stopper.observe(2, 0.05), StopDecision::Continue);
        assert_eq!(stopper.observe(3, 0.2), StopDecision::Improved);
        assert_eq!(stopper.observe(4, 0.0), StopDecision::Continue);
        assert_eq!(stopper.observe(5, 0.0), StopDecision::Stop);
        assert_eq!(stopper.best_epoch, 3);
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        split(&generate(&SynthConfig::tiny(seed)), (0.8, 0.1, 0.1), seed).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            d: 8,
            batch_size: 32,
            max_epochs: 5,
            patience: 10,
            gamma: 1.0,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_runs_one_epoch_when_asked() {
        let ds = tiny_dataset(1);
        let cfg = TrainConfig {
            max_epochs: 1,
            ..tiny_config()
        };
        let (_, log) = fit(&ds, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert_eq!(log.best_epoch, 1);
    }

    #[test]
    fn fit_rejects_zero_epochs() {
        let ds = tiny_dataset(1);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..tiny_config()
        };
        assert!(matches!(fit(&ds, &cfg), Err(Error::NoTraining)));
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = tiny_dataset(2);
        let cfg = tiny_config();
        let (e1, l1) = fit(&ds, &cfg).unwrap();
        let (e2, l2) = fit(&ds, &cfg).unwrap();
        assert_eq!(e1.users, e2.users);
        assert_eq!(e1.items, e2.items);
        let strip = |l: &TrainingLog| -> Vec<(usize, f64, f64, f64, f64)> {
            l.epochs
                .iter()
                .map(|e| (e.epoch, e.loss, e.align, e.uniform, e.valid_ndcg20))
                .collect()
        };
        assert_eq!(strip(&l1), strip(&l2));
    }

    #[test]
    fn fit_reduces_alignment_loss() {
        let ds = tiny_dataset(3);
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 30,
            ..tiny_config()
        };
        let (_, log) = fit(&ds, &cfg).unwrap();
        let first = log.epochs.first().unwrap().align;
        let last = log.epochs.last().unwrap().align;
        assert!(last < first, "align did not improve: {first} -> {last}");
    }

    #[test]
    fn gcn_forward_is_bitwise_conv_discrete() {
        let ds = tiny_dataset(4);
        let g = build_graph(&ds).unwrap();
        let e = init_embeddings(ds.n_users, ds.n_items, 6, 5).unwrap();
        let a = gcn_forward(&g, &e, 2, false).unwrap();
        let b = conv_discrete(&g, &e, 2, false, Readout::LayerSum).unwrap();
        assert_eq!(a.users, b.users);
        assert_eq!(a.items, b.items);
    }

    /// The gcn-mode adjoint gradient must agree with finite differences
    /// through the full convolve-then-loss composition.
    #[test]
    fn gcn_mode_gradient_matches_finite_differences() {
        use rand::Rng;
        let ds = tiny_dataset(6);
        let g = build_graph(&ds).unwrap();
        let e = init_embeddings(ds.n_users, ds.n_items, 6, 31).unwrap();
        let gamma = 0.7;
        let (k, self_loop) = (2u32, false);
        let pairs: Vec<(u32, u32)> = ds.train[..6].to_vec();

        let conv = gcn_forward(&g, &e, k, self_loop).unwrap();
        let (_, conv_grads) = loss_and_grad(&pairs, &conv, gamma).unwrap();
        let grads = backprop_through_conv(&g, &conv_grads, k, self_loop, 6).unwrap();

        let loss_of = |set: &EmbeddingSet| -> f64 {
            let c = gcn_forward(&g, set, k, self_loop).unwrap();
            let us: Vec<u32> = pairs.iter().map(|&(u, _)| u).collect();
            let is: Vec<u32> = pairs.iter().map(|&(_, i)| i).collect();
            align_loss(&pairs, &c).unwrap() + gamma * uniform_loss(&us, &is, &c).unwrap()
        };

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        for _ in 0..8 {
            let is_user = rng.random::<bool>();
            let row = if is_user {
                rng.random_range(0..ds.n_users)
            } else {
                rng.random_range(0..ds.n_items)
            };
            let col = rng.random_range(0..6usize);
            let mut plus = e.clone();
            let mut minus = e.clone();
            {
                let (mp, mm) = if is_user {
                    (&mut plus.users, &mut minus.users)
                } else {
                    (&mut plus.items, &mut minus.items)
                };
                let orig = mp[[row, col]];
                mp[[row, col]] = (orig as f64 + 1e-4) as f32;
                mm[[row, col]] = (orig as f64 - 1e-4) as f32;
            }
            let h = if is_user {
                plus.users[[row, col]] as f64 - minus.users[[row, col]] as f64
            } else {
                plus.items[[row, col]] as f64 - minus.items[[row, col]] as f64
            };
            let fd = (loss_of(&plus) - loss_of(&minus)) / h;
            let analytic = if is_user {
                grads
                    .user_rows
                    .iter()
                    .position(|&r| r as usize == row)
                    .map(|s| grads.user_grad[[s, col]] as f64)
                    .unwrap_or(0.0)
            } else {
                grads
                    .item_rows
                    .iter()
                    .position(|&r| r as usize == row)
                    .map(|s| grads.item_grad[[s, col]] as f64)
                    .unwrap_or(0.0)
            };
            let err = (analytic - fd).abs() / f64::max(1.0, fd.abs());
            assert!(err < 1e-3, "({is_user},{row},{col}): {analytic} vs {fd}");
        }
    }

    #[test]
    fn fit_gcn_mode_trains() {
        let ds = tiny_dataset(8);
        let cfg = TrainConfig {
            mode: TrainMode::Gcn {
                k: 2,
                self_loop: false,
            },
            max_epochs: 3,
            ..tiny_config()
        };
        let (e, log) = fit(&ds, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert_eq!(e.flavor, Flavor::Initial);
    }

    #[test]
    fn training_log_csv_shape() {
        let log = TrainingLog {
            epochs: vec![EpochStats {
                epoch: 1,
                loss: 1.5,
                align: 1.0,
                uniform: -0.25,
                valid_ndcg20: 0.125,
                seconds: 0.5,
            }],
            best_epoch: 1,
            total_seconds: 0.5,
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,loss,align,uniform,valid_ndcg20,seconds"
        );
        assert_eq!(lines.next().unwrap(), "1,1.500000,1.000000,-0.250000,0.125000,0.5000");
    }
}
