//! Post-training graph convolution.
//!
//! Embeddings are trained convolution-free; the neighborhood smoothing that
//! message-passing models pay for on every training step is applied here once,
//! after training. Two interchangeable operators are provided:
//!
//! * [`conv_discrete`] — K synchronous layers, with or without self-loop,
//!   combined by a layer-sum (or last-layer) readout;
//! * [`ode_solve_euler`] — the continuous-depth limit dh/dt = Āh + h₀ solved
//!   by fixed-step forward Euler. With dt = 1 the Euler iterate telescopes to
//!   exactly the self-loop layer sum Σ_{k=0..K} (Ā+I)^k h₀.
//!
//! [`embedding_discrepancy`] quantifies how far convolution moves the trained
//! embedding space.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalized_rows_f64, sq_dist, EmbeddingSet, Flavor};
use crate::graph::BipartiteGraph;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Plain normalized aggregation per layer (no self-loop).
    Discrete,
    /// Self-loop aggregation u^k = u^{k-1} + Σ w·v^{k-1} per layer.
    DiscreteSl,
    /// Forward-Euler solution of dh/dt = Āh + h₀.
    Ode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Σ_{k=0..K} of the layer embeddings.
    LayerSum,
    /// The K-th layer alone.
    LastLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub mode: ConvMode,
    /// Layer count for the discrete modes.
    pub k: u32,
    /// Integration horizon for the ODE mode.
    pub t: f64,
    /// Euler step; the final step is shortened to land exactly on `t`.
    pub dt: f64,
    /// Readout for the discrete modes; the ODE output is h(t) itself.
    pub readout: Readout,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            mode: ConvMode::Ode,
            k: 2,
            t: 1.0,
            dt: 0.1,
            readout: Readout::LayerSum,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0) {
            return Err(Error::InvalidConfig(format!("horizon t = {} < 0", self.t)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("step dt = {} <= 0", self.dt)));
        }
        if self.t > 0.0 && self.dt > self.t {
            return Err(Error::InvalidConfig(format!(
                "step dt = {} exceeds horizon t = {}",
                self.dt, self.t
            )));
        }
        Ok(())
    }
}

/// Dispatches to the operator selected by `cfg.mode`.
pub fn convolve(g: &BipartiteGraph, e0: &EmbeddingSet, cfg: &ConvConfig) -> Result<EmbeddingSet> {
    cfg.validate()?;
    match cfg.mode {
        ConvMode::Discrete => conv_discrete(g, e0, cfg.k, false, cfg.readout),
        ConvMode::DiscreteSl => conv_discrete(g, e0, cfg.k, true, cfg.readout),
        ConvMode::Ode => ode_solve_euler(g, e0, cfg.t, cfg.dt),
    }
}

fn check_shapes(g: &BipartiteGraph, e0: &EmbeddingSet) -> Result<()> {
    if e0.n_users() != g.n_users || e0.n_items() != g.n_items {
        return Err(Error::ShapeMismatch {
            expected: format!("{} users x {} items", g.n_users, g.n_items),
            found: format!("{} users x {} items", e0.n_users(), e0.n_items()),
        });
    }
    Ok(())
}

/// K-layer discrete convolution. Layers update synchronously — both sides of
/// layer k read layer k−1. `e0` is left untouched.
pub fn conv_discrete(
    g: &BipartiteGraph,
    e0: &EmbeddingSet,
    k: u32,
    self_loop: bool,
    readout: Readout,
) -> Result<EmbeddingSet> {
    check_shapes(g, e0)?;
    let mut u_cur = e0.users.clone();
    let mut v_cur = e0.items.clone();
    let mut u_sum = u_cur.clone();
    let mut v_sum = v_cur.clone();
    for _ in 0..k {
        let mut u_next = g.agg_items_to_users(v_cur.view())?;
        let mut v_next = g.agg_users_to_items(u_cur.view())?;
        if self_loop {
            u_next += &u_cur;
            v_next += &v_cur;
        }
        u_cur = u_next;
        v_cur = v_next;
        u_sum += &u_cur;
        v_sum += &v_cur;
    }
    let (users, items) = match readout {
        Readout::LayerSum => (u_sum, v_sum),
        Readout::LastLayer => (u_cur, v_cur),
    };
    let out = EmbeddingSet::new(users, items, Flavor::Convolved)?;
    out.check_finite()?;
    Ok(out)
}

/// Forward-Euler integration of dh/dt = Āh + h₀ from h(0) = h₀ to h(t).
pub fn ode_solve_euler(
    g: &BipartiteGraph,
    e0: &EmbeddingSet,
    t: f64,
    dt: f64,
) -> Result<EmbeddingSet> {
    check_shapes(g, e0)?;
    if !(t >= 0.0) {
        return Err(Error::InvalidConfig(format!("horizon t = {t} < 0")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("step dt = {dt} <= 0")));
    }

    let mut users = e0.users.clone();
    let mut items = e0.items.clone();
    let n_full = (t / dt).floor() as usize;
    let remainder = (t - n_full as f64 * dt).max(0.0);

    let step = |users: &mut Array2<f32>,
                items: &mut Array2<f32>,
                h: f64,
                index: usize|
     -> Result<()> {
        let du = g.agg_items_to_users(items.view())?;
        let dv = g.agg_users_to_items(users.view())?;
        let h = h as f32;
        azip(users, &du, &e0.users, h);
        azip(items, &dv, &e0.items, h);
        for (name, m) in [("user", &*users), ("item", &*items)] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("{name} embeddings after Euler step {index}"),
                });
            }
        }
        Ok(())
    };
    // x += h·(dx + x0), element-wise.
    fn azip(x: &mut Array2<f32>, dx: &Array2<f32>, x0: &Array2<f32>, h: f32) {
        ndarray::Zip::from(x)
            .and(dx)
            .and(x0)
            .for_each(|x, &dx, &x0| *x += h * (dx + x0));
    }

    for i in 0..n_full {
        step(&mut users, &mut items, dt, i)?;
    }
    if remainder > 1e-12 {
        step(&mut users, &mut items, remainder, n_full)?;
    }
    EmbeddingSet::new(users, items, Flavor::Convolved)
}

/// Mean over all user and item rows of ‖ê_a − ê_b‖₂ after row normalization.
/// Scale-free: comparing a set against any positive rescaling of itself
/// gives 0. Range [0, 2].
pub fn embedding_discrepancy(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.n_users() != b.n_users() || a.n_items() != b.n_items() || a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} x {} x {}", a.n_users(), a.n_items(), a.dim()),
            found: format!("{} x {} x {}", b.n_users(), b.n_items(), b.dim()),
        });
    }
    let mut total = 0.0f64;
    for (ma, mb, name) in [
        (&a.users, &b.users, "users"),
        (&a.items, &b.items, "items"),
    ] {
        let ra = normalized_rows_f64(ma, name)?;
        let rb = normalized_rows_f64(mb, name)?;
        for (x, y) in ra.iter().zip(&rb) {
            total += sq_dist(x, y).sqrt();
        }
    }
    Ok(total / (a.n_users() + a.n_items()) as f64)
}

/// Provenance of a convolved checkpoint, written as JSON next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSidecar {
    pub flavor: Flavor,
    pub conv: ConvConfig,
    /// Checkpoint file the convolution was applied to.
    pub source: String,
}

pub fn save_sidecar(sidecar: &ConvSidecar, path: impl AsRef<Path>) -> Result<()> {
    let w = BufWriter::new(File::create(path.as_ref())?);
    serde_json::to_writer_pretty(w, sidecar)?;
    Ok(())
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<ConvSidecar> {
    let r = BufReader::new(File::open(path.as_ref())?);
    Ok(serde_json::from_reader(r)?)
}
