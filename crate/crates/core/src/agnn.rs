//! Attentional graph network over the objects of both images.
//!
//! Stages alternate self-attention (keys and values from the same image,
//! including the object itself) and cross-attention (keys and values from the
//! other image). Each stage applies a residual update
//! `x <- x + g([x, m])` with `m = softmax(q k^T) v`. Attention is single-head
//! and unscaled.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ModelConfig;
use crate::nn::{Bound, Linear, Mlp, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAttention,
    Cross,
}

/// Stage schedule: self and cross attention, alternated twice.
pub const STAGE_MODES: [AttentionMode; 4] = [
    AttentionMode::SelfAttention,
    AttentionMode::Cross,
    AttentionMode::SelfAttention,
    AttentionMode::Cross,
];

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub mode: AttentionMode,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub update: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agnn {
    pub input: Linear,
    pub stages: Vec<Stage>,
    pub dist: Mlp,
    pub width: usize,
}

/// Nodes of one attention evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub queries: NodeId,
    pub keys: NodeId,
    pub values: NodeId,
    /// Row-stochastic `n_query x n_key`.
    pub weights: NodeId,
    pub messages: NodeId,
}

impl Agnn {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d_obj: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.d_agnn;
        let input = Linear::new(store, "agnn.input", d_obj, w, rng);
        // identity plus small noise
        {
            let t = store.get_mut(input.weight);
            for r in 0..d_obj {
                for c in 0..w {
                    let eye = if r == c { 1.0 } else { 0.0 };
                    t[(r, c)] = T::from_f64(eye + rng.random_range(-0.01..=0.01));
                }
            }
        }
        let stages = STAGE_MODES
            .iter()
            .enumerate()
            .map(|(i, &mode)| Stage {
                mode,
                query: Linear::new(store, &format!("agnn.stage{i}.query"), w, w, rng),
                key: Linear::new(store, &format!("agnn.stage{i}.key"), w, w, rng),
                value: Linear::new(store, &format!("agnn.stage{i}.value"), w, w, rng),
                update: Mlp::new(
                    store,
                    &format!("agnn.stage{i}.update"),
                    2 * w,
                    &[cfg.agnn_hidden, w],
                    rng,
                ),
            })
            .collect();
        let dist = Mlp::new(store, "agnn.dist", 2 * w, &[cfg.dist_hidden, 1], rng);
        Agnn {
            input,
            stages,
            dist,
            width: w,
        }
    }

    /// Messages for the rows of `xq` attending over the rows of `xkv`.
    pub fn attention<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        stage: &Stage,
        xq: NodeId,
        xkv: NodeId,
    ) -> Result<AttentionNodes> {
        if g.value(xkv).rows() == 0 && g.value(xq).rows() > 0 {
            return Err(Error::invalid("attention over an empty object set"));
        }
        let queries = stage.query.forward(g, p, xq)?;
        let keys = stage.key.forward(g, p, xkv)?;
        let values = stage.value.forward(g, p, xkv)?;
        let kt = g.transpose(keys);
        let logits = g.matmul(queries, kt)?;
        let weights = g.row_softmax(logits);
        let messages = g.matmul(weights, values)?;
        Ok(AttentionNodes {
            queries,
            keys,
            values,
            weights,
            messages,
        })
    }

    fn update<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        stage: &Stage,
        x: NodeId,
        m: NodeId,
    ) -> Result<NodeId> {
        let cat = g.concat_cols(&[x, m])?;
        let delta = stage.update.forward(g, p, cat)?;
        g.add(x, delta)
    }

    /// One residual attention stage applied to both images simultaneously.
    pub fn attention_stage<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        stage: &Stage,
        x1: NodeId,
        x2: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        for x in [x1, x2] {
            let w = g.value(x).cols();
            if w != self.width {
                return Err(Error::Shape {
                    op: "attention_stage",
                    lhs: format!("feature width {w}"),
                    rhs: format!("width {}", self.width),
                });
            }
        }
        let (kv1, kv2) = match stage.mode {
            AttentionMode::SelfAttention => (x1, x2),
            AttentionMode::Cross => {
                if g.value(x1).rows() == 0 || g.value(x2).rows() == 0 {
                    return Err(Error::invalid(
                        "cross attention needs objects in both images",
                    ));
                }
                (x2, x1)
            }
        };
        let a1 = self.attention(g, p, stage, x1, kv1)?;
        let a2 = self.attention(g, p, stage, x2, kv2)?;
        let y1 = self.update(g, p, stage, x1, a1.messages)?;
        let y2 = self.update(g, p, stage, x2, a2.messages)?;
        Ok((y1, y2))
    }

    /// Input projection followed by every stage; returns matching features.
    pub fn refine<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        f1: NodeId,
        f2: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut x1 = self.input.forward(g, p, f1)?;
        let mut x2 = self.input.forward(g, p, f2)?;
        for stage in &self.stages {
            (x1, x2) = self.attention_stage(g, p, stage, x1, x2)?;
        }
        Ok((x1, x2))
    }

    /// Relative distance for one ordered pair via `g_dist([x_i, x_j])`.
    pub fn predict_rel_distance<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        xi: NodeId,
        xj: NodeId,
    ) -> Result<NodeId> {
        let cat = g.concat_cols(&[xi, xj])?;
        self.dist.forward(g, p, cat)
    }

    /// Relative distances for many ordered pairs of rows of `x`, `P x 1`.
    ///
    /// The first `g_dist` layer is split into the halves acting on `x_i` and
    /// `x_j`, so it is applied per object instead of per pair.
    pub fn rel_distances<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        x: NodeId,
        pairs: &[(usize, usize)],
    ) -> Result<NodeId> {
        let first = &self.dist.layers[0];
        let w = self.width;
        let w_top = g.slice_rows(p[first.weight], 0, w)?;
        let w_bot = g.slice_rows(p[first.weight], w, 2 * w)?;
        let a = g.matmul(x, w_top)?;
        let b = g.matmul(x, w_bot)?;
        let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let ai = g.gather_rows(a, &is)?;
        let bj = g.gather_rows(b, &js)?;
        let h = g.add(ai, bj)?;
        let mut h = g.add_row(h, p[first.bias])?;
        let rest = &self.dist.layers[1..];
        for layer in rest {
            h = g.relu(h);
            h = layer.forward(g, p, h)?;
        }
        Ok(h)
    }
}

/// All ordered pairs `(i, j)` with `i != j` over `n` objects.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Attention weights of a single stage evaluated outside training.
pub fn stage_attention_weights<T: Real>(
    agnn: &Agnn,
    store: &ParamStore<T>,
    stage: usize,
    xq: &Tensor<T>,
    xkv: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let q = g.constant(xq.clone());
    let k = g.constant(xkv.clone());
    let a = agnn.attention(&mut g, &p, &agnn.stages[stage], q, k)?;
    Ok(g.value(a.weights).clone())
}
