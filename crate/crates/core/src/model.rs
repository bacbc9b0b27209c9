//! Full matching network: encoder, attentional GNN, dustbin and Sinkhorn.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agnn::{ordered_pairs, Agnn};
use crate::encoder::{box_tensor, Encoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matcher::{extract_assignment, sinkhorn_graph, Matches, DEFAULT_ITERATIONS};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::scene::BBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_viz: usize,
    pub num_classes: usize,
    pub loc_layers: Vec<usize>,
    /// Shared shape of the view-dependent and view-independent branches.
    pub branch_layers: Vec<usize>,
    pub pos_hidden: usize,
    pub class_hidden: usize,
    pub d_agnn: usize,
    pub agnn_hidden: usize,
    pub dist_hidden: usize,
    pub sinkhorn_iterations: usize,
    pub dustbin_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Layer widths of the reference architecture.
    pub fn full(d_viz: usize, num_classes: usize) -> Self {
        ModelConfig {
            d_viz,
            num_classes,
            loc_layers: alloc::vec![32, 64, 128],
            branch_layers: alloc::vec![512, 256, 128, 128],
            pos_hidden: 256,
            class_hidden: 256,
            d_agnn: 256,
            agnn_hidden: 256,
            dist_hidden: 256,
            sinkhorn_iterations: DEFAULT_ITERATIONS,
            dustbin_init: 1.0,
        }
    }

    /// Reference widths divided by `factor` (at least 1 each).
    pub fn scaled(d_viz: usize, num_classes: usize, factor: usize) -> Self {
        let full = Self::full(d_viz, num_classes);
        let s = |w: usize| (w / factor.max(1)).max(1);
        ModelConfig {
            loc_layers: full.loc_layers.iter().map(|&w| s(w)).collect(),
            branch_layers: full.branch_layers.iter().map(|&w| s(w)).collect(),
            pos_hidden: s(full.pos_hidden),
            class_hidden: s(full.class_hidden),
            d_agnn: s(full.d_agnn),
            agnn_hidden: s(full.agnn_hidden),
            dist_hidden: s(full.dist_hidden),
            ..full
        }
    }

    /// Widths 8 everywhere with four classes; for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_viz: 8,
            num_classes: 4,
            loc_layers: alloc::vec![8, 8],
            branch_layers: alloc::vec![8, 8],
            pos_hidden: 8,
            class_hidden: 8,
            d_agnn: 8,
            agnn_hidden: 8,
            dist_hidden: 8,
            sinkhorn_iterations: DEFAULT_ITERATIONS,
            dustbin_init: 1.0,
        }
    }

    /// Configuration used for desk-scale training runs.
    pub fn desk() -> Self {
        Self::scaled(32, 10, 4)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.loc_layers.iter().chain(&self.branch_layers).chain([
            &self.d_viz,
            &self.pos_hidden,
            &self.class_hidden,
            &self.d_agnn,
            &self.agnn_hidden,
            &self.dist_hidden,
        ]);
        if self.loc_layers.is_empty() || self.branch_layers.is_empty() {
            return Err(Error::invalid("encoder branches need at least one layer"));
        }
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(Error::invalid("sinkhorn_iterations must be positive"));
        }
        if !self.dustbin_init.is_finite() {
            return Err(Error::invalid("dustbin_init must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub agnn: Agnn,
    /// Shared dustbin score `z`, `1 x 1`.
    pub dustbin: ParamId,
}

/// Graph nodes of one forward pass over an image pair.
#[derive(Debug, Clone, Copy)]
pub struct PairNodes {
    pub m: usize,
    pub n: usize,
    /// `(M+N) x 3` position-head outputs, image 1 first.
    pub position: NodeId,
    /// `(M+N) x C`.
    pub logits: NodeId,
    pub x1: NodeId,
    pub x2: NodeId,
    /// Augmented `(M+1) x (N+1)` object scores.
    pub scores: NodeId,
    pub log_p: NodeId,
    /// `M(M-1) x 1` over `ordered_pairs(M)`.
    pub rel1: NodeId,
    pub rel2: NodeId,
}

/// Inputs of one image: `n x d_viz` features and `n` boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput<T> {
    pub features: Tensor<T>,
    pub boxes: Vec<BBox>,
}

impl<T: Real> ImageInput<T> {
    pub fn new(features: Tensor<T>, boxes: Vec<BBox>) -> Result<Self> {
        if features.rows() != boxes.len() {
            return Err(Error::Shape {
                op: "image_input",
                lhs: features.shape_string(),
                rhs: alloc::format!("{} boxes", boxes.len()),
            });
        }
        Ok(ImageInput { features, boxes })
    }

    pub fn from_f32_rows(rows: &[Vec<f32>], boxes: Vec<BBox>, d_viz: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * d_viz);
        for r in rows {
            if r.len() != d_viz {
                return Err(Error::Shape {
                    op: "image_input",
                    lhs: alloc::format!("feature width {}", r.len()),
                    rhs: alloc::format!("d_viz {d_viz}"),
                });
            }
            data.extend(r.iter().map(|&x| T::from_f64(x as f64)));
        }
        Self::new(Tensor::from_vec(rows.len(), d_viz, data)?, boxes)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Plain outputs of the network for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    /// Augmented object scores `S_bar_obj`.
    pub scores: Tensor<T>,
    pub log_p: Tensor<T>,
    pub matches: Matches,
    /// `(M+N) x 3`: offset x, offset y, distance.
    pub position: Tensor<T>,
    pub logits: Tensor<T>,
    /// `M x M` and `N x N` predicted relative distances, zero diagonal.
    pub rel1: Tensor<T>,
    pub rel2: Tensor<T>,
}

impl<T: Real> Model<T> {
    /// Xavier-uniform weights, zero biases, identity-like AGNN input
    /// projection and the configured dustbin score.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng);
        let agnn = Agnn::new(&mut store, encoder.object_width(), &config, &mut rng);
        let dustbin = store.add("dustbin", Tensor::scalar(T::from_f64(config.dustbin_init)));
        Ok(Model {
            config,
            store,
            encoder,
            agnn,
            dustbin,
        })
    }

    pub fn dustbin_value(&self) -> T {
        self.store.get(self.dustbin).data()[0]
    }

    /// Builds the full differentiable forward pass for one pair.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        viz1: NodeId,
        boxes1: NodeId,
        viz2: NodeId,
        boxes2: NodeId,
    ) -> Result<PairNodes> {
        let (m, n) = (g.value(viz1).rows(), g.value(viz2).rows());
        if m == 0 || n == 0 {
            return Err(Error::invalid("each image needs at least one object"));
        }
        let viz = g.concat_rows(&[viz1, viz2])?;
        let boxes = g.concat_rows(&[boxes1, boxes2])?;
        let enc = self.encoder.forward(g, p, viz, boxes)?;
        let f1 = g.slice_rows(enc.f, 0, m)?;
        let f2 = g.slice_rows(enc.f, m, m + n)?;
        let (x1, x2) = self.agnn.refine(g, p, f1, f2)?;
        let x2t = g.transpose(x2);
        let s = g.matmul(x1, x2t)?;
        let z = p[self.dustbin];
        let right = g.broadcast(z, m, 1)?;
        let bottom = g.broadcast(z, 1, n)?;
        let scores = g.block(s, right, bottom, z)?;
        let log_p = sinkhorn_graph(g, scores, self.config.sinkhorn_iterations)?;
        let rel1 = self.agnn.rel_distances(g, p, x1, &ordered_pairs(m))?;
        let rel2 = self.agnn.rel_distances(g, p, x2, &ordered_pairs(n))?;
        Ok(PairNodes {
            m,
            n,
            position: enc.position,
            logits: enc.logits,
            x1,
            x2,
            scores,
            log_p,
            rel1,
            rel2,
        })
    }

    /// Forward pass on constants, with per-image inputs.
    pub fn forward_inputs<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        img1: &ImageInput<T>,
        img2: &ImageInput<T>,
    ) -> Result<(Bound, PairNodes)> {
        let p = self.store.bind(g);
        let v1 = g.constant(img1.features.clone());
        let b1 = g.constant(box_tensor(&img1.boxes));
        let v2 = g.constant(img2.features.clone());
        let b2 = g.constant(box_tensor(&img2.boxes));
        let nodes = self.forward(g, &p, v1, b1, v2, b2)?;
        Ok((p, nodes))
    }

    /// Evaluates the network on one pair without keeping the graph.
    pub fn infer(&self, img1: &ImageInput<T>, img2: &ImageInput<T>) -> Result<Inference<T>> {
        for b in img1.boxes.iter().chain(&img2.boxes) {
            b.validate()?;
        }
        let mut g = Graph::new();
        let (_, nodes) = self.forward_inputs(&mut g, img1, img2)?;
        let log_p = g.value(nodes.log_p).clone();
        let matches = extract_assignment(&log_p);
        Ok(Inference {
            scores: g.value(nodes.scores).clone(),
            log_p,
            matches,
            position: g.value(nodes.position).clone(),
            logits: g.value(nodes.logits).clone(),
            rel1: rel_matrix(g.value(nodes.rel1), nodes.m),
            rel2: rel_matrix(g.value(nodes.rel2), nodes.n),
        })
    }
}

/// Scatters `ordered_pairs(n)` predictions into an `n x n` matrix.
fn rel_matrix<T: Real>(pred: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(n, n);
    for (k, (i, j)) in ordered_pairs(n).into_iter().enumerate() {
        out[(i, j)] = pred.data()[k];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, d: usize, shift: f64) -> ImageInput<f64> {
        let data = (0..n * d)
            .map(|k| ((k as f64) * 0.37 + shift).sin())
            .collect();
        let boxes = (0..n)
            .map(|i| {
                let x = 0.1 * i as f64;
                BBox::new(x, 0.1, x + 0.2, 0.5)
            })
            .collect();
        ImageInput::new(Tensor::from_vec(n, d, data).unwrap(), boxes).unwrap()
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = Model::<f64>::new(ModelConfig::tiny(), 4).unwrap();
        let b = Model::<f64>::new(ModelConfig::tiny(), 4).unwrap();
        let c = Model::<f64>::new(ModelConfig::tiny(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store, c.store);
        assert_eq!(a.dustbin_value(), 1.0);
        assert_eq!(a.store.names().last().unwrap(), "dustbin");
    }

    #[test]
    fn inference_shapes() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let out = model.infer(&input(3, 8, 0.0), &input(5, 8, 1.0)).unwrap();
        assert_eq!(out.scores.shape(), (4, 6));
        assert_eq!(out.log_p.shape(), (4, 6));
        assert_eq!(out.position.shape(), (8, 3));
        assert_eq!(out.logits.shape(), (8, 4));
        assert_eq!(out.rel1.shape(), (3, 3));
        assert_eq!(out.rel2.shape(), (5, 5));
        assert_eq!(out.scores[(3, 5)], 1.0);
        assert_eq!(out.scores[(0, 5)], 1.0);
        let m = &out.matches;
        assert_eq!(m.matches.len() + m.unmatched1.len(), 3);
        assert_eq!(m.matches.len() + m.unmatched2.len(), 5);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.branch_layers.clear();
        assert!(Model::<f64>::new(c, 0).is_err());
        let mut c = ModelConfig::tiny();
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let d = ModelConfig::desk();
        assert_eq!(d.loc_layers, [8, 16, 32]);
        assert_eq!(d.branch_layers, [128, 64, 32, 32]);
        assert_eq!(d.d_agnn, 64);
    }

    #[test]
    fn empty_image_is_rejected() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let empty = ImageInput::new(Tensor::zeros(0, 8), Vec::new()).unwrap();
        assert!(model.infer(&input(2, 8, 0.0), &empty).is_err());
    }
}
