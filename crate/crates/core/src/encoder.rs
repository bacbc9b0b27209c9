//! Object encoder.
//!
//! Appearance features and an MLP encoding of the normalized bounding box are
//! concatenated into `f_in = (f_viz, f_loc)`. Two MLP branches map `f_in` to
//! view-dependent and view-independent features; the view-dependent branch
//! feeds a position head (image offset + distance) and the view-independent
//! branch a classification head. The object feature is `f = (f_dep, f_indep)`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ModelConfig;
use crate::nn::{Bound, Mlp, ParamStore};
use crate::real::Real;
use crate::scene::BBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub loc: Mlp,
    pub dep: Mlp,
    pub indep: Mlp,
    pub pos: Mlp,
    pub class: Mlp,
    pub d_viz: usize,
}

/// Graph nodes of one encoder pass over a stack of objects (one per row).
#[derive(Debug, Clone, Copy)]
pub struct EncodedNodes {
    pub f_viz: NodeId,
    pub f_loc: NodeId,
    pub f_in: NodeId,
    pub f_dep: NodeId,
    pub f_indep: NodeId,
    pub f: NodeId,
    pub position: NodeId,
    pub logits: NodeId,
}

/// Encoder outputs for a single object.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedObject<T> {
    pub f_viz: Vec<T>,
    pub f_loc: Vec<T>,
    pub f_in: Vec<T>,
    pub f_dep: Vec<T>,
    pub f_indep: Vec<T>,
    pub f: Vec<T>,
    /// Raw position-head output `(dx, dy, d)`.
    pub position: [T; 3],
    pub class_logits: Vec<T>,
}

/// Position-head output split into image offset and camera distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionPrediction<T> {
    pub offset: [T; 2],
    pub distance: T,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let loc = Mlp::new(store, "encoder.loc", 4, &cfg.loc_layers, rng);
        let d_loc = loc.output_width();
        let d_in = cfg.d_viz + d_loc;
        let dep = Mlp::new(store, "encoder.dep", d_in, &cfg.branch_layers, rng);
        let indep = Mlp::new(store, "encoder.indep", d_in, &cfg.branch_layers, rng);
        let d_branch = dep.output_width();
        let pos = Mlp::new(store, "encoder.pos", d_branch, &[cfg.pos_hidden, 3], rng);
        let class = Mlp::new(
            store,
            "encoder.class",
            d_branch,
            &[cfg.class_hidden, cfg.num_classes],
            rng,
        );
        Encoder {
            loc,
            dep,
            indep,
            pos,
            class,
            d_viz: cfg.d_viz,
        }
    }

    /// Width of `f = (f_dep, f_indep)`.
    pub fn object_width(&self) -> usize {
        self.dep.output_width() + self.indep.output_width()
    }

    pub fn location_width(&self) -> usize {
        self.loc.output_width()
    }

    /// `boxes` is `n x 4` of normalized `(x_min, y_min, x_max, y_max)`.
    pub fn encode_location<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        boxes: NodeId,
    ) -> Result<NodeId> {
        self.loc.forward(g, p, boxes)
    }

    /// Encodes a stack of objects; `viz` is `n x d_viz`, `boxes` is `n x 4`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        viz: NodeId,
        boxes: NodeId,
    ) -> Result<EncodedNodes> {
        let width = g.value(viz).cols();
        if width != self.d_viz {
            return Err(Error::Shape {
                op: "encode_object",
                lhs: format!("f_viz width {width}"),
                rhs: format!("d_viz {}", self.d_viz),
            });
        }
        let f_loc = self.encode_location(g, p, boxes)?;
        let f_in = g.concat_cols(&[viz, f_loc])?;
        let f_dep = self.dep.forward(g, p, f_in)?;
        let f_indep = self.indep.forward(g, p, f_in)?;
        let f = g.concat_cols(&[f_dep, f_indep])?;
        let position = self.pos.forward(g, p, f_dep)?;
        let logits = self.class.forward(g, p, f_indep)?;
        Ok(EncodedNodes {
            f_viz: viz,
            f_loc,
            f_in,
            f_dep,
            f_indep,
            f,
            position,
            logits,
        })
    }

    /// Location encoding of one box, outside any training graph.
    pub fn location_features<T: Real>(&self, store: &ParamStore<T>, bbox: &BBox) -> Result<Vec<T>> {
        bbox.validate()?;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let b = g.constant(box_tensor(core::slice::from_ref(bbox)));
        let out = self.encode_location(&mut g, &p, b)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Encodes a single object outside any training graph.
    pub fn encode_object<T: Real>(
        &self,
        store: &ParamStore<T>,
        f_viz: &[T],
        bbox: &BBox,
    ) -> Result<EncodedObject<T>> {
        bbox.validate()?;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let viz = g.constant(Tensor::from_vec(1, f_viz.len(), f_viz.to_vec())?);
        let b = g.constant(box_tensor(core::slice::from_ref(bbox)));
        let n = self.forward(&mut g, &p, viz, b)?;
        let row = |id: NodeId| g.value(id).data().to_vec();
        let pos = g.value(n.position).data();
        Ok(EncodedObject {
            f_viz: row(n.f_viz),
            f_loc: row(n.f_loc),
            f_in: row(n.f_in),
            f_dep: row(n.f_dep),
            f_indep: row(n.f_indep),
            f: row(n.f),
            position: [pos[0], pos[1], pos[2]],
            class_logits: row(n.logits),
        })
    }
}

pub fn predict_position<T: Real>(encoded: &EncodedObject<T>) -> PositionPrediction<T> {
    PositionPrediction {
        offset: [encoded.position[0], encoded.position[1]],
        distance: encoded.position[2],
    }
}

pub fn predict_class<T: Real>(encoded: &EncodedObject<T>) -> &[T] {
    &encoded.class_logits
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Stacks boxes as `n x 4` rows.
pub fn box_tensor<T: Real>(boxes: &[BBox]) -> Tensor<T> {
    let data = boxes
        .iter()
        .flat_map(|b| b.to_array().map(T::from_f64))
        .collect();
    Tensor::from_vec(boxes.len(), 4, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn bbox() -> BBox {
        BBox::new(0.1, 0.2, 0.4, 0.6)
    }

    #[test]
    fn table_widths() {
        let cfg = ModelConfig::full(512, 40);
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let viz: Vec<f64> = (0..512).map(|i| (i as f64 * 0.01).sin()).collect();
        let e = model
            .encoder
            .encode_object(&model.store, &viz, &bbox())
            .unwrap();
        assert_eq!(e.f_loc.len(), 128);
        assert_eq!(e.f_in.len(), 640);
        assert_eq!(e.f_dep.len(), 128);
        assert_eq!(e.f_indep.len(), 128);
        assert_eq!(e.f.len(), 256);
        assert_eq!(predict_class(&e).len(), 40);
        assert_eq!(&e.f_in[..512], &viz[..]);
        assert_eq!(&e.f_in[512..], &e.f_loc[..]);
        assert_eq!(&e.f[..128], &e.f_dep[..]);
        assert_eq!(&e.f[128..], &e.f_indep[..]);
    }

    #[test]
    fn location_is_deterministic_and_rejects_bad_boxes() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
        let a = model
            .encoder
            .location_features(&model.store, &bbox())
            .unwrap();
        let b = model
            .encoder
            .location_features(&model.store, &bbox())
            .unwrap();
        assert_eq!(a.len(), model.encoder.location_width());
        assert_eq!(a, b);
        let bad = BBox::new(0.5, 0.2, 0.4, 0.6);
        assert!(model.encoder.location_features(&model.store, &bad).is_err());
        let out_of_range = BBox::new(0.5, 0.2, 1.4, 0.6);
        assert!(model
            .encoder
            .location_features(&model.store, &out_of_range)
            .is_err());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut model = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
        model.store.zero_prefix("encoder.");
        let viz = alloc::vec![0.5; model.config.d_viz];
        let e = model
            .encoder
            .encode_object(&model.store, &viz, &bbox())
            .unwrap();
        assert!(e
            .f_loc
            .iter()
            .chain(&e.f)
            .chain(&e.class_logits)
            .all(|&x| x == 0.0));
        let pp = predict_position(&e);
        assert_eq!((pp.offset, pp.distance), ([0.0, 0.0], 0.0));
        assert_eq!(argmax(predict_class(&e)), 0);
    }

    #[test]
    fn position_split() {
        let e = EncodedObject {
            f_viz: Vec::new(),
            f_loc: Vec::new(),
            f_in: Vec::new(),
            f_dep: Vec::new(),
            f_indep: Vec::new(),
            f: Vec::new(),
            position: [0.1, -0.05, 3.2],
            class_logits: Vec::new(),
        };
        let p = predict_position(&e);
        assert_eq!(p.offset, [0.1, -0.05]);
        assert_eq!(p.distance, 3.2);
    }

    #[test]
    fn wrong_viz_width_is_rejected() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
        let viz = alloc::vec![0.5; model.config.d_viz + 1];
        assert!(matches!(
            model.encoder.encode_object(&model.store, &viz, &bbox()),
            Err(Error::Shape { .. })
        ));
    }
}
