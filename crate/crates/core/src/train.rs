//! Training samples, per-pair gradients, epochs and checkpoint contents.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::loss::{
    affinity_loss_graph, class_weights, classification_loss_graph, position_loss_graph,
    rel_distance_loss_graph, total_loss_graph, LossParts, LossWeights, PairTargets, PositionTarget,
};
use crate::model::{ImageInput, Model, ModelConfig, PairNodes};
use crate::nn::{Bound, ParamStore};
use crate::optim::{AdamConfig, OptimizerState};
use crate::real::Real;
use crate::scene::{mix_seed, ObjectDetection, ScenePair};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Standard deviation of the Gaussian added to visual features.
    pub noise_std: f64,
    pub max_objects: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            noise_std: 0.1,
            max_objects: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.max_objects < 2 {
            return Err(Error::invalid(
                "batch_size must be > 0 and max_objects >= 2",
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.adam.learning_rate >= 0.0) {
            return Err(Error::invalid("noise_std and learning_rate must be >= 0"));
        }
        Ok(())
    }
}

/// Network inputs and supervision of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample<T> {
    pub img1: ImageInput<T>,
    pub img2: ImageInput<T>,
    pub targets: PairTargets,
}

fn position_target(d: &ObjectDetection) -> PositionTarget {
    PositionTarget {
        offset: d.offset,
        distance: d.distance,
        box_width: d.bbox.width(),
        box_height: d.bbox.height(),
    }
}

/// Up to `max` sorted distinct indices out of `0..n`, uniformly.
pub fn subsample_indices<R: Rng>(rng: &mut R, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Restricts a pair to the kept detections; matches whose partner was
/// dropped become unmatched.
pub fn targets_for(pair: &ScenePair, keep1: &[usize], keep2: &[usize]) -> PairTargets {
    let pos1 = |i: usize| keep1.iter().position(|&k| k == i);
    let pos2 = |j: usize| keep2.iter().position(|&k| k == j);
    let matches: Vec<(usize, usize)> = pair
        .gt_matches
        .iter()
        .filter_map(|&(i, j)| Some((pos1(i)?, pos2(j)?)))
        .collect();
    let (m, n) = (keep1.len(), keep2.len());
    let unmatched1 = (0..m)
        .filter(|a| !matches.iter().any(|p| p.0 == *a))
        .collect();
    let unmatched2 = (0..n)
        .filter(|b| !matches.iter().any(|p| p.1 == *b))
        .collect();
    let dets1 = keep1.iter().map(|&i| &pair.detections1[i]);
    let dets2 = keep2.iter().map(|&j| &pair.detections2[j]);
    let all: Vec<&ObjectDetection> = dets1.chain(dets2).collect();
    let sub_rel = |rel: &[Vec<f64>], keep: &[usize]| -> Vec<Vec<f64>> {
        keep.iter()
            .map(|&a| keep.iter().map(|&b| rel[a][b]).collect())
            .collect()
    };
    PairTargets {
        m,
        n,
        matches,
        unmatched1,
        unmatched2,
        labels: all.iter().map(|d| d.class).collect(),
        positions: all.iter().map(|d| position_target(d)).collect(),
        rel1: sub_rel(&pair.rel_dist1, keep1),
        rel2: sub_rel(&pair.rel_dist2, keep2),
    }
}

fn image_input<T: Real, R: Rng>(
    features: &[Vec<f32>],
    dets: &[ObjectDetection],
    keep: &[usize],
    d_viz: usize,
    noise: Option<(&Normal<f64>, &mut R)>,
) -> Result<ImageInput<T>> {
    let mut data = Vec::with_capacity(keep.len() * d_viz);
    for &k in keep {
        let f = &features[k];
        if f.len() != d_viz {
            return Err(Error::Shape {
                op: "pair_sample",
                lhs: format!("feature width {}", f.len()),
                rhs: format!("d_viz {d_viz}"),
            });
        }
        data.extend(f.iter().map(|&x| T::from_f64(x as f64)));
    }
    if let Some((dist, rng)) = noise {
        for x in data.iter_mut() {
            *x = *x + T::from_f64(dist.sample(rng));
        }
    }
    let boxes = keep.iter().map(|&k| dets[k].bbox).collect();
    ImageInput::new(Tensor::from_vec(keep.len(), d_viz, data)?, boxes)
}

/// Full pair without subsampling or noise.
pub fn eval_sample<T: Real>(pair: &ScenePair, d_viz: usize) -> Result<PairSample<T>> {
    let keep1: Vec<usize> = (0..pair.m()).collect();
    let keep2: Vec<usize> = (0..pair.n()).collect();
    Ok(PairSample {
        img1: image_input::<T, ChaCha8Rng>(
            &pair.features1,
            &pair.detections1,
            &keep1,
            d_viz,
            None,
        )?,
        img2: image_input::<T, ChaCha8Rng>(
            &pair.features2,
            &pair.detections2,
            &keep2,
            d_viz,
            None,
        )?,
        targets: targets_for(pair, &keep1, &keep2),
    })
}

/// Training view of a pair: at most `max_objects` per image and Gaussian
/// feature noise with standard deviation `noise_std`.
pub fn train_sample<T: Real, R: Rng>(
    pair: &ScenePair,
    d_viz: usize,
    max_objects: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<PairSample<T>> {
    let keep1 = subsample_indices(rng, pair.m(), max_objects);
    let keep2 = subsample_indices(rng, pair.n(), max_objects);
    let dist = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(format!("{e}")))?;
    let noise = (noise_std > 0.0).then_some(&dist);
    let img1 = image_input(
        &pair.features1,
        &pair.detections1,
        &keep1,
        d_viz,
        noise.map(|d| (d, &mut *rng)),
    )?;
    let img2 = image_input(
        &pair.features2,
        &pair.detections2,
        &keep2,
        d_viz,
        noise.map(|d| (d, &mut *rng)),
    )?;
    Ok(PairSample {
        img1,
        img2,
        targets: targets_for(pair, &keep1, &keep2),
    })
}

/// Loss nodes of one pair.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub parts: LossParts<NodeId>,
    pub pair: PairNodes,
}

/// Builds the forward pass and all loss terms for one sample.
pub fn pair_loss<'p, T: Real>(
    g: &mut Graph<'p, T>,
    model: &'p Model<T>,
    sample: &PairSample<T>,
    class_weights: &[f64],
    weights: &LossWeights,
) -> Result<(Bound, LossNodes)> {
    sample.targets.validate(model.config.num_classes)?;
    let (p, pair) = model.forward_inputs(g, &sample.img1, &sample.img2)?;
    let t = &sample.targets;
    let parts = LossParts {
        aff: affinity_loss_graph(g, pair.log_p, t)?,
        cls: classification_loss_graph(g, pair.logits, &t.labels, class_weights)?,
        pos: position_loss_graph(g, pair.position, &t.positions, t.m)?,
        rel: rel_distance_loss_graph(g, pair.rel1, pair.rel2, &t.rel1, &t.rel2)?,
    };
    let total = total_loss_graph(g, &parts, weights)?;
    Ok((p, LossNodes { total, parts, pair }))
}

/// Loss values and parameter gradients (store order) of one sample.
pub fn pair_gradients<T: Real>(
    model: &Model<T>,
    sample: &PairSample<T>,
    class_weights: &[f64],
    weights: &LossWeights,
) -> Result<(LossParts<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let (p, nodes) = pair_loss(&mut g, model, sample, class_weights, weights)?;
    let grads = g.backward(nodes.total)?;
    let parts = LossParts {
        aff: g.scalar_value(nodes.parts.aff),
        cls: g.scalar_value(nodes.parts.cls),
        pos: g.scalar_value(nodes.parts.pos),
        rel: g.scalar_value(nodes.parts.rel),
    };
    Ok((parts, p.nodes().iter().map(|&id| grads.get(id)).collect()))
}

/// Loss terms of one sample without gradients.
pub fn pair_loss_values<T: Real>(
    model: &Model<T>,
    sample: &PairSample<T>,
    class_weights: &[f64],
    weights: &LossWeights,
) -> Result<LossParts<T>> {
    let mut g = Graph::new();
    let (_, nodes) = pair_loss(&mut g, model, sample, class_weights, weights)?;
    Ok(LossParts {
        aff: g.scalar_value(nodes.parts.aff),
        cls: g.scalar_value(nodes.parts.cls),
        pos: g.scalar_value(nodes.parts.pos),
        rel: g.scalar_value(nodes.parts.rel),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub pairs: usize,
    pub steps: usize,
    /// Mean weighted total over pairs.
    pub loss: f64,
    /// Mean of each unweighted term over pairs.
    pub parts: LossParts<f64>,
}

/// Inverse-frequency class weights over every detection of a corpus.
pub fn corpus_class_weights(corpus: &[ScenePair], num_classes: usize) -> Vec<f64> {
    let labels = corpus
        .iter()
        .flat_map(|p| p.detections1.iter().chain(&p.detections2).map(|d| d.class));
    class_weights(labels, num_classes)
}

/// One shuffled pass over the corpus with one Adam step per batch. The
/// gradient of a batch is the mean of its per-pair gradients, summed in
/// batch order.
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    corpus: &[ScenePair],
    class_weights: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Training("empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let d_viz = model.config.d_viz;
    let mut sum = LossParts::<f64>::default();
    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(cfg.batch_size) {
        let mut acc: Vec<Tensor<T>> = model
            .store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for &k in batch {
            let mut pair_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let sample = train_sample(
                &corpus[k],
                d_viz,
                cfg.max_objects,
                cfg.noise_std,
                &mut pair_rng,
            )?;
            let (parts, grads) = pair_gradients(model, &sample, class_weights, &cfg.weights)?;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_assign(g);
            }
            let p = LossParts {
                aff: parts.aff.as_f64(),
                cls: parts.cls.as_f64(),
                pos: parts.pos.as_f64(),
                rel: parts.rel.as_f64(),
            };
            sum.aff += p.aff;
            sum.cls += p.cls;
            sum.pos += p.pos;
            sum.rel += p.rel;
            total += p.total(&cfg.weights);
        }
        let inv = T::one() / T::from_usize(batch.len());
        for a in acc.iter_mut() {
            a.scale_assign(inv);
        }
        state.adam_step(&mut model.store, &acc)?;
        steps += 1;
    }
    let n = corpus.len() as f64;
    Ok(EpochMetrics {
        epoch: 0,
        pairs: corpus.len(),
        steps,
        loss: total / n,
        parts: LossParts {
            aff: sum.aff / n,
            cls: sum.cls / n,
            pos: sum.pos / n,
            rel: sum.rel / n,
        },
    })
}

/// Runs epochs `start..cfg.epochs`; epoch `e` shuffles with
/// `mix_seed(seed, e)`, so a resumed run continues the same trajectory.
/// `on_epoch` sees the model after each epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Real>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    corpus: &[ScenePair],
    class_weights: &[f64],
    cfg: &TrainConfig,
    seed: u64,
    start: usize,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model<T>, &OptimizerState<T>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut out = Vec::new();
    for epoch in start..cfg.epochs {
        let mut m = train_epoch(
            model,
            state,
            corpus,
            class_weights,
            cfg,
            mix_seed(seed, epoch as u64),
        )?;
        m.epoch = epoch;
        on_epoch(&m, model, state)?;
        out.push(m);
    }
    Ok(out)
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub class_weights: Vec<f64>,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(
        model: &Model<T>,
        state: &OptimizerState<T>,
        train_config: &TrainConfig,
        class_weights: &[f64],
        epoch: usize,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            epoch,
            class_weights: class_weights.to_vec(),
            params: model.store.clone(),
            optimizer: state.clone(),
        }
    }

    /// Rebuilds the model; rejects a checkpoint whose configuration differs
    /// from `expected` or whose tensors do not fit it.
    pub fn restore(&self, expected: Option<&ModelConfig>) -> Result<(Model<T>, OptimizerState<T>)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if let Some(cfg) = expected {
            if cfg != &self.model_config {
                return Err(Error::invalid(config_mismatch(cfg, &self.model_config)));
            }
        }
        let mut model = Model::new(self.model_config.clone(), 0)?;
        if model.store.names() != self.params.names() {
            return Err(Error::invalid(
                "checkpoint parameter names do not match the model",
            ));
        }
        for (k, (have, want)) in self
            .params
            .tensors()
            .iter()
            .zip(model.store.tensors())
            .enumerate()
        {
            if have.shape() != want.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: format!("{} {}", self.params.names()[k], have.shape_string()),
                    rhs: want.shape_string(),
                });
            }
        }
        model.store = self.params.clone();
        Ok((model, self.optimizer.clone()))
    }
}

fn config_mismatch(want: &ModelConfig, have: &ModelConfig) -> String {
    if want.num_classes != have.num_classes {
        format!(
            "checkpoint has {} classes, run expects {}",
            have.num_classes, want.num_classes
        )
    } else {
        "checkpoint model configuration differs from the run".into()
    }
}
