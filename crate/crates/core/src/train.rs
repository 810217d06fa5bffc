//! The trainable-model wrapper and the mini-batch training loop.
//!
//! `Grounder` packages any of the four nets with an optional trainable
//! scene encoder behind one interface (parameters, inference, per-example
//! loss and gradients), so the optimizer, evaluator, and checkpoint code
//! never branch on the architecture.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{CooccurModel, SpatialShiftModel, VrdModel};
use crate::encoder::{CnnEncoder, CnnTape};
use crate::error::{Error, Result};
use crate::model::{mask_query, AttentionMap, Query, SsasModel};
use crate::optim::OptimizerState;
use crate::rng::{derive_seed, rng_from, STREAM_MASK, STREAM_SAMPLE, STREAM_SHUFFLE};
use crate::scalar::Scalar;
use crate::scene::{box_to_mask, predicate_id, GroundMask, Scene};
use crate::tensor::Tensor;

/// One of the four architectures.
#[derive(Debug, Clone, PartialEq)]
pub enum Net<S: Scalar> {
    Ssas(SsasModel<S>),
    Cooccur(CooccurModel<S>),
    Vrd(VrdModel<S>),
    SpatialShift(SpatialShiftModel<S>),
}

impl<S: Scalar> Net<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            Net::Ssas(_) => "ssas",
            Net::Cooccur(_) => "cooccur",
            Net::Vrd(_) => "vrd",
            Net::SpatialShift(_) => "spatialshift",
        }
    }

    pub fn grid(&self) -> usize {
        match self {
            Net::Ssas(m) => m.cfg.grid,
            Net::Cooccur(m) => m.grid,
            Net::Vrd(m) => m.grid,
            Net::SpatialShift(m) => m.grid,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Net::Ssas(m) => m.cfg.channels,
            Net::Cooccur(m) => m.channels,
            Net::Vrd(m) => m.channels,
            Net::SpatialShift(m) => m.channels,
        }
    }

    pub fn vocab(&self) -> &[String] {
        match self {
            Net::Ssas(m) => &m.vocab,
            Net::Cooccur(m) => &m.vocab,
            Net::Vrd(m) => &m.vocab,
            Net::SpatialShift(m) => &m.vocab,
        }
    }

    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Net::Ssas(m) => m.param_layout(),
            Net::Cooccur(m) => m.param_layout(),
            Net::Vrd(m) => m.param_layout(),
            Net::SpatialShift(m) => m.param_layout(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Net::Ssas(m) => m.params(),
            Net::Cooccur(m) => m.params(),
            Net::Vrd(m) => m.params(),
            Net::SpatialShift(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Net::Ssas(m) => m.params_mut(),
            Net::Cooccur(m) => m.params_mut(),
            Net::Vrd(m) => m.params_mut(),
            Net::SpatialShift(m) => m.params_mut(),
        }
    }

    /// Final subject and object maps for a query.
    pub fn infer(&self, mu: &Tensor<S>, q: &Query) -> Result<(AttentionMap<S>, AttentionMap<S>)> {
        match self {
            Net::Ssas(m) => {
                let ro = m.rollout(mu, q)?;
                let fin = ro.final_step();
                Ok((fin.subject.clone(), fin.object.clone()))
            }
            Net::Cooccur(m) => m.infer(mu, q),
            Net::Vrd(m) => m.infer(mu, q),
            Net::SpatialShift(m) => m.infer(mu, q),
        }
    }

    pub fn query_loss(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
    ) -> Result<f64> {
        match self {
            Net::Ssas(m) => m.query_loss(mu, q, s_target, o_target),
            Net::Cooccur(m) => m.query_loss(mu, q, s_target, o_target),
            Net::Vrd(m) => m.query_loss(mu, q, s_target, o_target),
            Net::SpatialShift(m) => m.query_loss(mu, q, s_target, o_target),
        }
    }

    pub fn query_grads(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
        grads: &mut [Vec<S>],
        want_mu_grad: bool,
    ) -> Result<(f64, Option<Tensor<S>>)> {
        match self {
            Net::Ssas(m) => m.query_grads(mu, q, s_target, o_target, grads, want_mu_grad),
            Net::Cooccur(m) => m.query_grads(mu, q, s_target, o_target, grads, want_mu_grad),
            Net::Vrd(m) => m.query_grads(mu, q, s_target, o_target, grads, want_mu_grad),
            Net::SpatialShift(m) => m.query_grads(mu, q, s_target, o_target, grads, want_mu_grad),
        }
    }
}

/// Per-scene model input: a precomputed feature grid (oracle mode) or the
/// raw image for a trainable encoder.
#[derive(Debug, Clone)]
pub enum SceneFeatures<S: Scalar> {
    Grid(Tensor<S>),
    Image(Tensor<S>),
}

/// A net plus its (optional) trainable encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Grounder<S: Scalar> {
    pub net: Net<S>,
    pub encoder: Option<CnnEncoder<S>>,
}

impl<S: Scalar> Grounder<S> {
    pub fn oracle(net: Net<S>) -> Self {
        Grounder { net, encoder: None }
    }

    pub fn with_encoder(net: Net<S>, encoder: CnnEncoder<S>) -> Self {
        Grounder { net, encoder: Some(encoder) }
    }

    /// Resolve the feature grid for one scene input.
    fn features(&self, input: &SceneFeatures<S>) -> Result<(Tensor<S>, Option<CnnTape<S>>)> {
        match (&self.encoder, input) {
            (None, SceneFeatures::Grid(g)) => Ok((g.clone(), None)),
            (Some(enc), SceneFeatures::Image(img)) => {
                let (mu, tape) = enc.forward(img, self.net.grid())?;
                Ok((mu, Some(tape)))
            }
            (None, SceneFeatures::Image(_)) => Err(Error::Config(
                "model has no encoder but was given a raw image".into(),
            )),
            (Some(_), SceneFeatures::Grid(_)) => Err(Error::Config(
                "model has a trainable encoder but was given a precomputed feature grid".into(),
            )),
        }
    }

    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.net.param_layout();
        if let Some(enc) = &self.encoder {
            for (name, p) in CnnEncoder::<S>::param_names().iter().zip(enc.params()) {
                out.push((name.to_string(), p.shape().to_vec()));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = self.net.params();
        if let Some(enc) = &self.encoder {
            out.extend(enc.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match &mut self.encoder {
            None => self.net.params_mut(),
            Some(enc) => {
                let mut out = self.net.params_mut();
                out.extend(enc.params_mut());
                out
            }
        }
    }

    pub fn infer(
        &self,
        input: &SceneFeatures<S>,
        q: &Query,
    ) -> Result<(AttentionMap<S>, AttentionMap<S>)> {
        let (mu, _) = self.features(input)?;
        self.net.infer(&mu, q)
    }

    pub fn example_loss(
        &self,
        input: &SceneFeatures<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
    ) -> Result<f64> {
        let (mu, _) = self.features(input)?;
        self.net.query_loss(&mu, q, s_target, o_target)
    }

    /// Accumulate this example's gradients into `grads` (one flat buffer
    /// per `param_layout` entry) and return its loss.
    pub fn example_grads(
        &self,
        input: &SceneFeatures<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
        grads: &mut [Vec<S>],
    ) -> Result<f64> {
        let (mu, enc_tape) = self.features(input)?;
        let net_len = self.net.param_layout().len();
        let (net_grads, enc_grads) = grads.split_at_mut(net_len);
        let (loss, g_mu) = self.net.query_grads(
            &mu,
            q,
            s_target,
            o_target,
            net_grads,
            self.encoder.is_some(),
        )?;
        if let (Some(enc), Some(tape), Some(g_mu)) = (&self.encoder, &enc_tape, g_mu) {
            enc.backward(tape, &g_mu, enc_grads)?;
        }
        Ok(loss)
    }
}

/// One training/evaluation example: a query over one scene with its
/// ground-truth cell masks.
#[derive(Debug, Clone)]
pub struct Example<S: Scalar> {
    pub scene: usize,
    pub query: Query,
    /// Indices of the ground-truth entities inside the scene.
    pub s_entity: usize,
    pub o_entity: usize,
    pub s_mask: GroundMask,
    pub o_mask: GroundMask,
    pub s_target: Tensor<S>,
    pub o_target: Tensor<S>,
    /// The scene holds at least two instances of the subject or of the
    /// object category, so category attention alone cannot resolve it.
    pub ambiguous: bool,
}

/// Examples plus the per-scene inputs they index into.
#[derive(Debug, Clone)]
pub struct SplitData<S: Scalar> {
    pub features: Vec<SceneFeatures<S>>,
    pub examples: Vec<Example<S>>,
}

/// Build examples from scene relationships. With `queries_per_scene > 0`,
/// at most that many relationships are kept per scene, sampled without
/// replacement from a per-scene stream of `seed`; 0 keeps all of them.
///
/// Relationships whose category triple ⟨subject category, predicate,
/// object category⟩ matches more than one relationship in the same scene
/// are dropped before sampling: the query presented to a model carries
/// only the triple, so two such relationships feed identical inputs with
/// different target masks — supervision no model can satisfy and a score
/// no model can earn. Dropping them keeps every remaining query uniquely
/// resolvable from the scene. (Duplicated *categories* stay, and those
/// queries are exactly the ambiguous ones the relationship must resolve.)
pub fn build_examples<S: Scalar>(
    scenes: &[Scene],
    vocab: &[String],
    grid: usize,
    queries_per_scene: usize,
    seed: u64,
) -> Result<Vec<Example<S>>> {
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let cat_ids = scene.entity_category_ids(vocab)?;
        let mut triple_count: HashMap<(usize, &str, usize), usize> = HashMap::new();
        for rel in &scene.relationships {
            *triple_count.entry((cat_ids[rel.s], rel.p.as_str(), cat_ids[rel.o])).or_insert(0) +=
                1;
        }
        let mut rel_ids: Vec<usize> = (0..scene.relationships.len())
            .filter(|&ri| {
                let rel = &scene.relationships[ri];
                triple_count[&(cat_ids[rel.s], rel.p.as_str(), cat_ids[rel.o])] == 1
            })
            .collect();
        if queries_per_scene > 0 && rel_ids.len() > queries_per_scene {
            let mut rng = rng_from(derive_seed(seed, STREAM_SAMPLE, si as u64));
            rel_ids.shuffle(&mut rng);
            rel_ids.truncate(queries_per_scene);
            rel_ids.sort_unstable();
        }
        for ri in rel_ids {
            let rel = &scene.relationships[ri];
            let pid = predicate_id(&rel.p).ok_or_else(|| {
                Error::Invalid(format!("scene {}: unknown predicate {:?}", scene.id, rel.p))
            })?;
            let subj = &scene.entities[rel.s];
            let obj = &scene.entities[rel.o];
            let s_mask = box_to_mask(&subj.bbox, scene.width, grid);
            let o_mask = box_to_mask(&obj.bbox, scene.width, grid);
            let ambiguous = scene.entities_of(&subj.category).len() >= 2
                || scene.entities_of(&obj.category).len() >= 2;
            out.push(Example {
                scene: si,
                query: Query {
                    subject: Some(cat_ids[rel.s]),
                    predicate: pid,
                    object: Some(cat_ids[rel.o]),
                },
                s_entity: rel.s,
                o_entity: rel.o,
                s_target: s_mask.to_tensor(),
                o_target: o_mask.to_tensor(),
                s_mask,
                o_mask,
                ambiguous,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of masking each entity slot of a training query
    /// (independently); 0 trains on fully specified queries.
    pub mask_rate: f64,
    /// Cap on relationships used per scene (0 = all).
    pub queries_per_scene: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            mask_rate: 0.0,
            queries_per_scene: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!(
                "mask rate must lie in [0, 1], got {}",
                self.mask_rate
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One row of the training log (the CSV written by the driver has one
/// line per split per epoch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

/// Mini-batch training: shuffled batches, batch-averaged gradients, an
/// RMSProp step per batch, and a validation pass per epoch driving the
/// plateau learning-rate decay. Fully deterministic for a fixed config.
pub fn train<S: Scalar>(
    model: &mut Grounder<S>,
    train_data: &SplitData<S>,
    val_data: &SplitData<S>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_data.examples.is_empty() {
        return Err(Error::Invalid("training split has no examples".into()));
    }
    let layout = model.param_layout();
    let mut grads: Vec<Vec<S>> = layout
        .iter()
        .map(|(_, shape)| vec![S::zero(); shape.iter().product()])
        .collect();
    let mut opt = OptimizerState::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_data.examples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng_from(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut mask_rng = rng_from(derive_seed(cfg.seed, STREAM_MASK, epoch as u64));

        let mut epoch_loss = 0.0f64;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v = S::zero());
            }
            let mut batch_loss = 0.0f64;
            for &ei in batch {
                let ex = &train_data.examples[ei];
                let q = if cfg.mask_rate > 0.0 {
                    mask_query(&ex.query, cfg.mask_rate, &mut mask_rng)
                } else {
                    ex.query
                };
                batch_loss += model.example_grads(
                    &train_data.features[ex.scene],
                    &q,
                    &ex.s_target,
                    &ex.o_target,
                    &mut grads,
                )?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {batch_loss} at epoch {epoch}, batch {bi}"
                )));
            }
            epoch_loss += batch_loss;
            let scale = S::from_f64(1.0 / batch.len() as f64);
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            let mut params = model.params_mut();
            opt.rmsprop_step(&mut params, &grads)?;
        }

        let train_loss = epoch_loss / train_data.examples.len() as f64;
        let val_loss = validation_loss(model, val_data)?;
        opt.end_epoch(val_loss);
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            learning_rate: opt.learning_rate,
        });
    }
    Ok(logs)
}

/// Mean unmasked query loss over a split.
pub fn validation_loss<S: Scalar>(model: &Grounder<S>, data: &SplitData<S>) -> Result<f64> {
    if data.examples.is_empty() {
        return Err(Error::Invalid("validation split has no examples".into()));
    }
    let mut total = 0.0f64;
    for ex in &data.examples {
        total += model.example_loss(
            &data.features[ex.scene],
            &ex.query,
            &ex.s_target,
            &ex.o_target,
        )?;
    }
    let loss = total / data.examples.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite validation loss {loss}")));
    }
    Ok(loss)
}
