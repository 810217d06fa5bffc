//! The iterative attention-shifting grounding model.
//!
//! A query names a subject category, a predicate, and an object category
//! (either entity slot may be masked). Both entities are located as L x L
//! attention maps over the scene's feature grid. Inference alternates for a
//! fixed number of iterations between the two roles: each role's map is
//! re-estimated by attending over the features *modulated* by the other
//! role's map after pushing it through a predicate-specific shift module —
//! a stack of small convolutions that learns "where the object sits
//! relative to the subject" (and, with a separate kernel stack, the inverse
//! direction). Attention itself is the ReLU of a per-cell dot product
//! between features and the category embedding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::scene::PREDICATES;
use crate::tensor::{dims2, dims3, Tensor};

/// Architecture of one shift module stack and the rollout around it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SsasConfig {
    /// Attention grid side L.
    pub grid: usize,
    /// Feature/embedding channels C (must match the encoder output).
    pub channels: usize,
    /// Convolution stages per shift module, n.
    pub stages: usize,
    /// Convolution kernel side k (odd).
    pub kernel: usize,
    /// Hidden channels inside a shift module.
    pub hidden: usize,
    /// Attention-shifting iterations t (0 = plain attention).
    pub iterations: usize,
    /// When set, the training loss supervises every rollout step's maps
    /// (averaged over steps) instead of only the final pair. Off by
    /// default: inference semantics are identical either way, but the
    /// per-step anchors make deep rollouts train much faster because the
    /// early steps stop depending on gradient that survived several
    /// multiplicative gates.
    #[serde(default)]
    pub supervise_intermediate: bool,
}

impl Default for SsasConfig {
    fn default() -> Self {
        SsasConfig {
            grid: 14,
            channels: 10,
            stages: 3,
            kernel: 5,
            hidden: 10,
            iterations: 2,
            supervise_intermediate: false,
        }
    }
}

impl SsasConfig {
    /// A shift module must be able to move attention across the whole grid:
    /// n stages of k x k convolutions reach n*floor(k/2) cells, and the
    /// model is only accepted when n > L / k (strictly), i.e. n*k > L.
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.channels == 0 || self.hidden == 0 || self.stages == 0 {
            return Err(Error::Config(
                "grid, channels, hidden and stages must all be positive".into(),
            ));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!(
                "shift kernel side must be odd, got {}",
                self.kernel
            )));
        }
        if self.stages * self.kernel <= self.grid {
            return Err(Error::Config(format!(
                "{} stages of {}x{} kernels cannot shift attention across a \
                 {}-cell grid: need stages > grid/kernel",
                self.stages, self.kernel, self.kernel, self.grid
            )));
        }
        Ok(())
    }
}

/// One attention map: raw per-cell logits and their ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<S: Scalar> {
    pub logits: Tensor<S>,
    pub activated: Tensor<S>,
}

/// A grounding query. `None` in an entity slot means that slot is masked
/// and the model must fall back to its shared unknown-entity embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub subject: Option<usize>,
    pub predicate: usize,
    pub object: Option<usize>,
}

/// Independently drop each entity slot with probability `rate`.
/// The subject coin is always drawn first, then the object coin.
pub fn mask_query(q: &Query, rate: f64, rng: &mut ChaCha8Rng) -> Query {
    let drop_s = rng.gen::<f64>() < rate;
    let drop_o = rng.gen::<f64>() < rate;
    Query {
        subject: if drop_s { None } else { q.subject },
        predicate: q.predicate,
        object: if drop_o { None } else { q.object },
    }
}

/// The convolution stack of one shift direction for one predicate:
/// k x k stages mapping channels 1 -> hidden -> ... -> hidden -> 1,
/// ReLU after every stage, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateKernels<S: Scalar> {
    pub stages: Vec<Tensor<S>>,
}

impl<S: Scalar> PredicateKernels<S> {
    /// [k, k, c_in, c_out] per stage.
    pub fn stage_shapes(cfg: &SsasConfig) -> Vec<Vec<usize>> {
        let (n, k, h) = (cfg.stages, cfg.kernel, cfg.hidden);
        (0..n)
            .map(|s| {
                let cin = if s == 0 { 1 } else { h };
                let cout = if s + 1 == n { 1 } else { h };
                vec![k, k, cin, cout]
            })
            .collect()
    }

    /// Centered uniform initialization scaled by the stage fan-in,
    /// U(-b, b) with b = sqrt(6 / fan_in), i.e. element variance
    /// 2 / fan_in. Two properties matter here. Scale: each shift stack is
    /// a chain of bias-free ReLU convolutions, and 2 / fan_in is the
    /// variance that keeps activation magnitude roughly constant through
    /// such a chain — with smaller draws every stage shrinks the map by a
    /// constant factor, and after two gated hops (deep rollouts) the final
    /// logits land so close to zero that the loss surface is flat and
    /// training stalls for epochs. Sign: draws must be centered, because
    /// ground-truth maps are sparse, so early in training almost every
    /// cell pushes its logit down, and with all-positive kernels that
    /// pressure is a *coherent* descent direction that drives every kernel
    /// element through zero together — the bias-free ReLU stages then
    /// output zero everywhere and, because the rollout multiplies by the
    /// shifted map, every gradient of the model dies with them. Centered
    /// draws decorrelate the per-element pressure so the stages stay alive
    /// while the embeddings learn.
    pub fn random(cfg: &SsasConfig, rng: &mut ChaCha8Rng) -> Self {
        let stages = Self::stage_shapes(cfg)
            .into_iter()
            .map(|shape| {
                let fan_in = shape[0] * shape[1] * shape[2];
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..shape.iter().product())
                    .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(&shape, data).unwrap()
            })
            .collect();
        PredicateKernels { stages }
    }

    /// Center-delta kernels that reproduce any non-negative input exactly:
    /// stage 0 routes the map into hidden channel 0, middle stages keep
    /// every channel in place, the last stage reads channel 0 back out.
    pub fn identity(cfg: &SsasConfig) -> Self {
        let c = cfg.kernel / 2;
        let stages = Self::stage_shapes(cfg)
            .into_iter()
            .map(|shape| {
                let mut t = Tensor::zeros(&shape);
                for ch in 0..shape[2].min(shape[3]) {
                    let src = if shape[2] == 1 { 0 } else { ch };
                    let dst = if shape[3] == 1 { 0 } else { ch };
                    if src == ch || dst == ch {
                        t.set(&[c, c, src, dst], S::one());
                    }
                }
                t
            })
            .collect();
        PredicateKernels { stages }
    }
}

/// Attention logits: per-cell dot product of the feature grid with an
/// embedding vector; the activated map is its ReLU.
pub fn attend<S: Scalar>(features: &Tensor<S>, emb: &[S]) -> Result<AttentionMap<S>> {
    let (h, w, c) = dims3("attend", features)?;
    if emb.len() != c {
        return Err(Error::Dimension {
            op: "attend",
            axis: "embedding length",
            expected: c,
            got: emb.len(),
        });
    }
    let fs = features.data();
    let mut logits = Tensor::zeros(&[h, w]);
    for cell in 0..h * w {
        let mut acc = S::accum_zero();
        for (f, e) in fs[cell * c..(cell + 1) * c].iter().zip(emb) {
            acc += f.accum() * e.accum();
        }
        logits.data_mut()[cell] = S::from_accum(acc);
    }
    let activated = ops::relu(&logits);
    Ok(AttentionMap { logits, activated })
}

/// Gradients of `attend` logits w.r.t. the features and the embedding.
pub fn attend_backward<S: Scalar>(
    features: &Tensor<S>,
    emb: &[S],
    grad_logits: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<S>)> {
    let (h, w, c) = dims3("attend_backward", features)?;
    let gs = grad_logits.data();
    let fs = features.data();
    let mut grad_feat = Tensor::zeros(&[h, w, c]);
    let mut acc = vec![S::accum_zero(); c];
    for cell in 0..h * w {
        let g = gs[cell];
        let frow = &fs[cell * c..(cell + 1) * c];
        let orow = &mut grad_feat.data_mut()[cell * c..(cell + 1) * c];
        for ch in 0..c {
            orow[ch] = g * emb[ch];
            acc[ch] += g.accum() * frow[ch].accum();
        }
    }
    Ok((grad_feat, acc.into_iter().map(S::from_accum).collect()))
}

/// Everything the shift backward pass needs: each stage's input and its
/// pre-activation.
#[derive(Debug, Clone)]
pub struct ShiftTape<S: Scalar> {
    inputs: Vec<Tensor<S>>,
    pres: Vec<Tensor<S>>,
}

fn as3<S: Scalar>(map: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = dims2("shift", map)?;
    Tensor::from_vec(&[h, w, 1], map.data().to_vec())
}

fn as2<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let s = t.shape();
    Tensor::from_vec(&[s[0], s[1]], t.data().to_vec()).unwrap()
}

/// Push an L x L map through one predicate's shift stack.
pub fn shift_forward<S: Scalar>(
    map: &Tensor<S>,
    kernels: &PredicateKernels<S>,
) -> Result<(AttentionMap<S>, ShiftTape<S>)> {
    let mut cur = as3(map)?;
    let mut tape = ShiftTape { inputs: Vec::new(), pres: Vec::new() };
    for (s, k) in kernels.stages.iter().enumerate() {
        let pre = ops::conv2d(&cur, k)?;
        tape.inputs.push(cur);
        cur = ops::relu(&pre);
        tape.pres.push(pre);
        let _ = s;
    }
    let logits = as2(tape.pres.last().expect("shift stack is never empty"));
    let activated = as2(&cur);
    Ok((AttentionMap { logits, activated }, tape))
}

/// Gradient of `shift_forward` w.r.t. the input map and every stage kernel,
/// given the upstream gradient on the *activated* output map.
pub fn shift_backward<S: Scalar>(
    tape: &ShiftTape<S>,
    kernels: &PredicateKernels<S>,
    grad_activated: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let n = kernels.stages.len();
    let mut grad_kernels: Vec<Tensor<S>> = vec![Tensor::zeros(&[0]); n];
    let mut g = ops::relu_backward(&tape.pres[n - 1], &as3(grad_activated)?);
    for s in (0..n).rev() {
        let (g_in, g_k) = ops::conv2d_backward(&tape.inputs[s], &kernels.stages[s], &g)?;
        grad_kernels[s] = g_k;
        if s == 0 {
            return Ok((as2(&g_in), grad_kernels));
        }
        g = ops::relu_backward(&tape.pres[s - 1], &g_in);
    }
    unreachable!("loop always returns at stage 0")
}

/// One rollout step: the two role maps, plus the shifted gate maps that
/// modulated the features to produce them (absent at step 0).
#[derive(Debug, Clone)]
pub struct RolloutStep<S: Scalar> {
    pub subject: AttentionMap<S>,
    pub object: AttentionMap<S>,
    pub subject_gate: Option<AttentionMap<S>>,
    pub object_gate: Option<AttentionMap<S>>,
}

/// The full iteration trace; `steps[0]` is the initial plain attention,
/// `steps[t]` the final estimate that carries the training loss.
#[derive(Debug, Clone)]
pub struct Rollout<S: Scalar> {
    pub steps: Vec<RolloutStep<S>>,
}

impl<S: Scalar> Rollout<S> {
    pub fn final_step(&self) -> &RolloutStep<S> {
        self.steps.last().expect("rollout always has step 0")
    }
}

/// Per-step intermediates for the backward pass.
struct StepTape<S: Scalar> {
    x_shift: ShiftTape<S>,
    y_shift: ShiftTape<S>,
    /// Modulated features each role attended over at this step.
    mx: Tensor<S>,
    my: Tensor<S>,
}

/// Backward-pass record for one full rollout.
pub struct RolloutTape<S: Scalar> {
    steps: Vec<StepTape<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsasModel<S: Scalar> {
    pub cfg: SsasConfig,
    pub vocab: Vec<String>,
    /// (vocab + 1) x C; the extra last row is the unknown-entity embedding
    /// used for masked query slots.
    pub embeddings: Tensor<S>,
    /// Subject-to-object shift stacks, one per predicate.
    pub fwd: Vec<PredicateKernels<S>>,
    /// Object-to-subject shift stacks, one per predicate.
    pub inv: Vec<PredicateKernels<S>>,
}

impl<S: Scalar> SsasModel<S> {
    /// Initialize with small centered uniform embeddings, U(-b, b) with
    /// b = 1/sqrt(C). The feature grid is non-negative, so centered
    /// embeddings give the initial per-cell logits mixed signs; with
    /// sparse ground-truth maps that matters, because all-positive logits
    /// put sigmoid above every target almost everywhere and the resulting
    /// uniform down-pressure collapses the multiplicative rollout into
    /// its dead all-zero basin. Draw order is fixed: embeddings
    /// row-major, then forward stacks in predicate order, then inverse
    /// stacks.
    pub fn new(cfg: SsasConfig, vocab: Vec<String>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if vocab.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let rows = vocab.len() + 1;
        let bound = 1.0 / (cfg.channels as f64).sqrt();
        let emb_data = (0..rows * cfg.channels)
            .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        let embeddings = Tensor::from_vec(&[rows, cfg.channels], emb_data)?;
        let fwd = (0..PREDICATES.len())
            .map(|_| PredicateKernels::random(&cfg, rng))
            .collect();
        let inv = (0..PREDICATES.len())
            .map(|_| PredicateKernels::random(&cfg, rng))
            .collect();
        Ok(SsasModel { cfg, vocab, embeddings, fwd, inv })
    }

    /// Embedding row index for an entity slot (`None` = unknown row).
    pub fn slot_row(&self, slot: Option<usize>) -> usize {
        slot.unwrap_or(self.vocab.len())
    }

    pub fn embedding(&self, slot: Option<usize>) -> &[S] {
        self.embeddings.row(self.slot_row(slot))
    }

    /// Named parameter tensors in the fixed optimizer order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("emb".to_string(), self.embeddings.shape().to_vec())];
        for (dir, stacks) in [("fwd", &self.fwd), ("inv", &self.inv)] {
            for (p, stack) in stacks.iter().enumerate() {
                for (s, k) in stack.stages.iter().enumerate() {
                    out.push((format!("{dir}/{}/s{s}", PREDICATES[p]), k.shape().to_vec()));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.embeddings];
        for stacks in [&self.fwd, &self.inv] {
            for stack in stacks.iter() {
                out.extend(stack.stages.iter());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.embeddings];
        for stacks in [&mut self.fwd, &mut self.inv] {
            for stack in stacks.iter_mut() {
                out.extend(stack.stages.iter_mut());
            }
        }
        out
    }

    /// Flat parameter index of the first stage of a direction's stack.
    fn stack_base(&self, inverse: bool, predicate: usize) -> usize {
        let n = self.cfg.stages;
        1 + if inverse { PREDICATES.len() * n } else { 0 } + predicate * n
    }

    /// Run the full iteration loop, keeping the backward tape.
    pub fn rollout_with_tape(
        &self,
        mu: &Tensor<S>,
        q: &Query,
    ) -> Result<(Rollout<S>, RolloutTape<S>)> {
        self.check_features(mu)?;
        let e_s = self.embedding(q.subject);
        let e_o = self.embedding(q.object);
        let fwd = &self.fwd[q.predicate];
        let inv = &self.inv[q.predicate];

        let x0 = attend(mu, e_s)?;
        let y0 = attend(mu, e_o)?;
        let mut rollout = Rollout {
            steps: vec![RolloutStep { subject: x0, object: y0, subject_gate: None, object_gate: None }],
        };
        let mut tape = RolloutTape { steps: Vec::with_capacity(self.cfg.iterations) };

        for _ in 0..self.cfg.iterations {
            let prev = rollout.steps.last().unwrap();
            // Subject looks where the object's map says it should sit,
            // pulled back through the inverse shift; object symmetrical
            // through the forward shift.
            let (x_gate, x_shift) = shift_forward(&prev.object.activated, inv)?;
            let (y_gate, y_shift) = shift_forward(&prev.subject.activated, fwd)?;
            let mx = ops::broadcast_mul(&x_gate.activated, mu)?;
            let my = ops::broadcast_mul(&y_gate.activated, mu)?;
            let x = attend(&mx, e_s)?;
            let y = attend(&my, e_o)?;
            tape.steps.push(StepTape { x_shift, y_shift, mx, my });
            rollout.steps.push(RolloutStep {
                subject: x,
                object: y,
                subject_gate: Some(x_gate),
                object_gate: Some(y_gate),
            });
        }
        Ok((rollout, tape))
    }

    /// Inference: the rollout trace alone.
    pub fn rollout(&self, mu: &Tensor<S>, q: &Query) -> Result<Rollout<S>> {
        Ok(self.rollout_with_tape(mu, q)?.0)
    }

    /// Backpropagate through the whole rollout from gradients on the final
    /// step's logits. Parameter gradients are *accumulated* into `grads`
    /// (aligned with `param_layout`); the gradient w.r.t. the feature grid
    /// is returned when `want_mu_grad` is set (for a trainable encoder).
    pub fn rollout_backward(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        rollout: &Rollout<S>,
        tape: &RolloutTape<S>,
        grad_x_logits: &Tensor<S>,
        grad_y_logits: &Tensor<S>,
        grads: &mut [Vec<S>],
        want_mu_grad: bool,
    ) -> Result<Option<Tensor<S>>> {
        let mut seeds: Vec<Option<(Tensor<S>, Tensor<S>)>> = Vec::new();
        seeds.resize_with(tape.steps.len(), || None);
        seeds.push(Some((grad_x_logits.clone(), grad_y_logits.clone())));
        self.rollout_backward_seeded(mu, q, rollout, tape, &seeds, grads, want_mu_grad)
    }

    /// General backward pass: `seeds[m]`, when present, is a pair of
    /// gradients on step m's (subject, object) logits. `seeds` must have
    /// one entry per rollout step (iterations + 1).
    pub fn rollout_backward_seeded(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        rollout: &Rollout<S>,
        tape: &RolloutTape<S>,
        seeds: &[Option<(Tensor<S>, Tensor<S>)>],
        grads: &mut [Vec<S>],
        want_mu_grad: bool,
    ) -> Result<Option<Tensor<S>>> {
        let l = self.cfg.grid;
        let e_s = self.embedding(q.subject);
        let e_o = self.embedding(q.object);
        let s_row = self.slot_row(q.subject);
        let o_row = self.slot_row(q.object);
        let fwd = &self.fwd[q.predicate];
        let inv = &self.inv[q.predicate];
        let fwd_base = self.stack_base(false, q.predicate);
        let inv_base = self.stack_base(true, q.predicate);
        let t = tape.steps.len();
        if seeds.len() != t + 1 {
            return Err(Error::Dimension {
                op: "rollout_backward",
                axis: "seed count",
                expected: t + 1,
                got: seeds.len(),
            });
        }

        let mut g_mu = want_mu_grad.then(|| Tensor::zeros(mu.shape()));
        // Gradient flowing into each step's *activated* maps from the step
        // above (the final step has none).
        let mut gx_act = Tensor::zeros(&[l, l]);
        let mut gy_act = Tensor::zeros(&[l, l]);

        for m in (0..=t).rev() {
            let step = &rollout.steps[m];
            // Total gradient on this step's logits: this step's loss seed
            // (if supervised) plus whatever arrived through the ReLU from
            // the shift consumers one step later.
            let mut g_xl = ops::relu_backward(&step.subject.logits, &gx_act);
            let mut g_yl = ops::relu_backward(&step.object.logits, &gy_act);
            if let Some((sx, sy)) = &seeds[m] {
                add_into(&mut g_xl, sx);
                add_into(&mut g_yl, sy);
            }

            let features_x: &Tensor<S> = if m == 0 { mu } else { &tape.steps[m - 1].mx };
            let features_y: &Tensor<S> = if m == 0 { mu } else { &tape.steps[m - 1].my };
            let (g_mx, g_es) = attend_backward(features_x, e_s, &g_xl)?;
            let (g_my, g_eo) = attend_backward(features_y, e_o, &g_yl)?;
            accumulate_row(&mut grads[0], s_row, &g_es);
            accumulate_row(&mut grads[0], o_row, &g_eo);

            if m == 0 {
                if let Some(acc) = g_mu.as_mut() {
                    add_into(acc, &g_mx);
                    add_into(acc, &g_my);
                }
                break;
            }

            let st = &tape.steps[m - 1];
            let x_gate = step.subject_gate.as_ref().expect("gates exist for m >= 1");
            let y_gate = step.object_gate.as_ref().expect("gates exist for m >= 1");
            let (g_xgate, g_mu_x) = ops::broadcast_mul_backward(&x_gate.activated, mu, &g_mx)?;
            let (g_ygate, g_mu_y) = ops::broadcast_mul_backward(&y_gate.activated, mu, &g_my)?;
            if let Some(acc) = g_mu.as_mut() {
                add_into(acc, &g_mu_x);
                add_into(acc, &g_mu_y);
            }

            // Subject gate came through the inverse stack from the previous
            // object map; object gate through the forward stack from the
            // previous subject map.
            let (g_prev_y, g_inv_k) = shift_backward(&st.x_shift, inv, &g_xgate)?;
            let (g_prev_x, g_fwd_k) = shift_backward(&st.y_shift, fwd, &g_ygate)?;
            for (s, g) in g_inv_k.iter().enumerate() {
                accumulate(&mut grads[inv_base + s], g.data());
            }
            for (s, g) in g_fwd_k.iter().enumerate() {
                accumulate(&mut grads[fwd_base + s], g.data());
            }
            gx_act = g_prev_x;
            gy_act = g_prev_y;
        }
        Ok(g_mu)
    }

    /// Indices of the rollout steps the loss supervises: the final step
    /// alone, or every step under `supervise_intermediate`.
    fn supervised_steps(&self) -> Vec<usize> {
        if self.cfg.supervise_intermediate {
            (0..=self.cfg.iterations).collect()
        } else {
            vec![self.cfg.iterations]
        }
    }

    /// Training loss of one query: mean binary cross-entropy of a step's
    /// subject and object logits against their cell masks, summed over the
    /// two roles and averaged over the supervised steps (just the final
    /// step unless `supervise_intermediate` is set).
    pub fn query_loss(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
    ) -> Result<f64> {
        let rollout = self.rollout(mu, q)?;
        let steps = self.supervised_steps();
        let mut total = 0.0;
        for &m in &steps {
            let step = &rollout.steps[m];
            let lx = ops::bce_with_logits(&step.subject.logits, s_target)?;
            let ly = ops::bce_with_logits(&step.object.logits, o_target)?;
            total += lx.as_f64() + ly.as_f64();
        }
        Ok(total / steps.len() as f64)
    }

    /// Loss plus parameter gradients (accumulated into `grads`); returns
    /// the loss and, when requested, the feature-grid gradient.
    pub fn query_grads(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
        grads: &mut [Vec<S>],
        want_mu_grad: bool,
    ) -> Result<(f64, Option<Tensor<S>>)> {
        let (rollout, tape) = self.rollout_with_tape(mu, q)?;
        let steps = self.supervised_steps();
        let weight = 1.0 / steps.len() as f64;
        let mut seeds: Vec<Option<(Tensor<S>, Tensor<S>)>> = Vec::new();
        seeds.resize_with(rollout.steps.len(), || None);
        let mut total = 0.0;
        for &m in &steps {
            let step = &rollout.steps[m];
            let lx = ops::bce_with_logits(&step.subject.logits, s_target)?;
            let ly = ops::bce_with_logits(&step.object.logits, o_target)?;
            total += lx.as_f64() + ly.as_f64();
            let mut gx = ops::bce_with_logits_backward(&step.subject.logits, s_target)?;
            let mut gy = ops::bce_with_logits_backward(&step.object.logits, o_target)?;
            if steps.len() > 1 {
                let w = S::from_f64(weight);
                for v in gx.data_mut() {
                    *v = *v * w;
                }
                for v in gy.data_mut() {
                    *v = *v * w;
                }
            }
            seeds[m] = Some((gx, gy));
        }
        let g_mu =
            self.rollout_backward_seeded(mu, q, &rollout, &tape, &seeds, grads, want_mu_grad)?;
        Ok((total * weight, g_mu))
    }

    fn check_features(&self, mu: &Tensor<S>) -> Result<()> {
        let (h, w, c) = dims3("rollout", mu)?;
        if h != self.cfg.grid || w != self.cfg.grid || c != self.cfg.channels {
            return Err(Error::Dimension {
                op: "rollout",
                axis: "feature grid element count",
                expected: self.cfg.grid * self.cfg.grid * self.cfg.channels,
                got: h * w * c,
            });
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(acc: &mut Tensor<S>, x: &Tensor<S>) {
    debug_assert_eq!(acc.shape(), x.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

fn accumulate<S: Scalar>(acc: &mut [S], x: &[S]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn accumulate_row<S: Scalar>(acc: &mut [S], row: usize, x: &[S]) {
    accumulate(&mut acc[row * x.len()..(row + 1) * x.len()], x);
}

/// Center of mass of a non-negative map, in (row, col) cell coordinates.
/// Returns `None` for an all-zero map.
pub fn center_of_mass<S: Scalar>(map: &Tensor<S>) -> Option<(f64, f64)> {
    let shape = map.shape();
    let (h, w) = (shape[0], shape[1]);
    let (mut total, mut mr, mut mc) = (0.0f64, 0.0f64, 0.0f64);
    for r in 0..h {
        for c in 0..w {
            let v = map.data()[r * w + c].as_f64();
            total += v;
            mr += v * r as f64;
            mc += v * c as f64;
        }
    }
    (total > 0.0).then(|| (mr / total, mc / total))
}
