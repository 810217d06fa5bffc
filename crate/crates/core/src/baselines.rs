//! Comparison models for the grounding task.
//!
//! * `CooccurModel` — query-conditioned but *predicate-blind*: it fuses the
//!   two entity embeddings and attends once per role. Whatever it learns is
//!   pure category co-occurrence, so duplicated categories are
//!   irresolvable for it by construction.
//! * `VrdModel` — the same fusion head with the predicate embedded and
//!   concatenated in, but still a single non-iterative attention per role.
//! * `SpatialShiftModel` — plain attention refined once through *fixed*
//!   dataset displacement statistics instead of learned shift kernels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{rotate180, transport};
use crate::error::{Error, Result};
use crate::model::{attend, attend_backward, AttentionMap, Query};
use crate::ops;
use crate::scalar::Scalar;
use crate::scene::PREDICATES;
use crate::tensor::Tensor;

fn uniform_tensor<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Small centered uniform rows, U(-b, b) with b = 1/sqrt(C) (same
/// rationale as the main model's embedding initialization: mixed-sign
/// initial logits under sparse targets).
fn embedding_table<S: Scalar>(rows: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (c as f64).sqrt();
    let data = (0..rows * c)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(&[rows, c], data).unwrap()
}

/// Two-layer fusion trunk shared by the non-iterative baselines: a fused
/// hidden vector, then one ReLU head per role producing the attention
/// vector for that role.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead<S: Scalar> {
    pub fuse_w: Tensor<S>,
    pub fuse_b: Tensor<S>,
    pub s_w: Tensor<S>,
    pub s_b: Tensor<S>,
    pub o_w: Tensor<S>,
    pub o_b: Tensor<S>,
}

struct HeadTape<S: Scalar> {
    cat: Tensor<S>,
    h_pre: Tensor<S>,
    h: Tensor<S>,
    s_pre: Tensor<S>,
    s_vec: Tensor<S>,
    o_pre: Tensor<S>,
    o_vec: Tensor<S>,
}

impl<S: Scalar> FusionHead<S> {
    /// Centered-uniform weights, small positive biases (so no head unit
    /// starts dead — a dead unit here receives no gradient of its own).
    fn new(input: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let lift = S::from_f64(0.1);
        FusionHead {
            fuse_w: uniform_tensor(&[input, c], input, rng),
            fuse_b: Tensor::filled(&[c], lift),
            s_w: uniform_tensor(&[c, c], c, rng),
            s_b: Tensor::filled(&[c], lift),
            o_w: uniform_tensor(&[c, c], c, rng),
            o_b: Tensor::filled(&[c], lift),
        }
    }

    fn forward(&self, cat: Tensor<S>) -> Result<HeadTape<S>> {
        let h_pre = ops::dense(&cat, &self.fuse_w, &self.fuse_b)?;
        let h = ops::relu(&h_pre);
        let s_pre = ops::dense(&h, &self.s_w, &self.s_b)?;
        let s_vec = ops::relu(&s_pre);
        let o_pre = ops::dense(&h, &self.o_w, &self.o_b)?;
        let o_vec = ops::relu(&o_pre);
        Ok(HeadTape { cat, h_pre, h, s_pre, s_vec, o_pre, o_vec })
    }

    /// Backward from gradients on the two role vectors; returns the
    /// gradient on the concatenated input and the six parameter gradients
    /// in `param order (fuse_w, fuse_b, s_w, s_b, o_w, o_b)`.
    fn backward(
        &self,
        tape: &HeadTape<S>,
        g_svec: &Tensor<S>,
        g_ovec: &Tensor<S>,
    ) -> Result<(Tensor<S>, [Tensor<S>; 6])> {
        let g_spre = ops::relu_backward(&tape.s_pre, g_svec);
        let (g_h_s, g_sw, g_sb) = ops::dense_backward(&tape.h, &self.s_w, &g_spre)?;
        let g_opre = ops::relu_backward(&tape.o_pre, g_ovec);
        let (g_h_o, g_ow, g_ob) = ops::dense_backward(&tape.h, &self.o_w, &g_opre)?;
        let mut g_h = g_h_s;
        for (a, &b) in g_h.data_mut().iter_mut().zip(g_h_o.data()) {
            *a += b;
        }
        let g_hpre = ops::relu_backward(&tape.h_pre, &g_h);
        let (g_cat, g_fw, g_fb) = ops::dense_backward(&tape.cat, &self.fuse_w, &g_hpre)?;
        Ok((g_cat, [g_fw, g_fb, g_sw, g_sb, g_ow, g_ob]))
    }

    fn layout(&self, out: &mut Vec<(String, Vec<usize>)>) {
        out.push(("fuse/w".into(), self.fuse_w.shape().to_vec()));
        out.push(("fuse/b".into(), self.fuse_b.shape().to_vec()));
        out.push(("subj/w".into(), self.s_w.shape().to_vec()));
        out.push(("subj/b".into(), self.s_b.shape().to_vec()));
        out.push(("obj/w".into(), self.o_w.shape().to_vec()));
        out.push(("obj/b".into(), self.o_b.shape().to_vec()));
    }

    fn params(&self) -> Vec<&Tensor<S>> {
        vec![&self.fuse_w, &self.fuse_b, &self.s_w, &self.s_b, &self.o_w, &self.o_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.fuse_w,
            &mut self.fuse_b,
            &mut self.s_w,
            &mut self.s_b,
            &mut self.o_w,
            &mut self.o_b,
        ]
    }
}

fn concat<S: Scalar>(parts: &[&[S]]) -> Tensor<S> {
    let data: Vec<S> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    let len = data.len();
    Tensor::from_vec(&[len], data).unwrap()
}

fn bce_pair<S: Scalar>(
    x: &AttentionMap<S>,
    y: &AttentionMap<S>,
    s_target: &Tensor<S>,
    o_target: &Tensor<S>,
) -> Result<(f64, Tensor<S>, Tensor<S>)> {
    let lx = ops::bce_with_logits(&x.logits, s_target)?;
    let ly = ops::bce_with_logits(&y.logits, o_target)?;
    let gx = ops::bce_with_logits_backward(&x.logits, s_target)?;
    let gy = ops::bce_with_logits_backward(&y.logits, o_target)?;
    Ok((lx.as_f64() + ly.as_f64(), gx, gy))
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

/// Predicate-blind fusion baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurModel<S: Scalar> {
    pub grid: usize,
    pub channels: usize,
    pub vocab: Vec<String>,
    pub embeddings: Tensor<S>,
    pub head: FusionHead<S>,
}

impl<S: Scalar> CooccurModel<S> {
    pub fn new(grid: usize, channels: usize, vocab: Vec<String>, rng: &mut ChaCha8Rng) -> Self {
        let embeddings = embedding_table(vocab.len() + 1, channels, rng);
        let head = FusionHead::new(2 * channels, channels, rng);
        CooccurModel { grid, channels, vocab, embeddings, head }
    }

    fn rows(&self, q: &Query) -> (usize, usize) {
        (
            q.subject.unwrap_or(self.vocab.len()),
            q.object.unwrap_or(self.vocab.len()),
        )
    }

    fn forward(&self, mu: &Tensor<S>, q: &Query) -> Result<(AttentionMap<S>, AttentionMap<S>, HeadTape<S>)> {
        let (sr, or) = self.rows(q);
        let cat = concat(&[self.embeddings.row(sr), self.embeddings.row(or)]);
        let tape = self.head.forward(cat)?;
        let x = attend(mu, tape.s_vec.data())?;
        let y = attend(mu, tape.o_vec.data())?;
        Ok((x, y, tape))
    }

    pub fn infer(&self, mu: &Tensor<S>, q: &Query) -> Result<(AttentionMap<S>, AttentionMap<S>)> {
        let (x, y, _) = self.forward(mu, q)?;
        Ok((x, y))
    }

    pub fn query_loss(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
    ) -> Result<f64> {
        let (x, y, _) = self.forward(mu, q)?;
        Ok(ops::bce_with_logits(&x.logits, s_target)?.as_f64()
            + ops::bce_with_logits(&y.logits, o_target)?.as_f64())
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
        let (x, y, tape) = self.forward(mu, q)?;
        let (loss, gx, gy) = bce_pair(&x, &y, s_target, o_target)?;
        let (g_mu_x, g_svec) = attend_backward(mu, tape.s_vec.data(), &gx)?;
        let (g_mu_y, g_ovec) = attend_backward(mu, tape.o_vec.data(), &gy)?;
        let g_svec = Tensor::from_vec(&[self.channels], g_svec)?;
        let g_ovec = Tensor::from_vec(&[self.channels], g_ovec)?;
        let (g_cat, head_grads) = self.head.backward(&tape, &g_svec, &g_ovec)?;
        let (sr, or) = self.rows(q);
        let c = self.channels;
        accumulate_row(&mut grads[0], sr, &g_cat.data()[..c]);
        accumulate_row(&mut grads[0], or, &g_cat.data()[c..]);
        for (slot, g) in grads[1..7].iter_mut().zip(head_grads.iter()) {
            accumulate(slot, g.data());
        }
        let g_mu = want_mu_grad.then(|| {
            let mut t = g_mu_x;
            for (a, &b) in t.data_mut().iter_mut().zip(g_mu_y.data()) {
                *a += b;
            }
            t
        });
        Ok((loss, g_mu))
    }

    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("emb".to_string(), self.embeddings.shape().to_vec())];
        self.head.layout(&mut out);
        out
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.embeddings];
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.embeddings];
        out.extend(self.head.params_mut());
        out
    }
}

/// Predicate-aware fusion baseline: identical trunk, with the predicate
/// embedding concatenated into the fused input.
#[derive(Debug, Clone, PartialEq)]
pub struct VrdModel<S: Scalar> {
    pub grid: usize,
    pub channels: usize,
    pub vocab: Vec<String>,
    pub embeddings: Tensor<S>,
    pub pred_embeddings: Tensor<S>,
    pub head: FusionHead<S>,
}

impl<S: Scalar> VrdModel<S> {
    pub fn new(grid: usize, channels: usize, vocab: Vec<String>, rng: &mut ChaCha8Rng) -> Self {
        let embeddings = embedding_table(vocab.len() + 1, channels, rng);
        let pred_embeddings = embedding_table(PREDICATES.len(), channels, rng);
        let head = FusionHead::new(3 * channels, channels, rng);
        VrdModel { grid, channels, vocab, embeddings, pred_embeddings, head }
    }

    fn rows(&self, q: &Query) -> (usize, usize) {
        (
            q.subject.unwrap_or(self.vocab.len()),
            q.object.unwrap_or(self.vocab.len()),
        )
    }

    fn forward(&self, mu: &Tensor<S>, q: &Query) -> Result<(AttentionMap<S>, AttentionMap<S>, HeadTape<S>)> {
        let (sr, or) = self.rows(q);
        let cat = concat(&[
            self.embeddings.row(sr),
            self.pred_embeddings.row(q.predicate),
            self.embeddings.row(or),
        ]);
        let tape = self.head.forward(cat)?;
        let x = attend(mu, tape.s_vec.data())?;
        let y = attend(mu, tape.o_vec.data())?;
        Ok((x, y, tape))
    }

    pub fn infer(&self, mu: &Tensor<S>, q: &Query) -> Result<(AttentionMap<S>, AttentionMap<S>)> {
        let (x, y, _) = self.forward(mu, q)?;
        Ok((x, y))
    }

    pub fn query_loss(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
    ) -> Result<f64> {
        let (x, y, _) = self.forward(mu, q)?;
        Ok(ops::bce_with_logits(&x.logits, s_target)?.as_f64()
            + ops::bce_with_logits(&y.logits, o_target)?.as_f64())
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
        let (x, y, tape) = self.forward(mu, q)?;
        let (loss, gx, gy) = bce_pair(&x, &y, s_target, o_target)?;
        let (g_mu_x, g_svec) = attend_backward(mu, tape.s_vec.data(), &gx)?;
        let (g_mu_y, g_ovec) = attend_backward(mu, tape.o_vec.data(), &gy)?;
        let g_svec = Tensor::from_vec(&[self.channels], g_svec)?;
        let g_ovec = Tensor::from_vec(&[self.channels], g_ovec)?;
        let (g_cat, head_grads) = self.head.backward(&tape, &g_svec, &g_ovec)?;
        let (sr, or) = self.rows(q);
        let c = self.channels;
        accumulate_row(&mut grads[0], sr, &g_cat.data()[..c]);
        accumulate_row(&mut grads[1], q.predicate, &g_cat.data()[c..2 * c]);
        accumulate_row(&mut grads[0], or, &g_cat.data()[2 * c..]);
        for (slot, g) in grads[2..8].iter_mut().zip(head_grads.iter()) {
            accumulate(slot, g.data());
        }
        let g_mu = want_mu_grad.then(|| {
            let mut t = g_mu_x;
            for (a, &b) in t.data_mut().iter_mut().zip(g_mu_y.data()) {
                *a += b;
            }
            t
        });
        Ok((loss, g_mu))
    }

    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("emb".to_string(), self.embeddings.shape().to_vec()),
            ("pred".to_string(), self.pred_embeddings.shape().to_vec()),
        ];
        self.head.layout(&mut out);
        out
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.embeddings, &self.pred_embeddings];
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.embeddings, &mut self.pred_embeddings];
        out.extend(self.head.params_mut());
        out
    }
}

/// Attention refined once through fixed dataset displacement statistics.
/// Training touches only the embeddings (plain per-role attention BCE);
/// at inference each role's initial map is transported by the predicate's
/// displacement histogram (inverted by point reflection for the subject)
/// and used to gate the features for a second attention pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialShiftModel<S: Scalar> {
    pub grid: usize,
    pub channels: usize,
    pub vocab: Vec<String>,
    pub embeddings: Tensor<S>,
    /// One (2L-1) x (2L-1) displacement histogram per predicate.
    pub kernels: Vec<Tensor<S>>,
    /// Predicates that had no instances and fell back to uniform.
    pub uniform: Vec<bool>,
}

impl<S: Scalar> SpatialShiftModel<S> {
    pub fn new(
        grid: usize,
        channels: usize,
        vocab: Vec<String>,
        kernels: Vec<Tensor<S>>,
        uniform: Vec<bool>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernels.len() != PREDICATES.len() || uniform.len() != PREDICATES.len() {
            return Err(Error::Config(format!(
                "need one displacement kernel per predicate ({}), got {}",
                PREDICATES.len(),
                kernels.len()
            )));
        }
        let side = 2 * grid - 1;
        for k in &kernels {
            if k.shape() != [side, side] {
                return Err(Error::Config(format!(
                    "displacement kernels must be {side}x{side} for grid {grid}"
                )));
            }
        }
        let embeddings = embedding_table(vocab.len() + 1, channels, rng);
        Ok(SpatialShiftModel { grid, channels, vocab, embeddings, kernels, uniform })
    }

    fn rows(&self, q: &Query) -> (usize, usize) {
        (
            q.subject.unwrap_or(self.vocab.len()),
            q.object.unwrap_or(self.vocab.len()),
        )
    }

    pub fn infer(&self, mu: &Tensor<S>, q: &Query) -> Result<(AttentionMap<S>, AttentionMap<S>)> {
        let (sr, or) = self.rows(q);
        let e_s = self.embeddings.row(sr);
        let e_o = self.embeddings.row(or);
        let x0 = attend(mu, e_s)?;
        let y0 = attend(mu, e_o)?;
        let k = &self.kernels[q.predicate];
        let o_gate = transport(&x0.activated, k)?;
        let s_gate = transport(&y0.activated, &rotate180(k))?;
        let x = attend(&ops::broadcast_mul(&s_gate, mu)?, e_s)?;
        let y = attend(&ops::broadcast_mul(&o_gate, mu)?, e_o)?;
        Ok((x, y))
    }

    /// Training objective: plain (unrefined) attention against the masks —
    /// the displacement statistics are fixed, so only embeddings learn.
    pub fn query_loss(
        &self,
        mu: &Tensor<S>,
        q: &Query,
        s_target: &Tensor<S>,
        o_target: &Tensor<S>,
    ) -> Result<f64> {
        let (sr, or) = self.rows(q);
        let x0 = attend(mu, self.embeddings.row(sr))?;
        let y0 = attend(mu, self.embeddings.row(or))?;
        Ok(ops::bce_with_logits(&x0.logits, s_target)?.as_f64()
            + ops::bce_with_logits(&y0.logits, o_target)?.as_f64())
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
        let (sr, or) = self.rows(q);
        let e_s = self.embeddings.row(sr);
        let e_o = self.embeddings.row(or);
        let x0 = attend(mu, e_s)?;
        let y0 = attend(mu, e_o)?;
        let (loss, gx, gy) = bce_pair(&x0, &y0, s_target, o_target)?;
        let (g_mu_x, g_es) = attend_backward(mu, e_s, &gx)?;
        let (g_mu_y, g_eo) = attend_backward(mu, e_o, &gy)?;
        accumulate_row(&mut grads[0], sr, &g_es);
        accumulate_row(&mut grads[0], or, &g_eo);
        let g_mu = want_mu_grad.then(|| {
            let mut t = g_mu_x;
            for (a, &b) in t.data_mut().iter_mut().zip(g_mu_y.data()) {
                *a += b;
            }
            t
        });
        Ok((loss, g_mu))
    }

    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        vec![("emb".to_string(), self.embeddings.shape().to_vec())]
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        vec![&self.embeddings]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.embeddings]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_report;
    use crate::rng::rng_from;

    fn features(l: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        Tensor::from_vec(
            &[l, l, c],
            (0..l * l * c).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn vocab2() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn cooccur_ignores_the_predicate_bit_for_bit() {
        let mut rng = rng_from(7);
        let m = CooccurModel::<f64>::new(4, 3, vocab2(), &mut rng);
        let mu = features(4, 3, 8);
        let base = Query { subject: Some(0), predicate: 0, object: Some(1) };
        let (x0, y0) = m.infer(&mu, &base).unwrap();
        for p in 1..PREDICATES.len() {
            let (x, y) = m.infer(&mu, &Query { predicate: p, ..base }).unwrap();
            assert_eq!(x.logits, x0.logits);
            assert_eq!(y.logits, y0.logits);
        }
    }

    #[test]
    fn vrd_output_depends_on_the_predicate() {
        let mut rng = rng_from(9);
        let m = VrdModel::<f64>::new(4, 6, vocab2(), &mut rng);
        let mu = features(4, 6, 10);
        let base = Query { subject: Some(0), predicate: 0, object: Some(1) };
        let (x0, _) = m.infer(&mu, &base).unwrap();
        let (x1, _) = m.infer(&mu, &Query { predicate: 1, ..base }).unwrap();
        assert_ne!(x0.logits, x1.logits);
    }

    #[test]
    fn zero_features_give_zero_logits() {
        let mut rng = rng_from(11);
        let m = CooccurModel::<f64>::new(4, 3, vocab2(), &mut rng);
        let mu = Tensor::zeros(&[4, 4, 3]);
        let q = Query { subject: Some(1), predicate: 2, object: Some(0) };
        let (x, y) = m.infer(&mu, &q).unwrap();
        assert!(x.logits.data().iter().all(|&v| v == 0.0));
        assert!(y.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cooccur_gradients_match_finite_differences() {
        let mut rng = rng_from(13);
        let m = CooccurModel::<f64>::new(3, 2, vocab2(), &mut rng);
        let mu = features(3, 2, 14);
        let q = Query { subject: Some(0), predicate: 1, object: Some(1) };
        let st = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        let ot = Tensor::from_vec(&[3, 3], vec![0., 0., 1., 0., 0., 0., 0., 1., 0.]).unwrap();

        let mut grads: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let (_, g_mu) = m.query_grads(&mu, &q, &st, &ot, &mut grads, true).unwrap();

        let loss = {
            let (st, ot) = (st.clone(), ot.clone());
            let proto = m.clone();
            move |ts: &[Tensor<f64>]| {
                let mut mm = proto.clone();
                for (dst, src) in mm.params_mut().into_iter().zip(ts.iter()) {
                    *dst = src.clone();
                }
                mm.query_loss(&ts[7], &q, &st, &ot).unwrap()
            }
        };
        let inputs: Vec<Tensor<f64>> = m
            .params()
            .into_iter()
            .cloned()
            .chain(std::iter::once(mu))
            .collect();
        let analytic: Vec<Tensor<f64>> = grads
            .iter()
            .zip(m.params())
            .map(|(g, p)| Tensor::from_vec(p.shape(), g.clone()).unwrap())
            .chain(std::iter::once(g_mu.unwrap()))
            .collect();
        let all: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
            .collect();
        let rep = grad_check_report(&loss, &inputs, &analytic, 1e-5, &all);
        assert!(rep.worst < 1e-2, "fusion rel err {}", rep.worst);
        assert!(rep.skipped * 5 < rep.checked);
    }

    #[test]
    fn vrd_gradients_match_finite_differences() {
        let mut rng = rng_from(15);
        let m = VrdModel::<f64>::new(3, 2, vocab2(), &mut rng);
        let mu = features(3, 2, 16);
        let q = Query { subject: Some(1), predicate: 3, object: Some(0) };
        let st = Tensor::from_vec(&[3, 3], vec![0., 1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        let ot = Tensor::from_vec(&[3, 3], vec![0., 0., 0., 1., 0., 0., 0., 0., 1.]).unwrap();

        let mut grads: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.len()]).collect();
        m.query_grads(&mu, &q, &st, &ot, &mut grads, false).unwrap();

        let loss = {
            let (st, ot) = (st.clone(), ot.clone());
            let proto = m.clone();
            let mu = mu.clone();
            move |ts: &[Tensor<f64>]| {
                let mut mm = proto.clone();
                for (dst, src) in mm.params_mut().into_iter().zip(ts.iter()) {
                    *dst = src.clone();
                }
                mm.query_loss(&mu, &q, &st, &ot).unwrap()
            }
        };
        let inputs: Vec<Tensor<f64>> = m.params().into_iter().cloned().collect();
        let analytic: Vec<Tensor<f64>> = grads
            .iter()
            .zip(m.params())
            .map(|(g, p)| Tensor::from_vec(p.shape(), g.clone()).unwrap())
            .collect();
        let all: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
            .collect();
        let rep = grad_check_report(&loss, &inputs, &analytic, 1e-5, &all);
        assert!(rep.worst < 1e-2, "vrd rel err {}", rep.worst);
        assert!(rep.skipped * 5 < rep.checked);
    }

    #[test]
    fn spatial_shift_moves_attention_along_a_delta_kernel() {
        // Orthogonal one-hot embeddings and features; entity a at (2,1),
        // entity b at (2,4). A delta displacement kernel of (0, +3) must
        // land the refined object map exactly on b and the refined subject
        // map exactly on a.
        let grid = 6;
        let mut mu = Tensor::<f64>::zeros(&[grid, grid, 2]);
        mu.set(&[2, 1, 0], 1.0);
        mu.set(&[2, 4, 1], 1.0);

        let side = 2 * grid - 1;
        let mut k = Tensor::<f64>::zeros(&[side, side]);
        // Displacement (dr, dc) = (0, +3) lives at (grid-1, grid-1+3).
        k.set(&[grid - 1, grid - 1 + 3], 1.0);

        let mut rng = rng_from(17);
        let mut m = SpatialShiftModel::<f64>::new(
            grid,
            2,
            vocab2(),
            vec![k.clone(), k.clone(), k.clone(), k],
            vec![false; 4],
            &mut rng,
        )
        .unwrap();
        // One-hot embeddings for the two categories; unknown row zero.
        m.embeddings = Tensor::from_vec(&[3, 2], vec![1., 0., 0., 1., 0., 0.]).unwrap();

        let q = Query { subject: Some(0), predicate: 0, object: Some(1) };
        let (x, y) = m.infer(&mu, &q).unwrap();
        assert_eq!(y.activated.argmax(), vec![2, 4]);
        assert_eq!(y.activated.get(&[2, 4]), 1.0);
        assert_eq!(y.activated.sum(), 1.0, "all other cells gated off");
        assert_eq!(x.activated.argmax(), vec![2, 1]);
        assert_eq!(x.activated.sum(), 1.0);
    }

    #[test]
    fn spatial_shift_trains_only_embeddings() {
        let grid = 4;
        let side = 2 * grid - 1;
        let mut rng = rng_from(19);
        let m = SpatialShiftModel::<f64>::new(
            grid,
            2,
            vocab2(),
            vec![Tensor::filled(&[side, side], 1.0 / (side * side) as f64); 4],
            vec![false; 4],
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.param_layout().len(), 1);
        let mu = features(grid, 2, 20);
        let st = Tensor::zeros(&[grid, grid]);
        let mut grads: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let q = Query { subject: Some(0), predicate: 1, object: Some(1) };
        let (loss, _) = m.query_grads(&mu, &q, &st, &st, &mut grads, false).unwrap();
        assert!(loss > 0.0);
        assert!(grads[0].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn spatial_shift_rejects_wrong_kernel_shapes() {
        let mut rng = rng_from(21);
        let bad = SpatialShiftModel::<f64>::new(
            4,
            2,
            vocab2(),
            vec![Tensor::zeros(&[5, 5]); 4],
            vec![false; 4],
            &mut rng,
        );
        assert!(bad.is_err());
        let too_few = SpatialShiftModel::<f64>::new(
            4,
            2,
            vocab2(),
            vec![Tensor::zeros(&[7, 7]); 2],
            vec![false; 2],
            &mut rng,
        );
        assert!(too_few.is_err());
    }
}
