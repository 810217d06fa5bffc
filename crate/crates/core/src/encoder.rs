//! Scene encoders producing the L x L x C feature grid the attention
//! machinery consumes.
//!
//! Two modes: the *oracle* encoder writes exact per-cell coverage
//! fractions per category (last channel = background), isolating grounding
//! quality from perception; the *trainable* encoder is a small CNN over
//! the raster for end-to-end runs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::scene::{Raster, Scene};
use crate::tensor::Tensor;

/// L x L x C activation grid.
pub type FeatureMap<S> = Tensor<S>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Oracle,
    Trainable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    /// Grid side L.
    pub grid: usize,
    /// Feature channels C. In oracle mode this must equal vocab + 1.
    pub channels: usize,
}

impl EncoderConfig {
    pub fn oracle(grid: usize, vocab_len: usize) -> Self {
        EncoderConfig { mode: EncoderMode::Oracle, grid, channels: vocab_len + 1 }
    }

    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        if self.grid == 0 || self.channels == 0 {
            return Err(Error::Config("encoder grid and channels must be positive".into()));
        }
        if self.mode == EncoderMode::Oracle && self.channels != vocab_len + 1 {
            return Err(Error::Config(format!(
                "oracle encoder needs channels = vocabulary + 1 ({}), got {}",
                vocab_len + 1,
                self.channels
            )));
        }
        Ok(())
    }
}

/// Exact per-cell coverage fractions. Channel c holds the fraction of the
/// cell's area covered by entities of category c (summed, so stacked
/// duplicates may exceed 1); the final channel holds the background
/// complement of the summed coverage, clamped at 0. Cells are continuous
/// rectangles of side width/L; width need not divide evenly.
pub fn oracle_encode<S: Scalar>(
    scene: &Scene,
    vocab: &[String],
    l: usize,
) -> Result<FeatureMap<S>> {
    let channels = vocab.len() + 1;
    let cat_ids = scene.entity_category_ids(vocab)?;
    let cell = scene.width as f64 / l as f64;
    let cell_area = cell * cell;
    let mut out = Tensor::zeros(&[l, l, channels]);
    let mut coverage = vec![0.0f64; channels - 1];
    for r in 0..l {
        for c in 0..l {
            coverage.iter_mut().for_each(|v| *v = 0.0);
            let (cx0, cy0) = (c as f64 * cell, r as f64 * cell);
            for (e, &cat) in scene.entities.iter().zip(&cat_ids) {
                let b = &e.bbox;
                let w = (cx0 + cell).min(b[2] as f64) - cx0.max(b[0] as f64);
                let h = (cy0 + cell).min(b[3] as f64) - cy0.max(b[1] as f64);
                if w > 0.0 && h > 0.0 {
                    coverage[cat] += w * h / cell_area;
                }
            }
            let off = (r * l + c) * channels;
            let mut total = 0.0f64;
            for (ch, &cov) in coverage.iter().enumerate() {
                out.data_mut()[off + ch] = S::from_f64(cov);
                total += cov;
            }
            out.data_mut()[off + channels - 1] = S::from_f64((1.0 - total).max(0.0));
        }
    }
    Ok(out)
}

/// Trainable convolutional encoder: three 3x3 conv+bias+ReLU blocks with
/// 2x average pooling after the first two (width W -> W/2 -> W/4), then a
/// center crop down to the L x L grid. Widths 8 -> 16 -> C.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnEncoder<S: Scalar> {
    pub k1: Tensor<S>,
    pub b1: Tensor<S>,
    pub k2: Tensor<S>,
    pub b2: Tensor<S>,
    pub k3: Tensor<S>,
    pub b3: Tensor<S>,
}

pub const CNN_WIDTH_1: usize = 8;
pub const CNN_WIDTH_2: usize = 16;

fn fan_in_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

impl<S: Scalar> CnnEncoder<S> {
    /// Centered-uniform kernels with a small positive bias: the bias keeps
    /// a margin of every channel alive at initialization so the attention
    /// model on top of the encoder output always has gradient to send
    /// back.
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let lift = S::from_f64(0.1);
        CnnEncoder {
            k1: fan_in_uniform(&[3, 3, 3, CNN_WIDTH_1], 3 * 3 * 3, rng),
            b1: Tensor::filled(&[CNN_WIDTH_1], lift),
            k2: fan_in_uniform(&[3, 3, CNN_WIDTH_1, CNN_WIDTH_2], 3 * 3 * CNN_WIDTH_1, rng),
            b2: Tensor::filled(&[CNN_WIDTH_2], lift),
            k3: fan_in_uniform(&[3, 3, CNN_WIDTH_2, channels], 3 * 3 * CNN_WIDTH_2, rng),
            b3: Tensor::filled(&[channels], lift),
        }
    }

    pub fn channels(&self) -> usize {
        self.k3.shape()[3]
    }

    pub fn param_names() -> [&'static str; 6] {
        ["enc/k1", "enc/b1", "enc/k2", "enc/b2", "enc/k3", "enc/b3"]
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        vec![&self.k1, &self.b1, &self.k2, &self.b2, &self.k3, &self.b3]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.k1,
            &mut self.b1,
            &mut self.k2,
            &mut self.b2,
            &mut self.k3,
            &mut self.b3,
        ]
    }

    /// Forward pass from a W x W x 3 image tensor in [0,1] to the L x L x C
    /// grid, returning the tape needed for `backward`.
    pub fn forward(&self, image: &Tensor<S>, l: usize) -> Result<(FeatureMap<S>, CnnTape<S>)> {
        let w = image.shape()[0];
        if w % 4 != 0 || w / 4 < l || (w / 4 - l) % 2 != 0 {
            return Err(Error::Config(format!(
                "trainable encoder cannot map a {w}px image onto an {l}-cell grid \
                 (needs W divisible by 4 and an even crop W/4 - L)"
            )));
        }
        let pre1 = ops::bias_add(&ops::conv2d(image, &self.k1)?, &self.b1)?;
        let act1 = ops::relu(&pre1);
        let pool1 = ops::avg_pool2(&act1)?;
        let pre2 = ops::bias_add(&ops::conv2d(&pool1, &self.k2)?, &self.b2)?;
        let act2 = ops::relu(&pre2);
        let pool2 = ops::avg_pool2(&act2)?;
        let pre3 = ops::bias_add(&ops::conv2d(&pool2, &self.k3)?, &self.b3)?;
        let act3 = ops::relu(&pre3);
        let out = ops::center_crop(&act3, l)?;
        let tape = CnnTape { image: image.clone(), pre1, pool1, pre2, pool2, pre3 };
        Ok((out, tape))
    }

    /// Accumulate parameter gradients (and return the image gradient) for
    /// an upstream gradient on the cropped feature grid. `grads` must line
    /// up with `params()`.
    pub fn backward(
        &self,
        tape: &CnnTape<S>,
        grad_map: &Tensor<S>,
        grads: &mut [Vec<S>],
    ) -> Result<Tensor<S>> {
        debug_assert_eq!(grads.len(), 6);
        let w3 = tape.pre3.shape()[0];
        let g_act3 = ops::center_crop_backward(grad_map, w3, w3)?;
        let g_pre3 = ops::relu_backward(&tape.pre3, &g_act3);
        let (g_conv3, g_b3) = ops::bias_add_backward(&g_pre3)?;
        let (g_pool2, g_k3) = ops::conv2d_backward(&tape.pool2, &self.k3, &g_conv3)?;

        let w2 = tape.pre2.shape()[0];
        let g_act2 = ops::avg_pool2_backward(&g_pool2, w2, w2)?;
        let g_pre2 = ops::relu_backward(&tape.pre2, &g_act2);
        let (g_conv2, g_b2) = ops::bias_add_backward(&g_pre2)?;
        let (g_pool1, g_k2) = ops::conv2d_backward(&tape.pool1, &self.k2, &g_conv2)?;

        let w1 = tape.pre1.shape()[0];
        let g_act1 = ops::avg_pool2_backward(&g_pool1, w1, w1)?;
        let g_pre1 = ops::relu_backward(&tape.pre1, &g_act1);
        let (g_conv1, g_b1) = ops::bias_add_backward(&g_pre1)?;
        let (g_image, g_k1) = ops::conv2d_backward(&tape.image, &self.k1, &g_conv1)?;

        for (slot, g) in grads
            .iter_mut()
            .zip([g_k1, g_b1, g_k2, g_b2, g_k3, g_b3])
        {
            for (a, &b) in slot.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(g_image)
    }
}

/// Intermediate activations retained for the encoder backward pass.
#[derive(Debug, Clone)]
pub struct CnnTape<S: Scalar> {
    image: Tensor<S>,
    pre1: Tensor<S>,
    pool1: Tensor<S>,
    pre2: Tensor<S>,
    pool2: Tensor<S>,
    pre3: Tensor<S>,
}

/// Convert an 8-bit raster to a W x H x 3 tensor scaled to [0,1].
pub fn raster_to_tensor<S: Scalar>(raster: &Raster) -> Tensor<S> {
    let data = raster
        .rgb
        .iter()
        .map(|&b| S::from_f64(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(
        &[raster.height as usize, raster.width as usize, 3],
        data,
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_report;
    use crate::rng::rng_from;
    use crate::scene::{default_categories, Entity};

    fn scene_with(entities: Vec<Entity>, width: u32) -> Scene {
        Scene {
            id: "t".into(),
            width,
            height: width,
            seed: 0,
            entities,
            relationships: vec![],
        }
    }

    #[test]
    fn empty_scene_is_pure_background() {
        let vocab = default_categories();
        let mu = oracle_encode::<f32>(&scene_with(vec![], 64), &vocab, 14).unwrap();
        assert_eq!(mu.shape(), &[14, 14, 10]);
        for r in 0..14 {
            for c in 0..14 {
                for ch in 0..9 {
                    assert_eq!(mu.get(&[r, c, ch]), 0.0);
                }
                assert_eq!(mu.get(&[r, c, 9]), 1.0);
            }
        }
    }

    #[test]
    fn one_cell_entity_fills_exactly_its_channel_cell() {
        // W = 56 gives integer 4px cells; box [8,4)x[12,8) is cell (1, 2).
        let vocab = default_categories();
        let cat = vocab[3].clone(); // "green circle"
        let scene = scene_with(vec![Entity { category: cat, bbox: [8, 4, 12, 8] }], 56);
        let mu = oracle_encode::<f32>(&scene, &vocab, 14).unwrap();
        assert_eq!(mu.get(&[1, 2, 3]), 1.0);
        assert_eq!(mu.get(&[1, 2, 9]), 0.0);
        // Off-cell: untouched background.
        assert_eq!(mu.get(&[1, 3, 3]), 0.0);
        assert_eq!(mu.get(&[1, 3, 9]), 1.0);
    }

    #[test]
    fn background_complements_foreground_when_entities_do_not_overlap() {
        let vocab = default_categories();
        let scene = scene_with(
            vec![
                Entity { category: vocab[0].clone(), bbox: [5, 5, 19, 19] },
                Entity { category: vocab[4].clone(), bbox: [30, 22, 47, 39] },
            ],
            64,
        );
        let mu = oracle_encode::<f64>(&scene, &vocab, 14).unwrap();
        for r in 0..14 {
            for c in 0..14 {
                let mut fg = 0.0;
                for ch in 0..9 {
                    fg += mu.get(&[r, c, ch]);
                }
                let bg = mu.get(&[r, c, 9]);
                assert!((fg + bg - 1.0).abs() < 1e-12, "cell ({r},{c})");
            }
        }
    }

    /// Pixel-decomposition oracle for coverage fractions.
    fn pixel_oracle_coverage(scene: &Scene, vocab: &[String], l: usize) -> Vec<f64> {
        let channels = vocab.len() + 1;
        let cell = scene.width as f64 / l as f64;
        let ids = scene.entity_category_ids(vocab).unwrap();
        let mut out = vec![0.0f64; l * l * channels];
        for r in 0..l {
            for c in 0..l {
                let (cx0, cy0) = (c as f64 * cell, r as f64 * cell);
                let mut total = 0.0;
                for (e, &cat) in scene.entities.iter().zip(&ids) {
                    let mut covered = 0.0;
                    for py in e.bbox[1]..e.bbox[3] {
                        for px in e.bbox[0]..e.bbox[2] {
                            let w = (cx0 + cell).min(px as f64 + 1.0) - cx0.max(px as f64);
                            let h = (cy0 + cell).min(py as f64 + 1.0) - cy0.max(py as f64);
                            if w > 0.0 && h > 0.0 {
                                covered += w * h;
                            }
                        }
                    }
                    out[(r * l + c) * channels + cat] += covered / (cell * cell);
                    total += covered / (cell * cell);
                }
                out[(r * l + c) * channels + channels - 1] = (1.0 - total).max(0.0);
            }
        }
        out
    }

    #[test]
    fn coverage_matches_pixel_decomposition_oracle() {
        let vocab = default_categories();
        let cfg = crate::scene::GenConfig::default();
        for seed in 0..10 {
            let scene = crate::scene::generate_scene(&cfg, seed, format!("s{seed}")).unwrap();
            let mu = oracle_encode::<f64>(&scene, &vocab, 14).unwrap();
            let want = pixel_oracle_coverage(&scene, &vocab, 14);
            for (i, (&got, &w)) in mu.data().iter().zip(&want).enumerate() {
                assert!((got - w).abs() < 1e-9, "seed {seed} flat index {i}: {got} vs {w}");
            }
        }
    }

    #[test]
    fn unknown_category_is_rejected() {
        let vocab = default_categories();
        let scene = scene_with(
            vec![Entity { category: "cyan hexagon".into(), bbox: [5, 5, 15, 15] }],
            64,
        );
        assert!(oracle_encode::<f32>(&scene, &vocab, 14).is_err());
    }

    #[test]
    fn cnn_zero_image_zero_bias_gives_zero_map() {
        let mut rng = rng_from(3);
        let mut enc = CnnEncoder::<f32>::new(5, &mut rng);
        enc.b1 = Tensor::zeros(&[CNN_WIDTH_1]);
        enc.b2 = Tensor::zeros(&[CNN_WIDTH_2]);
        enc.b3 = Tensor::zeros(&[5]);
        let img = Tensor::zeros(&[16, 16, 3]);
        let (out, _) = enc.forward(&img, 2).unwrap();
        assert_eq!(out.shape(), &[2, 2, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_default_bias_keeps_every_channel_alive_on_a_blank_image() {
        let mut rng = rng_from(3);
        let enc = CnnEncoder::<f32>::new(5, &mut rng);
        let img = Tensor::zeros(&[16, 16, 3]);
        let (out, _) = enc.forward(&img, 2).unwrap();
        assert!(out.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cnn_output_shape_contract_holds_at_full_size() {
        let mut rng = rng_from(4);
        let enc = CnnEncoder::<f32>::new(6, &mut rng);
        let img = Tensor::filled(&[64, 64, 3], 0.5);
        let (out, _) = enc.forward(&img, 14).unwrap();
        assert_eq!(out.shape(), &[14, 14, 6]);
    }

    #[test]
    fn cnn_rejects_incompatible_grid() {
        let mut rng = rng_from(5);
        let enc = CnnEncoder::<f32>::new(4, &mut rng);
        let img = Tensor::zeros(&[16, 16, 3]);
        // 16/4 = 4; crop 4 -> 3 is odd, 4 -> 5 impossible.
        assert!(enc.forward(&img, 3).is_err());
        assert!(enc.forward(&img, 5).is_err());
    }

    #[test]
    fn cnn_gradients_match_finite_differences_end_to_end() {
        // Downscaled config: 16x16 image, pools to 4, crop to L=2, C=3.
        let mut rng = rng_from(6);
        let enc = CnnEncoder::<f64>::new(3, &mut rng);
        let mut img_rng = rng_from(7);
        let img = Tensor::from_vec(
            &[16, 16, 3],
            (0..16 * 16 * 3)
                .map(|_| img_rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap();
        let weights = Tensor::from_vec(
            &[2, 2, 3],
            (0..12).map(|_| img_rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();

        let loss = {
            let weights = weights.clone();
            move |ts: &[Tensor<f64>]| {
                let e = CnnEncoder {
                    k1: ts[0].clone(),
                    b1: ts[1].clone(),
                    k2: ts[2].clone(),
                    b2: ts[3].clone(),
                    k3: ts[4].clone(),
                    b3: ts[5].clone(),
                };
                let (out, _) = e.forward(&ts[6], 2).unwrap();
                out.data()
                    .iter()
                    .zip(weights.data())
                    .map(|(&a, &b)| a * b)
                    .sum()
            }
        };

        let (out, tape) = enc.forward(&img, 2).unwrap();
        assert_eq!(out.shape(), weights.shape());
        let mut grads: Vec<Vec<f64>> =
            enc.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let g_img = enc.backward(&tape, &weights, &mut grads).unwrap();

        let inputs: Vec<Tensor<f64>> = enc
            .params()
            .into_iter()
            .cloned()
            .chain(std::iter::once(img))
            .collect();
        let analytic: Vec<Tensor<f64>> = grads
            .iter()
            .zip(enc.params())
            .map(|(g, p)| Tensor::from_vec(p.shape(), g.clone()).unwrap())
            .chain(std::iter::once(g_img))
            .collect();
        let all: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
            .collect();
        // h = 1e-5: small enough in f64 that no ReLU corner sits inside a
        // perturbation bracket for this fixture, large enough to stay clear
        // of roundoff in the difference quotient.
        let report = grad_check_report(&loss, &inputs, &analytic, 1e-5, &all);
        assert!(report.worst < 1e-2, "encoder end-to-end rel err {}", report.worst);
        // The kink filter may drop coordinates whose perturbation crosses a
        // ReLU corner, but the check must still cover nearly everything.
        assert!(
            report.skipped * 5 < report.checked,
            "too many kinked coordinates: {} skipped vs {} checked",
            report.skipped,
            report.checked
        );
    }
}
