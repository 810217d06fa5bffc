//! Scratch probe: effect of fan-in (He) kernel init + lr/batch on deep
//! rollouts. Prior runs (glorot) showed t=2 starting near the flat
//! zero-logit region (loss ~2 ln 2) and underperforming t=1.

use std::time::Instant;

use shiftlab_core::encoder::oracle_encode;
use shiftlab_core::model::{SsasConfig, SsasModel};
use shiftlab_core::rng::rng_from;
use shiftlab_core::scene::{generate_scene, GenConfig};
use shiftlab_core::tensor::Tensor;
use shiftlab_core::train::{
    build_examples, train, Example, Grounder, Net, SceneFeatures, SplitData, TrainConfig,
};

fn iou(logits: &Tensor<f64>, mask: &[bool], tau: f64) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (z, &g) in logits.data().iter().zip(mask) {
        let sig = 1.0 / (1.0 + (-z).exp());
        let p = sig > tau;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn split(gen: &GenConfig, base: u64, n: usize, l: usize, qps: usize, seed: u64) -> SplitData<f64> {
    let scenes: Vec<_> = (0..n)
        .map(|i| generate_scene(gen, base + i as u64, format!("s{base}-{i}")).unwrap())
        .collect();
    let vocab = gen.categories.clone();
    let features = scenes
        .iter()
        .map(|s| SceneFeatures::Grid(oracle_encode(s, &vocab, l).unwrap()))
        .collect();
    let examples: Vec<Example<f64>> = build_examples(&scenes, &vocab, l, qps, seed).unwrap();
    SplitData { features, examples }
}

fn analyze(g: &Grounder<f64>, data: &SplitData<f64>, label: &str) {
    let Net::Ssas(m) = &g.net else { unreachable!() };
    let mut rows = Vec::new();
    for ex in &data.examples {
        let SceneFeatures::Grid(mu) = &data.features[ex.scene] else { unreachable!() };
        let ro = m.rollout(mu, &ex.query).unwrap();
        let fin = ro.steps.last().unwrap();
        rows.push((
            fin.subject.logits.clone(),
            fin.object.logits.clone(),
            ex.s_mask.cells.clone(),
            ex.o_mask.cells.clone(),
            ex.ambiguous,
        ));
    }
    let mut best = (0.0, 0.0f64);
    for tau in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
        let (mut asi, mut aoi, mut an) = (0.0, 0.0, 0usize);
        let (mut usi, mut uoi, mut un) = (0.0, 0.0, 0usize);
        for (s, o, sm, om, amb) in &rows {
            let si = iou(s, sm, tau);
            let oi = iou(o, om, tau);
            if *amb {
                asi += si;
                aoi += oi;
                an += 1;
            } else {
                usi += si;
                uoi += oi;
                un += 1;
            }
        }
        println!(
            "{label} tau {tau:.1}: amb s {:.3} o {:.3} (n={an}) | unamb s {:.3} o {:.3} (n={un})",
            asi / an as f64,
            aoi / an as f64,
            usi / un.max(1) as f64,
            uoi / un.max(1) as f64
        );
        let mean = (asi + aoi) / (2.0 * an as f64);
        if mean > best.1 {
            best = (tau, mean);
        }
    }
    println!("{label} best tau {:.1} (amb mean {:.3})", best.0, best.1);
}

fn main() {
    let gen = GenConfig::default();
    let l = 14usize;
    let train_data = split(&gen, 10_000, 600, l, 2, 17);
    let val_data = split(&gen, 50_000, 150, l, 0, 18);
    println!("train ex {} val ex {}", train_data.examples.len(), val_data.examples.len());

    for (stages, iters, lr, batch, mseed) in [
        (3usize, 2usize, 1e-2, 16usize, 42u64),
        (3, 1, 1e-2, 16, 42),
        (7, 2, 1e-2, 16, 42),
        (7, 1, 1e-2, 16, 42),
        (3, 2, 3e-3, 8, 42),
    ] {
        let mut rng = rng_from(mseed);
        let cfg = SsasConfig { stages, iterations: iters, ..SsasConfig::default() };
        let model = SsasModel::new(cfg, gen.categories.clone(), &mut rng).unwrap();
        let mut g = Grounder::oracle(Net::Ssas(model));
        let tc = TrainConfig {
            epochs: 10,
            batch_size: batch,
            learning_rate: lr,
            seed: 5,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let logs = train(&mut g, &train_data, &val_data, &tc).unwrap();
        let label = format!("n={stages} t={iters} lr={lr} b={batch} s={mseed}");
        println!(
            "{label}: trained 10 epochs in {:.0}s, losses {}",
            t0.elapsed().as_secs_f64(),
            logs.iter().map(|lg| format!("{:.3}", lg.val_loss)).collect::<Vec<_>>().join(" ")
        );
        analyze(&g, &val_data, &label);
    }
}
