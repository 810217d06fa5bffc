//! The six driver commands, written as plain functions so tests can call
//! them without spawning a process.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use shiftlab_core::dataset::{
    census, estimate_spatial_shift_kernels, generate_split, load_split, rotate180, save_split,
    transport,
};
use shiftlab_core::encoder::{oracle_encode, raster_to_tensor, EncoderMode};
use shiftlab_core::error::{Error, Result};
use shiftlab_core::metrics::{
    collect_maps, evaluate, render_entity_csv, render_metrics_csv, render_predicate_csv,
    select_tau, MaskMode,
};
use shiftlab_core::model::{shift_forward, Query};
use shiftlab_core::pnm::write_pgm_normalized;
use shiftlab_core::rng::{derive_seed, STREAM_SAMPLE};
use shiftlab_core::saccade::{traverse, SceneGraph};
use shiftlab_core::scene::{predicate_id, rasterize, Scene, PREDICATES};
use shiftlab_core::tensor::Tensor;
use shiftlab_core::train::{
    build_examples, train, Grounder, Net, SceneFeatures, SplitData,
};
use shiftlab_core::Real;

use crate::checkpoint::{self, CheckpointMeta, FinalLosses};
use crate::config::{FileConfig, ModelKind};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Generate the three dataset splits, write them under `out`, and print a
/// census per split. `seed` overrides the training seed as the generation
/// master seed; `count` overrides the configured train-split size (val and
/// test sizes stay as configured).
pub fn cmd_generate(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    count: Option<usize>,
) -> Result<()> {
    let cfg = FileConfig::load(config)?;
    let master = seed.unwrap_or(cfg.train.seed);
    for split in SPLITS {
        let n = match split {
            "train" => count.unwrap_or(cfg.gen.train_scenes),
            "val" => cfg.gen.val_scenes,
            _ => cfg.gen.test_scenes,
        };
        let scenes = generate_split(&cfg.gen, master, split, n)?;
        save_split(&out.join(split), &scenes)?;
        let c = census(&scenes);
        println!(
            "{split}: {} scenes, {} entities, {} relationships, ambiguous fraction {:.3}, \
             per-predicate {}",
            c.scenes,
            c.entities,
            c.relationships,
            c.ambiguous_fraction(),
            PREDICATES
                .iter()
                .zip(c.per_predicate)
                .map(|(p, n)| format!("{p}={n}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    Ok(())
}

/// Features for every scene of a split, following the encoder mode.
fn split_features(
    scenes: &[Scene],
    cfg: &FileConfig,
) -> Result<Vec<SceneFeatures<Real>>> {
    let vocab = &cfg.gen.categories;
    scenes
        .iter()
        .map(|s| {
            Ok(match cfg.encoder.mode {
                EncoderMode::Oracle => {
                    SceneFeatures::Grid(oracle_encode(s, vocab, cfg.encoder.grid)?)
                }
                EncoderMode::Trainable => SceneFeatures::Image(raster_to_tensor(&rasterize(s)?)),
            })
        })
        .collect()
}

/// Scenes plus features plus queries for one split. `queries_per_scene`
/// of 0 keeps every relationship.
fn split_data(
    dir: &Path,
    split: &str,
    cfg: &FileConfig,
    queries_per_scene: usize,
    seed: u64,
) -> Result<(Vec<Scene>, SplitData<Real>)> {
    let scenes = load_split(&dir.join(split))?;
    let features = split_features(&scenes, cfg)?;
    let examples = build_examples(
        &scenes,
        &cfg.gen.categories,
        cfg.encoder.grid,
        queries_per_scene,
        derive_seed(seed, STREAM_SAMPLE, 0),
    )?;
    Ok((scenes, SplitData { features, examples }))
}

pub struct TrainOverrides {
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub mask_rate: Option<f64>,
}

/// Train the selected model on a generated dataset; write a checkpoint and
/// a per-epoch training-log CSV (`<ckpt>.log.csv`, rows epoch/split/loss/lr).
pub fn cmd_train(
    config: &Path,
    data: &Path,
    out_ckpt: &Path,
    ovr: &TrainOverrides,
) -> Result<()> {
    let mut cfg = FileConfig::load(config)?;
    if let Some(kind) = ovr.model {
        cfg.model.kind = kind;
    }
    if let Some(seed) = ovr.seed {
        cfg.train.seed = seed;
    }
    if let Some(t) = ovr.iterations {
        cfg.model.iterations = t;
    }
    if let Some(r) = ovr.mask_rate {
        cfg.train.mask_rate = r;
    }
    cfg.validate()?;

    let seed = cfg.train.seed;
    let (train_scenes, train_data) =
        split_data(data, "train", &cfg, cfg.train.queries_per_scene, seed)?;
    let (_, val_data) = split_data(data, "val", &cfg, 0, seed)?;

    let stat = (cfg.model.kind == ModelKind::SpatialShift)
        .then(|| estimate_spatial_shift_kernels::<Real>(&train_scenes, cfg.encoder.grid));
    let uniform = stat.as_ref().map(|(_, u)| u.clone());

    let mut model = cfg.build_grounder(stat, seed)?;
    let logs = train(&mut model, &train_data, &val_data, &cfg.train)?;
    for l in &logs {
        println!(
            "epoch {}: train {:.6} val {:.6} lr {}",
            l.epoch, l.train_loss, l.val_loss, l.learning_rate
        );
    }

    let meta = CheckpointMeta {
        kind: cfg.model.kind.name().to_string(),
        config: cfg.clone(),
        vocab: cfg.gen.categories.clone(),
        predicates: PREDICATES.iter().map(|p| p.to_string()).collect(),
        seed,
        epoch: logs.len(),
        metrics: logs.last().map(|l| FinalLosses {
            train_loss: l.train_loss,
            val_loss: l.val_loss,
        }),
        uniform,
    };
    if let Some(parent) = out_ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    checkpoint::save(out_ckpt, &model, &meta)?;

    let mut csv = String::from("epoch,split,loss,lr\n");
    for l in &logs {
        csv.push_str(&format!("{},train,{},{}\n", l.epoch, l.train_loss, l.learning_rate));
        csv.push_str(&format!("{},val,{},{}\n", l.epoch, l.val_loss, l.learning_rate));
    }
    let log_path = log_csv_path(out_ckpt);
    fs::write(&log_path, csv).map_err(|e| Error::io(&log_path, e))?;
    println!("wrote {} and {}", out_ckpt.display(), log_path.display());
    Ok(())
}

pub fn log_csv_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".log.csv");
    PathBuf::from(s)
}

pub fn parse_mask(s: &str) -> Result<MaskMode> {
    match s {
        "none" => Ok(MaskMode::None),
        "subject" => Ok(MaskMode::Subject),
        "object" => Ok(MaskMode::Object),
        "both" => Ok(MaskMode::Both),
        other => Err(Error::Config(format!(
            "unknown mask mode {other:?} (expected none|subject|object|both)"
        ))),
    }
}

/// Evaluate a checkpoint on one split: the sigmoid threshold is selected
/// on the validation split, then per-query metrics plus the per-predicate
/// and per-entity reports are written to `out`.
pub fn cmd_eval(ckpt: &Path, data: &Path, split: &str, mask: MaskMode, out: &Path) -> Result<()> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let cfg = &meta.config;
    let (_, val_data) = split_data(data, "val", cfg, 0, meta.seed)?;
    let (scenes, eval_data) = split_data(data, split, cfg, 0, meta.seed)?;

    let tau = select_tau(&collect_maps(&model, &val_data, mask)?)?;
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    let report = evaluate(&model, &eval_data, &ids, tau, mask)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (file, text) in [
        ("metrics.csv", render_metrics_csv(&report)),
        ("report_by_predicate.csv", render_predicate_csv(&report)),
        ("report_by_entity.csv", render_entity_csv(&report)),
    ] {
        let p = out.join(file);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    println!(
        "split {split} ({} queries, tau {tau}): mean IoU s {:.4} o {:.4}, KL s {:.4} o {:.4}",
        report.overall.n,
        report.overall.s_iou,
        report.overall.o_iou,
        report.overall.s_kl,
        report.overall.o_kl
    );
    println!(
        "ambiguous subset ({} queries): mean IoU s {:.4} o {:.4}",
        report.ambiguous.n, report.ambiguous.s_iou, report.ambiguous.o_iou
    );
    Ok(())
}

/// Locate a scene id inside any split of a dataset directory.
fn find_scene(data: &Path, id: &str) -> Result<Scene> {
    for split in SPLITS {
        let dir = data.join(split);
        if !dir.join("scenes.ndjson").exists() {
            continue;
        }
        if let Some(s) = load_split(&dir)?.into_iter().find(|s| s.id == id) {
            return Ok(s);
        }
    }
    Err(Error::Invalid(format!("scene {id:?} not found in {}", data.display())))
}

/// Feature grid for one scene under a checkpoint's encoder config.
fn scene_mu(model: &Grounder<Real>, cfg: &FileConfig, scene: &Scene) -> Result<Tensor<Real>> {
    match cfg.encoder.mode {
        EncoderMode::Oracle => oracle_encode(scene, &cfg.gen.categories, cfg.encoder.grid),
        EncoderMode::Trainable => {
            let enc = model.encoder.as_ref().ok_or_else(|| {
                Error::Config("checkpoint config says trainable encoder but none was loaded".into())
            })?;
            let img = raster_to_tensor(&rasterize(scene)?);
            Ok(enc.forward(&img, cfg.encoder.grid)?.0)
        }
    }
}

/// Parse "S,P,O" with category names (an entity slot of `_` is masked).
fn parse_query(text: &str, vocab: &[String]) -> Result<Query> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "query must be \"subject,predicate,object\", got {text:?}"
        )));
    }
    let slot = |name: &str| -> Result<Option<usize>> {
        if name == "_" {
            return Ok(None);
        }
        vocab
            .iter()
            .position(|v| v == name)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("unknown category {name:?}")))
    };
    let predicate = predicate_id(parts[1])
        .ok_or_else(|| Error::Config(format!("unknown predicate {:?}", parts[1])))?;
    Ok(Query { subject: slot(parts[0])?, predicate, object: slot(parts[2])? })
}

#[derive(Serialize)]
struct MapStats {
    role: String,
    iteration: usize,
    file: String,
    raw_min: f64,
    raw_max: f64,
    argmax: [usize; 2],
}

fn argmax_cell(map: &Tensor<Real>) -> [usize; 2] {
    let l = map.shape()[1];
    let mut best = 0usize;
    for (i, v) in map.data().iter().enumerate() {
        if *v > map.data()[best] {
            best = i;
        }
    }
    [best / l, best % l]
}

fn dump_map(
    out: &Path,
    stem: &str,
    role: &str,
    iteration: usize,
    map: &Tensor<Real>,
    stats: &mut Vec<MapStats>,
) -> Result<()> {
    let file = format!("{stem}.pgm");
    let (min, max) = write_pgm_normalized(&out.join(&file), map)?;
    stats.push(MapStats {
        role: role.to_string(),
        iteration,
        file,
        raw_min: min,
        raw_max: max,
        argmax: argmax_cell(map),
    });
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Render the attention maps for one query on one scene: every rollout
/// iteration for the shifting model, the final maps for the baselines.
/// Heatmaps are min-max normalized PGMs; the raw ranges and argmax cells
/// land in `maps.json` next to them.
pub fn cmd_visualize(
    ckpt: &Path,
    data: &Path,
    scene_id: &str,
    query: &str,
    out: &Path,
) -> Result<()> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let scene = find_scene(data, scene_id)?;
    let q = parse_query(query, &meta.config.gen.categories)?;
    let mu = scene_mu(&model, &meta.config, &scene)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut stats = Vec::new();
    match &model.net {
        Net::Ssas(m) => {
            let ro = m.rollout(&mu, &q)?;
            for (i, step) in ro.steps.iter().enumerate() {
                dump_map(out, &format!("subject_iter{i}"), "subject", i, &step.subject.logits, &mut stats)?;
                dump_map(out, &format!("object_iter{i}"), "object", i, &step.object.logits, &mut stats)?;
            }
        }
        net => {
            let (s, o) = net.infer(&mu, &q)?;
            dump_map(out, "subject_iter0", "subject", 0, &s.logits, &mut stats)?;
            dump_map(out, "object_iter0", "object", 0, &o.logits, &mut stats)?;
        }
    }
    write_json(&out.join("maps.json"), &stats)?;
    println!("wrote {} maps to {}", stats.len(), out.display());
    Ok(())
}

/// Center of mass of a non-negative response map, relative to the grid
/// center: positive Δcol means the mass moved right.
pub fn center_of_mass_displacement(map: &Tensor<Real>) -> (f64, f64) {
    let l = map.shape()[1];
    let (mut wr, mut wc, mut total) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &v) in map.data().iter().enumerate() {
        let v = v as f64;
        wr += v * (i / l) as f64;
        wc += v * (i % l) as f64;
        total += v;
    }
    if total == 0.0 {
        return (0.0, 0.0);
    }
    let mid = (l as f64 - 1.0) / 2.0;
    (wr / total - mid, wc / total - mid)
}

#[derive(Serialize)]
struct KernelResponse {
    file: String,
    raw_min: f64,
    raw_max: f64,
    com_drow: f64,
    com_dcol: f64,
}

#[derive(Serialize)]
struct KernelSidecar {
    predicate: String,
    forward: KernelResponse,
    inverse: KernelResponse,
}

/// Probe a trained shift: place a unit of attention at the grid center,
/// push it through the predicate's forward and inverse modules, and write
/// both responses plus their center-of-mass displacements.
pub fn cmd_render_shift_kernel(ckpt: &Path, predicate: &str, out: &Path) -> Result<()> {
    let (model, _meta) = checkpoint::load(ckpt)?;
    let pid = predicate_id(predicate)
        .ok_or_else(|| Error::Config(format!("unknown predicate {predicate:?}")))?;
    let l = model.net.grid();
    let mut delta: Tensor<Real> = Tensor::zeros(&[l, l]);
    let mid = l / 2;
    delta.set(&[mid, mid], 1.0);

    let (fwd, inv) = match &model.net {
        Net::Ssas(m) => {
            let (f, _) = shift_forward(&delta, &m.fwd[pid])?;
            let (i, _) = shift_forward(&delta, &m.inv[pid])?;
            (f.activated, i.activated)
        }
        Net::SpatialShift(m) => (
            transport(&delta, &m.kernels[pid])?,
            transport(&delta, &rotate180(&m.kernels[pid]))?,
        ),
        other => {
            return Err(Error::Config(format!(
                "a {} checkpoint has no shift modules to render",
                other.kind()
            )))
        }
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut responses = Vec::new();
    for (name, map) in [("forward", &fwd), ("inverse", &inv)] {
        let file = format!("{predicate}_{name}.pgm");
        let (min, max) = write_pgm_normalized(&out.join(&file), map)?;
        let (dr, dc) = center_of_mass_displacement(map);
        responses.push(KernelResponse {
            file,
            raw_min: min,
            raw_max: max,
            com_drow: dr,
            com_dcol: dc,
        });
    }
    let inverse = responses.pop().expect("two responses pushed");
    let forward = responses.pop().expect("two responses pushed");
    println!(
        "{predicate}: forward com ({:.3}, {:.3}), inverse com ({:.3}, {:.3})",
        forward.com_drow, forward.com_dcol, inverse.com_drow, inverse.com_dcol
    );
    write_json(
        &out.join(format!("{predicate}_shift.json")),
        &KernelSidecar { predicate: predicate.to_string(), forward, inverse },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SaccadeNode {
    node: usize,
    category: String,
    file: String,
    raw_min: f64,
    raw_max: f64,
    argmax: [usize; 2],
}

/// Walk a scene-graph path over one scene with a trained shifting model,
/// writing each visited node's heatmap and argmax cell.
pub fn cmd_saccade(
    ckpt: &Path,
    data: &Path,
    scene_id: &str,
    graph_path: &Path,
    out: &Path,
) -> Result<()> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let Net::Ssas(m) = &model.net else {
        return Err(Error::Config(format!(
            "scene-graph traversal needs a ssas checkpoint, got {}",
            model.net.kind()
        )));
    };
    let text = fs::read_to_string(graph_path).map_err(|e| Error::io(graph_path, e))?;
    let graph: SceneGraph =
        serde_json::from_str(&text).map_err(|e| Error::format(graph_path, e.to_string()))?;
    let scene = find_scene(data, scene_id)?;
    let mu = scene_mu(&model, &meta.config, &scene)?;

    let maps = traverse(m, &mu, &graph)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut nodes = Vec::new();
    for nm in &maps {
        let file = format!("node{}_{}.pgm", nm.node, nm.category.replace(' ', "_"));
        let (min, max) = write_pgm_normalized(&out.join(&file), &nm.map.logits)?;
        nodes.push(SaccadeNode {
            node: nm.node,
            category: nm.category.clone(),
            file,
            raw_min: min,
            raw_max: max,
            argmax: argmax_cell(&nm.map.logits),
        });
    }
    write_json(&out.join("saccade.json"), &nodes)?;
    println!("visited {} nodes on scene {scene_id}", nodes.len());
    Ok(())
}
