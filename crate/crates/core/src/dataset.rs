//! Dataset assembly and on-disk layout.
//!
//! A dataset directory holds one subdirectory per split (train/val/test),
//! each with a `scenes.ndjson` (one JSON scene per line) and an `images/`
//! folder of binary PPM rasters named by scene id. Relative spatial
//! statistics for the non-learned shift baseline are estimated here too.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::{derive_seed, STREAM_SCENE};
use crate::scalar::Scalar;
use crate::scene::{
    center_cell, generate_scene, rasterize, GenConfig, Scene, PREDICATES,
};
use crate::tensor::Tensor;

/// Index offsets keeping per-scene seed streams disjoint across splits.
fn split_offset(split: &str) -> u64 {
    match split {
        "train" => 0,
        "val" => 1 << 40,
        "test" => 2 << 40,
        other => 3 << 40 | (other.len() as u64) << 20,
    }
}

/// Generate `count` scenes for a named split. A scene whose placement
/// rejection budget runs out is retried on a displaced seed stream; the
/// scene records the seed that actually produced it.
pub fn generate_split(
    cfg: &GenConfig,
    master_seed: u64,
    split: &str,
    count: usize,
) -> Result<Vec<Scene>> {
    let base = split_offset(split);
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let mut scene = None;
        for retry in 0..16u64 {
            let seed = derive_seed(master_seed, STREAM_SCENE, base + i as u64 + (retry << 32));
            match generate_scene(cfg, seed, format!("{split}_{i:06}")) {
                Ok(s) => {
                    scene = Some(s);
                    break;
                }
                Err(Error::Placement { .. }) if retry + 1 < 16 => continue,
                Err(e) => return Err(e),
            }
        }
        scenes.push(scene.expect("retry loop either returns or fills the slot"));
    }
    Ok(scenes)
}

/// Write a split directory: scenes as NDJSON plus one PPM raster per scene.
pub fn save_split(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let ndjson_path = dir.join("scenes.ndjson");
    let mut out = Vec::new();
    for scene in scenes {
        let line = serde_json::to_string(scene)
            .map_err(|e| Error::format(&ndjson_path, e.to_string()))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(&ndjson_path).map_err(|e| Error::io(&ndjson_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&ndjson_path, e))?;
    for scene in scenes {
        let raster = rasterize(scene)?;
        let img_path = dir.join("images").join(format!("{}.ppm", scene.id));
        pnm::write_ppm(&img_path, &raster)?;
    }
    Ok(())
}

/// Read a split's scenes back from `scenes.ndjson`.
pub fn load_split(dir: &Path) -> Result<Vec<Scene>> {
    let path = dir.join("scenes.ndjson");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let reader = BufReader::new(f);
    let mut scenes = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", lineno + 1)))?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Load the raster belonging to a scene id inside a split directory.
pub fn load_raster(dir: &Path, scene_id: &str) -> Result<crate::scene::Raster> {
    pnm::read_ppm(&dir.join("images").join(format!("{scene_id}.ppm")))
}

/// Aggregate statistics printed after generation and asserted by tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    pub scenes: usize,
    pub entities: usize,
    pub relationships: usize,
    pub ambiguous_scenes: usize,
    /// Relationship counts in `PREDICATES` order.
    pub per_predicate: [usize; 4],
}

impl Census {
    pub fn ambiguous_fraction(&self) -> f64 {
        if self.scenes == 0 {
            0.0
        } else {
            self.ambiguous_scenes as f64 / self.scenes as f64
        }
    }
}

pub fn census(scenes: &[Scene]) -> Census {
    let mut c = Census {
        scenes: scenes.len(),
        entities: 0,
        relationships: 0,
        ambiguous_scenes: 0,
        per_predicate: [0; 4],
    };
    for s in scenes {
        c.entities += s.entities.len();
        c.relationships += s.relationships.len();
        if s.is_ambiguous() {
            c.ambiguous_scenes += 1;
        }
        for r in &s.relationships {
            if let Some(pid) = crate::scene::predicate_id(&r.p) {
                c.per_predicate[pid] += 1;
            }
        }
    }
    c
}

/// Histogram of object-minus-subject grid-center displacements, one
/// (2L-1) x (2L-1) kernel per predicate, each normalized to sum 1 and
/// centered (zero displacement maps to the middle entry). A predicate with
/// no instances falls back to a uniform kernel; the returned flags mark
/// which predicates did.
pub fn estimate_spatial_shift_kernels<S: Scalar>(
    scenes: &[Scene],
    l: usize,
) -> (Vec<Tensor<S>>, Vec<bool>) {
    let side = 2 * l - 1;
    let mut counts = vec![vec![0u64; side * side]; PREDICATES.len()];
    let mut totals = vec![0u64; PREDICATES.len()];
    for scene in scenes {
        for rel in &scene.relationships {
            let Some(pid) = crate::scene::predicate_id(&rel.p) else {
                continue;
            };
            let sc = center_cell(&scene.entities[rel.s].bbox, scene.width, l);
            let oc = center_cell(&scene.entities[rel.o].bbox, scene.width, l);
            let dr = oc.0 as isize - sc.0 as isize + (l as isize - 1);
            let dc = oc.1 as isize - sc.1 as isize + (l as isize - 1);
            counts[pid][dr as usize * side + dc as usize] += 1;
            totals[pid] += 1;
        }
    }
    let mut kernels = Vec::with_capacity(PREDICATES.len());
    let mut uniform = Vec::with_capacity(PREDICATES.len());
    for pid in 0..PREDICATES.len() {
        let data: Vec<S> = if totals[pid] == 0 {
            uniform.push(true);
            vec![S::from_f64(1.0 / (side * side) as f64); side * side]
        } else {
            uniform.push(false);
            counts[pid]
                .iter()
                .map(|&c| S::from_f64(c as f64 / totals[pid] as f64))
                .collect()
        };
        kernels.push(Tensor::from_vec(&[side, side], data).unwrap());
    }
    (kernels, uniform)
}

/// Rotate a centered kernel by 180 degrees: the inverse displacement map.
pub fn rotate180<S: Scalar>(k: &Tensor<S>) -> Tensor<S> {
    let side = k.shape()[0];
    let mut out = Tensor::zeros(k.shape());
    for r in 0..side {
        for c in 0..side {
            out.data_mut()[r * side + c] = k.data()[(side - 1 - r) * side + (side - 1 - c)];
        }
    }
    out
}

/// Transport attention mass through a displacement histogram:
/// out(r, c) = sum_d K(d) * x(r - d_row, c - d_col), displacements read
/// from the kernel's centered layout. A delta kernel at (0, +3) therefore
/// moves every unit of mass exactly 3 columns right.
pub fn transport<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>) -> Result<Tensor<S>> {
    let l = x.shape()[0];
    if x.rank() != 2 || x.shape()[1] != l {
        return Err(Error::Dimension {
            op: "transport",
            axis: "attention map (square rank-2 required)",
            expected: l,
            got: x.shape()[1],
        });
    }
    let side = 2 * l - 1;
    if kernel.shape() != [side, side] {
        return Err(Error::Dimension {
            op: "transport",
            axis: "kernel side (2L-1 required)",
            expected: side,
            got: kernel.shape()[0],
        });
    }
    let xs = x.data();
    let ks = kernel.data();
    let mut out = Tensor::zeros(&[l, l]);
    for r in 0..l {
        for c in 0..l {
            let mut acc = S::accum_zero();
            // out(r,c) accumulates x(r-dr, c-dc) * K(dr, dc); iterate over
            // source cells instead so bounds are direct.
            for sr in 0..l {
                for sc in 0..l {
                    let dr = r as isize - sr as isize + (l as isize - 1);
                    let dc = c as isize - sc as isize + (l as isize - 1);
                    acc += xs[sr * l + sc].accum() * ks[dr as usize * side + dc as usize].accum();
                }
            }
            out.data_mut()[r * l + c] = S::from_accum(acc);
        }
    }
    Ok(out)
}
