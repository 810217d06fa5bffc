//! Synthetic 2-D scene benchmark: colored shapes on a square canvas with
//! exhaustively derived spatial relationships.
//!
//! Coordinates follow raster convention: x grows right, y grows down, so
//! "above" means smaller y. A relationship triple (s, p, o) reads
//! "entity s is p of entity o": (a, "left", b) says a sits left of b.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The fixed spatial predicate vocabulary, in id order.
pub const PREDICATES: [&str; 4] = ["left", "right", "above", "below"];

pub fn predicate_id(name: &str) -> Option<usize> {
    PREDICATES.iter().position(|&p| p == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub category: String,
    /// [x0, y0, x1, y1] in integer pixels, half-open on the right/bottom.
    pub bbox: [u32; 4],
}

impl Entity {
    pub fn center(&self) -> (f64, f64) {
        (
            (self.bbox[0] + self.bbox[2]) as f64 / 2.0,
            (self.bbox[1] + self.bbox[3]) as f64 / 2.0,
        )
    }

    pub fn area(&self) -> u64 {
        let w = (self.bbox[2] - self.bbox[0]) as u64;
        let h = (self.bbox[3] - self.bbox[1]) as u64;
        w * h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relationship {
    pub s: usize,
    pub p: String,
    pub o: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub relationships: Vec<Relationship>,
}

impl Scene {
    /// True when some category appears on two or more entities, i.e. a
    /// category name alone cannot localize.
    pub fn is_ambiguous(&self) -> bool {
        for (i, a) in self.entities.iter().enumerate() {
            for b in &self.entities[i + 1..] {
                if a.category == b.category {
                    return true;
                }
            }
        }
        false
    }

    /// Indices of entities carrying the given category name.
    pub fn entities_of(&self, category: &str) -> Vec<usize> {
        self.entities
            .iter()
            .enumerate()
            .filter(|(_, e)| e.category == category)
            .map(|(i, _)| i)
            .collect()
    }

    /// Map each entity's category to its index in `vocab`.
    pub fn entity_category_ids(&self, vocab: &[String]) -> Result<Vec<usize>> {
        self.entities
            .iter()
            .map(|e| {
                vocab.iter().position(|v| v == &e.category).ok_or_else(|| {
                    Error::Invalid(format!(
                        "scene {}: category '{}' is not in the vocabulary",
                        self.id, e.category
                    ))
                })
            })
            .collect()
    }
}

/// Scene generator configuration. `width` is the square canvas size in
/// pixels; entity boxes are squares with side in [size_min, size_max],
/// kept `border` pixels clear of the canvas edge so a feature extractor's
/// center crop loses nothing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub width: u32,
    pub entities_min: usize,
    pub entities_max: usize,
    pub size_min: u32,
    pub size_max: u32,
    pub border: u32,
    /// Minimum center separation in pixels before a spatial predicate holds.
    pub margin: u32,
    /// Maximum tolerated pairwise box overlap, as a fraction of the
    /// smaller box's area.
    pub max_overlap: f64,
    /// Probability that a scene is forced to contain a duplicated category.
    pub ambiguous_fraction: f64,
    pub categories: Vec<String>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
}

pub fn default_categories() -> Vec<String> {
    let mut cats = Vec::new();
    for color in ["red", "green", "blue"] {
        for shape in ["circle", "square", "triangle"] {
            cats.push(format!("{color} {shape}"));
        }
    }
    cats
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            width: 64,
            entities_min: 2,
            entities_max: 6,
            size_min: 8,
            size_max: 20,
            border: 8,
            margin: 4,
            max_overlap: 0.3,
            ambiguous_fraction: 0.6,
            categories: default_categories(),
            train_scenes: 2000,
            val_scenes: 300,
            test_scenes: 500,
        }
    }
}

const COLOR_PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [224, 58, 50]),
    ("green", [64, 196, 88]),
    ("blue", [66, 108, 228]),
    ("yellow", [230, 208, 70]),
    ("magenta", [198, 76, 198]),
    ("cyan", [76, 198, 208]),
    ("orange", [235, 150, 58]),
    ("purple", [142, 80, 220]),
];

const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

fn parse_category(category: &str) -> Result<([u8; 3], &str)> {
    let mut words = category.split_whitespace();
    let (color, shape) = match (words.next(), words.next(), words.next()) {
        (Some(c), Some(s), None) => (c, s),
        _ => {
            return Err(Error::Config(format!(
                "category '{category}' must be '<color> <shape>'"
            )))
        }
    };
    let rgb = COLOR_PALETTE
        .iter()
        .find(|(name, _)| *name == color)
        .map(|(_, rgb)| *rgb)
        .ok_or_else(|| Error::Config(format!("unknown color '{color}' in '{category}'")))?;
    if !SHAPES.contains(&shape) {
        return Err(Error::Config(format!("unknown shape '{shape}' in '{category}'")));
    }
    Ok((rgb, shape))
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities_min == 0 || self.entities_min > self.entities_max {
            return Err(Error::Config(format!(
                "entity count range [{}, {}] is empty or zero",
                self.entities_min, self.entities_max
            )));
        }
        if self.size_min < 3 {
            // 3x3 is the smallest square meeting the 9-pixel area floor.
            return Err(Error::Config(format!(
                "size_min {} gives entities below the 9-pixel area floor",
                self.size_min
            )));
        }
        if self.size_min > self.size_max {
            return Err(Error::Config(format!(
                "size range [{}, {}] is empty",
                self.size_min, self.size_max
            )));
        }
        if self.size_max + 2 * self.border + 2 > self.width {
            return Err(Error::Config(format!(
                "width {} cannot hold a {}px entity inside a {}px border",
                self.width, self.size_max, self.border
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config(format!(
                "ambiguous_fraction {} is outside [0, 1]",
                self.ambiguous_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return Err(Error::Config(format!(
                "max_overlap {} is outside [0, 1)",
                self.max_overlap
            )));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("category vocabulary is empty".into()));
        }
        if self.categories.len() < self.entities_max {
            return Err(Error::Config(format!(
                "need at least {} categories to sample distinct ones for {} entities",
                self.entities_max, self.entities_max
            )));
        }
        for (i, a) in self.categories.iter().enumerate() {
            parse_category(a)?;
            if self.categories[..i].contains(a) {
                return Err(Error::Config(format!("duplicate category '{a}'")));
            }
        }
        Ok(())
    }
}

fn overlap_fraction(a: &[u32; 4], b: &[u32; 4]) -> f64 {
    let ix = (a[2].min(b[2]) as i64 - a[0].max(b[0]) as i64).max(0);
    let iy = (a[3].min(b[3]) as i64 - a[1].max(b[1]) as i64).max(0);
    let inter = (ix * iy) as f64;
    let area_a = ((a[2] - a[0]) * (a[3] - a[1])) as f64;
    let area_b = ((b[2] - b[0]) * (b[3] - b[1])) as f64;
    inter / area_a.min(area_b)
}

const MAX_PLACEMENT_ATTEMPTS: u32 = 1000;

/// Generate one scene. Deterministic in (config, seed): the generator
/// draws, in order, the entity count, then box placements (with rejection
/// on overlap), then distinct categories, then the ambiguity coin and the
/// forced duplicate.
pub fn generate_scene(cfg: &GenConfig, seed: u64, id: String) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let n = rng.gen_range(cfg.entities_min..=cfg.entities_max);

    let mut boxes: Vec<[u32; 4]> = Vec::with_capacity(n);
    let mut attempts = 0u32;
    while boxes.len() < n {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Placement { attempts: MAX_PLACEMENT_ATTEMPTS, seed });
        }
        let side = rng.gen_range(cfg.size_min..=cfg.size_max);
        // Strictly inside: at least one pixel clear of every canvas edge
        // even when border is 0.
        let lo = cfg.border.max(1);
        let hi = cfg.width - cfg.border.max(1) - side;
        let x0 = rng.gen_range(lo..=hi);
        let y0 = rng.gen_range(lo..=hi);
        let cand = [x0, y0, x0 + side, y0 + side];
        if boxes.iter().all(|b| overlap_fraction(b, &cand) <= cfg.max_overlap) {
            boxes.push(cand);
        }
    }

    // Distinct base categories via a partial Fisher-Yates draw...
    let mut idxs: Vec<usize> = (0..cfg.categories.len()).collect();
    for i in 0..n {
        let j = rng.gen_range(i..idxs.len());
        idxs.swap(i, j);
    }
    let mut cats: Vec<usize> = idxs[..n].to_vec();
    // ...then ambiguity is *forced* by duplicating one category, so the
    // measured ambiguous-scene fraction tracks the configured target and
    // ambiguous_fraction = 0 yields all-unique scenes.
    if n >= 2 && rng.gen_bool(cfg.ambiguous_fraction) {
        let dup_to = rng.gen_range(0..n);
        let mut dup_from = rng.gen_range(0..n - 1);
        if dup_from >= dup_to {
            dup_from += 1;
        }
        cats[dup_to] = cats[dup_from];
    }

    let entities: Vec<Entity> = boxes
        .into_iter()
        .zip(&cats)
        .map(|(bbox, &c)| Entity { category: cfg.categories[c].clone(), bbox })
        .collect();
    let relationships = derive_relationships(&entities, cfg.margin);

    Ok(Scene {
        id,
        width: cfg.width,
        height: cfg.width,
        seed,
        entities,
        relationships,
    })
}

/// Enumerate every ordered entity pair and emit the spatial predicates it
/// satisfies. For pair (a, b), in fixed predicate order:
///   left:  cx(a) + margin < cx(b)
///   right: cx(a) > cx(b) + margin
///   above: cy(a) + margin < cy(b)   (y grows downward)
///   below: cy(a) > cy(b) + margin
pub fn derive_relationships(entities: &[Entity], margin: u32) -> Vec<Relationship> {
    let m = margin as f64;
    let mut out = Vec::new();
    for (a, ea) in entities.iter().enumerate() {
        for (b, eb) in entities.iter().enumerate() {
            if a == b {
                continue;
            }
            let (ax, ay) = ea.center();
            let (bx, by) = eb.center();
            if ax + m < bx {
                out.push(Relationship { s: a, p: "left".into(), o: b });
            }
            if ax > bx + m {
                out.push(Relationship { s: a, p: "right".into(), o: b });
            }
            if ay + m < by {
                out.push(Relationship { s: a, p: "above".into(), o: b });
            }
            if ay > by + m {
                out.push(Relationship { s: a, p: "below".into(), o: b });
            }
        }
    }
    out
}

/// Binary L x L target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundMask {
    pub l: usize,
    pub cells: Vec<bool>,
}

impl GroundMask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.l + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self
            .cells
            .iter()
            .map(|&b| if b { S::one() } else { S::zero() })
            .collect();
        Tensor::from_vec(&[self.l, self.l], data).unwrap()
    }
}

/// Exact area of the intersection of a pixel box with a (possibly
/// fractional) grid-cell rectangle.
fn rect_intersection(ax0: f64, ay0: f64, ax1: f64, ay1: f64, bx0: f64, by0: f64, bx1: f64, by1: f64) -> f64 {
    let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    w * h
}

/// Project a pixel box onto the L x L grid: a cell is set when at least
/// half of its area lies inside the box. A box too small to claim any cell
/// sets the cell under its center, so masks are never empty.
///
/// Cells are continuous rectangles of side width/L; the canvas width does
/// not need to be divisible by L.
pub fn box_to_mask(bbox: &[u32; 4], width: u32, l: usize) -> GroundMask {
    let cell = width as f64 / l as f64;
    let cell_area = cell * cell;
    let (bx0, by0, bx1, by1) =
        (bbox[0] as f64, bbox[1] as f64, bbox[2] as f64, bbox[3] as f64);
    let mut cells = vec![false; l * l];
    for r in 0..l {
        for c in 0..l {
            let (cx0, cy0) = (c as f64 * cell, r as f64 * cell);
            let inter =
                rect_intersection(bx0, by0, bx1, by1, cx0, cy0, cx0 + cell, cy0 + cell);
            // Exact half-coverage counts as inside; the epsilon keeps that
            // tie stable when W/L is fractional and the area arithmetic
            // rounds either way.
            if inter + 1e-9 >= 0.5 * cell_area {
                cells[r * l + c] = true;
            }
        }
    }
    if !cells.iter().any(|&b| b) {
        let cx = (bbox[0] + bbox[2]) as f64 / 2.0;
        let cy = (bbox[1] + bbox[3]) as f64 / 2.0;
        let c = ((cx / cell) as usize).min(l - 1);
        let r = ((cy / cell) as usize).min(l - 1);
        cells[r * l + c] = true;
    }
    GroundMask { l, cells }
}

/// Grid cell under an entity's box center.
pub fn center_cell(bbox: &[u32; 4], width: u32, l: usize) -> (usize, usize) {
    let cell = width as f64 / l as f64;
    let cx = (bbox[0] + bbox[2]) as f64 / 2.0;
    let cy = (bbox[1] + bbox[3]) as f64 / 2.0;
    let c = ((cx / cell) as usize).min(l - 1);
    let r = ((cy / cell) as usize).min(l - 1);
    (r, c)
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let off = ((y * self.width + x) * 3) as usize;
        [self.rgb[off], self.rgb[off + 1], self.rgb[off + 2]]
    }
}

const BACKGROUND: [u8; 3] = [24, 24, 24];

/// Paint the scene: shapes are filled opaquely in their category color,
/// in entity index order (later entities over earlier ones).
pub fn rasterize(scene: &Scene) -> Result<Raster> {
    let (w, h) = (scene.width, scene.height);
    let mut rgb = Vec::with_capacity((w * h * 3) as usize);
    for _ in 0..w * h {
        rgb.extend_from_slice(&BACKGROUND);
    }
    let mut raster = Raster { width: w, height: h, rgb };
    for e in &scene.entities {
        let (color, shape) = parse_category(&e.category)?;
        paint(&mut raster, &e.bbox, color, shape);
    }
    Ok(raster)
}

fn paint(r: &mut Raster, bbox: &[u32; 4], color: [u8; 3], shape: &str) {
    let [x0, y0, x1, y1] = *bbox;
    let cx = (x0 + x1) as f64 / 2.0;
    let cy = (y0 + y1) as f64 / 2.0;
    let rx = (x1 - x0) as f64 / 2.0;
    let ry = (y1 - y0) as f64 / 2.0;
    for py in y0..y1 {
        for px in x0..x1 {
            let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
            let inside = match shape {
                "square" => true,
                "circle" => {
                    let nx = (fx - cx) / rx;
                    let ny = (fy - cy) / ry;
                    nx * nx + ny * ny <= 1.0
                }
                "triangle" => {
                    // Apex top-center, base along the bottom edge.
                    point_in_triangle(
                        (fx, fy),
                        (cx, y0 as f64),
                        (x1 as f64, y1 as f64),
                        (x0 as f64, y1 as f64),
                    )
                }
                _ => unreachable!("shape validated by parse_category"),
            };
            if inside {
                let off = ((py * r.width + px) * 3) as usize;
                r.rgb[off..off + 3].copy_from_slice(&color);
            }
        }
    }
}

fn point_in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let sign = |p1: (f64, f64), p2: (f64, f64), p3: (f64, f64)| {
        (p1.0 - p3.0) * (p2.1 - p3.1) - (p2.0 - p3.0) * (p1.1 - p3.1)
    };
    let d1 = sign(p, a, b);
    let d2 = sign(p, b, c);
    let d3 = sign(p, c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        let a = generate_scene(&cfg, 99, "s".into()).unwrap();
        let b = generate_scene(&cfg, 99, "s".into()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 100, "s".into()).unwrap();
        assert_ne!(a.entities, c.entities);
    }

    #[test]
    fn ambiguity_is_forced_at_fraction_one() {
        let cfg = GenConfig {
            ambiguous_fraction: 1.0,
            entities_min: 2,
            entities_max: 2,
            ..GenConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed, format!("s{seed}")).unwrap();
            assert_eq!(s.entities[0].category, s.entities[1].category);
            assert!(s.is_ambiguous());
        }
    }

    #[test]
    fn zero_fraction_keeps_categories_unique() {
        let cfg = GenConfig { ambiguous_fraction: 0.0, ..GenConfig::default() };
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed, format!("s{seed}")).unwrap();
            assert!(!s.is_ambiguous(), "seed {seed} produced duplicates");
        }
    }

    #[test]
    fn entities_stay_inside_bounds_with_valid_area() {
        let cfg = GenConfig::default();
        for seed in 0..30 {
            let s = generate_scene(&cfg, seed, format!("s{seed}")).unwrap();
            for e in &s.entities {
                assert!(e.bbox[0] >= 1 && e.bbox[1] >= 1);
                assert!(e.bbox[2] < cfg.width && e.bbox[3] < cfg.width);
                assert!(e.area() >= 9);
            }
        }
    }

    #[test]
    fn two_entity_row_yields_left_and_its_dual() {
        let entities = vec![
            Entity { category: "red circle".into(), bbox: [4, 28, 16, 40] },
            Entity { category: "blue square".into(), bbox: [44, 28, 56, 40] },
        ];
        let rels = derive_relationships(&entities, 4);
        assert!(rels.contains(&Relationship { s: 0, p: "left".into(), o: 1 }));
        assert!(rels.contains(&Relationship { s: 1, p: "right".into(), o: 0 }));
        assert_eq!(rels.len(), 2);
    }

    #[test]
    fn coincident_centers_yield_nothing() {
        let entities = vec![
            Entity { category: "red circle".into(), bbox: [10, 10, 20, 20] },
            Entity { category: "blue square".into(), bbox: [12, 12, 18, 18] },
        ];
        assert!(derive_relationships(&entities, 4).is_empty());
    }

    #[test]
    fn margin_boundary_is_strict() {
        // Centers exactly margin apart must NOT relate; one pixel more must.
        let at = |x0: u32| Entity { category: "red circle".into(), bbox: [x0, 10, x0 + 10, 20] };
        let exactly = vec![at(10), at(14)]; // centers 15 and 19, margin 4
        assert!(derive_relationships(&exactly, 4).is_empty());
        let beyond = vec![at(10), at(15)]; // centers 15 and 20
        let rels = derive_relationships(&beyond, 4);
        assert_eq!(rels.len(), 2);
    }

    /// Independent recheck: every emitted triple satisfies its inequality
    /// and every satisfying ordered pair is emitted.
    fn brute_force_relationships(entities: &[Entity], margin: u32) -> Vec<Relationship> {
        let m = margin as f64;
        let mut out = Vec::new();
        for a in 0..entities.len() {
            for b in 0..entities.len() {
                if a == b {
                    continue;
                }
                let ca = entities[a].center();
                let cb = entities[b].center();
                for p in PREDICATES {
                    let holds = match p {
                        "left" => ca.0 + m < cb.0,
                        "right" => ca.0 - m > cb.0,
                        "above" => ca.1 + m < cb.1,
                        "below" => ca.1 - m > cb.1,
                        _ => unreachable!(),
                    };
                    if holds {
                        out.push(Relationship { s: a, p: p.into(), o: b });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn derived_relationships_match_brute_force_on_100_scenes() {
        let cfg = GenConfig::default();
        for seed in 0..100 {
            let s = generate_scene(&cfg, seed, format!("s{seed}")).unwrap();
            let mut got = s.relationships.clone();
            let mut want = brute_force_relationships(&s.entities, cfg.margin);
            let key = |r: &Relationship| (r.s, r.o, r.p.clone());
            got.sort_by_key(key);
            want.sort_by_key(key);
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn census_of_ambiguous_fraction_tracks_target() {
        let cfg = GenConfig::default();
        let mut ambiguous = 0usize;
        let total = 10_000;
        for seed in 0..total {
            let s = generate_scene(&cfg, seed as u64, format!("s{seed}")).unwrap();
            if s.is_ambiguous() {
                ambiguous += 1;
            }
        }
        let measured = ambiguous as f64 / total as f64;
        assert!(
            (measured - 0.6).abs() <= 0.03,
            "measured ambiguous fraction {measured}"
        );
    }

    #[test]
    fn full_canvas_box_masks_every_cell() {
        let m = box_to_mask(&[0, 0, 56, 56], 56, 14);
        assert_eq!(m.count(), 14 * 14);
    }

    #[test]
    fn single_cell_box_masks_exactly_that_cell() {
        // W = 56, L = 14: integer 4px cells; the box [8,12)x[4,8) is cell
        // (row 1, col 2).
        let m = box_to_mask(&[8, 4, 12, 8], 56, 14);
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 2));
    }

    #[test]
    fn sub_threshold_box_falls_back_to_center_cell() {
        // A 1x1 box covers 1/16 of any 4px cell: below the half-area rule,
        // so the center-cell fallback fires.
        let m = box_to_mask(&[9, 5, 10, 6], 56, 14);
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 2));
    }

    /// Pixel-decomposition oracle: sum per-pixel areas inside the cell for
    /// pixels lying inside the (integer-aligned) box.
    fn pixel_oracle_mask(bbox: &[u32; 4], width: u32, l: usize) -> Vec<bool> {
        let cell = width as f64 / l as f64;
        let mut cells = vec![false; l * l];
        let mut any = false;
        for r in 0..l {
            for c in 0..l {
                let (cx0, cy0) = (c as f64 * cell, r as f64 * cell);
                let mut covered = 0.0f64;
                for py in bbox[1]..bbox[3] {
                    for px in bbox[0]..bbox[2] {
                        covered += rect_intersection(
                            px as f64,
                            py as f64,
                            px as f64 + 1.0,
                            py as f64 + 1.0,
                            cx0,
                            cy0,
                            cx0 + cell,
                            cy0 + cell,
                        );
                    }
                }
                if covered >= 0.5 * cell * cell - 1e-9 && covered > 0.0 {
                    // Tolerance only breaks exact ties introduced by
                    // summing many pixel slivers; random boxes below avoid
                    // exact half-coverage.
                    cells[r * l + c] = true;
                    any = true;
                }
            }
        }
        if !any {
            let cx = (bbox[0] + bbox[2]) as f64 / 2.0;
            let cy = (bbox[1] + bbox[3]) as f64 / 2.0;
            let c = ((cx / cell) as usize).min(l - 1);
            let rr = ((cy / cell) as usize).min(l - 1);
            cells[rr * l + c] = true;
        }
        cells
    }

    #[test]
    fn masks_match_pixel_decomposition_oracle_on_1000_random_boxes() {
        let mut rng = rng_from(4242);
        for i in 0..1000 {
            let w: u32 = 64;
            let side = rng.gen_range(3..=24u32);
            let x0 = rng.gen_range(1..w - side);
            let y0 = rng.gen_range(1..w - side);
            let bbox = [x0, y0, x0 + side, y0 + side];
            let got = box_to_mask(&bbox, w, 14);
            let want = pixel_oracle_mask(&bbox, w, 14);
            assert_eq!(got.cells, want, "case {i}: bbox {bbox:?}");
        }
    }

    #[test]
    fn masks_are_never_empty() {
        let mut rng = rng_from(7);
        for _ in 0..200 {
            let side = rng.gen_range(1..=30u32);
            let x0 = rng.gen_range(0..64 - side);
            let y0 = rng.gen_range(0..64 - side);
            let m = box_to_mask(&[x0, y0, x0 + side, y0 + side], 64, 14);
            assert!(m.count() >= 1);
        }
    }

    #[test]
    fn raster_is_deterministic_and_paints_entity_color() {
        let scene = Scene {
            id: "t".into(),
            width: 64,
            height: 64,
            seed: 0,
            entities: vec![Entity { category: "red square".into(), bbox: [10, 10, 20, 20] }],
            relationships: vec![],
        };
        let a = rasterize(&scene).unwrap();
        let b = rasterize(&scene).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixel(15, 15), [224, 58, 50]);
        assert_eq!(a.pixel(5, 5), BACKGROUND);
    }

    #[test]
    fn later_entities_paint_over_earlier_ones() {
        let scene = Scene {
            id: "t".into(),
            width: 64,
            height: 64,
            seed: 0,
            entities: vec![
                Entity { category: "red square".into(), bbox: [10, 10, 24, 24] },
                Entity { category: "blue square".into(), bbox: [14, 14, 20, 20] },
            ],
            relationships: vec![],
        };
        let r = rasterize(&scene).unwrap();
        assert_eq!(r.pixel(16, 16), [66, 108, 228]);
        assert_eq!(r.pixel(11, 11), [224, 58, 50]);
    }

    #[test]
    fn config_guard_rejects_bad_vocabularies() {
        let mut cfg = GenConfig::default();
        cfg.categories[0] = "mauve blob".into();
        assert!(cfg.validate().is_err());
        let cfg2 = GenConfig { categories: vec!["red circle".into(); 9], ..GenConfig::default() };
        assert!(cfg2.validate().is_err());
        let cfg3 = GenConfig { size_min: 2, ..GenConfig::default() };
        assert!(cfg3.validate().is_err());
    }
}
