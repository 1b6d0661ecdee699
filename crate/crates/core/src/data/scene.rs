//! Procedural tabletop scenes: flat-shaded primitives on a dark table, seen
//! from above by a depth camera.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::language::{make_instruction, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{GraspRect, SegMask};
use crate::tensor::Tensor;

pub const TABLE_GRAY: f32 = 0.15;
const ATTEMPTS: usize = 64;
const PLACEMENT_TRIES: usize = 40;
/// Minimum pixel gap between objects in isolated scenes.
const ISOLATION_GAP: f64 = 1.5;
/// Added to the object extent across the closing direction, before scaling.
const GRASP_MARGIN: f64 = 3.0;
const GRASP_ASPECT: f64 = 0.5;
/// Boxes closer to square than this also get a grasp across the long side.
const SQUARE_ASPECT: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Isolated,
    Cluttered,
}

impl Difficulty {
    pub fn code(self) -> u32 {
        match self {
            Difficulty::Isolated => 0,
            Difficulty::Cluttered => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Difficulty::Isolated),
            1 => Some(Difficulty::Cluttered),
            _ => None,
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Isolated => "isolated",
            Difficulty::Cluttered => "cluttered",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isolated" => Ok(Difficulty::Isolated),
            "cluttered" => Ok(Difficulty::Cluttered),
            _ => Err(Error::Config(format!("unknown difficulty '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    Disk,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Box, Shape::Disk, Shape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Box => "box",
            Shape::Disk => "disk",
            Shape::Bar => "bar",
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Shape::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    White,
    Pink,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::White,
        Color::Pink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::White => "white",
            Color::Pink => "pink",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.10, 0.10],
            Color::Green => [0.10, 0.80, 0.20],
            Color::Blue => [0.15, 0.30, 0.95],
            Color::Yellow => [0.95, 0.90, 0.10],
            Color::Purple => [0.60, 0.20, 0.85],
            Color::Orange => [1.00, 0.55, 0.05],
            Color::White => [0.95, 0.95, 0.95],
            Color::Pink => [1.00, 0.45, 0.70],
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Color::ALL.get(code as usize).copied()
    }
}

/// One primitive. `length` runs along `angle` (degrees), `breadth` across it;
/// disks have `length == breadth ==` diameter. `z` is the height above the
/// table in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub shape: Shape,
    pub color: Color,
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub breadth: f64,
    pub angle: f64,
    pub z: f64,
}

impl ObjectRecord {
    /// Whether the point lies inside the footprint grown by `inflate` pixels.
    pub fn contains(&self, x: f64, y: f64, inflate: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            Shape::Disk => dx * dx + dy * dy <= (self.length / 2.0 + inflate).powi(2),
            Shape::Box | Shape::Bar => {
                let (s, c) = self.angle.to_radians().sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= self.length / 2.0 + inflate && v.abs() <= self.breadth / 2.0 + inflate
            }
        }
    }

    /// Pixel-center rasterization of the full (unoccluded) footprint.
    pub fn footprint(&self, height: usize, width: usize) -> SegMask {
        SegMask::from_fn(height, width, |y, x| self.contains(x as f64 + 0.5, y as f64 + 0.5, 0.0))
    }
}

/// Ground-truth grasps for one object at image `scale` (1.0 for 64 px).
pub fn gt_grasps_for(o: &ObjectRecord, scale: f64) -> Vec<GraspRect> {
    let margin = GRASP_MARGIN * scale;
    let rect = |cx: f64, cy: f64, extent: f64, theta: f64| {
        let w = extent + margin;
        GraspRect::new(cx, cy, w, w * GRASP_ASPECT, theta).expect("object extents are positive")
    };
    let across = o.angle + 90.0;
    match o.shape {
        Shape::Disk => [0.0, 45.0, 90.0, 135.0].iter().map(|&t| rect(o.cx, o.cy, o.length, t)).collect(),
        Shape::Box => {
            let mut v = vec![rect(o.cx, o.cy, o.breadth, across)];
            if o.length / o.breadth < SQUARE_ASPECT {
                v.push(rect(o.cx, o.cy, o.length, o.angle));
            }
            v
        }
        Shape::Bar => {
            let (s, c) = o.angle.to_radians().sin_cos();
            [-0.25, 0.0, 0.25]
                .iter()
                .map(|&f| rect(o.cx + f * o.length * c, o.cy + f * o.length * s, o.breadth, across))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Centers objects on cells of the `grid_stride` lattice.
    pub snap_to_grid: bool,
    pub grid_stride: usize,
    /// Meters from the camera to the table plane.
    pub table_depth: f64,
    /// Gaussian depth noise in meters; 0 disables.
    pub depth_noise_std: f64,
    /// Rectangles of missing (zero) depth.
    pub dropout_holes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            snap_to_grid: true,
            grid_stride: 16,
            table_depth: 1.0,
            depth_noise_std: 0.0,
            dropout_holes: 0,
        }
    }
}

impl SceneConfig {
    pub fn sized(height: usize, width: usize) -> Self {
        SceneConfig {
            height,
            width,
            ..SceneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!("scene size {}x{} is below 16x16", self.height, self.width)));
        }
        if self.grid_stride == 0 || self.height % self.grid_stride != 0 || self.width % self.grid_stride != 0 {
            return Err(Error::Config(format!(
                "grid stride {} must divide {}x{}",
                self.grid_stride, self.height, self.width
            )));
        }
        if !(self.table_depth > 0.2 && self.table_depth.is_finite()) || !(self.depth_noise_std >= 0.0) {
            return Err(Error::Config("table depth must exceed 0.2 m and noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Linear size factor relative to a 64-pixel image.
    pub fn scale(&self) -> f64 {
        self.height.min(self.width) as f64 / 64.0
    }
}

/// One generated scene with its instruction and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: u32,
    pub seed: u64,
    pub difficulty: Difficulty,
    /// `[h, w, 3]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[h, w]` meters; 0 marks missing depth.
    pub depth: Tensor<f32>,
    pub text: String,
    /// Padded to the maximum token count.
    pub tokens: Vec<u32>,
    pub target: usize,
    pub mask: SegMask,
    pub grasps: Vec<GraspRect>,
    pub objects: Vec<ObjectRecord>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Per-attempt seed; attempt 0 of seed `s` never collides with another seed's.
fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    let mut z = seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th sample of a dataset generated from `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    attempt_seed(base.wrapping_add(0x5851_F42D_4C95_7F2D), index)
}

fn sample_object<R: Rng>(shape: Shape, rng: &mut R, scale: f64) -> (f64, f64, f64) {
    let (length, breadth) = match shape {
        Shape::Box => {
            let a = rng.random_range(9.0..13.0) * scale;
            (a, a * rng.random_range(0.7..1.0))
        }
        Shape::Disk => {
            let d = rng.random_range(9.0..13.0) * scale;
            (d, d)
        }
        Shape::Bar => (rng.random_range(16.0..22.0) * scale, rng.random_range(4.0..6.0) * scale),
    };
    let angle = if shape == Shape::Disk { 0.0 } else { rng.random_range(0.0..180.0) };
    (length, breadth, angle)
}

fn overlaps(a: &ObjectRecord, b: &ObjectRecord, height: usize, width: usize, gap: f64) -> bool {
    let reach = (a.length.hypot(a.breadth) + b.length.hypot(b.breadth)) / 2.0 + gap;
    if (a.cx - b.cx).hypot(a.cy - b.cy) > reach {
        return false;
    }
    (0..height).any(|y| (0..width).any(|x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        a.contains(px, py, gap) && b.contains(px, py, 0.0)
    }))
}

fn place_objects<R: Rng>(difficulty: Difficulty, cfg: &SceneConfig, rng: &mut R) -> Option<Vec<ObjectRecord>> {
    let (h, w) = (cfg.height, cfg.width);
    let scale = cfg.scale();
    let count = match difficulty {
        Difficulty::Isolated => rng.random_range(2..=4),
        Difficulty::Cluttered => rng.random_range(5..=8),
    };
    let mut shapes: Vec<Shape> = (0..count).map(|_| Shape::ALL[rng.random_range(0..3)]).collect();
    // guarantees a same-shape distractor for at least one object
    let (i, j) = (rng.random_range(0..count), rng.random_range(0..count - 1));
    let j = if j >= i { j + 1 } else { j };
    shapes[j] = shapes[i];

    let (gy, gx) = (h / cfg.grid_stride, w / cfg.grid_stride);
    let stride = cfg.grid_stride as f64;
    let mut free_cells: Vec<usize> = (0..gy * gx).collect();
    let mut objects: Vec<ObjectRecord> = Vec::with_capacity(count);
    for shape in shapes {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let (length, breadth, angle) = sample_object(shape, rng, scale);
            let (cx, cy, cell) = if cfg.snap_to_grid {
                if free_cells.is_empty() {
                    // more objects than cells: cells are reused, objects stack
                    free_cells = (0..gy * gx).collect();
                }
                let k = rng.random_range(0..free_cells.len());
                let c = free_cells[k];
                (((c % gx) as f64 + 0.5) * stride, ((c / gx) as f64 + 0.5) * stride, Some(k))
            } else {
                let m = length / 2.0;
                (rng.random_range(m..(w as f64 - m).max(m + 1.0)), rng.random_range(m..(h as f64 - m).max(m + 1.0)), None)
            };
            let o = ObjectRecord {
                shape,
                color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                cx,
                cy,
                length,
                breadth,
                angle,
                z: rng.random_range(0.02..0.10),
            };
            let fits = difficulty == Difficulty::Cluttered || objects.iter().all(|p| !overlaps(&o, p, h, w, ISOLATION_GAP));
            if fits {
                placed = Some((o, cell));
                break;
            }
        }
        let (o, cell) = placed?;
        if let Some(k) = cell {
            free_cells.swap_remove(k);
        }
        objects.push(o);
    }
    Some(objects)
}

/// Painter's-algorithm render: returns rgb, depth and the per-pixel owner.
pub fn render(objects: &[ObjectRecord], cfg: &SceneConfig) -> (Tensor<f32>, Tensor<f32>, Vec<Option<usize>>) {
    let (h, w) = (cfg.height, cfg.width);
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[a].z.total_cmp(&objects[b].z).then(a.cmp(&b)));
    let mut owner = vec![None; h * w];
    for &i in &order {
        let o = &objects[i];
        for y in 0..h {
            for x in 0..w {
                if o.contains(x as f64 + 0.5, y as f64 + 0.5, 0.0) {
                    owner[y * w + x] = Some(i);
                }
            }
        }
    }
    let mut rgb = Tensor::full(&[h, w, 3], TABLE_GRAY);
    let mut depth = Tensor::full(&[h, w], cfg.table_depth as f32);
    for (p, own) in owner.iter().enumerate() {
        if let Some(i) = *own {
            rgb.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&objects[i].color.rgb());
            depth.data_mut()[p] = (cfg.table_depth - objects[i].z) as f32;
        }
    }
    (rgb, depth, owner)
}

fn corrupt_depth<R: Rng>(depth: &mut Tensor<f32>, cfg: &SceneConfig, rng: &mut R) {
    let (h, w) = (cfg.height, cfg.width);
    if cfg.depth_noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.depth_noise_std).expect("validated std");
        for d in depth.data_mut() {
            *d = (*d as f64 + noise.sample(rng)).max(0.0) as f32;
        }
    }
    for _ in 0..cfg.dropout_holes {
        let (hh, hw) = (rng.random_range(1..=h / 8), rng.random_range(1..=w / 8));
        let (y0, x0) = (rng.random_range(0..=h - hh), rng.random_range(0..=w - hw));
        for y in y0..y0 + hh {
            for x in x0..x0 + hw {
                depth.data_mut()[y * w + x] = 0.0;
            }
        }
    }
}

/// Whether a target's grasps and visibility are usable as ground truth.
fn target_is_sound(mask: &SegMask, footprint: &SegMask, grasps: &[GraspRect]) -> bool {
    if mask.count() * 5 < footprint.count() * 3 {
        return false;
    }
    let Some((y0, x0, y1, x1)) = mask.bbox() else {
        return false;
    };
    grasps
        .iter()
        .all(|g| g.cx >= x0 as f64 && g.cx <= (x1 + 1) as f64 && g.cy >= y0 as f64 && g.cy <= (y1 + 1) as f64)
}

/// Deterministic scene for `(seed, difficulty, cfg)`; `id` is 0.
pub fn generate_scene(seed: u64, difficulty: Difficulty, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let vocab = Vocab::standard();
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed(seed, attempt));
        let Some(objects) = place_objects(difficulty, cfg, &mut rng) else {
            continue;
        };
        let (rgb, mut depth, owner) = render(&objects, cfg);
        let candidates: Vec<usize> = (0..objects.len())
            .filter(|&i| objects.iter().enumerate().any(|(j, o)| j != i && o.shape == objects[i].shape))
            .filter(|&i| {
                let mask = SegMask::from_fn(cfg.height, cfg.width, |y, x| owner[y * cfg.width + x] == Some(i));
                target_is_sound(&mask, &objects[i].footprint(cfg.height, cfg.width), &gt_grasps_for(&objects[i], cfg.scale()))
            })
            .collect();
        let instruction = match make_instruction(&objects, &candidates, &vocab, &mut rng) {
            Ok(ins) => ins,
            Err(Error::Ambiguity) => continue,
            Err(e) => return Err(e),
        };
        let t = instruction.target;
        corrupt_depth(&mut depth, cfg, &mut rng);
        return Ok(SceneSample {
            id: 0,
            seed,
            difficulty,
            rgb,
            depth,
            text: instruction.text,
            tokens: instruction.tokens,
            target: t,
            mask: SegMask::from_fn(cfg.height, cfg.width, |y, x| owner[y * cfg.width + x] == Some(t)),
            grasps: gt_grasps_for(&objects[t], cfg.scale()),
            objects,
        });
    }
    Err(Error::PlacementFailure { seed, attempts: ATTEMPTS })
}

/// `count` scenes with dense ids, generated in parallel over seeds.
pub fn generate_dataset(exec: &crate::Exec, base_seed: u64, count: usize, difficulty: Difficulty, cfg: &SceneConfig) -> Result<Vec<SceneSample>> {
    exec.try_map(count, |i| {
        let mut s = generate_scene(sample_seed(base_seed, i), difficulty, cfg)?;
        s.id = i as u32;
        Ok(s)
    })
}

/// Checks every sample invariant; returns a description of the first violation.
pub fn validate_sample(s: &SceneSample, cfg: &SceneConfig) -> std::result::Result<(), String> {
    use super::language::{parse_instruction, MAX_TOKENS, PAD_ID};
    let (h, w) = (cfg.height, cfg.width);
    if s.rgb.shape() != [h, w, 3] || s.depth.shape() != [h, w] || s.height() != h || s.width() != w {
        return Err("tensor shapes disagree with the config".into());
    }
    if s.rgb.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err("rgb outside [0, 1]".into());
    }
    let expr = parse_instruction(&s.text).map_err(|e| e.to_string())?;
    if expr.unique_referent(&s.objects) != Some(s.target) {
        return Err(format!("'{}' does not single out object {}", s.text, s.target));
    }
    let target_shape = s.objects[s.target].shape;
    if !s.objects.iter().enumerate().any(|(i, o)| i != s.target && o.shape == target_shape) {
        return Err("no same-shape distractor".into());
    }
    let vocab = Vocab::standard();
    if s.tokens.len() != MAX_TOKENS || vocab.encode(&s.text).map_err(|e| e.to_string())? != s.tokens {
        return Err("tokens do not encode the instruction".into());
    }
    let used = s.tokens.iter().take_while(|&&t| t != PAD_ID).count();
    if s.tokens[used..].iter().any(|&t| t != PAD_ID) {
        return Err("padding is not a suffix".into());
    }
    let (_, depth, owner) = render(&s.objects, cfg);
    for p in 0..h * w {
        if s.mask.bits()[p] != (owner[p] == Some(s.target)) {
            return Err(format!("mask disagrees with the visible target at pixel {p}"));
        }
        if owner[p].is_some() && depth.data()[p] >= cfg.table_depth as f32 {
            return Err(format!("object depth not above the table at pixel {p}"));
        }
    }
    let Some((y0, x0, y1, x1)) = s.mask.bbox() else {
        return Err("empty target mask".into());
    };
    for g in &s.grasps {
        if g.cx < x0 as f64 || g.cx > (x1 + 1) as f64 || g.cy < y0 as f64 || g.cy > (y1 + 1) as f64 {
            return Err(format!("grasp center ({}, {}) outside the mask bounding box", g.cx, g.cy));
        }
    }
    if s.difficulty == Difficulty::Isolated {
        let masks: Vec<SegMask> = s.objects.iter().map(|o| o.footprint(h, w)).collect();
        for a in 0..masks.len() {
            for b in a + 1..masks.len() {
                if masks[a].bits().iter().zip(masks[b].bits()).any(|(&p, &q)| p && q) {
                    return Err(format!("objects {a} and {b} intersect in an isolated scene"));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rotated_iou;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::default();
        for d in [Difficulty::Isolated, Difficulty::Cluttered] {
            let a = generate_scene(5, d, &cfg).unwrap();
            assert_eq!(a, generate_scene(5, d, &cfg).unwrap());
            assert_ne!(a, generate_scene(6, d, &cfg).unwrap());
        }
    }

    #[test]
    fn object_counts() {
        let cfg = SceneConfig::default();
        for seed in 0..30 {
            let n = generate_scene(seed, Difficulty::Isolated, &cfg).unwrap().objects.len();
            assert!((2..=4).contains(&n));
            let n = generate_scene(seed, Difficulty::Cluttered, &cfg).unwrap().objects.len();
            assert!((5..=8).contains(&n));
        }
    }

    #[test]
    fn samples_validate() {
        for (h, w) in [(64, 64), (32, 32), (64, 96)] {
            let cfg = SceneConfig::sized(h, w);
            for seed in 0..40 {
                for d in [Difficulty::Isolated, Difficulty::Cluttered] {
                    let s = generate_scene(seed, d, &cfg).unwrap();
                    validate_sample(&s, &cfg).unwrap_or_else(|e| panic!("{h}x{w} seed {seed} {d}: {e}"));
                }
            }
        }
    }

    #[test]
    fn occluder_depth_below_table() {
        let cfg = SceneConfig::default();
        let s = generate_scene(3, Difficulty::Cluttered, &cfg).unwrap();
        let (_, _, owner) = render(&s.objects, &cfg);
        for (p, o) in owner.iter().enumerate() {
            if o.is_some() {
                assert!(s.depth.data()[p] < cfg.table_depth as f32);
            } else {
                assert_eq!(s.depth.data()[p], cfg.table_depth as f32);
            }
        }
    }

    fn bar(angle: f64) -> ObjectRecord {
        ObjectRecord {
            shape: Shape::Bar,
            color: Color::Red,
            cx: 32.0,
            cy: 32.0,
            length: 20.0,
            breadth: 5.0,
            angle,
            z: 0.05,
        }
    }

    #[test]
    fn grasp_rules() {
        let g = gt_grasps_for(&bar(0.0), 1.0);
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|r| r.theta == 90.0 && r.width == 8.0 && r.height == 4.0));
        assert_eq!(g.iter().map(|r| r.cx).collect::<Vec<_>>(), vec![27.0, 32.0, 37.0]);
        let disk = ObjectRecord { shape: Shape::Disk, length: 10.0, breadth: 10.0, ..bar(0.0) };
        let thetas: Vec<f64> = gt_grasps_for(&disk, 1.0).iter().map(|r| r.theta).collect();
        assert_eq!(thetas, vec![0.0, 45.0, 90.0, 135.0]);
        let square = ObjectRecord { shape: Shape::Box, length: 10.0, breadth: 9.0, angle: 100.0, ..bar(0.0) };
        let g = gt_grasps_for(&square, 1.0);
        assert_eq!(g.len(), 2);
        assert!((g[0].theta - 10.0).abs() < 1e-9 && (g[1].theta - 100.0).abs() < 1e-9);
        let long_box = ObjectRecord { breadth: 7.0, ..square };
        assert_eq!(gt_grasps_for(&long_box, 1.0).len(), 1);
    }

    #[test]
    fn grasps_intersect_mask_bbox() {
        let cfg = SceneConfig::default();
        for seed in 0..40 {
            let s = generate_scene(seed, Difficulty::Cluttered, &cfg).unwrap();
            for o in &s.objects {
                let Some((y0, x0, y1, x1)) = o.footprint(64, 64).bbox() else { continue };
                let bb = GraspRect::new(
                    (x0 + x1 + 1) as f64 / 2.0,
                    (y0 + y1 + 1) as f64 / 2.0,
                    (x1 + 1 - x0) as f64,
                    (y1 + 1 - y0) as f64,
                    0.0,
                )
                .unwrap();
                for g in gt_grasps_for(o, 1.0) {
                    assert!(rotated_iou(&g, &bb) > 0.0);
                }
            }
        }
    }

    #[test]
    fn noise_and_holes() {
        let cfg = SceneConfig {
            depth_noise_std: 0.01,
            dropout_holes: 3,
            ..SceneConfig::default()
        };
        let s = generate_scene(1, Difficulty::Isolated, &cfg).unwrap();
        assert!(s.depth.data().contains(&0.0));
        assert!(s.depth.data().iter().any(|&d| d != 0.0 && d != 1.0));
        let clean = generate_scene(1, Difficulty::Isolated, &SceneConfig::default()).unwrap();
        assert_eq!(clean.rgb, s.rgb);
    }

    #[test]
    fn snapped_centroids_sit_on_cell_centers() {
        let cfg = SceneConfig::default();
        let s = generate_scene(11, Difficulty::Isolated, &cfg).unwrap();
        for o in &s.objects {
            assert_eq!((o.cx - 8.0) % 16.0, 0.0);
            assert_eq!((o.cy - 8.0) % 16.0, 0.0);
        }
    }

    #[test]
    fn bad_config() {
        assert!(generate_scene(0, Difficulty::Isolated, &SceneConfig::sized(60, 64)).is_err());
        assert!("bogus".parse::<Difficulty>().is_err());
        assert_eq!("cluttered".parse::<Difficulty>().unwrap(), Difficulty::Cluttered);
    }
}
