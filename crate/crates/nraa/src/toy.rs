//! Synthetic desk-scale detection benchmark: colored shapes on near-black,
//! each with a class-correlated companion dot in its surroundings.
//!
//! Every class is a (core color, companion color, shape) triple. The core
//! color fills the object; the companion is a smaller square dot drawn in
//! one of the eight neighboring grid tiles, outside the ground-truth box
//! but inside the 3x3 context window around it. Companions model the
//! co-occurrence structure of real scenes (cups near saucers): they carry
//! class evidence that the tight object crop alone does not contain. The
//! two novel classes share their core color and differ only by companion
//! and shape, so any pipeline that looks exclusively at the proposal crop
//! is structurally unable to tell them apart, while one that pools the
//! neighborhood can.
//!
//! The background is almost black, so the mean color of a region is a
//! nonnegative mixture of the object and companion colors it covers. The
//! canonical direction of a class is the mean color of its 3x3 context
//! window — core, companion, and background in fixed area ratios — and
//! that is the color handed to the paired encoder oracle for prompts.
//!
//! Base-class objects appear in both splits; novel-class objects appear only
//! in test scenes, never in training annotations. Objects are placed so
//! their context windows stay clear of other objects, keeping every
//! window's mixture canonical. Proposals are jittered ground-truth boxes
//! plus random distractors, scored by IoU against the best-matching ground
//! truth — a deterministic stand-in for a proposal network.

use crate::det::{stream_rng, Stream};
use crate::encoders::ClassVocabulary;
use crate::error::{Error, Result};
use crate::geometry::{grid_neighbor, iou, BBox, Direction, ImageSize};
use crate::image::Image;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Brightness of the scene background on every channel. Strictly positive
/// so that even an all-background crop has a well-defined embedding.
pub const BACKGROUND_LEVEL: f64 = 0.02;

/// Width of a RoI feature row: box mean color, 2x2 grid of cell mean
/// colors, normalized box width and height, and the mean color of the 3x3
/// context window around the box.
pub const D_ROI: usize = 20;

/// Companion dot side as a fraction of its object's side. The dot area
/// (squared) sets the companion's weight in the canonical class mixture;
/// at 0.75 the worst pairwise cosine between stock class directions stays
/// below 0.88, wide enough for the shared softmax temperature.
pub const COMPANION_SCALE: f64 = 0.75;

/// HSV to RGB, all components in [0, 1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Anchor palette: color *directions* chosen for maximal pairwise angles.
/// The frozen image encoder only sees mean color, so after normalization a
/// color is its direction in RGB space; the positive octant holds just six
/// well-separated chromatic ones (primaries and secondaries). White is
/// deliberately absent: it shares its direction with the achromatic
/// background, and a mean-color encoder cannot tell a white object from an
/// empty gray box.
const ANCHOR_COLORS: [[f64; 3]; 6] = [
    [0.95, 0.02, 0.02],
    [0.02, 0.95, 0.02],
    [0.02, 0.02, 0.95],
    [0.95, 0.95, 0.02],
    [0.95, 0.02, 0.95],
    [0.02, 0.95, 0.95],
];

/// Index into [`ANCHOR_COLORS`] of the core color for each stock class.
/// The four base classes take the first four anchors; both novel classes
/// share the magenta anchor, so their tight crops are indistinguishable
/// and only companion plus shape separate them.
const CORE_ANCHOR: [usize; 6] = [0, 1, 2, 3, 4, 4];

/// Index into [`ANCHOR_COLORS`] of the companion color for each stock
/// class. A permutation of the anchors, chosen by exhaustive search to
/// maximize the smallest angle between canonical class directions; naive
/// pairings (a core with its complementary companion) collapse to the
/// gray diagonal and are avoided.
const COMPANION_ANCHOR: [usize; 6] = [4, 3, 5, 0, 2, 1];

/// Golden-ratio hue wheel for class indices past the stock table.
fn wheel_color(i: usize, offset: f64) -> [f64; 3] {
    let inv_phi = 0.618_033_988_749_894_9;
    hsv_to_rgb((i as f64 * inv_phi + offset).fract(), 0.8, 0.95)
}

/// Core (fill) color per class. Stock classes use the anchor table — note
/// the two novel classes share one core — and later indices fall back to
/// a golden-ratio hue wheel.
pub fn class_colors(num_classes: usize) -> Vec<[f64; 3]> {
    (0..num_classes)
        .map(|i| match CORE_ANCHOR.get(i) {
            Some(&a) => ANCHOR_COLORS[a],
            None => wheel_color(i, 0.0),
        })
        .collect()
}

/// Companion-dot color per class. Stock classes use the searched anchor
/// permutation; wheel classes take a half-turn hue offset from their core.
pub fn class_companion_colors(num_classes: usize) -> Vec<[f64; 3]> {
    (0..num_classes)
        .map(|i| match COMPANION_ANCHOR.get(i) {
            Some(&a) => ANCHOR_COLORS[a],
            None => wheel_color(i, 0.5),
        })
        .collect()
}

/// Shape assigned to a class by its global index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub fn class_shape(global_index: usize) -> Shape {
    match global_index % 3 {
        0 => Shape::Circle,
        1 => Shape::Square,
        _ => Shape::Triangle,
    }
}

/// Fraction of the bounding box a filled shape covers.
pub fn shape_fill(shape: Shape) -> f64 {
    match shape {
        Shape::Circle => std::f64::consts::FRAC_PI_4,
        Shape::Square => 1.0,
        Shape::Triangle => 0.5,
    }
}

/// The 3x3 context window around a box: the box grown by its own width and
/// height on each side, clipped to the image.
pub fn context_box(bbox: &BBox, width: u32, height: u32) -> BBox {
    let w = bbox.width();
    let h = bbox.height();
    BBox::new(
        (bbox.x1 - w).max(0.0),
        (bbox.y1 - h).max(0.0),
        (bbox.x2 + w).min(width as f64),
        (bbox.y2 + h).min(height as f64),
    )
    .expect("clipped context window contains the box")
}

/// Canonical class direction: the mean color of an idealized, unclipped
/// context window. The window spans nine box areas; the shape fills
/// `shape_fill` of one, the companion dot `COMPANION_SCALE^2` of one, and
/// background covers the rest. Box side cancels out of the ratio, so the
/// mixture is generator-independent. These are the colors the paired
/// encoder oracle should be given for class prompts.
pub fn canonical_prompt_colors(num_classes: usize) -> Vec<[f64; 3]> {
    let cores = class_colors(num_classes);
    let comps = class_companion_colors(num_classes);
    (0..num_classes)
        .map(|i| {
            let fill = shape_fill(class_shape(i));
            let comp = COMPANION_SCALE * COMPANION_SCALE;
            let bg = 9.0 - fill - comp;
            let mut m = [0.0; 3];
            for c in 0..3 {
                m[c] = (fill * cores[i][c] + comp * comps[i][c] + bg * BACKGROUND_LEVEL) / 9.0;
            }
            m
        })
        .collect()
}

/// The stock 4-base / 2-novel vocabulary used by the bundled benchmark.
/// The two orchid classes share the magenta core and are told apart by
/// companion color and shape alone. Class names are single tokens (hyphens
/// survive tokenization) so each maps to exactly one word vector in the
/// frozen encoder.
pub fn default_vocabulary() -> ClassVocabulary {
    let base = ["ruby-disc", "jade-slab", "azure-wedge", "gold-disc"];
    let novel = ["orchid-slab", "orchid-spire"];
    let templates = ["a photo of a {}", "a small rendering of a {}"];
    ClassVocabulary::new(
        base.iter().map(|s| s.to_string()).collect(),
        novel.iter().map(|s| s.to_string()).collect(),
        templates.iter().map(|s| s.to_string()).collect(),
    )
    .expect("stock vocabulary is well formed")
}

/// One rendered scene with its ground-truth annotations.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub id: usize,
    pub image: Image,
    /// Ground-truth boxes with class names.
    pub objects: Vec<(BBox, String)>,
    /// Companion-dot boxes, one per object, in object order. Drawn into
    /// the image but never annotated: context, not targets.
    pub companions: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Vec<ToyScene>,
    pub test: Vec<ToyScene>,
}

/// Scene-generator knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGenConfig {
    pub image_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        // Sides small enough that two disjoint 3x3 context windows fit in
        // a 64-pixel scene; placement rejects any window collision.
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 2,
            min_side: 8.0,
            max_side: 12.0,
        }
    }
}

fn point_in_triangle(px: f64, py: f64, a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let sign = |p1: (f64, f64), p2: (f64, f64), p3: (f64, f64)| {
        (p1.0 - p3.0) * (p2.1 - p3.1) - (p2.0 - p3.0) * (p1.1 - p3.1)
    };
    let d1 = sign((px, py), a, b);
    let d2 = sign((px, py), b, c);
    let d3 = sign((px, py), c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Paint a filled shape into the image over the box footprint.
fn draw_shape(image: &mut Image, bbox: &BBox, shape: Shape, color: [f64; 3]) {
    let x_lo = bbox.x1.floor().max(0.0) as u32;
    let y_lo = bbox.y1.floor().max(0.0) as u32;
    let x_hi = (bbox.x2.ceil() as u32).min(image.width);
    let y_hi = (bbox.y2.ceil() as u32).min(image.height);
    let (cx, cy) = bbox.center();
    let radius = bbox.width().min(bbox.height()) / 2.0;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            if px < bbox.x1 || px >= bbox.x2 || py < bbox.y1 || py >= bbox.y2 {
                continue;
            }
            let inside = match shape {
                Shape::Square => true,
                Shape::Circle => {
                    let dx = px - cx;
                    let dy = py - cy;
                    dx * dx + dy * dy <= radius * radius
                }
                Shape::Triangle => point_in_triangle(
                    px,
                    py,
                    (bbox.x1, bbox.y2),
                    (bbox.x2, bbox.y2),
                    ((bbox.x1 + bbox.x2) / 2.0, bbox.y1),
                ),
            };
            if inside {
                image.set(x, y, color);
            }
        }
    }
}

/// Square companion dot centered in the neighbor tile of `bbox` in the
/// given direction, or `None` when the dot would leave the image.
fn companion_dot(bbox: &BBox, direction: Direction, image: ImageSize) -> Option<BBox> {
    let tile = grid_neighbor(bbox, direction);
    let (cx, cy) = tile.center();
    let half = bbox.width().min(bbox.height()) * COMPANION_SCALE / 2.0;
    let dot = BBox::new(cx - half, cy - half, cx + half, cy + half).ok()?;
    dot.inside(image).then_some(dot)
}

fn build_scene(
    id: usize,
    allowed: &[(usize, &str)],
    cores: &[[f64; 3]],
    comps: &[[f64; 3]],
    gen: &ToyGenConfig,
    rng: &mut ChaCha8Rng,
) -> ToyScene {
    let size = gen.image_size as f64;
    let img_size = ImageSize::new(gen.image_size, gen.image_size).unwrap();
    let mut image = Image::filled(gen.image_size, gen.image_size, [BACKGROUND_LEVEL; 3]).unwrap();
    let n = rng.random_range(gen.min_objects..=gen.max_objects);
    let mut objects: Vec<(BBox, String)> = Vec::new();
    let mut companions: Vec<BBox> = Vec::new();
    for _ in 0..n {
        let mut placed = None;
        for _attempt in 0..50 {
            let side = rng.random_range(gen.min_side..=gen.max_side);
            let x1 = rng.random_range(0.0..=(size - side));
            let y1 = rng.random_range(0.0..=(size - side));
            let bbox = BBox::new(x1, y1, x1 + side, y1 + side).unwrap();
            let dots: Vec<BBox> = Direction::ALL
                .iter()
                .filter_map(|&d| companion_dot(&bbox, d, img_size))
                .collect();
            if dots.is_empty() {
                continue;
            }
            let dot = dots[rng.random_range(0..dots.len())];
            // Keep every context window canonical: nothing of another
            // object may sit inside this window, and neither this object
            // nor its dot may sit inside another object's window.
            let ctx = context_box(&bbox, gen.image_size, gen.image_size);
            let clear = objects.iter().zip(&companions).all(|((b, _), c)| {
                let other = context_box(b, gen.image_size, gen.image_size);
                ctx.intersection_area(b) == 0.0
                    && ctx.intersection_area(c) == 0.0
                    && other.intersection_area(&bbox) == 0.0
                    && other.intersection_area(&dot) == 0.0
            });
            if clear {
                placed = Some((bbox, dot));
                break;
            }
        }
        let Some((bbox, dot)) = placed else { continue };
        let (global, name) = allowed[rng.random_range(0..allowed.len())];
        draw_shape(&mut image, &bbox, class_shape(global), cores[global]);
        draw_shape(&mut image, &dot, Shape::Square, comps[global]);
        objects.push((bbox, name.to_string()));
        companions.push(dot);
    }
    ToyScene { id, image, objects, companions }
}

/// Generate the benchmark: training scenes draw objects from base classes
/// only; test scenes draw from all classes.
pub fn generate_toy_benchmark(
    seed: u64,
    num_train: usize,
    num_test: usize,
    vocab: &ClassVocabulary,
    gen: &ToyGenConfig,
) -> Result<ToyDataset> {
    if gen.min_objects == 0 || gen.min_objects > gen.max_objects {
        return Err(Error::field("min_objects", "need 1 <= min_objects <= max_objects"));
    }
    if gen.min_side < 4.0 || gen.min_side > gen.max_side {
        return Err(Error::field("min_side", "need 4 <= min_side <= max_side"));
    }
    if gen.max_side > gen.image_size as f64 {
        return Err(Error::field("max_side", "objects larger than the image"));
    }
    let cores = class_colors(vocab.num_all());
    let comps = class_companion_colors(vocab.num_all());
    let base: Vec<(usize, &str)> = vocab
        .base_classes
        .iter()
        .map(|s| (vocab.global_index(s).unwrap(), s.as_str()))
        .collect();
    let all: Vec<(usize, &str)> = vocab
        .all_classes()
        .map(|s| (vocab.global_index(s).unwrap(), s))
        .collect();

    let train = (0..num_train)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Data, scene_stream_key(false, i));
            build_scene(i, &base, &cores, &comps, gen, &mut rng)
        })
        .collect();
    let test = (0..num_test)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Data, scene_stream_key(true, i));
            build_scene(i, &all, &cores, &comps, gen, &mut rng)
        })
        .collect();
    Ok(ToyDataset { train, test })
}

/// Stream key for per-scene randomness. Train and test scenes share small
/// ids, so the test split is offset into a disjoint range.
pub fn scene_stream_key(test_split: bool, scene_id: usize) -> u64 {
    if test_split {
        (1u64 << 32) | scene_id as u64
    } else {
        scene_id as u64
    }
}

/// Proposal-source knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposeConfig {
    /// Per-coordinate jitter as a fraction of box width/height.
    pub jitter: f64,
    /// Random boxes added per scene.
    pub distractors: usize,
    pub distractor_min_side: f64,
    pub distractor_max_side: f64,
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self {
            jitter: 0.1,
            distractors: 2,
            distractor_min_side: 8.0,
            distractor_max_side: 20.0,
        }
    }
}

/// Jittered ground truth plus distractors; scores are the IoU against the
/// best-matching ground-truth box.
pub fn propose(
    scene: &ToyScene,
    image_size: u32,
    cfg: &ProposeConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(BBox, f64)> {
    let size = image_size as f64;
    let best_iou = |b: &BBox| -> f64 {
        scene
            .objects
            .iter()
            .map(|(g, _)| iou(g, b))
            .fold(0.0, f64::max)
    };
    let mut proposals = Vec::new();
    for (gt, _) in &scene.objects {
        let w = gt.width();
        let h = gt.height();
        let j = cfg.jitter;
        let x1 = (gt.x1 + rng.random_range(-1.0..=1.0) * j * w).clamp(0.0, size);
        let y1 = (gt.y1 + rng.random_range(-1.0..=1.0) * j * h).clamp(0.0, size);
        let x2 = (gt.x2 + rng.random_range(-1.0..=1.0) * j * w).clamp(0.0, size);
        let y2 = (gt.y2 + rng.random_range(-1.0..=1.0) * j * h).clamp(0.0, size);
        if let Ok(bbox) = BBox::new(x1, y1, x2, y2) {
            let score = best_iou(&bbox);
            proposals.push((bbox, score));
        }
    }
    for _ in 0..cfg.distractors {
        let w = rng.random_range(cfg.distractor_min_side..=cfg.distractor_max_side);
        let h = rng.random_range(cfg.distractor_min_side..=cfg.distractor_max_side);
        let x1 = rng.random_range(0.0..=(size - w));
        let y1 = rng.random_range(0.0..=(size - h));
        let bbox = BBox::new(x1, y1, x1 + w, y1 + h).unwrap();
        let score = best_iou(&bbox);
        proposals.push((bbox, score));
    }
    proposals
}

/// The `k` highest-scored proposals, ties broken by earlier index. Returns
/// everything when the list is shorter than `k`.
pub fn select_topk(proposals: &[(BBox, f64)], k: usize) -> Vec<(BBox, f64)> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].1.total_cmp(&proposals[a].1).then(a.cmp(&b)));
    order.truncate(k);
    order.into_iter().map(|i| proposals[i]).collect()
}

/// RoI feature of a box: mean color (3), 2x2 grid of cell mean colors (12),
/// normalized width and height (2), and the mean color of the 3x3 context
/// window scaled by its nine box areas (3). The context block lets even a
/// bare per-region head see the surroundings a backbone's receptive field
/// would provide.
pub fn roi_features(image: &Image, bbox: &BBox) -> Result<Array2<f64>> {
    let mut f = Array2::zeros((1, D_ROI));
    let mean = image.mean_rgb_in(bbox);
    for c in 0..3 {
        f[(0, c)] = mean[c];
    }
    let (mx, my) = bbox.center();
    let cells = [
        BBox::new(bbox.x1, bbox.y1, mx, my),
        BBox::new(mx, bbox.y1, bbox.x2, my),
        BBox::new(bbox.x1, my, mx, bbox.y2),
        BBox::new(mx, my, bbox.x2, bbox.y2),
    ];
    for (i, cell) in cells.into_iter().enumerate() {
        let cell = cell?;
        let mut m = image.mean_rgb_in(&cell);
        // Cells narrower than one pixel see no pixel centers; fall back to
        // the whole-box mean rather than injecting zeros.
        if m == [0.0; 3] && image.mean_rgb_in(bbox) != [0.0; 3] {
            m = mean;
        }
        for c in 0..3 {
            f[(0, 3 + 3 * i + c)] = m[c];
        }
    }
    f[(0, 15)] = bbox.width() / image.width as f64;
    f[(0, 16)] = bbox.height() / image.height as f64;
    let ctx = context_box(bbox, image.width, image.height);
    let cm = image.mean_rgb_in(&ctx);
    for c in 0..3 {
        // The window dilutes its contents over nine box areas; scale its
        // mean back up so the chromatic content sits on the same scale as
        // the box mean and a linear head weighs both evenly.
        f[(0, 17 + c)] = 9.0 * cm[c];
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ClassVocabulary {
        ClassVocabulary::new(
            (0..4).map(|i| format!("base-{i}")).collect(),
            (0..2).map(|i| format!("novel-{i}")).collect(),
            vec!["a photo of a {}".into()],
        )
        .unwrap()
    }

    #[test]
    fn hsv_known_values() {
        let red = hsv_to_rgb(0.0, 1.0, 1.0);
        assert_eq!(red, [1.0, 0.0, 0.0]);
        let green = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((green[0]).abs() < 1e-12 && (green[1] - 1.0).abs() < 1e-12);
        let blue = hsv_to_rgb(2.0 / 3.0, 1.0, 1.0);
        assert!((blue[2] - 1.0).abs() < 1e-12 && blue[0].abs() < 1e-12);
        // Desaturated: channels converge toward v.
        let gray = hsv_to_rgb(0.25, 0.0, 0.5);
        assert_eq!(gray, [0.5, 0.5, 0.5]);
    }

    fn cos3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let dot: f64 = (0..3).map(|k| a[k] * b[k]).sum();
        let na: f64 = (0..3).map(|k| a[k] * a[k]).sum::<f64>().sqrt();
        let nb: f64 = (0..3).map(|k| b[k] * b[k]).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn class_palette_structure() {
        let cores = class_colors(12);
        let comps = class_companion_colors(12);
        assert_eq!(cores.len(), 12);
        for c in cores.iter().chain(&comps) {
            for ch in c {
                assert!((0.0..=1.0).contains(ch));
            }
        }
        assert_eq!(cores[0], [0.95, 0.02, 0.02]);
        // The novel pair shares its core; every other core pair differs.
        assert_eq!(cores[4], cores[5]);
        for i in 0..12 {
            for j in 0..i {
                if (i, j) == (5, 4) {
                    continue;
                }
                assert_ne!(cores[i], cores[j], "cores {i},{j} collide");
            }
        }
        // (core, companion) pairs are unique, and no class pairs a color
        // with itself.
        for i in 0..12 {
            assert_ne!(cores[i], comps[i], "class {i} companion equals core");
            for j in 0..i {
                assert!(
                    cores[i] != cores[j] || comps[i] != comps[j],
                    "classes {i},{j} share core and companion"
                );
            }
        }
        // Anchor *directions* stay well separated: the usable guarantee
        // for a mean-color encoder.
        for i in 0..6 {
            for j in 0..i {
                let c = cos3(&ANCHOR_COLORS[i], &ANCHOR_COLORS[j]);
                assert!(c < 0.73, "anchors {i},{j} cos {c}");
            }
        }
    }

    #[test]
    fn canonical_directions_stay_separated() {
        // The whole benchmark rests on these margins: every pair of stock
        // class directions at least ~29 degrees apart, the shared-core
        // novel pair at least ~33.
        let mus = canonical_prompt_colors(6);
        let mut worst: f64 = -1.0;
        for i in 0..6 {
            for j in 0..i {
                let c = cos3(&mus[i], &mus[j]);
                worst = worst.max(c);
            }
        }
        assert!(worst < 0.88, "worst pairwise cos {worst}");
        let novel = cos3(&mus[4], &mus[5]);
        assert!(novel < 0.84, "novel pair cos {novel}");
        // And each direction leans toward its own core: the crop alone is
        // informative for all classes except within the novel pair.
        let cores = class_colors(6);
        for i in 0..4 {
            for j in 0..6 {
                if i != j {
                    assert!(cos3(&mus[i], &cores[i]) > cos3(&mus[j], &cores[i]) - 1e-9);
                }
            }
        }
    }

    #[test]
    fn canonical_mixture_matches_a_rendered_window() {
        // Render one perfectly canonical configuration for a square class
        // (pixel-aligned box, window fully inside the image) and check the
        // closed-form mixture against measured pixels.
        let cores = class_colors(6);
        let comps = class_companion_colors(6);
        let mut image = Image::filled(64, 64, [BACKGROUND_LEVEL; 3]).unwrap();
        let bbox = BBox::new(24.0, 24.0, 36.0, 36.0).unwrap();
        draw_shape(&mut image, &bbox, Shape::Square, cores[1]);
        let dot = companion_dot(&bbox, Direction::Right, ImageSize::new(64, 64).unwrap()).unwrap();
        draw_shape(&mut image, &dot, Shape::Square, comps[1]);
        let got = image.mean_rgb_in(&context_box(&bbox, 64, 64));
        let want = canonical_prompt_colors(6)[1];
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-12, "channel {c}: {got:?} vs {want:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let v = vocab();
        let gen = ToyGenConfig::default();
        let a = generate_toy_benchmark(7, 3, 2, &v, &gen).unwrap();
        let b = generate_toy_benchmark(7, 3, 2, &v, &gen).unwrap();
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.test.len(), 2);
        for (x, y) in a.train.iter().zip(&b.train).chain(a.test.iter().zip(&b.test)) {
            assert_eq!(x.image.pixels(), y.image.pixels(), "pixel data must be bit-identical");
            assert_eq!(x.objects.len(), y.objects.len());
            for ((bx, nx), (by, ny)) in x.objects.iter().zip(&y.objects) {
                assert_eq!(bx, by);
                assert_eq!(nx, ny);
            }
            assert_eq!(x.companions, y.companions);
        }
    }

    #[test]
    fn companions_sit_in_context_windows_and_windows_stay_clear() {
        let v = vocab();
        let data = generate_toy_benchmark(23, 40, 40, &v, &ToyGenConfig::default()).unwrap();
        let mut multi = 0usize;
        for scene in data.train.iter().chain(&data.test) {
            assert_eq!(scene.companions.len(), scene.objects.len());
            if scene.objects.len() > 1 {
                multi += 1;
            }
            for (i, ((bbox, _), dot)) in scene.objects.iter().zip(&scene.companions).enumerate() {
                // Dot inside the image and inside its object's window, but
                // outside the object box itself.
                assert!(dot.x1 >= 0.0 && dot.y1 >= 0.0 && dot.x2 <= 64.0 && dot.y2 <= 64.0);
                let ctx = context_box(bbox, 64, 64);
                assert!(dot.x1 >= ctx.x1 - 1e-9 && dot.x2 <= ctx.x2 + 1e-9);
                assert!(dot.y1 >= ctx.y1 - 1e-9 && dot.y2 <= ctx.y2 + 1e-9);
                assert_eq!(dot.intersection_area(bbox), 0.0);
                let side = bbox.width().min(bbox.height());
                assert!((dot.width() - side * COMPANION_SCALE).abs() < 1e-9);
                // No foreign object or dot inside this window.
                for (j, ((other, _), odot)) in
                    scene.objects.iter().zip(&scene.companions).enumerate()
                {
                    if i == j {
                        continue;
                    }
                    assert_eq!(ctx.intersection_area(other), 0.0, "scene {}", scene.id);
                    assert_eq!(ctx.intersection_area(odot), 0.0, "scene {}", scene.id);
                }
            }
        }
        // The placement rule must not silently collapse every scene to a
        // single object.
        assert!(multi >= 10, "only {multi} multi-object scenes");
    }

    #[test]
    fn train_split_never_contains_novel_classes() {
        let v = vocab();
        let data = generate_toy_benchmark(11, 50, 10, &v, &ToyGenConfig::default()).unwrap();
        for scene in &data.train {
            for (_, name) in &scene.objects {
                assert!(!v.is_novel(name), "novel class {name} leaked into training");
            }
        }
        // And the test split does exercise novel classes.
        let novel_seen = data
            .test
            .iter()
            .flat_map(|s| &s.objects)
            .any(|(_, name)| v.is_novel(name));
        assert!(novel_seen);
    }

    #[test]
    fn shapes_fill_expected_fractions() {
        let colors = class_colors(3);
        let bbox = BBox::new(10.0, 10.0, 26.0, 26.0).unwrap();
        for (shape, expected, tol) in [
            (Shape::Square, 1.0, 1e-12),
            (Shape::Circle, std::f64::consts::FRAC_PI_4, 0.05),
            (Shape::Triangle, 0.5, 0.06),
        ] {
            let mut image = Image::filled(40, 40, [0.0; 3]).unwrap();
            draw_shape(&mut image, &bbox, shape, colors[0]);
            let mut filled = 0usize;
            for y in 10..26 {
                for x in 10..26 {
                    if image.get(x, y) != [0.0; 3] {
                        filled += 1;
                    }
                }
            }
            let fraction = filled as f64 / 256.0;
            assert!(
                (fraction - expected).abs() <= tol,
                "{shape:?}: fraction {fraction}"
            );
        }
    }

    #[test]
    fn square_box_mean_color_is_class_color() {
        let colors = class_colors(2);
        let mut image = Image::filled(32, 32, [BACKGROUND_LEVEL; 3]).unwrap();
        let bbox = BBox::new(4.0, 4.0, 16.0, 16.0).unwrap();
        draw_shape(&mut image, &bbox, Shape::Square, colors[1]);
        let mean = image.mean_rgb_in(&bbox);
        for c in 0..3 {
            assert!((mean[c] - colors[1][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn class_frequencies_near_uniform() {
        let v = vocab();
        let data = generate_toy_benchmark(13, 1000, 0, &v, &ToyGenConfig::default()).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        let mut total = 0usize;
        for scene in &data.train {
            for (_, name) in &scene.objects {
                *counts.entry(name.clone()).or_insert(0usize) += 1;
                total += 1;
            }
        }
        let expected = total as f64 / 4.0;
        for name in &v.base_classes {
            let got = *counts.get(name).unwrap_or(&0) as f64;
            assert!(
                (got - expected).abs() / expected < 0.2,
                "{name}: {got} vs expected {expected}"
            );
        }
    }

    #[test]
    fn zero_jitter_zero_distractors_reproduce_ground_truth() {
        let v = vocab();
        let data = generate_toy_benchmark(17, 1, 0, &v, &ToyGenConfig::default()).unwrap();
        let scene = &data.train[0];
        let cfg = ProposeConfig {
            jitter: 0.0,
            distractors: 0,
            ..ProposeConfig::default()
        };
        let mut rng = stream_rng(17, Stream::Proposals, 0);
        let proposals = propose(scene, 64, &cfg, &mut rng);
        assert_eq!(proposals.len(), scene.objects.len());
        for ((bbox, score), (gt, _)) in proposals.iter().zip(&scene.objects) {
            assert_eq!(bbox, gt);
            assert!((score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distractor_scores_match_an_independent_iou_oracle() {
        let v = vocab();
        let data = generate_toy_benchmark(19, 5, 0, &v, &ToyGenConfig::default()).unwrap();
        // Interval-overlap IoU written out directly, independent of the
        // geometry module.
        let oracle = |a: &BBox, b: &BBox| -> f64 {
            let ox = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
            let oy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
            let inter = ox * oy;
            let union = a.width() * a.height() + b.width() * b.height() - inter;
            inter / union
        };
        let mut saw_zero = false;
        for (i, scene) in data.train.iter().enumerate() {
            let mut rng = stream_rng(19, Stream::Proposals, i as u64);
            let proposals = propose(scene, 64, &ProposeConfig::default(), &mut rng);
            for (bbox, score) in &proposals {
                let want = scene
                    .objects
                    .iter()
                    .map(|(g, _)| oracle(g, bbox))
                    .fold(0.0, f64::max);
                assert!((score - want).abs() < 1e-10);
                if *score == 0.0 {
                    saw_zero = true;
                }
            }
        }
        assert!(saw_zero, "expected at least one non-overlapping distractor");
    }

    #[test]
    fn topk_selection_rules() {
        let b = |i: f64| BBox::new(i, 0.0, i + 1.0, 1.0).unwrap();
        let proposals = vec![(b(0.0), 0.9), (b(1.0), 0.1), (b(2.0), 0.5)];
        let top2 = select_topk(&proposals, 2);
        assert_eq!(top2.len(), 2);
        assert_eq!(top2[0].0, b(0.0));
        assert_eq!(top2[1].0, b(2.0));
        // k beyond length: identity (in score order).
        let all = select_topk(&proposals, 10);
        assert_eq!(all.len(), 3);
        // Ties break toward the earlier index.
        let tied = vec![(b(0.0), 0.5), (b(1.0), 0.5), (b(2.0), 0.5)];
        let top = select_topk(&tied, 2);
        assert_eq!(top[0].0, b(0.0));
        assert_eq!(top[1].0, b(1.0));
    }

    #[test]
    fn roi_features_layout_and_values() {
        let color = [0.9, 0.3, 0.1];
        let mut image = Image::filled(64, 64, [BACKGROUND_LEVEL; 3]).unwrap();
        let bbox = BBox::new(8.0, 8.0, 24.0, 40.0).unwrap();
        draw_shape(&mut image, &bbox, Shape::Square, color);
        let f = roi_features(&image, &bbox).unwrap();
        assert_eq!(f.dim(), (1, D_ROI));
        // Solid square: box mean and every cell mean equal the color.
        for block in 0..5 {
            for c in 0..3 {
                assert!((f[(0, 3 * block + c)] - color[c]).abs() < 1e-12, "block {block}");
            }
        }
        assert!((f[(0, 15)] - 16.0 / 64.0).abs() < 1e-12);
        assert!((f[(0, 16)] - 32.0 / 64.0).abs() < 1e-12);
        // Context block: the 3x3 window clips to x in [0,40), y in [0,64),
        // 2560 pixels of which the square covers 512, so the mean is an
        // exact 0.2 / 0.8 blend of color and background, scaled by 9.
        for c in 0..3 {
            let want = 9.0 * (0.2 * color[c] + 0.8 * BACKGROUND_LEVEL);
            assert!((f[(0, 17 + c)] - want).abs() < 1e-12, "context channel {c}");
        }
    }

    #[test]
    fn roi_cells_see_different_halves() {
        let mut image = Image::filled(32, 32, [0.0; 3]).unwrap();
        // Left half red, right half blue inside the box.
        draw_shape(
            &mut image,
            &BBox::new(0.0, 0.0, 16.0, 32.0).unwrap(),
            Shape::Square,
            [1.0, 0.0, 0.0],
        );
        draw_shape(
            &mut image,
            &BBox::new(16.0, 0.0, 32.0, 32.0).unwrap(),
            Shape::Square,
            [0.0, 0.0, 1.0],
        );
        let f = roi_features(&image, &BBox::new(0.0, 0.0, 32.0, 32.0).unwrap()).unwrap();
        // Cell 0 (top-left) pure red; cell 1 (top-right) pure blue.
        assert!((f[(0, 3)] - 1.0).abs() < 1e-12);
        assert!((f[(0, 5)]).abs() < 1e-12);
        assert!((f[(0, 6)]).abs() < 1e-12);
        assert!((f[(0, 8)] - 1.0).abs() < 1e-12);
    }
}
