//! Bounding-box arithmetic: grid-neighbor sampling, in-image discard, union
//! boxes, IoU.
//!
//! Neighbors are same-size translated copies of a proposal placed on the
//! eight surrounding cells of a 3x3 grid. Candidates that leave the image
//! are discarded, never clipped.

use crate::error::{Error, Result};
use rand::seq::index::sample as index_sample;
use rand::Rng;

/// Axis-aligned box in continuous pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x1},{y1},{x2},{y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!(
                "degenerate extent ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Translate by `(dx, dy)`; the result is always a valid box.
    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Scale about the center by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Result<BBox> {
        let (cx, cy) = self.center();
        let hw = self.width() * factor / 2.0;
        let hh = self.height() * factor / 2.0;
        BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    pub fn inside(&self, image: ImageSize) -> bool {
        self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= image.width as f64
            && self.y2 <= image.height as f64
    }

    /// Intersection area with another box (0 when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Image bounds in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::field("image_size", "width and height must be >= 1"));
        }
        Ok(Self { width, height })
    }
}

/// The eight grid directions, indexed 1..=8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Top = 1,
    Bottom = 2,
    Left = 3,
    Right = 4,
    TopLeft = 5,
    BottomLeft = 6,
    TopRight = 7,
    BottomRight = 8,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::Top,
        Direction::Bottom,
        Direction::Left,
        Direction::Right,
        Direction::TopLeft,
        Direction::BottomLeft,
        Direction::TopRight,
        Direction::BottomRight,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Result<Direction> {
        Direction::ALL
            .iter()
            .copied()
            .find(|d| d.index() == i)
            .ok_or_else(|| Error::field("direction", format!("index {i} not in 1..=8")))
    }

    /// Grid offset in units of (box width, box height).
    fn offset(self) -> (f64, f64) {
        match self {
            Direction::Top => (0.0, -1.0),
            Direction::Bottom => (0.0, 1.0),
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::TopLeft => (-1.0, -1.0),
            Direction::BottomLeft => (-1.0, 1.0),
            Direction::TopRight => (1.0, -1.0),
            Direction::BottomRight => (1.0, 1.0),
        }
    }

    /// The opposite direction, e.g. `Left` -> `Right`.
    pub fn inverse(self) -> Direction {
        match self {
            Direction::Top => Direction::Bottom,
            Direction::Bottom => Direction::Top,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::TopLeft => Direction::BottomRight,
            Direction::BottomLeft => Direction::TopRight,
            Direction::TopRight => Direction::BottomLeft,
            Direction::BottomRight => Direction::TopLeft,
        }
    }
}

/// A proposal box plus its sampled in-image neighbor set.
#[derive(Debug, Clone)]
pub struct RegionSample {
    pub proposal: BBox,
    /// Sampled neighbors in draw order, each tagged with its grid direction.
    pub neighbors: Vec<(Direction, BBox)>,
    pub sample_id: u64,
}

impl RegionSample {
    /// The proposal together with all neighbor boxes.
    pub fn all_boxes(&self) -> Vec<BBox> {
        let mut boxes = vec![self.proposal];
        boxes.extend(self.neighbors.iter().map(|(_, b)| *b));
        boxes
    }
}

/// Same-size copy of `proposal` translated one grid cell in `direction`.
pub fn grid_neighbor(proposal: &BBox, direction: Direction) -> BBox {
    let (ox, oy) = direction.offset();
    proposal.translated(ox * proposal.width(), oy * proposal.height())
}

/// Sample up to `max_neighbors` of the eight grid neighbors that lie fully
/// inside the image. Out-of-image candidates are discarded. The subset is a
/// uniform draw without replacement; the result can be empty when every
/// candidate leaves the image.
pub fn sample_neighbors(
    proposal: &BBox,
    image: ImageSize,
    max_neighbors: usize,
    sample_id: u64,
    rng: &mut impl Rng,
) -> Result<RegionSample> {
    if !(1..=8).contains(&max_neighbors) {
        return Err(Error::field(
            "max_neighbors",
            format!("{max_neighbors} not in 1..=8"),
        ));
    }
    if !proposal.inside(image) {
        return Err(Error::OutsideImage(
            proposal.x1,
            proposal.y1,
            proposal.x2,
            proposal.y2,
            image.width,
            image.height,
        ));
    }

    let candidates: Vec<(Direction, BBox)> = Direction::ALL
        .iter()
        .map(|&d| (d, grid_neighbor(proposal, d)))
        .filter(|(_, b)| b.inside(image))
        .collect();

    let take = max_neighbors.min(candidates.len());
    let mut neighbors: Vec<(Direction, BBox)> = if take == 0 {
        Vec::new()
    } else {
        let mut picked: Vec<usize> = index_sample(rng, candidates.len(), take).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| candidates[i]).collect()
    };
    neighbors.sort_by_key(|(d, _)| d.index());

    Ok(RegionSample {
        proposal: *proposal,
        neighbors,
        sample_id,
    })
}

/// Minimal axis-aligned box containing every input box.
pub fn union_box(boxes: &[BBox]) -> Result<BBox> {
    let first = boxes.first().ok_or(Error::EmptyInput("union_box input"))?;
    let mut out = *first;
    for b in &boxes[1..] {
        out.x1 = out.x1.min(b.x1);
        out.y1 = out.y1.min(b.y1);
        out.x2 = out.x2.max(b.x2);
        out.y2 = out.y2.max(b.y2);
    }
    Ok(out)
}
