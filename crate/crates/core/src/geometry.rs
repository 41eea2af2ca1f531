//! Planar polygon primitives used by region and word matching.
//!
//! Coordinates are image pixels with `y` growing downwards. Orientation of the
//! input vertex list does not matter; areas are always reported as absolute
//! values and clipping normalizes winding internally.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Polygons smaller than this (px²) are rejected at construction.
pub const MIN_POLYGON_AREA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("polygon needs at least 3 distinct vertices, got {0}")]
    TooFewVertices(usize),
    #[error("flat coordinate list has odd length {0}")]
    OddCoordinateCount(usize),
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("polygon area {0} px² is below the 1 px² minimum")]
    Degenerate(f64),
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
    #[error("bounding box has min > max")]
    InvertedBox,
}

impl GeometryError {
    /// Stable rule name used by document validation reports.
    pub fn rule(&self) -> &'static str {
        match self {
            GeometryError::TooFewVertices(_) | GeometryError::OddCoordinateCount(_) => {
                "polygon.min_vertices"
            }
            GeometryError::NonFinite => "polygon.finite",
            GeometryError::Degenerate(_) => "polygon.min_area",
            GeometryError::SelfIntersecting(..) => "polygon.simple",
            GeometryError::InvertedBox => "bbox.ordered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }
}

/// Twice the signed area of triangle `abc`; positive when counter-clockwise
/// in a y-up frame.
fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

/// Axis-aligned box, `min <= max` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::InvertedBox);
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// True when the boxes share interior area.
    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: f64, height: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// A simple polygon with positive area.
///
/// Construction drops repeated consecutive vertices (including a closing
/// vertex equal to the first one) and then checks vertex count, finiteness,
/// simplicity and minimum area.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let mut deduped: Vec<Point> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if deduped.last() != Some(&p) {
                deduped.push(p);
            }
        }
        while deduped.len() > 1 && deduped.first() == deduped.last() {
            deduped.pop();
        }
        if deduped.len() < 3 {
            return Err(GeometryError::TooFewVertices(deduped.len()));
        }
        if let Some((i, j)) = find_self_intersection(&deduped) {
            return Err(GeometryError::SelfIntersecting(i, j));
        }
        let area = signed_area(&deduped).abs();
        if area < MIN_POLYGON_AREA {
            return Err(GeometryError::Degenerate(area));
        }
        Ok(Self { vertices: deduped })
    }

    /// Builds a polygon from `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(coords: &[f64]) -> Result<Self, GeometryError> {
        if !coords.len().is_multiple_of(2) {
            return Err(GeometryError::OddCoordinateCount(coords.len()));
        }
        Self::new(
            coords
                .chunks_exact(2)
                .map(|c| Point::new(c[0], c[1]))
                .collect(),
        )
    }

    /// Axis-aligned rectangle, listed clockwise on screen starting top-left.
    pub fn rect(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(vec![
            Point::new(x_min, y_min),
            Point::new(x_max, y_min),
            Point::new(x_max, y_max),
            Point::new(x_min, y_max),
        ])
    }

    pub fn from_bbox(b: &BBox) -> Result<Self, GeometryError> {
        Self::rect(b.x_min, b.y_min, b.x_max, b.y_max)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn area(&self) -> f64 {
        polygon_area(self)
    }

    pub fn bbox(&self) -> BBox {
        bbox_of(self)
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        let mut sign = 0.0f64;
        for i in 0..n {
            let o = orient(
                self.vertices[i],
                self.vertices[(i + 1) % n],
                self.vertices[(i + 2) % n],
            );
            if o != 0.0 {
                if sign == 0.0 {
                    sign = o.signum();
                } else if o.signum() != sign {
                    return false;
                }
            }
        }
        true
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.vertices
                .iter()
                .map(|p| Point::new(p.x + dx, p.y + dy))
                .collect(),
        )
    }

    /// Clamps every vertex into `[0, width] x [0, height]` and revalidates.
    pub fn clamped(&self, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.vertices
                .iter()
                .map(|p| Point::new(p.x.clamp(0.0, width), p.y.clamp(0.0, height)))
                .collect(),
        )
    }

    /// Vertices in counter-clockwise order (y-up convention).
    fn ccw_vertices(&self) -> Vec<Point> {
        let mut v = self.vertices.clone();
        if signed_area(&v) < 0.0 {
            v.reverse();
        }
        v
    }

    fn cmp_vertices(&self, other: &Polygon) -> Ordering {
        for (a, b) in self.vertices.iter().zip(&other.vertices) {
            let o = a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y));
            if o != Ordering::Equal {
                return o;
            }
        }
        self.vertices.len().cmp(&other.vertices.len())
    }
}

fn signed_area(v: &[Point]) -> f64 {
    // Shoelace about the first vertex keeps magnitudes small.
    let origin = v[0];
    let mut acc = 0.0;
    for i in 1..v.len() - 1 {
        acc += v[i].sub(origin).cross(v[i + 1].sub(origin));
    }
    acc / 2.0
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, touching counts.
fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

fn find_self_intersection(v: &[Point]) -> Option<(usize, usize)> {
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        // Adjacent edge folding back onto this one.
        let c = v[(i + 2) % n];
        if orient(a, b, c) == 0.0 && a.sub(b).dot(c.sub(b)) > 0.0 {
            return Some((i, (i + 1) % n));
        }
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_intersect(a, b, v[j], v[(j + 1) % n]) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Absolute shoelace area in px².
pub fn polygon_area(p: &Polygon) -> f64 {
    signed_area(&p.vertices).abs()
}

/// Tightest axis-aligned box around the vertices.
pub fn bbox_of(p: &Polygon) -> BBox {
    let mut b = BBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for v in &p.vertices {
        b.x_min = b.x_min.min(v.x);
        b.y_min = b.y_min.min(v.y);
        b.x_max = b.x_max.max(v.x);
        b.y_max = b.y_max.max(v.y);
    }
    b
}

/// Sutherland–Hodgman clip of `subject` against the convex, counter-clockwise
/// `clip` polygon.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (ea, eb) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let inside = |p: Point| orient(ea, eb, p) >= 0.0;
        let mut prev = *input.last().unwrap();
        for &cur in &input {
            let (cur_in, prev_in) = (inside(cur), inside(prev));
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, ea, eb));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, ea, eb));
            }
            prev = cur;
        }
    }
    output
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let r = q.sub(p);
    let s = b.sub(a);
    let denom = r.cross(s);
    if denom == 0.0 {
        return q;
    }
    let t = a.sub(p).cross(s) / denom;
    Point::new(p.x + t * r.x, p.y + t * r.y)
}

fn area_of(points: &[Point]) -> f64 {
    if points.len() < 3 {
        0.0
    } else {
        signed_area(points).abs()
    }
}

/// Ear-clipping triangulation of a simple counter-clockwise polygon.
fn triangulate(ccw: &[Point]) -> Vec<[Point; 3]> {
    let mut idx: Vec<usize> = (0..ccw.len()).collect();
    let mut tris = Vec::with_capacity(ccw.len().saturating_sub(2));
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let (pi, ci, ni) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            let (a, b, c) = (ccw[pi], ccw[ci], ccw[ni]);
            let o = orient(a, b, c);
            if o == 0.0 {
                idx.remove(k);
                clipped = true;
                break;
            }
            if o < 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                if j == pi || j == ci || j == ni {
                    return false;
                }
                let p = ccw[j];
                if p == a || p == b || p == c {
                    return false;
                }
                orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
            });
            if !blocked {
                tris.push([a, b, c]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        if !clipped {
            // Only reachable through floating-point trouble; fan the rest.
            log::warn!("ear clipping stalled with {} vertices left", idx.len());
            for k in 1..idx.len() - 1 {
                tris.push([ccw[idx[0]], ccw[idx[k]], ccw[idx[k + 1]]]);
            }
            return tris;
        }
    }
    if idx.len() == 3 && orient(ccw[idx[0]], ccw[idx[1]], ccw[idx[2]]) > 0.0 {
        tris.push([ccw[idx[0]], ccw[idx[1]], ccw[idx[2]]]);
    }
    tris
}

fn convex_pieces(p: &Polygon) -> Vec<Vec<Point>> {
    let ccw = p.ccw_vertices();
    if p.is_convex() {
        vec![ccw]
    } else {
        triangulate(&ccw).into_iter().map(|t| t.to_vec()).collect()
    }
}

fn piece_bbox(piece: &[Point]) -> BBox {
    let mut b = BBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for v in piece {
        b.x_min = b.x_min.min(v.x);
        b.y_min = b.y_min.min(v.y);
        b.x_max = b.x_max.max(v.x);
        b.y_max = b.y_max.max(v.y);
    }
    b
}

/// Area of `a ∩ b`. Convex pairs are clipped directly; otherwise both sides
/// are split into triangles and the pairwise convex intersections summed.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    if !a.bbox().overlaps(&b.bbox()) {
        return 0.0;
    }
    // Fixed operand order makes the result bitwise symmetric.
    let (a, b) = if a.cmp_vertices(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    let pa = convex_pieces(a);
    let pb = convex_pieces(b);
    let bb: Vec<BBox> = pb.iter().map(|p| piece_bbox(p)).collect();
    let mut total = 0.0;
    for sa in &pa {
        let ba = piece_bbox(sa);
        for (sb, bbox_b) in pb.iter().zip(&bb) {
            if ba.overlaps(bbox_b) {
                total += area_of(&clip_convex(sa, sb));
            }
        }
    }
    total.min(a.area()).min(b.area())
}

/// Intersection over union in `[0, 1]`; 0 for disjoint inputs.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
