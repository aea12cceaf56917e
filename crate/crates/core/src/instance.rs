//! Instances, tours, cost arithmetic, generators and the shared coordinate frame.

use std::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// Euclidean distance. Written as `sqrt(dx² + dy²)` so the result is
    /// exactly symmetric and identical on every IEEE-754 platform.
    #[inline]
    pub fn dist(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TspInstance {
    coords: Vec<Point>,
    pub name: Option<String>,
}

impl TspInstance {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyInstance);
        }
        if let Some(i) = coords.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::NonFiniteCoordinate(i));
        }
        Ok(TspInstance { coords, name: None })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    #[inline]
    pub fn point(&self, i: usize) -> Point {
        self.coords[i]
    }

    #[inline]
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.coords[i].dist(self.coords[j])
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = self.coords[0];
        let mut hi = self.coords[0];
        for p in &self.coords[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }
}

/// A closed tour given as a visiting order. Validity is checked by
/// [`validate_tour`]; construction itself does not validate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tour {
    pub order: Vec<usize>,
}

impl Tour {
    pub fn new(order: Vec<usize>) -> Self {
        Tour { order }
    }

    pub fn identity(n: usize) -> Self {
        Tour { order: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TourViolation {
    WrongLength { expected: usize, found: usize },
    OutOfRange { index: usize, node: usize },
    Duplicate { index: usize, node: usize },
}

impl fmt::Display for TourViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TourViolation::WrongLength { expected, found } => {
                write!(f, "expected {expected} nodes, found {found}")
            }
            TourViolation::OutOfRange { index, node } => {
                write!(f, "node {node} out of range at index {index}")
            }
            TourViolation::Duplicate { index, node } => {
                write!(f, "duplicate node {node} at index {index}")
            }
        }
    }
}

/// Checks that `order` is a permutation of `0..n`, reporting the first
/// offending index in scan order.
pub fn validate_order(n: usize, order: &[usize]) -> std::result::Result<(), TourViolation> {
    let mut seen = vec![false; n];
    for (index, &node) in order.iter().enumerate() {
        if node >= n {
            return Err(TourViolation::OutOfRange { index, node });
        }
        if std::mem::replace(&mut seen[node], true) {
            return Err(TourViolation::Duplicate { index, node });
        }
    }
    if order.len() != n {
        return Err(TourViolation::WrongLength { expected: n, found: order.len() });
    }
    Ok(())
}

pub fn validate_tour(instance: &TspInstance, tour: &Tour) -> std::result::Result<(), TourViolation> {
    validate_order(instance.len(), &tour.order)
}

/// Closed-tour length, accumulated in index order. Assumes a valid tour.
pub(crate) fn closed_length_unchecked(instance: &TspInstance, order: &[usize]) -> f64 {
    let n = order.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n - 1 {
        total += instance.cost(order[i], order[i + 1]);
    }
    total + instance.cost(order[n - 1], order[0])
}

/// Open-path length, accumulated in index order. Assumes distinct nodes.
pub(crate) fn open_length_unchecked(instance: &TspInstance, path: &[usize]) -> f64 {
    path.windows(2).fold(0.0, |acc, w| acc + instance.cost(w[0], w[1]))
}

pub fn tour_length(instance: &TspInstance, tour: &Tour) -> Result<f64> {
    validate_tour(instance, tour).map_err(Error::TourInvalid)?;
    Ok(closed_length_unchecked(instance, &tour.order))
}

pub fn subsequence_length(instance: &TspInstance, path: &[usize]) -> Result<f64> {
    let n = instance.len();
    let mut seen = vec![false; n];
    for (index, &node) in path.iter().enumerate() {
        if node >= n {
            return Err(Error::TourInvalid(TourViolation::OutOfRange { index, node }));
        }
        if std::mem::replace(&mut seen[node], true) {
            return Err(Error::PathInvalid { index, node });
        }
    }
    Ok(open_length_unchecked(instance, path))
}

/// Point distributions for synthetic instances. Only `Uniform` follows a
/// published recipe; the other three are local stand-ins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointDistribution {
    Uniform,
    Clustered,
    Explosion,
    Implosion,
}

impl std::str::FromStr for PointDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PointDistribution::Uniform),
            "clustered" => Ok(PointDistribution::Clustered),
            "explosion" => Ok(PointDistribution::Explosion),
            "implosion" => Ok(PointDistribution::Implosion),
            other => Err(Error::Config(format!("unknown distribution `{other}`"))),
        }
    }
}

const CLUSTER_CENTERS: usize = 8;
const CLUSTER_SIGMA: f64 = 0.05;
const IMPLOSION_FACTOR: f64 = 0.5;

fn uniform_points(n: usize, r: &mut rng::SeededRng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let x = rng::unit(r);
            let y = rng::unit(r);
            Point::new(x, y)
        })
        .collect()
}

pub fn generate_uniform(n: usize, seed: u64) -> Result<TspInstance> {
    generate(PointDistribution::Uniform, n, seed)
}

pub fn generate(dist: PointDistribution, n: usize, seed: u64) -> Result<TspInstance> {
    if n == 0 {
        return Err(Error::EmptyInstance);
    }
    let mut r = rng::rng(seed);
    let coords = match dist {
        PointDistribution::Uniform => uniform_points(n, &mut r),
        PointDistribution::Clustered => {
            let centers = uniform_points(CLUSTER_CENTERS, &mut r);
            let noise = Normal::new(0.0, CLUSTER_SIGMA).expect("valid sigma");
            (0..n)
                .map(|_| {
                    let c = centers[rng::index(&mut r, CLUSTER_CENTERS)];
                    let x = (c.x + noise.sample(&mut r)).clamp(0.0, 1.0);
                    let y = (c.y + noise.sample(&mut r)).clamp(0.0, 1.0);
                    Point::new(x, y)
                })
                .collect()
        }
        PointDistribution::Explosion | PointDistribution::Implosion => {
            let mut pts = uniform_points(n, &mut r);
            let center = Point::new(rng::unit(&mut r), rng::unit(&mut r));
            let radius = 0.1 + 0.4 * rng::unit(&mut r);
            for p in &mut pts {
                let d = p.dist(center);
                if d >= radius || d == 0.0 {
                    continue;
                }
                let factor = if dist == PointDistribution::Explosion { radius / d } else { IMPLOSION_FACTOR };
                p.x = (center.x + (p.x - center.x) * factor).clamp(0.0, 1.0);
                p.y = (center.y + (p.y - center.y) * factor).clamp(0.0, 1.0);
            }
            pts
        }
    };
    TspInstance::new(coords)
}

/// Random insertion: nodes are inserted in a seeded random order, each at
/// the position that minimizes the length increase (lowest position on ties).
pub fn random_insertion(instance: &TspInstance, seed: u64) -> Tour {
    let n = instance.len();
    let mut pending: Vec<usize> = (0..n).collect();
    pending.shuffle(&mut rng::rng(seed));

    let mut order = Vec::with_capacity(n);
    for &v in &pending {
        let len = order.len();
        if len < 2 {
            order.push(v);
            continue;
        }
        let mut best_pos = 0;
        let mut best_delta = f64::INFINITY;
        for pos in 0..len {
            let a = order[pos];
            let b = order[(pos + 1) % len];
            let delta = instance.cost(a, v) + instance.cost(v, b) - instance.cost(a, b);
            if delta < best_delta {
                best_delta = delta;
                best_pos = pos;
            }
        }
        order.insert(best_pos + 1, v);
    }
    Tour::new(order)
}

/// Centering plus uniform scaling that maps a point set into `[-1, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedFrame {
    pub mean: Point,
    pub scale: f64,
}

impl NormalizedFrame {
    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        Point::new((p.x - self.mean.x) / self.scale, (p.y - self.mean.y) / self.scale)
    }

    #[inline]
    pub fn invert(&self, p: Point) -> Point {
        Point::new(p.x * self.scale + self.mean.x, p.y * self.scale + self.mean.y)
    }

    pub fn fit(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInstance);
        }
        let n = points.len() as f64;
        let mean = Point::new(points.iter().map(|p| p.x).sum::<f64>() / n, points.iter().map(|p| p.y).sum::<f64>() / n);
        // The maximum is taken after centering.
        let scale = points.iter().map(|p| (p.x - mean.x).abs().max((p.y - mean.y).abs())).fold(0.0, f64::max);
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::DegenerateGeometry);
        }
        Ok(NormalizedFrame { mean, scale })
    }
}

pub fn normalize_coords(points: &[Point]) -> Result<(Vec<Point>, NormalizedFrame)> {
    let frame = NormalizedFrame::fit(points)?;
    Ok((points.iter().map(|&p| frame.apply(p)).collect(), frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square() -> TspInstance {
        TspInstance::new(vec![Point::new(0.0, 0.0), Point::new(0.0, 1.0), Point::new(1.0, 1.0), Point::new(1.0, 0.0)])
            .unwrap()
    }

    #[test]
    fn square_perimeter() {
        assert_eq!(tour_length(&square(), &Tour::identity(4)).unwrap(), 4.0);
        assert_eq!(subsequence_length(&square(), &[0, 1, 2, 3]).unwrap(), 3.0);
    }

    #[test]
    fn two_nodes_out_and_back() {
        let inst = TspInstance::new(vec![Point::new(0.0, 0.0), Point::new(3.0, 4.0)]).unwrap();
        assert_eq!(tour_length(&inst, &Tour::identity(2)).unwrap(), 10.0);
        assert_eq!(subsequence_length(&inst, &[0, 1]).unwrap(), 5.0);
    }

    #[test]
    fn invalid_tours_are_reported() {
        let inst = generate_uniform(3, 1).unwrap();
        assert_eq!(
            validate_tour(&inst, &Tour::new(vec![0, 0, 1])),
            Err(TourViolation::Duplicate { index: 1, node: 0 })
        );
        assert_eq!(
            validate_tour(&inst, &Tour::new(vec![0, 1, 5])),
            Err(TourViolation::OutOfRange { index: 2, node: 5 })
        );
        assert!(matches!(
            tour_length(&inst, &Tour::new(vec![0, 1])),
            Err(Error::TourInvalid(TourViolation::WrongLength { .. }))
        ));
        assert!(validate_tour(&generate_uniform(5, 2).unwrap(), &Tour::identity(5)).is_ok());
        assert!(matches!(subsequence_length(&inst, &[0, 1, 0]), Err(Error::PathInvalid { index: 2, node: 0 })));
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert!(matches!(generate_uniform(0, 1), Err(Error::EmptyInstance)));
        assert!(matches!(TspInstance::new(vec![Point::new(f64::NAN, 0.0)]), Err(Error::NonFiniteCoordinate(0))));
    }

    #[test]
    fn generation_is_deterministic_and_in_unit_square() {
        let a = generate_uniform(100, 42).unwrap();
        let b = generate_uniform(100, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_uniform(100, 43).unwrap());
        let one = generate_uniform(1, 9).unwrap();
        let p = one.point(0);
        assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
        for dist in [PointDistribution::Clustered, PointDistribution::Explosion, PointDistribution::Implosion] {
            let inst = generate(dist, 300, 5).unwrap();
            assert!(inst.coords().iter().all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
        }
    }

    #[test]
    fn uniform_mean_near_half() {
        let inst = generate_uniform(10_000, 2024).unwrap();
        let n = inst.len() as f64;
        let mx = inst.coords().iter().map(|p| p.x).sum::<f64>() / n;
        let my = inst.coords().iter().map(|p| p.y).sum::<f64>() / n;
        assert!((mx - 0.5).abs() < 0.01, "{mx}");
        assert!((my - 0.5).abs() < 0.01, "{my}");
    }

    #[test]
    fn insertion_small_cases() {
        let one = generate_uniform(1, 3).unwrap();
        let t = random_insertion(&one, 0);
        assert_eq!(t.order, vec![0]);
        assert_eq!(tour_length(&one, &t).unwrap(), 0.0);

        let tri = TspInstance::new(vec![Point::new(0.0, 0.0), Point::new(3.0, 0.0), Point::new(0.0, 4.0)]).unwrap();
        for seed in 0..5 {
            let len = tour_length(&tri, &random_insertion(&tri, seed)).unwrap();
            assert_relative_eq!(len, 12.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        let (pts, frame) = normalize_coords(&[Point::new(-1.0, -1.0), Point::new(1.0, 1.0)]).unwrap();
        assert_eq!(pts, vec![Point::new(-1.0, -1.0), Point::new(1.0, 1.0)]);
        assert_eq!(frame.mean, Point::new(0.0, 0.0));
        assert_eq!(frame.scale, 1.0);
        assert!(matches!(
            normalize_coords(&[Point::new(5.0, 5.0), Point::new(5.0, 5.0)]),
            Err(Error::DegenerateGeometry)
        ));
    }

    #[test]
    fn normalized_statistics() {
        let inst = generate_uniform(50, 77).unwrap();
        let (pts, frame) = normalize_coords(inst.coords()).unwrap();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.y).sum::<f64>() / n;
        let max_abs = pts.iter().map(|p| p.x.abs().max(p.y.abs())).fold(0.0, f64::max);
        assert!(mx.abs() < 1e-12 && my.abs() < 1e-12);
        assert!((max_abs - 1.0).abs() < 1e-12);
        for (orig, p) in inst.coords().iter().zip(&pts) {
            let back = frame.invert(*p);
            assert_relative_eq!(back.x, orig.x, max_relative = 1e-12);
            assert_relative_eq!(back.y, orig.y, max_relative = 1e-12);
        }
    }
}
