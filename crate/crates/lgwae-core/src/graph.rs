//! Lane-graph domain model: Bezier centerlines, directed connectivity and
//! coordinate normalization.
//!
//! A lane graph is a set of centerlines (each a Bezier curve over control
//! points in normalized `[0,1]²` bird's-eye-view coordinates, oriented with
//! traffic direction) plus a boolean incidence matrix: entry `(x, y)` is set
//! when centerline `x`'s end point coincides with centerline `y`'s start
//! point. Files store meters; everything model-facing is normalized.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// Endpoint coincidence tolerance in normalized units (about one meter for
/// the default extent). Exact equality is brittle under float noise.
pub const DEFAULT_CONN_EPS: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    /// Bezier parameter outside `[0, 1]`.
    ParamOutOfRange { t: f64 },
    /// Polyline sampling needs at least two samples.
    TooFewSamples { n: usize },
    /// Extent with non-positive side length.
    DegenerateExtent,
    /// Graph has no centerlines where at least one is required.
    EmptyGraph,
    /// Centerline needs at least two control points.
    TooFewControlPoints { got: usize },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::ParamOutOfRange { t } => write!(f, "curve parameter {t} outside [0, 1]"),
            GraphError::TooFewSamples { n } => write!(f, "need at least 2 samples, got {n}"),
            GraphError::DegenerateExtent => write!(f, "extent sides must be strictly positive"),
            GraphError::EmptyGraph => write!(f, "graph has no centerlines"),
            GraphError::TooFewControlPoints { got } => {
                write!(f, "centerline needs at least 2 control points, got {got}")
            }
        }
    }
}

impl core::error::Error for GraphError {}

/// Metric bird's-eye-view window the normalized coordinates map onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevExtent {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl BevExtent {
    pub fn new(x_min: f64, x_max: f64, z_min: f64, z_max: f64) -> Result<Self, GraphError> {
        if !(x_min < x_max && z_min < z_max) {
            return Err(GraphError::DegenerateExtent);
        }
        Ok(BevExtent {
            x_min,
            x_max,
            z_min,
            z_max,
        })
    }

    /// 50 m wide, 1..50 m ahead.
    pub fn default_bev() -> Self {
        BevExtent {
            x_min: -25.0,
            x_max: 25.0,
            z_min: 1.0,
            z_max: 50.0,
        }
    }

    /// Meters to normalized `[0,1]²`. Points outside the extent map outside
    /// the unit square; callers decide whether to clamp.
    pub fn normalize(&self, point_m: [f64; 2]) -> [f64; 2] {
        [
            (point_m[0] - self.x_min) / (self.x_max - self.x_min),
            (point_m[1] - self.z_min) / (self.z_max - self.z_min),
        ]
    }

    pub fn denormalize(&self, uv: [f64; 2]) -> [f64; 2] {
        [
            self.x_min + uv[0] * (self.x_max - self.x_min),
            self.z_min + uv[1] * (self.z_max - self.z_min),
        ]
    }
}

/// One lane centerline: Bezier control points in normalized coordinates plus
/// an existence probability. The association feature is only populated on
/// decoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    pub control_points: Vec<[f64; 2]>,
    pub existence: f64,
    pub assoc_feature: Option<Vec<f64>>,
}

impl Centerline {
    /// Clamps coordinates into `[0,1]²` and existence into `[0,1]`.
    pub fn new(control_points: Vec<[f64; 2]>, existence: f64) -> Result<Self, GraphError> {
        if control_points.len() < 2 {
            return Err(GraphError::TooFewControlPoints {
                got: control_points.len(),
            });
        }
        let control_points = control_points
            .into_iter()
            .map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)])
            .collect();
        Ok(Centerline {
            control_points,
            existence: existence.clamp(0.0, 1.0),
            assoc_feature: None,
        })
    }

    pub fn start(&self) -> [f64; 2] {
        self.control_points[0]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.control_points.last().expect("at least two points")
    }

    pub fn point_at(&self, t: f64) -> Result<[f64; 2], GraphError> {
        bezier_point(&self.control_points, t)
    }

    pub fn sample(&self, n_samples: usize) -> Result<Vec<[f64; 2]>, GraphError> {
        sample_polyline(&self.control_points, n_samples)
    }
}

/// Bernstein-form evaluation of the degree `B-1` Bezier curve.
pub fn bezier_point(control_points: &[[f64; 2]], t: f64) -> Result<[f64; 2], GraphError> {
    if control_points.len() < 2 {
        return Err(GraphError::TooFewControlPoints {
            got: control_points.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(GraphError::ParamOutOfRange { t });
    }
    let n = control_points.len() - 1;
    let mut out = [0.0, 0.0];
    // binomial(n, i) built incrementally; exact for the small degrees used here
    let mut binom = 1.0;
    for (i, p) in control_points.iter().enumerate() {
        let w = binom * powi(t, i) * powi(1.0 - t, n - i);
        out[0] += w * p[0];
        out[1] += w * p[1];
        binom = binom * (n - i) as f64 / (i + 1) as f64;
    }
    Ok(out)
}

fn powi(base: f64, exp: usize) -> f64 {
    let mut out = 1.0;
    for _ in 0..exp {
        out *= base;
    }
    out
}

/// `n_samples` points at `t = i / (n_samples - 1)`.
pub fn sample_polyline(
    control_points: &[[f64; 2]],
    n_samples: usize,
) -> Result<Vec<[f64; 2]>, GraphError> {
    if n_samples < 2 {
        return Err(GraphError::TooFewSamples { n: n_samples });
    }
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let t = i as f64 / (n_samples - 1) as f64;
        out.push(bezier_point(control_points, t)?);
    }
    Ok(out)
}

pub fn point_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    math::hypot(a[0] - b[0], a[1] - b[1])
}

/// Square boolean incidence matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl IncidenceMatrix {
    pub fn empty(n: usize) -> Self {
        IncidenceMatrix {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut m = IncidenceMatrix::empty(n);
        for &(a, b) in edges {
            m.set(a, b, true);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, from: usize, to: usize) -> bool {
        self.bits[from * self.n + to]
    }

    pub fn set(&mut self, from: usize, to: usize, value: bool) {
        self.bits[from * self.n + to] = value;
    }

    /// Edges in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for from in 0..self.n {
            for to in 0..self.n {
                if self.get(from, to) {
                    out.push((from, to));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Invariant violations reported by [`LaneGraph::validate`]. Violations are
/// data, not errors; estimated graphs routinely carry some.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    SelfLoop { index: usize },
    IncidenceSize { expected: usize, got: usize },
    EdgeGap { from: usize, to: usize, gap: f64 },
    MixedControlPointCount { index: usize, expected: usize, got: usize },
    CoordinateOutOfRange { index: usize, point: usize },
    ExistenceOutOfRange { index: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop { index } => write!(f, "centerline {index} connects to itself"),
            Violation::IncidenceSize { expected, got } => {
                write!(f, "incidence is {got}x{got}, expected {expected}x{expected}")
            }
            Violation::EdgeGap { from, to, gap } => {
                write!(f, "edge {from}->{to} endpoint gap {gap:.4} exceeds tolerance")
            }
            Violation::MixedControlPointCount {
                index,
                expected,
                got,
            } => write!(
                f,
                "centerline {index} has {got} control points, dataset uses {expected}"
            ),
            Violation::CoordinateOutOfRange { index, point } => {
                write!(f, "centerline {index} control point {point} outside [0,1]^2")
            }
            Violation::ExistenceOutOfRange { index, value } => {
                write!(f, "centerline {index} existence {value} outside [0,1]")
            }
        }
    }
}

/// Directed lane graph over Bezier centerlines.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneGraph {
    pub centerlines: Vec<Centerline>,
    pub incidence: IncidenceMatrix,
    pub extent: BevExtent,
}

impl LaneGraph {
    pub fn new(
        centerlines: Vec<Centerline>,
        incidence: IncidenceMatrix,
        extent: BevExtent,
    ) -> Self {
        LaneGraph {
            centerlines,
            incidence,
            extent,
        }
    }

    pub fn len(&self) -> usize {
        self.centerlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centerlines.is_empty()
    }

    /// Recompute incidence purely from endpoint distance:
    /// `A[x][y] = dist(end(x), start(y)) <= eps`, excluding self loops.
    pub fn derive_incidence(&self, conn_eps: f64) -> Result<IncidenceMatrix, GraphError> {
        if self.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        let n = self.len();
        let mut m = IncidenceMatrix::empty(n);
        for x in 0..n {
            let end = self.centerlines[x].end();
            for y in 0..n {
                if x == y {
                    continue;
                }
                let start = self.centerlines[y].start();
                if point_distance(end, start) <= conn_eps {
                    m.set(x, y, true);
                }
            }
        }
        Ok(m)
    }

    /// All invariant violations; empty for a well-formed ground-truth graph.
    pub fn validate(&self, conn_eps: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.len();
        if self.incidence.len() != n {
            out.push(Violation::IncidenceSize {
                expected: n,
                got: self.incidence.len(),
            });
            return out;
        }
        let expected_b = self.centerlines.first().map_or(0, |c| c.control_points.len());
        for (i, cl) in self.centerlines.iter().enumerate() {
            if cl.control_points.len() != expected_b {
                out.push(Violation::MixedControlPointCount {
                    index: i,
                    expected: expected_b,
                    got: cl.control_points.len(),
                });
            }
            for (p, pt) in cl.control_points.iter().enumerate() {
                if !(0.0..=1.0).contains(&pt[0]) || !(0.0..=1.0).contains(&pt[1]) {
                    out.push(Violation::CoordinateOutOfRange { index: i, point: p });
                }
            }
            if !(0.0..=1.0).contains(&cl.existence) {
                out.push(Violation::ExistenceOutOfRange {
                    index: i,
                    value: cl.existence,
                });
            }
        }
        for x in 0..n {
            if self.incidence.get(x, x) {
                out.push(Violation::SelfLoop { index: x });
            }
            for y in 0..n {
                if x != y && self.incidence.get(x, y) {
                    let gap = point_distance(self.centerlines[x].end(), self.centerlines[y].start());
                    if gap > conn_eps {
                        out.push(Violation::EdgeGap { from: x, to: y, gap });
                    }
                }
            }
        }
        out
    }

    /// Keep centerlines with existence at or above the threshold, remapping
    /// the incidence matrix onto the survivors.
    pub fn filter_existence(&self, threshold: f64) -> LaneGraph {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.centerlines[i].existence >= threshold)
            .collect();
        let mut centerlines = Vec::with_capacity(keep.len());
        for &i in &keep {
            centerlines.push(self.centerlines[i].clone());
        }
        let mut incidence = IncidenceMatrix::empty(keep.len());
        for (a, &ia) in keep.iter().enumerate() {
            for (b, &ib) in keep.iter().enumerate() {
                if self.incidence.get(ia, ib) {
                    incidence.set(a, b, true);
                }
            }
        }
        LaneGraph::new(centerlines, incidence, self.extent)
    }

    /// Fixed control-point count of this graph, when consistent.
    pub fn control_point_count(&self) -> Option<usize> {
        let b = self.centerlines.first()?.control_points.len();
        self.centerlines
            .iter()
            .all(|c| c.control_points.len() == b)
            .then_some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cl(points: &[[f64; 2]]) -> Centerline {
        Centerline::new(points.to_vec(), 1.0).unwrap()
    }

    #[test]
    fn bezier_endpoints_exact() {
        let pts = [[0.1, 0.2], [0.6, 0.9], [0.8, 0.3]];
        assert_eq!(bezier_point(&pts, 0.0).unwrap(), pts[0]);
        assert_eq!(bezier_point(&pts, 1.0).unwrap(), pts[2]);
    }

    #[test]
    fn bezier_quadratic_midpoint_closed_form() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let p = bezier_point(&pts, 0.5).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bezier_param_out_of_range() {
        let pts = [[0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(
            bezier_point(&pts, 1.5),
            Err(GraphError::ParamOutOfRange { .. })
        ));
    }

    /// de Casteljau recursion as an independent oracle.
    fn de_casteljau(points: &[[f64; 2]], t: f64) -> [f64; 2] {
        let mut work: Vec<[f64; 2]> = points.to_vec();
        while work.len() > 1 {
            for i in 0..work.len() - 1 {
                work[i] = [
                    (1.0 - t) * work[i][0] + t * work[i + 1][0],
                    (1.0 - t) * work[i][1] + t * work[i + 1][1],
                ];
            }
            work.pop();
        }
        work[0]
    }

    #[test]
    fn bernstein_matches_de_casteljau() {
        use rand::Rng;
        for b in 2..=6 {
            let mut rng = crate::rng::derive_rng(5, 50, b as u64);
            for _ in 0..50 {
                let pts: Vec<[f64; 2]> = (0..b)
                    .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
                    .collect();
                let t: f64 = rng.gen_range(0.0..=1.0);
                let fast = bezier_point(&pts, t).unwrap();
                let oracle = de_casteljau(&pts, t);
                assert!((fast[0] - oracle[0]).abs() < 1e-12);
                assert!((fast[1] - oracle[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_polyline_endpoints_and_pointwise() {
        let pts = [[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]];
        let two = sample_polyline(&pts, 2).unwrap();
        assert_eq!(two, vec![[0.0, 0.0], [1.0, 1.0]]);
        let three = sample_polyline(&pts, 3).unwrap();
        assert_eq!(three[1], [0.5, 0.5]);
        let hundred = sample_polyline(&pts, 100).unwrap();
        for (i, p) in hundred.iter().enumerate() {
            let t = i as f64 / 99.0;
            let q = bezier_point(&pts, t).unwrap();
            assert_eq!(*p, q);
        }
        assert!(matches!(
            sample_polyline(&pts, 1),
            Err(GraphError::TooFewSamples { n: 1 })
        ));
    }

    #[test]
    fn normalize_corners_and_midpoint() {
        let e = BevExtent::default_bev();
        assert_eq!(e.normalize([-25.0, 1.0]), [0.0, 0.0]);
        assert_eq!(e.normalize([25.0, 50.0]), [1.0, 1.0]);
        assert_eq!(e.normalize([0.0, 25.5]), [0.5, 0.5]);
    }

    #[test]
    fn normalize_round_trip() {
        use rand::Rng;
        let e = BevExtent::new(-12.0, 40.0, 2.5, 61.0).unwrap();
        let mut rng = crate::rng::derive_rng(9, 51, 0);
        for _ in 0..200 {
            let p = [rng.gen_range(-30.0..50.0), rng.gen_range(-5.0..70.0)];
            let rt = e.denormalize(e.normalize(p));
            assert!((rt[0] - p[0]).abs() < 1e-12);
            assert!((rt[1] - p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_extent_rejected() {
        assert!(matches!(
            BevExtent::new(1.0, 1.0, 0.0, 5.0),
            Err(GraphError::DegenerateExtent)
        ));
    }

    #[test]
    fn derive_incidence_is_directed() {
        let a = cl(&[[0.1, 0.1], [0.3, 0.3], [0.5, 0.5]]);
        let b = cl(&[[0.5, 0.5], [0.7, 0.7], [0.9, 0.9]]);
        let g = LaneGraph::new(
            vec![a, b],
            IncidenceMatrix::empty(2),
            BevExtent::default_bev(),
        );
        let m = g.derive_incidence(DEFAULT_CONN_EPS).unwrap();
        assert!(m.get(0, 1));
        assert!(!m.get(1, 0));
    }

    #[test]
    fn single_centerline_no_self_loop() {
        let g = LaneGraph::new(
            vec![cl(&[[0.2, 0.2], [0.4, 0.4]])],
            IncidenceMatrix::empty(1),
            BevExtent::default_bev(),
        );
        let m = g.derive_incidence(DEFAULT_CONN_EPS).unwrap();
        assert!(!m.get(0, 0));
        assert_eq!(m.edge_count(), 0);
    }

    #[test]
    fn validate_flags_self_loop_and_gap() {
        let a = cl(&[[0.1, 0.1], [0.3, 0.3], [0.5, 0.5]]);
        let b = cl(&[[0.6, 0.5], [0.7, 0.7], [0.9, 0.9]]);
        let mut inc = IncidenceMatrix::empty(2);
        inc.set(0, 0, true);
        inc.set(0, 1, true); // gap 0.1 > eps
        let g = LaneGraph::new(vec![a, b], inc, BevExtent::default_bev());
        let violations = g.validate(DEFAULT_CONN_EPS);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::SelfLoop { index: 0 })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::EdgeGap { from: 0, to: 1, .. })));
    }

    #[test]
    fn validate_clean_graph_is_empty() {
        let a = cl(&[[0.1, 0.1], [0.3, 0.3], [0.5, 0.5]]);
        let b = cl(&[[0.5, 0.5], [0.7, 0.7], [0.9, 0.9]]);
        let mut inc = IncidenceMatrix::empty(2);
        inc.set(0, 1, true);
        let g = LaneGraph::new(vec![a, b], inc, BevExtent::default_bev());
        assert!(g.validate(DEFAULT_CONN_EPS).is_empty());
    }

    #[test]
    fn filter_existence_remaps_edges() {
        let mut lo = cl(&[[0.1, 0.1], [0.2, 0.2]]);
        lo.existence = 0.2;
        let hi1 = cl(&[[0.3, 0.3], [0.5, 0.5]]);
        let hi2 = cl(&[[0.5, 0.5], [0.7, 0.7]]);
        let mut inc = IncidenceMatrix::empty(3);
        inc.set(1, 2, true);
        inc.set(0, 1, true);
        let g = LaneGraph::new(vec![lo, hi1, hi2], inc, BevExtent::default_bev());
        let f = g.filter_existence(0.5);
        assert_eq!(f.len(), 2);
        assert!(f.incidence.get(0, 1));
        assert!(!f.incidence.get(1, 0));
    }
}
