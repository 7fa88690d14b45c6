//! Random smooth closed shapes: polar sampling, Fourier-descriptor smoothing,
//! rasterization to fixed-size binary images and contour recovery from
//! (possibly blurry) gray images.

mod contour;
mod geometry;
mod io;
mod raster;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use thiserror::Error;

pub use contour::{extract_contour, sobel_magnitude, DEFAULT_EDGE_THRESHOLD, MIN_COMPONENT_PIXELS};
pub use geometry::{point_in_polygon, polygon_signed_area, polyline_is_simple, Point2};
pub use io::{read_contour, write_contour};
pub(crate) use raster::components_on;
pub use raster::{
    components, rasterize, BinaryImage, Connectivity, GrayImage, PixelMap, IMAGE_HEIGHT,
    IMAGE_WIDTH,
};

/// Number of points on a sampled contour polyline unless configured otherwise.
pub const DEFAULT_POLYLINE_POINTS: usize = 256;

/// Maximum number of fresh-seed attempts before [`generate_shape`] gives up.
pub const MAX_SHAPE_ATTEMPTS: u64 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("invalid radius range [{r_min}, {r_max}]")]
    InvalidRadiusRange { r_min: f64, r_max: f64 },
    #[error("need at least 8 polar samples, got {0}")]
    TooFewAngles(usize),
    #[error("descriptor order must be at least 1")]
    InvalidOrder,
    #[error("need at least 3 polyline points, got {0}")]
    TooFewPoints(usize),
    #[error("contour self-intersects")]
    SelfIntersecting,
    #[error("contour is degenerate (zero extent or non-positive area)")]
    Degenerate,
    #[error("contour touches or leaves the domain border")]
    TouchesBorder,
    #[error("empty image")]
    Empty,
    #[error("multiple components ({0})")]
    MultipleComponents(usize),
    #[error("open boundary trace")]
    OpenBoundary,
    #[error("image buffer has {got} pixels, expected {expected}")]
    ImageSize { got: usize, expected: usize },
    #[error("pixel value {value} at index {index} out of range")]
    PixelValue { index: usize, value: f64 },
    #[error("no valid shape after {0} attempts")]
    Exhausted(u64),
    #[error("contour file: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for ShapeError {
    fn from(e: std::io::Error) -> Self {
        ShapeError::Io(e.to_string())
    }
}

/// Radii sampled at equally spaced polar angles around a center.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPolarShape {
    pub center: Point2,
    pub angles: Vec<f64>,
    pub radii: Vec<f64>,
}

impl RawPolarShape {
    /// Boundary samples as complex numbers `x + i y`.
    pub fn boundary(&self) -> Vec<Complex64> {
        self.angles
            .iter()
            .zip(&self.radii)
            .map(|(&a, &r)| Complex64::new(self.center.x + r * a.cos(), self.center.y + r * a.sin()))
            .collect()
    }
}

/// Draws `n_angles` radii i.i.d. uniform on `[r_min, r_max]` at equally
/// spaced angles starting at 0.
pub fn sample_raw_shape(
    seed: u64,
    n_angles: usize,
    r_min: f64,
    r_max: f64,
    center: Point2,
) -> Result<RawPolarShape, ShapeError> {
    if n_angles < 8 {
        return Err(ShapeError::TooFewAngles(n_angles));
    }
    if !(r_min > 0.0 && r_min <= r_max && r_max.is_finite()) {
        return Err(ShapeError::InvalidRadiusRange { r_min, r_max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 2.0 * PI / n_angles as f64;
    let angles = (0..n_angles).map(|j| j as f64 * step).collect();
    let span = r_max - r_min;
    let radii = (0..n_angles)
        .map(|_| r_min + span * rng.random::<f64>())
        .collect();
    Ok(RawPolarShape { center, angles, radii })
}

/// Closed planar curve given by truncated Fourier descriptors and a sampled
/// polyline (counter-clockwise, last point not repeated).
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeContour {
    /// Coefficients `c_k` for `k = -K..=K`, stored at index `k + K`.
    descriptors: Vec<Complex64>,
    polyline: Vec<Point2>,
}

impl ShapeContour {
    /// Samples the series defined by `descriptors` (length `2K + 1`) at
    /// `n_points` equally spaced parameter values.
    pub fn from_descriptors(descriptors: Vec<Complex64>, n_points: usize) -> Result<Self, ShapeError> {
        if descriptors.len() % 2 == 0 || descriptors.len() < 3 {
            return Err(ShapeError::InvalidOrder);
        }
        if n_points < 3 {
            return Err(ShapeError::TooFewPoints(n_points));
        }
        let order = (descriptors.len() - 1) / 2;
        let polyline = (0..n_points)
            .map(|j| eval_series(&descriptors, order, j as f64 / n_points as f64))
            .collect();
        Ok(Self { descriptors, polyline })
    }

    /// Wraps an explicit polyline (e.g. read from a contour file). Clockwise
    /// input is reversed; descriptors are the full discrete basis so that the
    /// series interpolates every vertex.
    pub fn from_polyline(mut points: Vec<Point2>) -> Result<Self, ShapeError> {
        if points.len() < 3 {
            return Err(ShapeError::TooFewPoints(points.len()));
        }
        let area = polygon_signed_area(&points);
        if !area.is_finite() || area == 0.0 {
            return Err(ShapeError::Degenerate);
        }
        if area < 0.0 {
            points.reverse();
        }
        let samples: Vec<Complex64> = points.iter().map(|p| Complex64::new(p.x, p.y)).collect();
        let descriptors = fit_descriptors(&samples, samples.len() / 2);
        Ok(Self { descriptors, polyline: points })
    }

    pub fn order(&self) -> usize {
        (self.descriptors.len() - 1) / 2
    }

    pub fn descriptors(&self) -> &[Complex64] {
        &self.descriptors
    }

    pub fn polyline(&self) -> &[Point2] {
        &self.polyline
    }

    /// Evaluates the descriptor series at curve parameter `t ∈ [0, 1)`.
    pub fn eval(&self, t: f64) -> Point2 {
        eval_series(&self.descriptors, self.order(), t)
    }

    /// Enclosed area of the polyline (positive for counter-clockwise).
    pub fn area(&self) -> f64 {
        polygon_signed_area(&self.polyline)
    }

    pub fn centroid(&self) -> Point2 {
        geometry::polygon_centroid(&self.polyline)
    }

    pub fn is_simple(&self) -> bool {
        polyline_is_simple(&self.polyline)
    }

    /// Axis-aligned bounds `(min, max)` of the polyline.
    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.polyline {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// Applies an affine map `p -> A p + b` to polyline and descriptors.
    pub fn transformed(&self, a: [[f64; 2]; 2], b: Point2) -> Self {
        let map = |p: Point2| {
            Point2::new(a[0][0] * p.x + a[0][1] * p.y + b.x, a[1][0] * p.x + a[1][1] * p.y + b.y)
        };
        // z' = alpha z + beta conj(z) + b, so c'_k = alpha c_k + beta conj(c_-k).
        let alpha = Complex64::new((a[0][0] + a[1][1]) / 2.0, (a[1][0] - a[0][1]) / 2.0);
        let beta = Complex64::new((a[0][0] - a[1][1]) / 2.0, (a[0][1] + a[1][0]) / 2.0);
        let len = self.descriptors.len();
        let order = self.order();
        let descriptors = (0..len)
            .map(|idx| {
                let mut c = alpha * self.descriptors[idx] + beta * self.descriptors[len - 1 - idx].conj();
                if idx == order {
                    c += Complex64::new(b.x, b.y);
                }
                c
            })
            .collect();
        let mut polyline: Vec<Point2> = self.polyline.iter().map(|&p| map(p)).collect();
        if a[0][0] * a[1][1] - a[0][1] * a[1][0] < 0.0 {
            // Orientation-reversing maps would leave a clockwise polyline.
            polyline.reverse();
            return Self::from_polyline(polyline).expect("non-degenerate after affine map");
        }
        Self { descriptors, polyline }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        self.transformed([[1.0, 0.0], [0.0, 1.0]], Point2::new(dx, dy))
    }

    /// Uniform scaling about the polyline centroid.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.centroid();
        self.transformed(
            [[factor, 0.0], [0.0, factor]],
            Point2::new(c.x * (1.0 - factor), c.y * (1.0 - factor)),
        )
    }

    /// Rotation by `angle` about `pivot`.
    pub fn rotated(&self, angle: f64, pivot: Point2) -> Self {
        let (s, c) = angle.sin_cos();
        let b = Point2::new(pivot.x - (c * pivot.x - s * pivot.y), pivot.y - (s * pivot.x + c * pivot.y));
        self.transformed([[c, -s], [s, c]], b)
    }

    /// Reflection about the horizontal line `y = axis_y`.
    pub fn mirrored_y(&self, axis_y: f64) -> Self {
        let pts: Vec<Point2> = self
            .polyline
            .iter()
            .rev()
            .map(|p| Point2::new(p.x, 2.0 * axis_y - p.y))
            .collect();
        Self::from_polyline(pts).expect("reflection preserves non-degeneracy")
    }
}

fn eval_series(descriptors: &[Complex64], order: usize, t: f64) -> Point2 {
    let mut z = Complex64::new(0.0, 0.0);
    for (idx, c) in descriptors.iter().enumerate() {
        let k = idx as f64 - order as f64;
        z += c * Complex64::from_polar(1.0, 2.0 * PI * k * t);
    }
    Point2::new(z.re, z.im)
}

/// DFT coefficients `c_k = (1/n) Σ z_j e^{-2πi jk/n}` for `|k| ≤ order`.
///
/// For even `n` and `order ≥ n/2` the Nyquist coefficient is split evenly
/// between `k = ±n/2`, which keeps the truncated series an exact
/// interpolant of the samples.
pub(crate) fn fit_descriptors(samples: &[Complex64], order: usize) -> Vec<Complex64> {
    let n = samples.len();
    let mut buf = samples.to_vec();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    let nyquist = if n % 2 == 0 { Some(n / 2) } else { None };
    let kmax = order.min(n / 2);
    let mut out = vec![Complex64::new(0.0, 0.0); 2 * order + 1];
    for k in -(kmax as isize)..=(kmax as isize) {
        let bin = k.rem_euclid(n as isize) as usize;
        let mut c = buf[bin] * scale;
        if nyquist == Some(k.unsigned_abs()) {
            c *= 0.5;
        }
        out[(k + order as isize) as usize] = c;
    }
    out
}

/// Low-pass filters the raw polar samples to `|k| ≤ order` and resamples
/// `n_points` polyline vertices.
pub fn fourier_smooth(raw: &RawPolarShape, order: usize, n_points: usize) -> Result<ShapeContour, ShapeError> {
    if order < 1 {
        return Err(ShapeError::InvalidOrder);
    }
    if raw.radii.len() < 8 || raw.radii.len() != raw.angles.len() {
        return Err(ShapeError::TooFewAngles(raw.radii.len()));
    }
    let descriptors = fit_descriptors(&raw.boundary(), order);
    let contour = ShapeContour::from_descriptors(descriptors, n_points)?;
    if contour.area() <= 0.0 {
        return Err(ShapeError::Degenerate);
    }
    if !contour.is_simple() {
        return Err(ShapeError::SelfIntersecting);
    }
    Ok(contour)
}

/// Maximum extent of the contour transverse to the flow (`max y - min y`).
pub fn frontal_area(contour: &ShapeContour) -> Result<f64, ShapeError> {
    let (lo, hi) = contour.bounds();
    let extent = hi.y - lo.y;
    if !(extent > 1e-12) {
        return Err(ShapeError::Degenerate);
    }
    Ok(extent)
}

/// Parameters of the random shape family.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeConfig {
    pub n_angles: usize,
    pub order: usize,
    pub n_points: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub center: Point2,
    pub map: PixelMap,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            n_angles: 16,
            order: 6,
            n_points: DEFAULT_POLYLINE_POINTS,
            r_min: 0.3,
            r_max: 0.7,
            center: Point2::new(1.25, 1.5),
            map: PixelMap::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedShape {
    /// Seed that produced the accepted sample (differs from the requested
    /// seed when earlier attempts were rejected).
    pub seed: u64,
    pub attempts: u64,
    pub raw: RawPolarShape,
    pub contour: ShapeContour,
    pub image: BinaryImage,
}

/// Seed used for the `attempt`-th try at generating shape `seed`.
pub fn attempt_seed(seed: u64, attempt: u64) -> u64 {
    if attempt == 0 {
        seed
    } else {
        // splitmix64 finalizer keeps retry streams disjoint from base seeds
        let mut z = seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Samples, smooths and rasterizes one shape, resampling with a fresh seed
/// whenever the smoothed contour is invalid.
pub fn generate_shape(seed: u64, cfg: &ShapeConfig) -> Result<GeneratedShape, ShapeError> {
    for attempt in 0..MAX_SHAPE_ATTEMPTS {
        let s = attempt_seed(seed, attempt);
        let raw = sample_raw_shape(s, cfg.n_angles, cfg.r_min, cfg.r_max, cfg.center)?;
        let contour = match fourier_smooth(&raw, cfg.order, cfg.n_points) {
            Ok(c) => c,
            Err(ShapeError::SelfIntersecting | ShapeError::Degenerate) => continue,
            Err(e) => return Err(e),
        };
        match rasterize(&contour, &cfg.map) {
            Ok(image) => {
                return Ok(GeneratedShape { seed: s, attempts: attempt + 1, raw, contour, image })
            }
            Err(ShapeError::TouchesBorder | ShapeError::MultipleComponents(_) | ShapeError::Empty) => {
                continue
            }
            Err(e) => return Err(e),
        }
    }
    Err(ShapeError::Exhausted(MAX_SHAPE_ATTEMPTS))
}
