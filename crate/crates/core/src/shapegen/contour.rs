//! Boundary recovery from gray images: Sobel gradients, Moore-neighborhood
//! tracing and Fourier re-smoothing.

use std::collections::HashMap;

use num_complex::Complex64;

use super::raster::components_on;
use super::{
    fit_descriptors, polygon_signed_area, Connectivity, GrayImage, PixelMap, Point2, ShapeContour,
    ShapeError, IMAGE_HEIGHT, IMAGE_WIDTH,
};

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.5;

/// Components smaller than this are treated as speckle and ignored.
pub const MIN_COMPONENT_PIXELS: usize = 16;

// Clockwise in image coordinates (row axis points down), starting west.
const MOORE: [(isize, isize); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

/// Sobel gradient `(gx, gy)` at every pixel (replicated borders); `gx`
/// grows with column index, `gy` with row index.
fn sobel(image: &GrayImage) -> Vec<(f64, f64)> {
    let at = |c: isize, r: isize| {
        let c = c.clamp(0, IMAGE_WIDTH as isize - 1) as usize;
        let r = r.clamp(0, IMAGE_HEIGHT as isize - 1) as usize;
        image.get(c, r) as f64
    };
    let mut out = Vec::with_capacity(IMAGE_WIDTH * IMAGE_HEIGHT);
    for r in 0..IMAGE_HEIGHT as isize {
        for c in 0..IMAGE_WIDTH as isize {
            let gx = (at(c + 1, r - 1) + 2.0 * at(c + 1, r) + at(c + 1, r + 1))
                - (at(c - 1, r - 1) + 2.0 * at(c - 1, r) + at(c - 1, r + 1));
            let gy = (at(c - 1, r + 1) + 2.0 * at(c, r + 1) + at(c + 1, r + 1))
                - (at(c - 1, r - 1) + 2.0 * at(c, r - 1) + at(c + 1, r - 1));
            out.push((gx, gy));
        }
    }
    out
}

/// Sobel gradient magnitude, scaled so a unit step edge has magnitude 1.
pub fn sobel_magnitude(image: &GrayImage) -> Vec<f64> {
    sobel(image).into_iter().map(|(gx, gy)| gx.hypot(gy) / 4.0).collect()
}

fn bilinear(image: &GrayImage, col: f64, row: f64) -> f64 {
    let c = col.clamp(0.0, (IMAGE_WIDTH - 1) as f64);
    let r = row.clamp(0.0, (IMAGE_HEIGHT - 1) as f64);
    let (c0, r0) = (c.floor() as usize, r.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(IMAGE_WIDTH - 1), (r0 + 1).min(IMAGE_HEIGHT - 1));
    let (fc, fr) = (c - c0 as f64, r - r0 as f64);
    let v = |c, r| image.get(c, r) as f64;
    (1.0 - fr) * ((1.0 - fc) * v(c0, r0) + fc * v(c1, r0)) + fr * ((1.0 - fc) * v(c0, r1) + fc * v(c1, r1))
}

/// Moore-neighborhood trace of the outer boundary of the component whose
/// raster-first pixel is `start`. The walk is deterministic on a finite
/// state space (pixel, backtrack direction); the boundary is the cycle
/// closed by the first repeated state.
fn moore_trace(inside: &[bool], start: usize) -> Result<Vec<usize>, ShapeError> {
    let fg = |c: isize, r: isize| {
        c >= 0
            && r >= 0
            && (c as usize) < IMAGE_WIDTH
            && (r as usize) < IMAGE_HEIGHT
            && inside[r as usize * IMAGE_WIDTH + c as usize]
    };
    let dir_of = |dc: isize, dr: isize| MOORE.iter().position(|&d| d == (dc, dr)).expect("unit offset");

    let mut cur = ((start % IMAGE_WIDTH) as isize, (start / IMAGE_WIDTH) as isize);
    // The raster-first pixel always has a background west neighbour.
    let mut back = 0usize;
    let mut seen: HashMap<((isize, isize), usize), usize> = HashMap::new();
    let mut out: Vec<usize> = Vec::new();
    let limit = 4 * inside.len() + 8;
    for _ in 0..limit {
        if let Some(&first) = seen.get(&(cur, back)) {
            return Ok(out.split_off(first));
        }
        seen.insert((cur, back), out.len());
        out.push(cur.1 as usize * IMAGE_WIDTH + cur.0 as usize);
        let mut found = None;
        for step in 1..=8 {
            let d = (back + step) % 8;
            let (nc, nr) = (cur.0 + MOORE[d].0, cur.1 + MOORE[d].1);
            if fg(nc, nr) {
                let prev = (back + step - 1) % 8;
                let (bc, br) = (cur.0 + MOORE[prev].0, cur.1 + MOORE[prev].1);
                found = Some(((nc, nr), dir_of(bc - nc, br - nr)));
                break;
            }
        }
        let Some((next, next_back)) = found else {
            // Isolated pixel.
            return Ok(out);
        };
        cur = next;
        back = next_back;
    }
    Err(ShapeError::OpenBoundary)
}

/// Resamples a closed polyline at `n` points equally spaced in arc length.
fn resample_arc_length(pts: &[Point2], n: usize) -> Vec<Point2> {
    let m = pts.len();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for i in 0..m {
        let d = pts[i].dist(pts[(i + 1) % m]);
        cum.push(cum[i] + d);
    }
    let total = cum[m];
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for j in 0..n {
        let s = total * j as f64 / n as f64;
        while seg + 1 < m && cum[seg + 1] <= s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        let (a, b) = (pts[seg], pts[(seg + 1) % m]);
        out.push(Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    out
}

/// Recovers a smooth contour from a gray image.
///
/// The image is binarized at `threshold`; exactly one component of at least
/// [`MIN_COMPONENT_PIXELS`] pixels that does not touch the border must
/// remain. Its outer boundary is traced with the Moore neighborhood, each
/// boundary pixel is moved along the Sobel gradient direction to the
/// sub-pixel `threshold` crossing, and the resulting points are re-fitted
/// with Fourier descriptors of the given `order` and resampled at
/// `n_points` vertices.
pub fn extract_contour(
    image: &GrayImage,
    threshold: f64,
    map: &PixelMap,
    order: usize,
    n_points: usize,
) -> Result<ShapeContour, ShapeError> {
    if order < 1 {
        return Err(ShapeError::InvalidOrder);
    }
    let inside: Vec<bool> = image.pixels().iter().map(|&v| v as f64 >= threshold).collect();
    let comps = components_on(&inside, IMAGE_WIDTH, IMAGE_HEIGHT, Connectivity::Eight);
    let on_border = |p: usize| {
        let (c, r) = (p % IMAGE_WIDTH, p / IMAGE_WIDTH);
        c == 0 || r == 0 || c == IMAGE_WIDTH - 1 || r == IMAGE_HEIGHT - 1
    };
    let valid: Vec<&Vec<usize>> = comps
        .iter()
        .filter(|c| c.len() >= MIN_COMPONENT_PIXELS && !c.iter().any(|&p| on_border(p)))
        .collect();
    let comp = match valid.len() {
        0 => return Err(ShapeError::Empty),
        1 => valid[0],
        n => return Err(ShapeError::MultipleComponents(n)),
    };
    let mut region = vec![false; inside.len()];
    for &p in comp {
        region[p] = true;
    }
    let start = *comp.iter().min().expect("non-empty component");
    let trace = moore_trace(&region, start)?;
    if trace.len() < 8 {
        return Err(ShapeError::Degenerate);
    }

    let grad = sobel(image);
    let mut pts: Vec<Point2> = Vec::with_capacity(trace.len());
    for &p in &trace {
        let (c, r) = ((p % IMAGE_WIDTH) as f64, (p / IMAGE_WIDTH) as f64);
        let (gx, gy) = grad[p];
        let norm = gx.hypot(gy);
        let offset = if norm > 1e-9 {
            // Intensity decreases outward.
            let (nx, ny) = (-gx / norm, -gy / norm);
            let mut s_prev = 0.0;
            let mut v_prev = bilinear(image, c, r);
            let mut crossing = None;
            let step = 0.05;
            let mut s = step;
            while s <= 1.5 + 1e-12 {
                let v = bilinear(image, c + s * nx, r + s * ny);
                if v < threshold {
                    let t = if (v_prev - v).abs() > 1e-12 { (v_prev - threshold) / (v_prev - v) } else { 0.5 };
                    crossing = Some(s_prev + t * (s - s_prev));
                    break;
                }
                s_prev = s;
                v_prev = v;
                s += step;
            }
            // Binary steps cross halfway to the next pixel center.
            let hit = crossing.unwrap_or(0.5);
            (hit * nx, hit * ny)
        } else {
            (0.0, 0.0)
        };
        pts.push(map.to_domain(c + offset.0, r + offset.1));
    }
    pts.dedup_by(|a, b| a.dist(*b) < 1e-9);
    if pts.len() < 8 {
        return Err(ShapeError::Degenerate);
    }
    if polygon_signed_area(&pts) < 0.0 {
        pts.reverse();
    }
    let samples: Vec<Complex64> = resample_arc_length(&pts, n_points.max(4 * order + 4))
        .iter()
        .map(|p| Complex64::new(p.x, p.y))
        .collect();
    let descriptors = fit_descriptors(&samples, order);
    let contour = ShapeContour::from_descriptors(descriptors, n_points)?;
    if contour.area() <= 0.0 {
        return Err(ShapeError::Degenerate);
    }
    if !contour.is_simple() {
        return Err(ShapeError::SelfIntersecting);
    }
    Ok(contour)
}

#[cfg(test)]
mod tests {
    use super::super::{fourier_smooth, rasterize, sample_raw_shape, ShapeConfig};
    use super::*;

    fn gray_from(f: impl Fn(usize, usize) -> f32) -> GrayImage {
        let mut px = Vec::with_capacity(IMAGE_WIDTH * IMAGE_HEIGHT);
        for r in 0..IMAGE_HEIGHT {
            for c in 0..IMAGE_WIDTH {
                px.push(f(c, r));
            }
        }
        GrayImage::new(px).unwrap()
    }

    #[test]
    fn unit_step_has_unit_magnitude() {
        let img = gray_from(|c, _| if c < 50 { 1.0 } else { 0.0 });
        let mag = sobel_magnitude(&img);
        assert_eq!(mag[10 * IMAGE_WIDTH + 49], 1.0);
        assert_eq!(mag[10 * IMAGE_WIDTH + 50], 1.0);
        assert_eq!(mag[10 * IMAGE_WIDTH + 20], 0.0);
    }

    #[test]
    fn empty_image_is_rejected() {
        let img = gray_from(|_, _| 0.0);
        let map = PixelMap::default();
        assert_eq!(extract_contour(&img, 0.5, &map, 6, 256), Err(ShapeError::Empty));
    }

    #[test]
    fn two_blobs_are_rejected() {
        let img = gray_from(|c, r| {
            let a = (c as f64 - 30.0).powi(2) + (r as f64 - 40.0).powi(2) < 64.0;
            let b = (c as f64 - 80.0).powi(2) + (r as f64 - 40.0).powi(2) < 64.0;
            if a || b { 1.0 } else { 0.0 }
        });
        let map = PixelMap::default();
        assert_eq!(extract_contour(&img, 0.5, &map, 6, 256), Err(ShapeError::MultipleComponents(2)));
    }

    #[test]
    fn small_speckle_is_ignored() {
        let img = gray_from(|c, r| {
            let blob = (c as f64 - 40.0).powi(2) + (r as f64 - 40.0).powi(2) < 100.0;
            let speck = (c == 90 || c == 91) && (r == 20 || r == 21);
            if blob || speck { 1.0 } else { 0.0 }
        });
        let map = PixelMap::default();
        assert!(extract_contour(&img, 0.5, &map, 6, 256).is_ok());
    }

    #[test]
    fn moore_trace_of_square_visits_boundary_once() {
        let mut region = vec![false; IMAGE_WIDTH * IMAGE_HEIGHT];
        for r in 10..15 {
            for c in 20..25 {
                region[r * IMAGE_WIDTH + c] = true;
            }
        }
        let trace = moore_trace(&region, 10 * IMAGE_WIDTH + 20).unwrap();
        assert_eq!(trace.len(), 16);
        let mut sorted = trace.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
    }

    #[test]
    fn circle_round_trip_area() {
        let map = PixelMap::default();
        let raw = sample_raw_shape(0, 16, 0.5, 0.5, Point2::new(1.25, 1.5)).unwrap();
        let c = fourier_smooth(&raw, 6, 256).unwrap();
        let img = rasterize(&c, &map).unwrap();
        let back = extract_contour(&img.to_gray(), 0.5, &map, 6, 256).unwrap();
        let rel = (back.area() - c.area()).abs() / c.area();
        assert!(rel < 0.03, "relative area error {rel}");
    }

    #[test]
    fn generated_shape_round_trip_area() {
        let cfg = ShapeConfig::default();
        for seed in 0..30 {
            let raw = sample_raw_shape(seed, cfg.n_angles, cfg.r_min, cfg.r_max, cfg.center).unwrap();
            let Ok(c) = fourier_smooth(&raw, cfg.order, cfg.n_points) else { continue };
            let img = rasterize(&c, &cfg.map).unwrap();
            let back = extract_contour(&img.to_gray(), 0.5, &cfg.map, cfg.order, cfg.n_points).unwrap();
            let rel = (back.area() - c.area()).abs() / c.area();
            assert!(rel < 0.03, "seed {seed}: relative area error {rel}");
        }
    }
}
