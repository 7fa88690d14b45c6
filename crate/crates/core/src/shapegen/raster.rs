use super::{point_in_polygon, Point2, ShapeContour, ShapeError};

pub const IMAGE_WIDTH: usize = 112;
pub const IMAGE_HEIGHT: usize = 84;
const PIXELS: usize = IMAGE_WIDTH * IMAGE_HEIGHT;

/// Fixed affine map from the flow domain `[0, lx] × [0, ly]` to the image
/// raster. Row 0 is the top of the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMap {
    pub lx: f64,
    pub ly: f64,
}

impl Default for PixelMap {
    fn default() -> Self {
        Self { lx: 4.0, ly: 3.0 }
    }
}

impl PixelMap {
    pub fn pixel_width(&self) -> f64 {
        self.lx / IMAGE_WIDTH as f64
    }

    pub fn pixel_height(&self) -> f64 {
        self.ly / IMAGE_HEIGHT as f64
    }

    /// Domain coordinates of the center of pixel `(col, row)`.
    pub fn pixel_center(&self, col: usize, row: usize) -> Point2 {
        self.to_domain(col as f64, row as f64)
    }

    /// Maps continuous pixel coordinates (pixel `(c, r)` centered at `(c, r)`)
    /// to domain coordinates.
    pub fn to_domain(&self, col: f64, row: f64) -> Point2 {
        Point2::new(
            (col + 0.5) * self.pixel_width(),
            self.ly - (row + 0.5) * self.pixel_height(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pixels: Vec<u8>,
}

impl BinaryImage {
    /// Row-major pixels, one byte per pixel, each 0 or 1.
    pub fn new(pixels: Vec<u8>) -> Result<Self, ShapeError> {
        if pixels.len() != PIXELS {
            return Err(ShapeError::ImageSize { got: pixels.len(), expected: PIXELS });
        }
        if let Some(index) = pixels.iter().position(|&p| p > 1) {
            return Err(ShapeError::PixelValue { index, value: pixels[index] as f64 });
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.pixels[row * IMAGE_WIDTH + col] == 1
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn to_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p == 1).collect()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage { pixels: self.pixels.iter().map(|&p| p as f32).collect() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.clone()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ShapeError> {
        Self::new(bytes.to_vec())
    }

    /// One 4-connected component that does not touch the border.
    pub fn validate(&self) -> Result<(), ShapeError> {
        let mask = self.to_mask();
        if touches_border(&mask) {
            return Err(ShapeError::TouchesBorder);
        }
        match components(&mask, Connectivity::Four).len() {
            0 => Err(ShapeError::Empty),
            1 => Ok(()),
            n => Err(ShapeError::MultipleComponents(n)),
        }
    }
}

/// Gray raster with values in `[0, 1]`, e.g. a decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(pixels: Vec<f32>) -> Result<Self, ShapeError> {
        if pixels.len() != PIXELS {
            return Err(ShapeError::ImageSize { got: pixels.len(), expected: PIXELS });
        }
        if let Some(index) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(ShapeError::PixelValue { index, value: pixels[index] as f64 });
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.pixels[row * IMAGE_WIDTH + col]
    }

    /// One byte per pixel, `round(255 v)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ShapeError> {
        Self::new(bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Connected components of `true` pixels on the fixed raster, each as a
/// list of pixel indices in discovery order. Components are ordered by
/// their first pixel in row-major order.
pub fn components(mask: &[bool], conn: Connectivity) -> Vec<Vec<usize>> {
    components_on(mask, IMAGE_WIDTH, IMAGE_HEIGHT, conn)
}

pub(crate) fn components_on(mask: &[bool], width: usize, height: usize, conn: Connectivity) -> Vec<Vec<usize>> {
    let mut label = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1)],
    };
    for start in 0..mask.len() {
        if !mask[start] || label[start] {
            continue;
        }
        let mut comp = Vec::new();
        label[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (c, r) = ((p % width) as isize, (p / width) as isize);
            for &(dc, dr) in offsets {
                let (nc, nr) = (c + dc, r + dr);
                if nc < 0 || nr < 0 || nc >= width as isize || nr >= height as isize {
                    continue;
                }
                let q = nr as usize * width + nc as usize;
                if mask[q] && !label[q] {
                    label[q] = true;
                    stack.push(q);
                }
            }
        }
        out.push(comp);
    }
    out
}

fn touches_border(mask: &[bool]) -> bool {
    (0..IMAGE_WIDTH).any(|c| mask[c] || mask[(IMAGE_HEIGHT - 1) * IMAGE_WIDTH + c])
        || (0..IMAGE_HEIGHT).any(|r| mask[r * IMAGE_WIDTH] || mask[r * IMAGE_WIDTH + IMAGE_WIDTH - 1])
}

/// Pixel is 1 iff its center lies inside the contour (even-odd rule).
pub fn rasterize(contour: &ShapeContour, map: &PixelMap) -> Result<BinaryImage, ShapeError> {
    let (lo, hi) = contour.bounds();
    if !(lo.x > 0.0 && lo.y > 0.0 && hi.x < map.lx && hi.y < map.ly) {
        return Err(ShapeError::TouchesBorder);
    }
    let poly = contour.polyline();
    let mut pixels = vec![0u8; PIXELS];
    for row in 0..IMAGE_HEIGHT {
        for col in 0..IMAGE_WIDTH {
            let p = map.pixel_center(col, row);
            if p.x < lo.x || p.x > hi.x || p.y < lo.y || p.y > hi.y {
                continue;
            }
            if point_in_polygon(p, poly) {
                pixels[row * IMAGE_WIDTH + col] = 1;
            }
        }
    }
    let image = BinaryImage { pixels };
    image.validate()?;
    Ok(image)
}
