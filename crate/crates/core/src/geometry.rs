//! Masks, normalized boxes and the box overlap measures shared by matching,
//! losses and evaluation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Validation(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn same_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Validation(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Binary foreground mask.
pub type BinaryMask = Grid<bool>;

/// Per-pixel probabilities or logits.
pub type ScoreMap = Grid<f64>;

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }
}

/// Bilinear resampling with half-pixel centers (the `align_corners = false`
/// convention). Returns the `(dst, src)` interpolation matrix row-major.
pub fn bilinear_weights(src: usize, dst: usize) -> Vec<f64> {
    let mut weights = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for d in 0..dst {
        let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        weights[d * src + lo] += 1.0 - frac;
        weights[d * src + hi] += frac;
    }
    weights
}

/// Bilinearly resamples a score map to `height x width`.
pub fn resize_bilinear(map: &ScoreMap, height: usize, width: usize) -> ScoreMap {
    if map.dims() == (height, width) {
        return map.clone();
    }
    let (sh, sw) = map.dims();
    let wy = bilinear_weights(sh, height);
    let wx = bilinear_weights(sw, width);
    // Rows first, then columns; each output row touches at most two source rows.
    let mut rows = vec![0.0; height * sw];
    for y in 0..height {
        for sy in 0..sh {
            let w = wy[y * sh + sy];
            if w == 0.0 {
                continue;
            }
            for x in 0..sw {
                rows[y * sw + x] += w * map.get(sy, x);
            }
        }
    }
    Grid::from_fn(height, width, |y, x| {
        let mut acc = 0.0;
        for sx in 0..sw {
            let w = wx[x * sw + sx];
            if w != 0.0 {
                acc += w * rows[y * sw + sx];
            }
        }
        acc
    })
}

/// Nearest-neighbour resampling using pixel centers.
pub fn resize_nearest<T: Clone>(grid: &Grid<T>, height: usize, width: usize) -> Grid<T> {
    let (sh, sw) = grid.dims();
    Grid::from_fn(height, width, |y, x| {
        let sy = (((y as f64 + 0.5) * sh as f64 / height as f64) as usize).min(sh - 1);
        let sx = (((x as f64 + 0.5) * sw as f64 / width as f64) as usize).min(sw - 1);
        grid.get(sy, sx).clone()
    })
}

/// Axis-aligned box in normalized center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        NormBox { cx, cy, w, h }
    }

    pub fn from_corners([x0, y0, x1, y1]: [f64; 4]) -> Self {
        NormBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0
    }

    /// Corners `[x0, y0, x1, y1]` clamped into the unit square.
    pub fn corners(&self) -> [f64; 4] {
        let c = |v: f64| v.clamp(0.0, 1.0);
        [
            c(self.cx - self.w / 2.0),
            c(self.cy - self.h / 2.0),
            c(self.cx + self.w / 2.0),
            c(self.cy + self.h / 2.0),
        ]
    }

    /// Pixels of a `height x width` canvas whose span overlaps the box.
    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let [x0, y0, x1, y1] = self.corners();
        let (x0, x1) = (x0 * width as f64, x1 * width as f64);
        let (y0, y1) = (y0 * height as f64, y1 * height as f64);
        Grid::from_fn(height, width, |r, c| {
            let (r, c) = (r as f64, c as f64);
            c + 1.0 > x0 && c < x1 && r + 1.0 > y0 && r < y1
        })
    }
}

/// Tightest box around the foreground, with pixel `j` spanning `[j, j+1)`.
pub fn box_from_mask(mask: &BinaryMask) -> Result<NormBox> {
    let (h, w) = mask.dims();
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if *mask.get(r, c) {
                extent = Some(match extent {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    let (r0, c0, r1, c1) = extent.ok_or(Error::EmptyMask)?;
    Ok(NormBox::from_corners([
        c0 as f64 / w as f64,
        r0 as f64 / h as f64,
        (c1 + 1) as f64 / w as f64,
        (r1 + 1) as f64 / h as f64,
    ]))
}

fn area([x0, y0, x1, y1]: [f64; 4]) -> f64 {
    (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
}

/// Returns `(intersection, union, hull)` areas of two corner boxes.
pub fn overlap_areas(a: [f64; 4], b: [f64; 4]) -> (f64, f64, f64) {
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    let hull = area([a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]);
    (inter, union, hull)
}

/// IoU of two corner boxes (unclamped).
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, _) = overlap_areas(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU of two corner boxes (unclamped).
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, hull) = overlap_areas(a, b);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

pub fn box_iou(a: &NormBox, b: &NormBox) -> f64 {
    iou_corners(a.corners(), b.corners())
}

pub fn box_giou(a: &NormBox, b: &NormBox) -> f64 {
    giou_corners(a.corners(), b.corners())
}

/// Sum of absolute differences over `(cx, cy, w, h)`.
pub fn l1_box(a: &NormBox, b: &NormBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mask_rect(h: usize, w: usize, rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> BinaryMask {
        Grid::from_fn(h, w, |r, c| rows.contains(&r) && cols.contains(&c))
    }

    /// Boxes given in integer units of a 3x3 frame.
    fn unit3(c: [f64; 4]) -> NormBox {
        NormBox::from_corners(c.map(|v| v / 3.0))
    }

    #[test]
    fn full_mask_box_is_whole_canvas() {
        let m = Grid::filled(10, 10, true);
        assert_eq!(box_from_mask(&m).unwrap(), NormBox::new(0.5, 0.5, 1.0, 1.0));
    }

    #[test]
    fn partial_mask_box() {
        let m = mask_rect(10, 10, 2..=4, 3..=6);
        let b = box_from_mask(&m).unwrap();
        assert_abs_diff_eq!(b.cx, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.cy, 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(b.w, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(b.h, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn empty_mask_has_no_box() {
        let m = Grid::filled(4, 4, false);
        let err = box_from_mask(&m).unwrap_err();
        assert_eq!(err.to_string(), "empty mask has no box");
    }

    #[test]
    fn iou_examples() {
        let a = NormBox::new(0.4, 0.4, 0.2, 0.3);
        assert_abs_diff_eq!(box_iou(&a, &a), 1.0, epsilon = 1e-12);
        assert_eq!(box_iou(&unit3([0.0, 0.0, 1.0, 1.0]), &unit3([2.0, 2.0, 3.0, 3.0])), 0.0);
        assert_abs_diff_eq!(
            box_iou(&unit3([0.0, 0.0, 2.0, 2.0]), &unit3([1.0, 1.0, 3.0, 3.0])),
            1.0 / 7.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn giou_examples() {
        let a = NormBox::new(0.4, 0.4, 0.2, 0.3);
        assert_abs_diff_eq!(box_giou(&a, &a), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            box_giou(&unit3([0.0, 0.0, 1.0, 1.0]), &unit3([2.0, 2.0, 3.0, 3.0])),
            -7.0 / 9.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            box_giou(&unit3([0.0, 0.0, 2.0, 2.0]), &unit3([1.0, 1.0, 3.0, 3.0])),
            1.0 / 7.0 - 2.0 / 9.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn l1_examples() {
        let a = NormBox::new(0.5, 0.5, 0.2, 0.2);
        let b = NormBox::new(0.6, 0.5, 0.2, 0.4);
        assert_eq!(l1_box(&a, &a), 0.0);
        assert_abs_diff_eq!(l1_box(&a, &b), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_weights_rows_sum_to_one() {
        for (src, dst) in [(4, 8), (16, 64), (5, 3), (7, 7)] {
            let w = bilinear_weights(src, dst);
            for d in 0..dst {
                let s: f64 = w[d * src..(d + 1) * src].iter().sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn resize_bilinear_preserves_constants() {
        let m = Grid::filled(3, 5, 0.25);
        let up = resize_bilinear(&m, 12, 7);
        assert!(up.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    fn arb_box() -> impl Strategy<Value = [f64; 4]> {
        (0.0..0.8f64, 0.0..0.8f64, 0.01..0.2f64, 0.01..0.2f64)
            .prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
    }

    proptest! {
        #[test]
        fn giou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
            let (iou, giou) = (iou_corners(a, b), giou_corners(a, b));
            prop_assert!(giou <= iou + 1e-12);
            prop_assert!(giou > -1.0 && giou <= 1.0);
        }

        #[test]
        fn overlap_measures_symmetric_and_translation_invariant(
            a in arb_box(), b in arb_box(), dx in -5.0..5.0f64, dy in -5.0..5.0f64
        ) {
            prop_assert!((iou_corners(a, b) - iou_corners(b, a)).abs() < 1e-12);
            prop_assert!((giou_corners(a, b) - giou_corners(b, a)).abs() < 1e-12);
            let shift = |c: [f64; 4]| [c[0] + dx, c[1] + dy, c[2] + dx, c[3] + dy];
            prop_assert!((iou_corners(a, b) - iou_corners(shift(a), shift(b))).abs() < 1e-9);
            prop_assert!((giou_corners(a, b) - giou_corners(shift(a), shift(b))).abs() < 1e-9);
        }

        #[test]
        fn l1_is_symmetric(a in arb_box(), b in arb_box()) {
            let (a, b) = (NormBox::from_corners(a), NormBox::from_corners(b));
            prop_assert_eq!(l1_box(&a, &b), l1_box(&b, &a));
        }

        #[test]
        fn rasterized_box_covers_mask(
            h in 1usize..20, w in 1usize..20, seed in any::<u64>()
        ) {
            let mut s = crate::rng::Stream::new(seed);
            let mut m = Grid::from_fn(h, w, |_, _| s.unit() < 0.2);
            if m.is_empty_mask() {
                m.set(h / 2, w / 2, true);
            }
            let b = box_from_mask(&m).unwrap();
            prop_assert!(b.is_valid());
            let r = b.rasterize(h, w);
            for (src, cover) in m.as_slice().iter().zip(r.as_slice()) {
                prop_assert!(!src || *cover);
            }
        }
    }
}
