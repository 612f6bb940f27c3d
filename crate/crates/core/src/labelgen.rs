//! High-confidence pseudo-label generation from extreme-point annotations.
//!
//! Four extreme points per nodule give three geometric masks: the enclosing
//! box `g_b`, the quadrilateral through the points `g_i`, and the box
//! complement `g_o`. Fusing them with a prompted-model mask `y` yields
//!
//! ```text
//! location   G_l = g_b | y
//! foreground X_f = g_i & y
//! background X_b = g_o & !y
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::MaskGrid;

/// Integer pixel coordinate, serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 2]", into = "[i64; 2]")]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

impl Point {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }
}

impl From<[i64; 2]> for Point {
    fn from([x, y]: [i64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [i64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// The leftmost, rightmost, topmost and bottommost points of one nodule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodulePoints {
    pub left: Point,
    pub right: Point,
    pub top: Point,
    pub bottom: Point,
}

impl NodulePoints {
    pub fn all(&self) -> [Point; 4] {
        [self.left, self.right, self.top, self.bottom]
    }

    /// Checks extreme-point ordering and image bounds.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for p in self.all() {
            if p.x < 0 || p.y < 0 || p.x >= width as i64 || p.y >= height as i64 {
                return Err(Error::PointOutOfBounds {
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        if self.left.x > self.right.x {
            return Err(Error::InvalidInput(format!(
                "left.x {} exceeds right.x {}",
                self.left.x, self.right.x
            )));
        }
        if self.top.y > self.bottom.y {
            return Err(Error::InvalidInput(format!(
                "top.y {} exceeds bottom.y {}",
                self.top.y, self.bottom.y
            )));
        }
        Ok(())
    }

    /// Inclusive `(min_x, min_y, max_x, max_y)` over the four points.
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        let pts = self.all();
        let min_x = pts.iter().map(|p| p.x).min().unwrap();
        let max_x = pts.iter().map(|p| p.x).max().unwrap();
        let min_y = pts.iter().map(|p| p.y).min().unwrap();
        let max_y = pts.iter().map(|p| p.y).max().unwrap();
        (min_x, min_y, max_x, max_y)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: String,
    pub nodules: Vec<NodulePoints>,
}

impl PointAnnotation {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.nodules.is_empty() {
            return Err(Error::InvalidInput(format!(
                "annotation {} has no nodules",
                self.image_id
            )));
        }
        self.nodules
            .iter()
            .try_for_each(|n| n.validate(height, width))
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<PointAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_annotations(path: &Path, annotations: &[PointAnnotation]) -> Result<()> {
    let text = serde_json::to_string_pretty(annotations).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The fused high-confidence label triple.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelBundle {
    pub location: MaskGrid,
    pub foreground: MaskGrid,
    pub background: MaskGrid,
}

impl LabelBundle {
    pub fn dims(&self) -> (usize, usize) {
        self.location.dims()
    }
}

/// Enclosing box `g_b` of the four points, inclusive on all sides.
pub fn bounding_box_mask(ann: &NodulePoints, height: usize, width: usize) -> Result<MaskGrid> {
    ann.validate(height, width)?;
    let (x0, y0, x1, y1) = ann.bounds();
    let mut mask = MaskGrid::zeros(height, width);
    for y in y0..=y1 {
        for x in x0..=x1 {
            mask.set(x as usize, y as usize, true);
        }
    }
    Ok(mask)
}

// Sign of the cross product (b - a) x (p - a).
#[inline]
fn orient(a: Point, b: Point, p: Point) -> i64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

#[inline]
fn on_segment(a: Point, b: Point, p: Point) -> bool {
    orient(a, b, p) == 0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

/// Closed even-odd membership of `p` in the polygon `poly`, in exact integer arithmetic.
pub(crate) fn polygon_contains(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if on_segment(a, b, p) {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            // p.x < a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y)
            let lhs = (p.x - a.x) * (b.y - a.y);
            let rhs = (p.y - a.y) * (b.x - a.x);
            let crosses = if b.y > a.y { lhs < rhs } else { lhs > rhs };
            if crosses {
                inside = !inside;
            }
        }
    }
    inside
}

/// Quadrilateral `g_i` with vertex order top, right, bottom, left; boundary pixels included.
///
/// Pixel centres sit on integer coordinates, so a zero-area quadrilateral
/// rasterizes to the pixels on its segments.
pub fn quadrilateral_mask(ann: &NodulePoints, height: usize, width: usize) -> Result<MaskGrid> {
    ann.validate(height, width)?;
    let poly = [ann.top, ann.right, ann.bottom, ann.left];
    let (x0, y0, x1, y1) = ann.bounds();
    let mut mask = MaskGrid::zeros(height, width);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if polygon_contains(&poly, Point::new(x, y)) {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
    Ok(mask)
}

pub fn complement_mask(mask: &MaskGrid) -> MaskGrid {
    mask.not()
}

pub fn fuse_labels(
    g_b: &MaskGrid,
    g_i: &MaskGrid,
    g_o: &MaskGrid,
    y_prompt: &MaskGrid,
) -> Result<LabelBundle> {
    g_b.ensure_same_dims(g_i)?;
    g_b.ensure_same_dims(g_o)?;
    g_b.ensure_same_dims(y_prompt)?;
    let bundle = LabelBundle {
        location: g_b.or(y_prompt)?,
        foreground: g_i.and(y_prompt)?,
        background: g_o.and_not(y_prompt)?,
    };
    if bundle.foreground.is_empty() {
        log::warn!("high-confidence foreground is empty; foreground-dependent loss terms will be skipped");
    }
    Ok(bundle)
}

/// Geometric masks `(g_b, g_i, g_o)` for every nodule, unioned before the complement.
pub fn geometric_masks(
    ann: &PointAnnotation,
    height: usize,
    width: usize,
) -> Result<(MaskGrid, MaskGrid, MaskGrid)> {
    ann.validate(height, width)?;
    let mut g_b = MaskGrid::zeros(height, width);
    let mut g_i = MaskGrid::zeros(height, width);
    for nodule in &ann.nodules {
        g_b = g_b.or(&bounding_box_mask(nodule, height, width)?)?;
        g_i = g_i.or(&quadrilateral_mask(nodule, height, width)?)?;
    }
    let g_o = complement_mask(&g_b);
    Ok((g_b, g_i, g_o))
}

pub fn multi_nodule_fuse(
    ann: &PointAnnotation,
    y_prompt: &MaskGrid,
    height: usize,
    width: usize,
) -> Result<LabelBundle> {
    if y_prompt.dims() != (height, width) {
        return Err(Error::DimensionMismatch {
            expected: (height, width),
            found: y_prompt.dims(),
        });
    }
    let (g_b, g_i, g_o) = geometric_masks(ann, height, width)?;
    fuse_labels(&g_b, &g_i, &g_o, y_prompt)
}

/// Fraction of label pixels that are correct against `gt`.
///
/// In background mode a label pixel is correct when it lies outside `gt`.
/// An empty label has no defined precision and yields [`Error::EmptyRegion`].
pub fn label_precision(label: &MaskGrid, gt: &MaskGrid, as_background: bool) -> Result<f64> {
    label.ensure_same_dims(gt)?;
    let total = label.count();
    if total == 0 {
        return Err(Error::EmptyRegion("label"));
    }
    let hits = label
        .cells()
        .iter()
        .zip(gt.cells())
        .filter(|(&l, &g)| l && (g != as_background))
        .count();
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nodule(l: (i64, i64), r: (i64, i64), t: (i64, i64), b: (i64, i64)) -> NodulePoints {
        NodulePoints {
            left: Point::new(l.0, l.1),
            right: Point::new(r.0, r.1),
            top: Point::new(t.0, t.1),
            bottom: Point::new(b.0, b.1),
        }
    }

    fn diamond() -> NodulePoints {
        nodule((2, 5), (8, 5), (5, 2), (5, 8))
    }

    // Independent floating-point even-odd test at pixel centres (x + 0.5, y + 0.5),
    // with closed edges checked by distance to segment.
    fn oracle_inside(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
        let n = poly.len();
        for i in 0..n {
            let (ax, ay) = poly[i];
            let (bx, by) = poly[(i + 1) % n];
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            };
            let (cx, cy) = (ax + t * dx, ay + t * dy);
            if ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() < 1e-9 {
                return true;
            }
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = poly[i];
            let (xj, yj) = poly[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn oracle_quad(ann: &NodulePoints, h: usize, w: usize) -> MaskGrid {
        let poly: Vec<(f64, f64)> = [ann.top, ann.right, ann.bottom, ann.left]
            .iter()
            .map(|p| (p.x as f64 + 0.5, p.y as f64 + 0.5))
            .collect();
        MaskGrid::from_fn(h, w, |x, y| oracle_inside(&poly, x as f64 + 0.5, y as f64 + 0.5))
    }

    fn arb_nodule(h: i64, w: i64) -> impl Strategy<Value = NodulePoints> {
        (0..w, 0..w, 0..h, 0..h, 0..h, 0..h, 0..w, 0..w).prop_map(
            |(lx, rx, ly, ry, ty, by, tx, bx)| {
                let (lx, rx) = (lx.min(rx), lx.max(rx));
                let (ty, by) = (ty.min(by), ty.max(by));
                nodule((lx, ly), (rx, ry), (tx, ty), (bx, by))
            },
        )
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = MaskGrid> {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |cells| MaskGrid::from_cells(h, w, cells).unwrap())
    }

    #[test]
    fn box_of_diamond_points() {
        let g_b = bounding_box_mask(&diamond(), 10, 10).unwrap();
        assert_eq!(g_b.count(), 49);
        assert_eq!(g_b.bounding_box(), Some((2, 2, 8, 8)));
    }

    #[test]
    fn box_of_identical_points_is_one_pixel() {
        let n = nodule((3, 3), (3, 3), (3, 3), (3, 3));
        let g_b = bounding_box_mask(&n, 10, 10).unwrap();
        assert_eq!(g_b.points(), vec![(3, 3)]);
        assert_eq!(quadrilateral_mask(&n, 10, 10).unwrap(), g_b);
    }

    #[test]
    fn out_of_bounds_point_is_rejected() {
        let n = nodule((2, 5), (10, 5), (5, 2), (5, 8));
        assert!(matches!(
            bounding_box_mask(&n, 10, 10),
            Err(Error::PointOutOfBounds { x: 10, .. })
        ));
        let n = nodule((2, 5), (8, 5), (5, -1), (5, 8));
        assert!(quadrilateral_mask(&n, 10, 10).is_err());
    }

    #[test]
    fn misordered_points_are_rejected() {
        let n = nodule((8, 5), (2, 5), (5, 2), (5, 8));
        assert!(matches!(n.validate(10, 10), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn diamond_matches_point_in_polygon_scan() {
        let g_i = quadrilateral_mask(&diamond(), 10, 10).unwrap();
        let oracle = oracle_quad(&diamond(), 10, 10);
        assert_eq!(g_i, oracle);
        // |x-5| + |y-5| <= 3
        assert_eq!(g_i.count(), 25);
    }

    #[test]
    fn box_corners_give_the_box() {
        // Extreme points placed on box corners: the quadrilateral is the box itself.
        let n = nodule((2, 2), (8, 8), (8, 2), (2, 8));
        let g_i = quadrilateral_mask(&n, 10, 10).unwrap();
        let g_b = bounding_box_mask(&n, 10, 10).unwrap();
        assert_eq!(g_i, g_b);
    }

    #[test]
    fn collinear_points_rasterize_to_a_segment() {
        let n = nodule((1, 4), (7, 4), (3, 4), (5, 4));
        let g_i = quadrilateral_mask(&n, 10, 10).unwrap();
        assert_eq!(g_i.count(), 7);
        assert!(g_i.points().iter().all(|&(_, y)| y == 4));
        let n = nodule((3, 1), (3, 6), (3, 1), (3, 6));
        let g_i = quadrilateral_mask(&n, 10, 10).unwrap();
        assert!(g_i.points().iter().all(|&(x, _)| x == 3));
        assert_eq!(g_i.count(), 6);
    }

    #[test]
    fn complement_counts() {
        assert!(complement_mask(&MaskGrid::ones(4, 4)).is_empty());
        let g_b = bounding_box_mask(&diamond(), 10, 10).unwrap();
        assert_eq!(complement_mask(&g_b).count(), 51);
    }

    #[test]
    fn fuse_with_prompt_equal_to_quadrilateral() {
        let g_b = bounding_box_mask(&diamond(), 10, 10).unwrap();
        let g_i = quadrilateral_mask(&diamond(), 10, 10).unwrap();
        let g_o = complement_mask(&g_b);
        let bundle = fuse_labels(&g_b, &g_i, &g_o, &g_i).unwrap();
        assert_eq!(bundle.foreground, g_i);
        assert_eq!(bundle.location, g_b);
        assert_eq!(bundle.background, g_o);
    }

    #[test]
    fn fuse_with_empty_prompt() {
        let g_b = bounding_box_mask(&diamond(), 10, 10).unwrap();
        let g_i = quadrilateral_mask(&diamond(), 10, 10).unwrap();
        let g_o = complement_mask(&g_b);
        let bundle = fuse_labels(&g_b, &g_i, &g_o, &MaskGrid::zeros(10, 10)).unwrap();
        assert!(bundle.foreground.is_empty());
        assert_eq!(bundle.location, g_b);
        assert_eq!(bundle.background, g_o);
    }

    #[test]
    fn fuse_rejects_mismatched_dims() {
        let a = MaskGrid::zeros(10, 10);
        let b = MaskGrid::zeros(10, 11);
        assert!(matches!(
            fuse_labels(&a, &a, &a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn multi_nodule_single_equals_fuse() {
        let ann = PointAnnotation {
            image_id: "a".into(),
            nodules: vec![diamond()],
        };
        let y = MaskGrid::from_fn(10, 10, |x, y| x >= 4 && y >= 3);
        let g_b = bounding_box_mask(&diamond(), 10, 10).unwrap();
        let g_i = quadrilateral_mask(&diamond(), 10, 10).unwrap();
        let direct = fuse_labels(&g_b, &g_i, &complement_mask(&g_b), &y).unwrap();
        assert_eq!(multi_nodule_fuse(&ann, &y, 10, 10).unwrap(), direct);
    }

    #[test]
    fn multi_nodule_disjoint_and_overlapping() {
        let a = nodule((1, 2), (4, 2), (2, 1), (3, 4));
        let b = nodule((10, 12), (14, 11), (12, 9), (11, 14));
        let ann = PointAnnotation {
            image_id: "two".into(),
            nodules: vec![a, b],
        };
        let (g_b, _, g_o) = geometric_masks(&ann, 16, 16).unwrap();
        let ba = bounding_box_mask(&a, 16, 16).unwrap();
        let bb = bounding_box_mask(&b, 16, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(g_b.get(x, y), ba.get(x, y) || bb.get(x, y));
                assert_eq!(g_o.get(x, y), !g_b.get(x, y));
            }
        }
        let twice = PointAnnotation {
            image_id: "dup".into(),
            nodules: vec![a, a],
        };
        let once = PointAnnotation {
            image_id: "dup".into(),
            nodules: vec![a],
        };
        assert_eq!(
            geometric_masks(&twice, 16, 16).unwrap(),
            geometric_masks(&once, 16, 16).unwrap()
        );
    }

    #[test]
    fn multi_nodule_requires_a_nodule() {
        let ann = PointAnnotation {
            image_id: "none".into(),
            nodules: vec![],
        };
        assert!(multi_nodule_fuse(&ann, &MaskGrid::zeros(4, 4), 4, 4).is_err());
    }

    #[test]
    fn precision_examples() {
        let gt = MaskGrid::from_fn(4, 4, |x, _| x < 2);
        assert_eq!(label_precision(&gt, &gt, false).unwrap(), 1.0);
        assert_eq!(label_precision(&gt.not(), &gt, false).unwrap(), 0.0);
        assert_eq!(label_precision(&gt.not(), &gt, true).unwrap(), 1.0);
        let label = MaskGrid::from_fn(4, 4, |x, y| y == 0 && x < 3 || (x, y) == (0, 1));
        assert_eq!(label.count(), 4);
        assert_eq!(label_precision(&label, &gt, false).unwrap(), 0.75);
        assert!(matches!(
            label_precision(&MaskGrid::zeros(4, 4), &gt, false),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn annotation_json_schema() {
        let text = r#"[{"image_id":"n1","nodules":[{"left":[2,5],"right":[8,5],"top":[5,2],"bottom":[5,8]}]}]"#;
        let anns: Vec<PointAnnotation> = serde_json::from_str(text).unwrap();
        assert_eq!(anns[0].nodules[0], diamond());
        assert_eq!(serde_json::to_string(&anns).unwrap(), text);
    }

    proptest! {
        #[test]
        fn box_matches_per_pixel_bounds(n in arb_nodule(12, 14)) {
            let g_b = bounding_box_mask(&n, 12, 14).unwrap();
            let xs = [n.left.x, n.right.x, n.top.x, n.bottom.x];
            let ys = [n.left.y, n.right.y, n.top.y, n.bottom.y];
            for y in 0..12i64 {
                for x in 0..14i64 {
                    let inside = xs.iter().any(|&a| a <= x) && xs.iter().any(|&a| a >= x)
                        && ys.iter().any(|&a| a <= y) && ys.iter().any(|&a| a >= y);
                    prop_assert_eq!(g_b.get(x as usize, y as usize), inside);
                }
            }
        }

        #[test]
        fn quadrilateral_matches_oracle_and_lies_in_box(n in arb_nodule(12, 14)) {
            let g_i = quadrilateral_mask(&n, 12, 14).unwrap();
            let g_b = bounding_box_mask(&n, 12, 14).unwrap();
            prop_assert!(g_i.is_subset_of(&g_b));
            prop_assert_eq!(g_i, oracle_quad(&n, 12, 14));
        }

        #[test]
        fn complement_is_involution(m in arb_mask(6, 7)) {
            prop_assert_eq!(complement_mask(&complement_mask(&m)), m);
        }

        #[test]
        fn fusion_matches_per_pixel_logic(n in arb_nodule(10, 10), y in arb_mask(10, 10)) {
            let g_b = bounding_box_mask(&n, 10, 10).unwrap();
            let g_i = quadrilateral_mask(&n, 10, 10).unwrap();
            let g_o = complement_mask(&g_b);
            let bundle = fuse_labels(&g_b, &g_i, &g_o, &y).unwrap();
            for yy in 0..10 {
                for x in 0..10 {
                    let (b, i, o, p) = (g_b.get(x, yy), g_i.get(x, yy), g_o.get(x, yy), y.get(x, yy));
                    prop_assert_eq!(bundle.location.get(x, yy), b || p);
                    prop_assert_eq!(bundle.foreground.get(x, yy), i && p);
                    prop_assert_eq!(bundle.background.get(x, yy), o && !p);
                }
            }
            prop_assert!(bundle.foreground.is_disjoint(&bundle.background));
            prop_assert_eq!(&bundle.background, &bundle.location.not());
            prop_assert_eq!(fuse_labels(&g_b, &g_i, &g_o, &y).unwrap(), bundle);
        }
    }
}
