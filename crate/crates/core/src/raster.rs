//! Polygon rasterization shared by mask construction, rendering and IOU.
//!
//! Pixel `(x, y)` is sampled at the integer point `(x, y)`; a pixel belongs to
//! a polygon when that point is inside under the even-odd rule. Crossings use
//! half-open intervals in both axes so shared edges are never counted twice.

use crate::grid::Grid;
use crate::shapemodel::Point;

/// Even-odd fill of a closed polygon on a `width x height` grid.
pub fn fill_polygon(poly: &[Point], width: usize, height: usize) -> Grid<bool> {
    let mut out = Grid::filled(width, height, false);
    for_each_span(poly, width, height, |y, x0, x1| {
        for x in x0..x1 {
            *out.get_mut(x, y) = true;
        }
    });
    out
}

/// Calls `f(y, x_start, x_end)` for every filled half-open span.
pub fn for_each_span(poly: &[Point], width: usize, height: usize, mut f: impl FnMut(usize, usize, usize)) {
    if poly.len() < 3 || width == 0 || height == 0 {
        return;
    }
    let (ymin, ymax) = poly
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let y_start = ymin.ceil().max(0.0) as usize;
    let y_end = (ymax.floor().min(height as f64 - 1.0)).max(-1.0);
    if y_end < 0.0 {
        return;
    }
    let mut xs = Vec::new();
    for y in y_start..=y_end as usize {
        let yf = y as f64;
        xs.clear();
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            if (a[1] <= yf) != (b[1] <= yf) {
                let t = (yf - a[1]) / (b[1] - a[1]);
                xs.push(a[0] + t * (b[0] - a[0]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let x0 = pair[0].ceil().max(0.0);
            let x1 = pair[1].ceil().min(width as f64);
            if x1 > x0 {
                f(y, x0 as usize, x1 as usize);
            }
        }
    }
}

/// Point containment under the same even-odd, half-open rule as [`fill_polygon`].
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] <= p[1]) != (b[1] <= p[1]) {
            let t = (p[1] - a[1]) / (b[1] - a[1]);
            if a[0] + t * (b[0] - a[0]) <= p[0] {
                inside = !inside;
            }
        }
    }
    inside
}

/// Shoelace area with sign; positive for clockwise order on a y-down grid.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

pub fn perimeter(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| dist(poly[i], poly[(i + 1) % n])).sum()
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Integer pixels on the segment between the rounded endpoints (Bresenham).
pub fn line_pixels(a: Point, b: Point) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
    let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

/// Distance from `p` to the closed polyline `poly`.
pub fn distance_to_boundary(p: Point, poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| point_segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}
