//! Synthetic evidence: renders a mixture's mean shape into a feature stack.
//!
//! Edge channels hold 1.0 on every boundary pixel in the channel of the
//! boundary segment's orientation, and on each landmark pixel in its leaf's
//! orientation. Appearance channel 0 is the object mask, channel 1 its
//! complement, the rest are zero. Every node with a part score channel gets a
//! Gaussian blob at its position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Channels, FeatureStack};
use crate::error::{Error, Result};
use crate::raster::{fill_polygon, line_pixels};
use crate::shapemodel::{quantize_orientation, CompTree, MixtureModel, PartPolygon, Point, ORIENTATIONS};

pub const BLOB_SIGMA: f64 = 1.5;

/// What the generator placed where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundTruth {
    pub mixture_index: usize,
    pub root: Point,
    /// Leaf positions in leaf order.
    pub landmarks: Vec<Point>,
    pub parts: Vec<PartPolygon>,
}

/// Closed contours of a tree's parts given leaf positions (leaf order).
/// An unlabeled tree yields one contour through all leaves, labeled by the
/// first part label.
pub fn part_polygons(tree: &CompTree, landmarks: &[Point]) -> Vec<PartPolygon> {
    let leaves = tree.leaves();
    let slot = |id: usize| leaves.iter().position(|&l| l == id).expect("leaf id");
    tree.part_leaves()
        .into_iter()
        .map(|(label, ids)| PartPolygon {
            label,
            polygon: ids.into_iter().map(|id| landmarks[slot(id)]).collect(),
        })
        .collect()
}

/// Noise-free rendering of a shape. `contours` are the filled, edged
/// polygons; `landmarks` pair each leaf position with its orientation.
pub fn render_shape(
    contours: &[Vec<Point>],
    landmarks: &[(Point, u8)],
    blobs: &[(usize, Point)],
    width: usize,
    height: usize,
    channels: usize,
    part_channels: usize,
) -> FeatureStack {
    let mut edge = Channels::zeros(width, height, ORIENTATIONS as usize);
    let mut app = Channels::zeros(width, height, channels);
    let mut part = Channels::zeros(width, height, part_channels);

    let mut object = vec![false; width * height];
    for poly in contours {
        let m = fill_polygon(poly, width, height);
        for (o, &b) in object.iter_mut().zip(m.as_slice()) {
            *o |= b;
        }
    }
    if channels > 0 {
        for (v, &b) in app.channel_mut(0).iter_mut().zip(&object) {
            *v = if b { 1.0 } else { 0.0 };
        }
    }
    if channels > 1 {
        for (v, &b) in app.channel_mut(1).iter_mut().zip(&object) {
            *v = if b { 0.0 } else { 1.0 };
        }
    }

    let mut mark = |k: u8, x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            *edge.get_mut(k as usize, x as usize, y as usize) = 1.0;
        }
    };
    for poly in contours {
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            if a == b {
                continue;
            }
            let k = quantize_orientation((b[1] - a[1]).atan2(b[0] - a[0]));
            for (x, y) in line_pixels(a, b) {
                mark(k, x, y);
            }
        }
    }
    for &(p, k) in landmarks {
        mark(k, p[0].round() as i64, p[1].round() as i64);
    }

    for &(ch, c) in blobs {
        let plane = part.channel_mut(ch);
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
                let v = (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                let cell = &mut plane[y * width + x];
                *cell = cell.max(v as f32);
            }
        }
    }

    FeatureStack { edge, app, part }
}

/// Adds independent `N(0, noise^2)` samples to every value.
pub fn add_noise(stack: &mut FeatureStack, noise: f64, seed: u64) -> Result<()> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise level {noise} must be finite and non-negative")));
    }
    if noise == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    for c in [&mut stack.edge, &mut stack.app, &mut stack.part] {
        for v in c.as_mut_slice() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Ok(())
}

/// Uniform `[0, 1)` noise stack, used for negatives and benchmarks.
pub fn noise_stack(width: usize, height: usize, channels: usize, part_channels: usize, seed: u64) -> FeatureStack {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |count| {
        let mut c = Channels::zeros(width, height, count);
        for v in c.as_mut_slice() {
            *v = rng.random::<f32>();
        }
        c
    };
    let edge = fill(ORIENTATIONS as usize);
    let app = fill(channels);
    let part = fill(part_channels);
    FeatureStack { edge, app, part }
}

/// A scene of `rects` random axis-aligned rectangles rendered like a shape,
/// with no landmarks or part blobs, plus Gaussian noise. Used as negatives
/// that carry object-like edges.
pub fn clutter_stack(
    size: (usize, usize),
    channels: usize,
    part_channels: usize,
    rects: usize,
    noise: f64,
    seed: u64,
) -> Result<FeatureStack> {
    use rand::Rng;
    let (width, height) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = |rng: &mut ChaCha8Rng, n: usize| {
        let lo = rng.random_range(0..n.max(2) - 1) as f64;
        let len = rng.random_range(1..=(n / 3).max(1)) as f64;
        (lo, (lo + len).min(n as f64 - 1.0))
    };
    let contours: Vec<Vec<Point>> = (0..rects)
        .map(|_| {
            let (x0, x1) = span(&mut rng, width);
            let (y0, y1) = span(&mut rng, height);
            vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
        })
        .collect();
    let mut stack = render_shape(&contours, &[], &[], width, height, channels, part_channels);
    add_noise(&mut stack, noise, rng.random())?;
    Ok(stack)
}

/// Number of part channels a model's trees refer to (at least one).
pub fn part_channel_count(model: &MixtureModel) -> usize {
    model
        .mixtures
        .iter()
        .flat_map(|t| t.nodes.iter().filter_map(|n| n.part_score_channel))
        .max()
        .map_or(1, |c| c + 1)
}

/// Renders mixture `mixture_index` of `model` with its root at `root_pos`.
pub fn synth_stack(
    model: &MixtureModel,
    mixture_index: usize,
    root_pos: Point,
    noise: f64,
    seed: u64,
    size: (usize, usize),
) -> Result<(FeatureStack, GroundTruth)> {
    model.validate()?;
    let tree = model.mixtures.get(mixture_index).ok_or_else(|| {
        Error::invalid(format!(
            "mixture {mixture_index} does not exist (model has {})",
            model.mixtures.len()
        ))
    })?;
    let (width, height) = size;
    let landmarks = tree.mean_shape(root_pos)?;
    let r = (model.square_side / 2) as f64;
    for p in &landmarks {
        let (x, y) = (p[0].round(), p[1].round());
        if x < r || y < r || x > width as f64 - 1.0 - r || y > height as f64 - 1.0 - r {
            return Err(Error::invalid(format!(
                "shape at root ({}, {}) leaves the {width}x{height} grid (landmark ({:.2}, {:.2}), margin {r})",
                root_pos[0], root_pos[1], p[0], p[1]
            )));
        }
    }

    let parts = part_polygons(tree, &landmarks);
    let contours: Vec<Vec<Point>> = if parts.is_empty() {
        vec![landmarks.clone()]
    } else {
        parts.iter().map(|p| p.polygon.clone()).collect()
    };
    let leaves = tree.leaves();
    let oriented: Vec<(Point, u8)> = leaves
        .iter()
        .zip(&landmarks)
        .map(|(&l, &p)| (p, tree.node(l).leaf_type.expect("leaf type").orientation))
        .collect();
    let positions = tree.node_positions(root_pos);
    let blobs: Vec<(usize, Point)> = tree
        .nodes
        .iter()
        .filter_map(|n| n.part_score_channel.map(|c| (c, positions[n.id])))
        .collect();

    let mut stack = render_shape(
        &contours,
        &oriented,
        &blobs,
        width,
        height,
        model.channels,
        part_channel_count(model),
    );
    add_noise(&mut stack, noise, seed)?;
    let truth = GroundTruth {
        mixture_index,
        root: root_pos,
        landmarks,
        parts,
    };
    Ok((stack, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_edges_by_orientation() {
        let rect = vec![[2.0, 2.0], [8.0, 2.0], [8.0, 6.0], [2.0, 6.0]];
        let s = render_shape(&[rect], &[], &[], 12, 10, 2, 1);
        let horiz = s.edge.channel(0);
        let vert = s.edge.channel(4);
        for x in 2..=8 {
            assert_eq!(horiz[2 * 12 + x], 1.0);
            assert_eq!(horiz[6 * 12 + x], 1.0);
        }
        for y in 2..=6 {
            assert_eq!(vert[y * 12 + 2], 1.0);
            assert_eq!(vert[y * 12 + 8], 1.0);
        }
        for k in [1, 2, 3, 5, 6, 7] {
            assert!(s.edge.channel(k).iter().all(|&v| v == 0.0));
        }
        assert_eq!(horiz.iter().filter(|&&v| v == 1.0).count(), 14);
        assert_eq!(s.app.get(0, 4, 4), 1.0);
        assert_eq!(s.app.get(1, 4, 4), 0.0);
        assert_eq!(s.app.get(1, 0, 0), 1.0);
    }

    #[test]
    fn noise_is_seeded() {
        let rect = vec![[2.0, 2.0], [8.0, 2.0], [8.0, 6.0], [2.0, 6.0]];
        let mut a = render_shape(std::slice::from_ref(&rect), &[], &[], 12, 10, 2, 1);
        let mut b = render_shape(&[rect], &[], &[], 12, 10, 2, 1);
        add_noise(&mut a, 0.3, 9).unwrap();
        add_noise(&mut b, 0.3, 9).unwrap();
        assert_eq!(a, b);
        assert!(add_noise(&mut a, -1.0, 0).is_err());
    }
}
