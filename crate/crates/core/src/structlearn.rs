//! Learning mixture topologies from part-annotated shapes: cluster the
//! labeled masks, sample boundary landmarks of each medoid, type every
//! landmark as an edgelet and compose neighbors pairwise into a tree.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{json_error, Error, Result};
use crate::grid::Grid;
use crate::raster::{dist, fill_polygon, point_in_polygon, signed_area};
use crate::shapemodel::{
    orientation_angle, quantize_orientation, CompNode, CompTree, LandmarkCounts, LeafType, MixtureModel, PartLabel,
    PartPolygon, Point,
};

pub const KMEDOIDS_MAX_ITER: usize = 100;
/// Half-width, in arc length, of the window used to estimate tangents.
pub const TANGENT_HALF_WINDOW: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartAnnotation {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub parts: Vec<PartPolygon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<PartAnnotation>,
}

impl AnnotationFile {
    pub fn parse(text: &str, what: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| json_error(what, text, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

impl PartAnnotation {
    /// Factor mapping image coordinates to a grid whose longer side is `grid_size`.
    pub fn scale(&self, grid_size: usize) -> Result<f64> {
        let side = self.width.max(self.height);
        if side == 0 {
            return Err(Error::invalid(format!("annotation {} has an empty image", self.id)));
        }
        Ok(grid_size as f64 / side as f64)
    }

    /// Part polygons scaled to the working grid.
    pub fn scaled_parts(&self, grid_size: usize) -> Result<Vec<PartPolygon>> {
        let s = self.scale(grid_size)?;
        Ok(self
            .parts
            .iter()
            .map(|p| PartPolygon {
                label: p.label,
                polygon: p.polygon.iter().map(|q| [q[0] * s, q[1] * s]).collect(),
            })
            .collect())
    }

    pub fn grid_dims(&self, grid_size: usize) -> Result<(usize, usize)> {
        let s = self.scale(grid_size)?;
        Ok((
            ((self.width as f64 * s).round() as usize).max(1),
            ((self.height as f64 * s).round() as usize).max(1),
        ))
    }
}

/// Label grid: 0 background, then [`PartLabel::mask_value`].
pub type LabeledMask = Grid<u8>;

/// Rasterizes the annotation at working resolution; head overrides neck
/// overrides torso.
pub fn rasterize_annotation(ann: &PartAnnotation, grid_size: usize) -> Result<LabeledMask> {
    let (w, h) = ann.grid_dims(grid_size)?;
    let parts = ann.scaled_parts(grid_size)?;
    rasterize_parts(&parts, w, h).map_err(|e| match e {
        Error::InvalidInput(m) => Error::invalid(format!("annotation {}: {m}", ann.id)),
        other => other,
    })
}

pub fn rasterize_parts(parts: &[PartPolygon], width: usize, height: usize) -> Result<LabeledMask> {
    let mut mask = Grid::filled(width, height, 0u8);
    for label in [PartLabel::Torso, PartLabel::Neck, PartLabel::Head] {
        for p in parts.iter().filter(|p| p.label == label) {
            if p.polygon.len() < 3 {
                return Err(Error::invalid(format!(
                    "{} polygon has {} vertices (at least 3 required)",
                    p.label,
                    p.polygon.len()
                )));
            }
            let fill = fill_polygon(&p.polygon, width, height);
            for (m, &f) in mask.as_mut_slice().iter_mut().zip(fill.as_slice()) {
                if f {
                    *m = label.mask_value();
                }
            }
        }
    }
    Ok(mask)
}

fn labeled_bbox(m: &LabeledMask) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..m.height() {
        for x in 0..m.width() {
            if *m.get(x, y) != 0 {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    b
}

/// Fraction of disagreeing labels after cropping both masks to their labeled
/// bounding boxes and aligning the boxes' top-left corners. The common grid
/// spans the larger of the two boxes per axis.
pub fn mask_distance(a: &LabeledMask, b: &LabeledMask) -> f64 {
    let (ba, bb) = (labeled_bbox(a), labeled_bbox(b));
    let (ba, bb) = match (ba, bb) {
        (None, None) => return 0.0,
        (Some(_), None) | (None, Some(_)) => return 1.0,
        (Some(x), Some(y)) => (x, y),
    };
    let wa = ba.2 - ba.0 + 1;
    let ha = ba.3 - ba.1 + 1;
    let wb = bb.2 - bb.0 + 1;
    let hb = bb.3 - bb.1 + 1;
    let (w, h) = (wa.max(wb), ha.max(hb));
    let at = |m: &LabeledMask, bx: (usize, usize), bw: usize, bh: usize, x: usize, y: usize| {
        if x < bw && y < bh {
            *m.get(bx.0 + x, bx.1 + y)
        } else {
            0
        }
    };
    let mut diff = 0usize;
    for y in 0..h {
        for x in 0..w {
            if at(a, (ba.0, ba.1), wa, ha, x, y) != at(b, (bb.0, bb.1), wb, hb, x, y) {
                diff += 1;
            }
        }
    }
    diff as f64 / (w * h) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMedoids {
    /// Medoid indices, ascending; cluster `j` is represented by `medoids[j]`.
    pub medoids: Vec<usize>,
    pub assignments: Vec<usize>,
    /// Sum of distances to the assigned medoid after each assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Symmetric pairwise distance matrix, computed in parallel.
pub fn distance_matrix(masks: &[LabeledMask]) -> Vec<Vec<f64>> {
    let n = masks.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| mask_distance(&masks[i], &masks[j])).collect())
        .collect();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for (k, &v) in upper[i].iter().enumerate() {
            let j = i + 1 + k;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

pub fn k_medoids(masks: &[LabeledMask], k: usize, seed: u64) -> Result<KMedoids> {
    k_medoids_from_distances(&distance_matrix(masks), k, seed)
}

fn assign(d: &[Vec<f64>], medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let a = (0..d.len())
        .map(|i| {
            let mut best = (f64::INFINITY, 0);
            for (j, &m) in medoids.iter().enumerate() {
                // a medoid always belongs to its own cluster
                let v = if m == i { -1.0 } else { d[i][m] };
                if v < best.0 {
                    best = (v, j);
                }
            }
            total += best.0.max(0.0);
            best.1
        })
        .collect();
    (a, total)
}

/// PAM-style alternation on a precomputed distance matrix. The first medoid
/// is drawn from `seed`, the rest by farthest-point selection. Since every
/// medoid stays in its own cluster, duplicate shapes cannot empty a cluster.
pub fn k_medoids_from_distances(d: &[Vec<f64>], k: usize, seed: u64) -> Result<KMedoids> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("K = {k} must be between 1 and the number of shapes ({n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = vec![rng.random_range(0..n)];
    while medoids.len() < k {
        let next = (0..n)
            .filter(|i| !medoids.contains(i))
            .map(|i| (medoids.iter().map(|&m| d[i][m]).fold(f64::INFINITY, f64::min), i))
            .fold((f64::NEG_INFINITY, usize::MAX), |best, c| if c.0 > best.0 { c } else { best });
        medoids.push(next.1);
    }

    let mut trace = Vec::new();
    let mut iterations = 0;
    let (mut assignments, mut objective) = assign(d, &medoids);
    trace.push(objective);
    while iterations < KMEDOIDS_MAX_ITER {
        iterations += 1;
        let mut updated = medoids.clone();
        for (j, slot) in updated.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == j).collect();
            if members.is_empty() {
                continue;
            }
            let cost = |c: usize| members.iter().map(|&i| d[c][i]).sum::<f64>();
            let mut best = (cost(*slot), *slot);
            for &c in &members {
                let v = cost(c);
                if v < best.0 || (v == best.0 && c < best.1) {
                    best = (v, c);
                }
            }
            *slot = best.1;
        }
        let (a, obj) = assign(d, &updated);
        if updated == medoids || obj > objective {
            break;
        }
        trace.push(obj);
        medoids = updated;
        assignments = a;
        objective = obj;
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&j| medoids[j]);
    let mut remap = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    Ok(KMedoids {
        medoids: order.iter().map(|&j| medoids[j]).collect(),
        assignments: assignments.iter().map(|&j| remap[j]).collect(),
        objective_trace: trace,
        iterations,
    })
}

/// The polygon in clockwise order (positive signed area) starting at the
/// vertex with minimal y, then minimal x.
pub fn canonical_contour(poly: &[Point]) -> Vec<Point> {
    let mut p: Vec<Point> = poly.to_vec();
    while p.len() > 1 && p.first() == p.last() {
        p.pop();
    }
    if signed_area(&p) < 0.0 {
        p.reverse();
    }
    let start = (0..p.len())
        .min_by(|&i, &j| p[i][1].total_cmp(&p[j][1]).then(p[i][0].total_cmp(&p[j][0])))
        .unwrap_or(0);
    p.rotate_left(start);
    p
}

fn cumulative(poly: &[Point]) -> Vec<f64> {
    let mut c = Vec::with_capacity(poly.len() + 1);
    c.push(0.0);
    for i in 0..poly.len() {
        let last = *c.last().unwrap();
        c.push(last + dist(poly[i], poly[(i + 1) % poly.len()]));
    }
    c
}

/// Point at arc length `s` (taken modulo the perimeter) along the closed polygon.
pub fn point_at_arc(poly: &[Point], cum: &[f64], s: f64) -> Point {
    let total = cum[poly.len()];
    let s = s.rem_euclid(total);
    let i = match cum.binary_search_by(|v| v.total_cmp(&s)) {
        Ok(i) => i.min(poly.len() - 1),
        Err(i) => i - 1,
    };
    let seg = cum[i + 1] - cum[i];
    let t = if seg > 0.0 { (s - cum[i]) / seg } else { 0.0 };
    let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// `count` landmarks spaced evenly by arc length along the canonical contour.
pub fn sample_landmarks(poly: &[Point], count: usize) -> Result<Vec<Point>> {
    if poly.len() < 3 {
        return Err(Error::invalid(format!("contour has {} vertices (at least 3 required)", poly.len())));
    }
    let c = canonical_contour(poly);
    let cum = cumulative(&c);
    let total = cum[c.len()];
    if count == 0 || total < count as f64 {
        return Err(Error::invalid(format!(
            "contour of length {total:.3} is too short for {count} landmarks"
        )));
    }
    Ok((0..count)
        .map(|k| point_at_arc(&c, &cum, k as f64 * total / count as f64))
        .collect())
}

/// Outer boundary of the component containing the first foreground pixel
/// (minimal y, then minimal x), as pixel centers in clockwise order.
pub fn trace_boundary(mask: &Grid<bool>) -> Result<Vec<Point>> {
    const DIRS: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];
    let start = (0..mask.len())
        .find(|&i| mask.as_slice()[i])
        .map(|i| ((i % mask.width()) as i64, (i / mask.width()) as i64))
        .ok_or_else(|| Error::invalid("mask is empty"))?;
    let on = |p: (i64, i64)| mask.get_signed(p.0, p.1).copied().unwrap_or(false);
    let dir_of = |from: (i64, i64), to: (i64, i64)| DIRS.iter().position(|&d| d == (to.0 - from.0, to.1 - from.1)).unwrap();

    let mut out = vec![start];
    let mut p = start;
    let mut back = 0usize; // west of the start pixel is background
    let mut first_move: Option<usize> = None;
    loop {
        let mut moved = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let q = (p.0 + DIRS[d].0, p.1 + DIRS[d].1);
            if on(q) {
                let prev = (back + k - 1) % 8;
                let c = (p.0 + DIRS[prev].0, p.1 + DIRS[prev].1);
                moved = Some((d, q, c));
                break;
            }
        }
        let Some((d, q, c)) = moved else { break };
        if p == start {
            match first_move {
                None => first_move = Some(d),
                Some(f) if f == d => break,
                _ => {}
            }
        }
        back = dir_of(q, c);
        p = q;
        out.push(p);
        if out.len() > 4 * mask.len() + 8 {
            break;
        }
    }
    // the closing return to `start` is implicit
    if out.len() > 1 && out.last() == Some(&start) {
        out.pop();
    }
    Ok(out.into_iter().map(|(x, y)| [x as f64, y as f64]).collect())
}

fn project_to_arc(poly: &[Point], cum: &[f64], p: Point) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        };
        let d = dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]]);
        if d < best.0 {
            best = (d, cum[i] + t * len2.sqrt());
        }
    }
    best
}

/// Edgelet type of each landmark: the boundary tangent over a +-2 arc-length
/// window picks the orientation, and `inside` probed along the orientation's
/// normal picks the polarity.
pub fn match_leaf_types(boundary: &[Point], landmarks: &[Point], inside: impl Fn(Point) -> bool) -> Result<Vec<LeafType>> {
    let c = canonical_contour(boundary);
    if c.len() < 2 {
        return Err(Error::invalid("boundary has fewer than 2 points"));
    }
    let cum = cumulative(&c);
    landmarks
        .iter()
        .map(|&p| {
            let (d, s) = project_to_arc(&c, &cum, p);
            if d > 1.0 {
                return Err(Error::invalid(format!(
                    "landmark ({:.2}, {:.2}) is {d:.2} px from the boundary",
                    p[0], p[1]
                )));
            }
            let a = point_at_arc(&c, &cum, s - TANGENT_HALF_WINDOW);
            let b = point_at_arc(&c, &cum, s + TANGENT_HALF_WINDOW);
            let k = quantize_orientation((b[1] - a[1]).atan2(b[0] - a[0]));
            let th = orientation_angle(k);
            let n = [-th.sin(), th.cos()];
            let mut polarity = 2;
            for r in [1.5, 1.0, 0.5] {
                let pos = inside([p[0] + r * n[0], p[1] + r * n[1]]);
                let neg = inside([p[0] - r * n[0], p[1] - r * n[1]]);
                match (pos, neg) {
                    (true, true) => {
                        polarity = 2;
                        break;
                    }
                    (true, false) => {
                        polarity = 0;
                        break;
                    }
                    (false, true) => {
                        polarity = 1;
                        break;
                    }
                    (false, false) => {}
                }
            }
            LeafType::new(k, polarity)
        })
        .collect()
}

/// Landmarks and leaf types of one part, in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartLandmarks {
    pub label: PartLabel,
    pub points: Vec<Point>,
    pub leaf_types: Vec<LeafType>,
}

struct Subtree {
    node: usize,
    level: u32,
    pos: Point,
}

fn compose(nodes: &mut Vec<CompNode>, a: Subtree, b: Subtree) -> Subtree {
    let id = nodes.len();
    let delta = [b.pos[0] - a.pos[0], b.pos[1] - a.pos[1]];
    nodes.push(CompNode::composite(id, a.level + 1, a.node, b.node, delta));
    Subtree {
        node: id,
        level: a.level + 1,
        pos: [(a.pos[0] + b.pos[0]) / 2.0, (a.pos[1] + b.pos[1]) / 2.0],
    }
}

/// Pairs adjacent landmarks level by level within each part, then joins the
/// part roots, always the two shallowest first, ties in the given order.
/// The head root scores against part channel 0.
pub fn compose_tree(parts: &[PartLandmarks]) -> Result<CompTree> {
    if parts.is_empty() {
        return Err(Error::invalid("no parts to compose"));
    }
    let mut nodes = Vec::new();
    let mut roots: Vec<Subtree> = Vec::new();
    for part in parts {
        let n = part.points.len();
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::invalid(format!("{} has {n} landmarks, a power of two is required", part.label)));
        }
        if part.leaf_types.len() != n {
            return Err(Error::DimensionMismatch {
                what: format!("{} leaf types", part.label),
                expected: n,
                found: part.leaf_types.len(),
            });
        }
        let mut level: Vec<Subtree> = part
            .points
            .iter()
            .zip(&part.leaf_types)
            .map(|(&p, &t)| {
                let id = nodes.len();
                nodes.push(CompNode::leaf(id, t));
                Subtree { node: id, level: 1, pos: p }
            })
            .collect();
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len() / 2);
            let mut it = level.into_iter();
            while let (Some(a), Some(b)) = (it.next(), it.next()) {
                next.push(compose(&mut nodes, a, b));
            }
            level = next;
        }
        let root = level.pop().unwrap();
        nodes[root.node].part_label = Some(part.label);
        if part.label == PartLabel::Head {
            nodes[root.node].part_score_channel = Some(0);
        }
        roots.push(root);
    }
    while roots.len() > 1 {
        let mut order: Vec<usize> = (0..roots.len()).collect();
        order.sort_by_key(|&i| (roots[i].level, i));
        let (i, j) = (order[0].min(order[1]), order[0].max(order[1]));
        if roots[i].level != roots[j].level {
            return Err(Error::invalid(format!(
                "cannot join part trees of depth {} and {}; landmark counts must allow equal depths",
                roots[i].level, roots[j].level
            )));
        }
        let b = roots.remove(j);
        let a = roots.remove(i);
        let merged = compose(&mut nodes, a, b);
        roots.insert(i, merged);
    }
    let tree = CompTree { nodes };
    tree.ensure_valid()?;
    Ok(tree)
}

/// Landmarks and edgelet types for every part with a nonzero count, in
/// schema order, from polygons already at working resolution.
pub fn part_landmarks(parts: &[PartPolygon], counts: &LandmarkCounts) -> Result<Vec<PartLandmarks>> {
    let inside = |p: Point| parts.iter().any(|q| point_in_polygon(p, &q.polygon));
    let mut out = Vec::new();
    for label in PartLabel::ALL {
        let count = counts.get(label);
        if count == 0 {
            continue;
        }
        let poly = parts
            .iter()
            .find(|p| p.label == label)
            .ok_or_else(|| Error::invalid(format!("no {label} polygon")))?;
        let points = sample_landmarks(&poly.polygon, count)?;
        let leaf_types = match_leaf_types(&poly.polygon, &points, inside)?;
        out.push(PartLandmarks {
            label,
            points,
            leaf_types,
        });
    }
    Ok(out)
}

/// Tree of one annotation plus the landmarks it was built from.
pub fn tree_from_annotation(ann: &PartAnnotation, counts: &LandmarkCounts, grid_size: usize) -> Result<(CompTree, Vec<PartLandmarks>)> {
    let parts = ann.scaled_parts(grid_size)?;
    let lm = part_landmarks(&parts, counts).map_err(|e| match e {
        Error::InvalidInput(m) => Error::invalid(format!("annotation {}: {m}", ann.id)),
        other => other,
    })?;
    Ok((compose_tree(&lm)?, lm))
}

#[derive(Debug, Clone)]
pub struct StructureConfig {
    pub k: usize,
    pub counts: LandmarkCounts,
    pub grid_size: usize,
    pub square_side: usize,
    pub channels: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LearnedStructure {
    pub model: MixtureModel,
    pub clustering: KMedoids,
}

/// Clusters the annotations into `k` groups and builds one mixture per medoid.
pub fn learn_structure(annotations: &[PartAnnotation], cfg: &StructureConfig) -> Result<LearnedStructure> {
    if annotations.is_empty() {
        return Err(Error::invalid("no annotations"));
    }
    let masks: Vec<LabeledMask> = annotations
        .par_iter()
        .map(|a| rasterize_annotation(a, cfg.grid_size))
        .collect::<Result<_>>()?;
    let clustering = k_medoids(&masks, cfg.k, cfg.seed)?;
    let mixtures: Vec<CompTree> = clustering
        .medoids
        .par_iter()
        .map(|&m| tree_from_annotation(&annotations[m], &cfg.counts, cfg.grid_size).map(|(t, _)| t))
        .collect::<Result<_>>()?;
    let model = MixtureModel {
        grid_size: cfg.grid_size,
        square_side: cfg.square_side,
        channels: cfg.channels,
        landmark_counts: cfg.counts,
        mixtures,
    };
    model.validate()?;
    Ok(LearnedStructure { model, clustering })
}
