//! MAP parsing of a feature stack by a mixture of compositional trees.
//!
//! Bottom-up, every composite node combines its children's energy tables.
//! The approximate step first picks the best first-child position with the
//! deformation term alone ([`pairwise_min_2d`]) and then adds the second
//! child's energy at the implied position `2S - S1`. The exact step scans all
//! first-child positions jointly and is quadratic in the grid size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestack::synth::part_polygons;
use crate::featurestack::{build_leaf_unaries, FeatureStack, LeafUnaryField};
use crate::grid::Grid;
use crate::gridmath::{pairwise_min_2d, EnvelopeStats, NO_ARG};
use crate::raster::signed_area;
use crate::shapemodel::{CompTree, MixtureModel, PartLabel, PartPolygon, Point, WeightVector};

/// Grid cells above which [`exact_parse`] refuses to run by default.
pub const DEFAULT_EXACT_CAP: usize = 2500;

/// Evaluated unary terms shared by every mixture.
#[derive(Debug, Clone)]
pub struct Unaries {
    pub leaf: LeafUnaryField,
    /// `wPart * part[c]` for every part channel `c`.
    pub part: Vec<Grid<f64>>,
}

impl Unaries {
    pub fn build(stack: &FeatureStack, weights: &WeightVector, square_side: usize) -> Result<Self> {
        let leaf = build_leaf_unaries(stack, weights, square_side)?;
        let part = (0..stack.part_channels())
            .map(|c| {
                Grid::from_vec(
                    stack.width(),
                    stack.height(),
                    stack.part.channel(c).iter().map(|&v| weights.w_part * v as f64).collect(),
                )
            })
            .collect();
        Ok(Unaries { leaf, part })
    }

    pub fn width(&self) -> usize {
        self.leaf.width()
    }

    pub fn height(&self) -> usize {
        self.leaf.height()
    }

    fn part_grid(&self, tree: &CompTree, id: usize) -> Result<Option<&Grid<f64>>> {
        match tree.node(id).part_score_channel {
            None => Ok(None),
            Some(c) => self.part.get(c).map(Some).ok_or_else(|| {
                Error::invalid(format!("node {id} uses part channel {c}, stack has {}", self.part.len()))
            }),
        }
    }
}

/// Energy table of one composite node.
#[derive(Debug, Clone)]
pub struct ComposeOutput {
    pub energy: Grid<f64>,
    /// Flat index of the chosen first-child position, or [`NO_ARG`].
    pub back: Grid<u32>,
    pub stats: EnvelopeStats,
}

/// `wx (x2 - x1 - dx)^2 + wy (y2 - y1 - dy)^2`.
#[inline]
pub fn deformation(w_def: [f64; 2], delta: Point, s1: [usize; 2], s2: [usize; 2]) -> f64 {
    let ex = s2[0] as f64 - s1[0] as f64 - delta[0];
    let ey = s2[1] as f64 - s1[1] as f64 - delta[1];
    w_def[0] * ex * ex + w_def[1] * ey * ey
}

fn check_shapes(e1: &Grid<f64>, e2: &Grid<f64>, part: Option<&Grid<f64>>) -> Result<()> {
    if !e1.same_shape(e2) || part.is_some_and(|p| !p.same_shape(e1)) {
        return Err(Error::invalid(format!(
            "energy grids differ in size ({}x{} vs {}x{})",
            e1.width(),
            e1.height(),
            e2.width(),
            e2.height()
        )));
    }
    Ok(())
}

/// Approximate composition: `S1*` minimizes deformation plus `E1` alone.
pub fn compose_step(
    e1: &Grid<f64>,
    e2: &Grid<f64>,
    delta: Point,
    w_def: [f64; 2],
    part: Option<&Grid<f64>>,
) -> Result<ComposeOutput> {
    check_shapes(e1, e2, part)?;
    let pm = pairwise_min_2d(e1, w_def, delta)?;
    let (w, h) = (e1.width(), e1.height());
    let mut energy = pm.energy;
    let mut back = pm.arg;
    for y in 0..h {
        for x in 0..w {
            let a = *back.get(x, y);
            let cell = energy.get_mut(x, y);
            if a == NO_ARG {
                *cell = f64::INFINITY;
                continue;
            }
            let (x1, y1) = (a as usize % w, a as usize / w);
            let (x2, y2) = (2 * x - x1, 2 * y - y1);
            let v = *cell + *e2.get(x2, y2) + part.map_or(0.0, |p| *p.get(x, y));
            if v.is_finite() {
                *cell = v;
            } else {
                *cell = f64::INFINITY;
                *back.get_mut(x, y) = NO_ARG;
            }
        }
    }
    Ok(ComposeOutput {
        energy,
        back,
        stats: pm.stats,
    })
}

/// Exact composition by scanning every first-child position. Sequential, so
/// its running time reflects the quadratic work alone.
pub fn compose_exact(
    e1: &Grid<f64>,
    e2: &Grid<f64>,
    delta: Point,
    w_def: [f64; 2],
    part: Option<&Grid<f64>>,
) -> Result<ComposeOutput> {
    check_shapes(e1, e2, part)?;
    for (name, w) in [("wDef.x", w_def[0]), ("wDef.y", w_def[1])] {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::NegativeWeight { name, value: w });
        }
    }
    let (w, h) = (e1.width(), e1.height());
    let rows: Vec<(Vec<f64>, Vec<u32>)> = (0..h)
        .map(|y| {
            let mut ev = vec![f64::INFINITY; w];
            let mut bv = vec![NO_ARG; w];
            for x in 0..w {
                let mut best = (f64::INFINITY, NO_ARG);
                // 2S - S1 in grid: x1 in [2x - (w-1), 2x]
                let x_lo = (2 * x).saturating_sub(w - 1);
                let y_lo = (2 * y).saturating_sub(h - 1);
                for y1 in y_lo..=(2 * y).min(h - 1) {
                    for x1 in x_lo..=(2 * x).min(w - 1) {
                        let a = *e1.get(x1, y1);
                        if !a.is_finite() {
                            continue;
                        }
                        let (x2, y2) = (2 * x - x1, 2 * y - y1);
                        let v = a + *e2.get(x2, y2) + deformation(w_def, delta, [x1, y1], [x2, y2]);
                        if v < best.0 {
                            best = (v, (y1 * w + x1) as u32);
                        }
                    }
                }
                if best.1 != NO_ARG {
                    let v = best.0 + part.map_or(0.0, |p| *p.get(x, y));
                    if v.is_finite() {
                        ev[x] = v;
                        bv[x] = best.1;
                    }
                }
            }
            (ev, bv)
        })
        .collect();
    let mut energy = Vec::with_capacity(w * h);
    let mut back = Vec::with_capacity(w * h);
    for (e, b) in rows {
        energy.extend(e);
        back.extend(b);
    }
    Ok(ComposeOutput {
        energy: Grid::from_vec(w, h, energy),
        back: Grid::from_vec(w, h, back),
        stats: EnvelopeStats::default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Approximate,
    Exact,
}

/// Best configuration of one or more mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseResult {
    pub mixture_index: usize,
    pub root: [usize; 2],
    /// Position of every node, indexed by node id.
    pub positions: Vec<[usize; 2]>,
    /// Leaf positions in leaf order.
    pub landmarks: Vec<Point>,
    /// Leaf positions grouped by inherited part label.
    pub parts: Vec<PartPolygon>,
    /// Energy re-evaluated at the returned configuration.
    pub total_energy: f64,
    /// Minimum of the root table.
    pub dp_energy: f64,
    pub score: f64,
    /// Minimal energy per mixture; `None` when a mixture cannot be placed.
    pub per_mixture_energies: Vec<Option<f64>>,
    pub stats: EnvelopeStats,
}

/// Energy of a full configuration: leaf unaries, deformations and part terms.
pub fn evaluate_energy(tree: &CompTree, unaries: &Unaries, w_def: [f64; 2], positions: &[[usize; 2]]) -> Result<f64> {
    if positions.len() != tree.len() {
        return Err(Error::DimensionMismatch {
            what: "node positions".into(),
            expected: tree.len(),
            found: positions.len(),
        });
    }
    let mut e = 0.0;
    for node in &tree.nodes {
        let p = positions[node.id];
        if p[0] >= unaries.width() || p[1] >= unaries.height() {
            return Err(Error::OffGrid {
                x: p[0] as i64,
                y: p[1] as i64,
                side: 1,
                width: unaries.width(),
                height: unaries.height(),
            });
        }
        if let Some(t) = node.leaf_type {
            e += *unaries.leaf.get(t).get(p[0], p[1]);
        } else if let ([a, b], Some(d)) = (node.children.as_slice(), node.delta) {
            e += deformation(w_def, d, positions[*a], positions[*b]);
        }
        if let Some(g) = unaries.part_grid(tree, node.id)? {
            e += *g.get(p[0], p[1]);
        }
    }
    Ok(e)
}

/// Node ids whose position is not the average of their children's.
pub fn hard_constraint_violations(tree: &CompTree, positions: &[[usize; 2]]) -> Vec<usize> {
    tree.nodes
        .iter()
        .filter(|n| match n.children.as_slice() {
            [a, b] => {
                let (pa, pb, p) = (positions[*a], positions[*b], positions[n.id]);
                pa[0] + pb[0] != 2 * p[0] || pa[1] + pb[1] != 2 * p[1]
            }
            _ => false,
        })
        .map(|n| n.id)
        .collect()
}

/// Parses one mixture against precomputed unaries.
pub fn parse_tree(tree: &CompTree, unaries: &Unaries, w_def: [f64; 2], method: Method) -> Result<ParseResult> {
    tree.ensure_valid()?;
    let (w, h) = (unaries.width(), unaries.height());
    let n = tree.len();
    let mut energy: Vec<Option<Grid<f64>>> = vec![None; n];
    let mut back: Vec<Option<Grid<u32>>> = vec![None; n];
    let mut stats = EnvelopeStats::default();
    for id in tree.post_order() {
        let node = tree.node(id);
        let part = unaries.part_grid(tree, id)?;
        match (node.leaf_type, node.children.as_slice(), node.delta) {
            (Some(t), _, _) => {
                let mut g = unaries.leaf.get(t).clone();
                if let Some(p) = part {
                    for (v, q) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
                        *v += q;
                    }
                }
                energy[id] = Some(g);
            }
            (None, [a, b], Some(d)) => {
                let e1 = energy[*a].take().expect("child table");
                let e2 = energy[*b].take().expect("child table");
                let out = match method {
                    Method::Approximate => compose_step(&e1, &e2, d, w_def, part)?,
                    Method::Exact => compose_exact(&e1, &e2, d, w_def, part)?,
                };
                stats.merge(&out.stats);
                energy[id] = Some(out.energy);
                back[id] = Some(out.back);
            }
            _ => unreachable!("validated tree"),
        }
    }
    let root = tree.root();
    let root_table = energy[root].take().expect("root table");
    let (rx, ry) = root_table
        .argmin()
        .ok_or_else(|| Error::Infeasible("no feasible placement: every root position has infinite energy".into()))?;
    let dp_energy = *root_table.get(rx, ry);

    let mut positions = vec![[0usize; 2]; n];
    positions[root] = [rx, ry];
    for id in tree.pre_order() {
        if let [a, b] = tree.node(id).children.as_slice() {
            let [x, y] = positions[id];
            let arg = *back[id].as_ref().expect("back pointers").get(x, y);
            debug_assert_ne!(arg, NO_ARG);
            let (x1, y1) = (arg as usize % w, arg as usize / w);
            positions[*a] = [x1, y1];
            positions[*b] = [2 * x - x1, 2 * y - y1];
        }
    }
    debug_assert!(positions.iter().all(|p| p[0] < w && p[1] < h));
    let total_energy = evaluate_energy(tree, unaries, w_def, &positions)?;
    let landmarks: Vec<Point> = tree
        .leaves()
        .into_iter()
        .map(|l| [positions[l][0] as f64, positions[l][1] as f64])
        .collect();
    let parts = part_polygons(tree, &landmarks);
    Ok(ParseResult {
        mixture_index: 0,
        root: [rx, ry],
        positions,
        landmarks,
        parts,
        total_energy,
        dp_energy,
        score: -total_energy,
        per_mixture_energies: vec![Some(total_energy)],
        stats,
    })
}

pub fn parse_one_mixture(tree: &CompTree, stack: &FeatureStack, weights: &WeightVector, square_side: usize) -> Result<ParseResult> {
    let unaries = Unaries::build(stack, weights, square_side)?;
    parse_tree(tree, &unaries, weights.w_def, Method::Approximate)
}

/// Exact parse; refuses grids with more than `cap` cells.
pub fn exact_parse(
    tree: &CompTree,
    stack: &FeatureStack,
    weights: &WeightVector,
    square_side: usize,
    cap: usize,
) -> Result<ParseResult> {
    check_cap(stack.width() * stack.height(), cap)?;
    let unaries = Unaries::build(stack, weights, square_side)?;
    parse_tree(tree, &unaries, weights.w_def, Method::Exact)
}

pub fn check_cap(cells: usize, cap: usize) -> Result<()> {
    if cells > cap {
        return Err(Error::CapExceeded { size: cells, cap });
    }
    Ok(())
}

/// Parses every mixture against shared unaries and keeps the lowest energy,
/// ties going to the lowest index.
pub fn parse_mixtures(trees: &[CompTree], unaries: &Unaries, w_def: [f64; 2], method: Method) -> Result<ParseResult> {
    if trees.is_empty() {
        return Err(Error::invalid("model has no mixtures"));
    }
    let results: Vec<Result<ParseResult>> = trees
        .par_iter()
        .map(|t| parse_tree(t, unaries, w_def, method))
        .collect();
    let mut per_mixture = Vec::with_capacity(trees.len());
    let mut best: Option<ParseResult> = None;
    let mut stats = EnvelopeStats::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut r) => {
                per_mixture.push(Some(r.total_energy));
                stats.merge(&r.stats);
                if best.as_ref().is_none_or(|b| r.total_energy < b.total_energy) {
                    r.mixture_index = i;
                    best = Some(r);
                }
            }
            Err(Error::Infeasible(_)) => per_mixture.push(None),
            Err(e) => return Err(e),
        }
    }
    let mut best = best.ok_or_else(|| Error::Infeasible("no feasible placement for any mixture".into()))?;
    best.per_mixture_energies = per_mixture;
    best.stats = stats;
    Ok(best)
}

/// Parses `stack` with every mixture of `model`.
pub fn parse(model: &MixtureModel, stack: &FeatureStack, weights: &WeightVector) -> Result<ParseResult> {
    weights.validate(model.channels)?;
    if stack.channels() != model.channels {
        return Err(Error::DimensionMismatch {
            what: "appearance channels".into(),
            expected: model.channels,
            found: stack.channels(),
        });
    }
    let unaries = Unaries::build(stack, weights, model.square_side)?;
    parse_mixtures(&model.mixtures, &unaries, weights.w_def, Method::Approximate)
}

/// A part contour extracted from a parse.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedPolygon {
    pub label: PartLabel,
    pub polygon: Vec<Point>,
    /// Zero enclosed area.
    pub degenerate: bool,
}

/// One closed polygon per part, landmarks in stored order.
pub fn landmarks_to_polygons(result: &ParseResult) -> Result<Vec<ExtractedPolygon>> {
    result
        .parts
        .iter()
        .map(|p| {
            if p.polygon.len() < 3 {
                return Err(Error::invalid(format!(
                    "part {} has {} landmarks, a polygon needs at least 3",
                    p.label,
                    p.polygon.len()
                )));
            }
            Ok(ExtractedPolygon {
                label: p.label,
                polygon: p.polygon.clone(),
                degenerate: signed_area(&p.polygon).abs() < 1e-12,
            })
        })
        .collect()
}

/// Maps a working-grid coordinate to a grid `scale` times larger, matching
/// the pixel-center convention of [`FeatureStack::resized`].
pub fn rescale_point(p: Point, scale: [f64; 2]) -> Point {
    [(p[0] + 0.5) * scale[0] - 0.5, (p[1] + 0.5) * scale[1] - 0.5]
}

/// The parse document written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParseDocument {
    pub mixture_index: usize,
    pub energy: f64,
    pub per_mixture_energies: Vec<Option<f64>>,
    pub parts: Vec<PartPolygon>,
    pub landmarks: Vec<Point>,
}

impl ParseDocument {
    /// Builds the document, mapping coordinates by `scale` (1 for none).
    pub fn from_result(r: &ParseResult, scale: [f64; 2]) -> Result<Self> {
        let map = |ps: &[Point]| ps.iter().map(|&p| rescale_point(p, scale)).collect::<Vec<_>>();
        let parts = landmarks_to_polygons(r)?
            .into_iter()
            .map(|p| PartPolygon {
                label: p.label,
                polygon: map(&p.polygon),
            })
            .collect();
        Ok(ParseDocument {
            mixture_index: r.mixture_index,
            energy: r.total_energy,
            per_mixture_energies: r.per_mixture_energies.clone(),
            parts,
            landmarks: map(&r.landmarks),
        })
    }
}
