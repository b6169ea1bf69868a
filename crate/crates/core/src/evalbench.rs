//! Segmentation scoring, approximation-error measurement and timing.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestack::synth::GroundTruth;
use crate::featurestack::{FeatureStack, LeafUnaryField};
use crate::grid::Grid;
use crate::gridmath::EnvelopeStats;
use crate::inference::{check_cap, parse, parse_mixtures, parse_tree, Method, ParseResult, Unaries};
use crate::raster::{dist, fill_polygon, line_pixels};
use crate::shapemodel::{CompNode, CompTree, LeafType, MixtureModel, PartLabel, PartPolygon, Point, WeightVector, LEAF_TYPES};
use crate::structlearn::{mask_distance, rasterize_parts};

/// `|A and B| / |A or B|` of two masks.
pub fn mask_iou(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid("IOU masks differ in size"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        return Err(Error::invalid("IOU of two empty regions is undefined"));
    }
    Ok(inter as f64 / union as f64)
}

/// IOU of two polygons rasterized on a `width x height` grid.
pub fn iou(a: &[Point], b: &[Point], width: usize, height: usize) -> Result<f64> {
    mask_iou(&fill_polygon(a, width, height), &fill_polygon(b, width, height))
}

fn union_mask(polys: &[&[Point]], width: usize, height: usize) -> Grid<bool> {
    let mut m = Grid::filled(width, height, false);
    for p in polys {
        let f = fill_polygon(p, width, height);
        for (o, &v) in m.as_mut_slice().iter_mut().zip(f.as_slice()) {
            *o |= v;
        }
    }
    m
}

/// Evaluation rows: the three parts and the merged neck+torso region.
pub const EVAL_ROWS: [&str; 4] = ["head", "neck", "torso", "neck+torso"];

fn row_labels(row: &str) -> &'static [PartLabel] {
    match row {
        "head" => &[PartLabel::Head],
        "neck" => &[PartLabel::Neck],
        "torso" => &[PartLabel::Torso],
        _ => &[PartLabel::Neck, PartLabel::Torso],
    }
}

/// IOU per evaluation row; `None` where the row's region is empty in both.
pub fn part_ious(pred: &[PartPolygon], truth: &[PartPolygon], width: usize, height: usize) -> Vec<Option<f64>> {
    EVAL_ROWS
        .iter()
        .map(|row| {
            let labels = row_labels(row);
            let pick = |ps: &[PartPolygon]| -> Vec<Vec<Point>> {
                ps.iter().filter(|p| labels.contains(&p.label)).map(|p| p.polygon.clone()).collect()
            };
            let (p, t) = (pick(pred), pick(truth));
            if t.is_empty() {
                return None;
            }
            let pm = union_mask(&p.iter().map(Vec::as_slice).collect::<Vec<_>>(), width, height);
            let tm = union_mask(&t.iter().map(Vec::as_slice).collect::<Vec<_>>(), width, height);
            mask_iou(&pm, &tm).ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IouRow {
    pub part: String,
    pub mean_iou: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceEval {
    pub index: usize,
    pub predicted_mixture: usize,
    pub true_mixture: usize,
    /// Generating mixture the predicted mixture corresponds to, when known.
    pub mapped_mixture: Option<usize>,
    pub ious: Vec<Option<f64>>,
    pub energy: f64,
    /// Mean distance between predicted and true landmarks, leaf by leaf.
    pub landmark_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub rows: Vec<IouRow>,
    pub mixture_accuracy: Option<f64>,
    pub mean_landmark_error: Option<f64>,
    pub instances: Vec<InstanceEval>,
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>6}\n", "part", "meanIOU", "n");
        for r in &self.rows {
            let v = r.mean_iou.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            s += &format!("{:<12} {:>8} {:>6}\n", r.part, v, r.count);
        }
        if let Some(a) = self.mixture_accuracy {
            s += &format!("mixture accuracy {a:.4}\n");
        }
        if let Some(e) = self.mean_landmark_error {
            s += &format!("mean landmark error {e:.3} px\n");
        }
        s
    }

    pub fn row(&self, part: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.part == part).and_then(|r| r.mean_iou)
    }
}

/// Shifted copy of the parts with their bounding box starting at `(1, 1)`.
fn normalized_parts(parts: &[PartPolygon]) -> (Vec<PartPolygon>, usize, usize) {
    let pts = parts.iter().flat_map(|p| p.polygon.iter());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let shifted = parts
        .iter()
        .map(|p| PartPolygon {
            label: p.label,
            polygon: p.polygon.iter().map(|q| [q[0] - x0.floor() + 1.0, q[1] - y0.floor() + 1.0]).collect(),
        })
        .collect();
    (shifted, (x1 - x0).ceil() as usize + 3, (y1 - y0).ceil() as usize + 3)
}

/// For every model mixture, the generating mixture of the ground-truth
/// instance whose labeled mask is closest to the mixture's mean shape.
pub fn mixture_correspondence(model: &MixtureModel, truths: &[GroundTruth]) -> Result<Vec<usize>> {
    if truths.is_empty() {
        return Err(Error::invalid("no ground truth to match mixtures against"));
    }
    let masks: Vec<Grid<u8>> = truths
        .iter()
        .map(|t| {
            let (p, w, h) = normalized_parts(&t.parts);
            rasterize_parts(&p, w, h)
        })
        .collect::<Result<_>>()?;
    model
        .mixtures
        .iter()
        .map(|tree| {
            let lm = tree.mean_shape([0.0, 0.0])?;
            let (p, w, h) = normalized_parts(&crate::featurestack::synth::part_polygons(tree, &lm));
            let m = rasterize_parts(&p, w, h)?;
            let best = masks
                .iter()
                .enumerate()
                .map(|(i, t)| (mask_distance(&m, t), i))
                .fold((f64::INFINITY, 0), |b, c| if c.0 < b.0 { c } else { b });
            Ok(truths[best.1].mixture_index)
        })
        .collect()
}

/// Parses every stack and scores the parts against ground truth.
pub fn eval_dataset(
    model: &MixtureModel,
    weights: &WeightVector,
    data: &[(FeatureStack, GroundTruth)],
    mixture_map: Option<&[usize]>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation dataset"));
    }
    let results: Vec<ParseResult> = data
        .par_iter()
        .map(|(s, _)| parse(model, s, weights))
        .collect::<Result<_>>()?;
    let mut instances = Vec::with_capacity(data.len());
    for (i, ((stack, truth), r)) in data.iter().zip(&results).enumerate() {
        let ious = part_ious(&r.parts, &truth.parts, stack.width(), stack.height());
        let landmark_error = (r.landmarks.len() == truth.landmarks.len() && !r.landmarks.is_empty()).then(|| {
            r.landmarks.iter().zip(&truth.landmarks).map(|(a, b)| dist(*a, *b)).sum::<f64>() / r.landmarks.len() as f64
        });
        instances.push(InstanceEval {
            index: i,
            predicted_mixture: r.mixture_index,
            true_mixture: truth.mixture_index,
            mapped_mixture: mixture_map.and_then(|m| m.get(r.mixture_index).copied()),
            ious,
            energy: r.total_energy,
            landmark_error,
        });
    }
    Ok(summarize(instances, mixture_map.is_some()))
}

pub fn summarize(instances: Vec<InstanceEval>, mapped: bool) -> EvalReport {
    let rows = EVAL_ROWS
        .iter()
        .enumerate()
        .map(|(k, part)| {
            let vals: Vec<f64> = instances.iter().filter_map(|e| e.ious[k]).collect();
            IouRow {
                part: part.to_string(),
                mean_iou: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                count: vals.len(),
            }
        })
        .collect();
    let mixture_accuracy = mapped.then(|| {
        instances.iter().filter(|e| e.mapped_mixture == Some(e.true_mixture)).count() as f64 / instances.len() as f64
    });
    let errs: Vec<f64> = instances.iter().filter_map(|e| e.landmark_error).collect();
    EvalReport {
        rows,
        mixture_accuracy,
        mean_landmark_error: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
        instances,
    }
}

/// A parse problem given directly by its unaries.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub tree: CompTree,
    pub unaries: Unaries,
    pub w_def: [f64; 2],
    /// Where the low-cost wells were placed, leaf order (empty without wells).
    pub planted: Vec<[usize; 2]>,
}

/// How the unaries of a [`random_instance`] are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceKind {
    /// Uniform `[0, 1)` noise only.
    Noise,
    /// Noise plus a Gaussian well (sigma 1 px, depth 2 to 4) per leaf, within
    /// 1 px of the leaf's zero-deformation position.
    SmoothWells,
    /// As `SmoothWells`, but each well is a single pixel.
    PixelWells,
    /// A random star-shaped polygon rendered by the synthetic generator with
    /// noise 0.3 and scored by the regular feature pipeline.
    Rendered,
}

pub const WELL_SIGMA: f64 = 1.0;

/// A complete tree with `levels` levels, distinct random leaf types and even
/// random offsets, on a `grid x grid` field of unaries drawn per `kind`.
pub fn random_instance(grid: usize, levels: u32, seed: u64, kind: InstanceKind) -> Result<RandomInstance> {
    if kind == InstanceKind::Rendered {
        return rendered_instance(grid, levels, seed);
    }
    if !(2..=5).contains(&levels) {
        return Err(Error::invalid(format!("tree levels {levels} must be between 2 and 5")));
    }
    let jitter = (kind != InstanceKind::Noise) as i64;
    let reach: i64 = (1..levels).map(|l| 1i64 << (l - 1)).sum::<i64>() + jitter;
    if (grid as i64) < 2 * reach + 1 {
        return Err(Error::invalid(format!("grid {grid} is too small for {levels} levels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_leaves = 1usize << (levels - 1);
    let mut types: Vec<usize> = (0..LEAF_TYPES).collect();
    types.shuffle(&mut rng);

    let mut nodes: Vec<CompNode> = (0..n_leaves).map(|i| CompNode::leaf(i, LeafType::from_index(types[i]))).collect();
    let mut layer: Vec<usize> = (0..n_leaves).collect();
    let mut level = 1;
    while layer.len() > 1 {
        level += 1;
        let half = 1i64 << (level - 2);
        let mut next = Vec::new();
        for pair in layer.chunks(2) {
            let d = loop {
                let d = [rng.random_range(-half..=half) * 2, rng.random_range(-half..=half) * 2];
                if d != [0, 0] {
                    break d;
                }
            };
            let id = nodes.len();
            nodes.push(CompNode::composite(id, level, pair[0], pair[1], [d[0] as f64, d[1] as f64]));
            next.push(id);
        }
        layer = next;
    }
    let tree = CompTree { nodes };
    tree.ensure_valid()?;

    let g = grid as i64;
    let root = [rng.random_range(reach..g - reach), rng.random_range(reach..g - reach)];
    let mean = tree.mean_shape([root[0] as f64, root[1] as f64])?;
    let mut grids = vec![Grid::filled(grid, grid, 0.0); LEAF_TYPES];
    let leaves = tree.leaves();
    for &l in &leaves {
        let t = tree.node(l).leaf_type.unwrap();
        grids[t.index()] = Grid::from_fn(grid, grid, |_, _| rng.random::<f64>());
    }
    let mut planted = Vec::new();
    if kind != InstanceKind::Noise {
        for (&l, p) in leaves.iter().zip(&mean) {
            let jx = (p[0] as i64 + rng.random_range(-1..=1)).clamp(0, g - 1) as usize;
            let jy = (p[1] as i64 + rng.random_range(-1..=1)).clamp(0, g - 1) as usize;
            let depth = rng.random_range(2.0..4.0);
            let u = &mut grids[tree.node(l).leaf_type.unwrap().index()];
            if kind == InstanceKind::PixelWells {
                *u.get_mut(jx, jy) = -depth;
            } else {
                for y in 0..grid {
                    for x in 0..grid {
                        let d2 = (x as f64 - jx as f64).powi(2) + (y as f64 - jy as f64).powi(2);
                        *u.get_mut(x, y) -= depth * (-d2 / (2.0 * WELL_SIGMA * WELL_SIGMA)).exp();
                    }
                }
            }
            planted.push([jx, jy]);
        }
    }
    let w_def = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
    Ok(RandomInstance {
        tree,
        unaries: Unaries {
            leaf: LeafUnaryField::from_grids(grids)?,
            part: Vec::new(),
        },
        w_def,
        planted,
    })
}

/// Square side used by rendered instances.
pub const RENDERED_SQUARE_SIDE: usize = 3;
pub const RENDERED_NOISE: f64 = 0.3;

fn rendered_instance(grid: usize, levels: u32, seed: u64) -> Result<RandomInstance> {
    if !(2..=6).contains(&levels) {
        return Err(Error::invalid(format!("tree levels {levels} must be between 2 and 6")));
    }
    let margin = (RENDERED_SQUARE_SIDE / 2) as f64;
    if (grid as f64) < 2.0 * margin + 6.0 {
        return Err(Error::invalid(format!("grid {grid} is too small for a rendered shape")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1usize << (levels - 1);
    let g = grid as f64;
    let half = (g - 1.0) / 2.0 - margin;
    let c = [g / 2.0 - 0.5 + rng.random_range(-0.15..0.15) * g, g / 2.0 - 0.5 + rng.random_range(-0.15..0.15) * g];
    let mut angles: Vec<f64> = (0..n)
        .map(|i| (i as f64 + rng.random_range(0.1..0.9)) * std::f64::consts::TAU / n as f64)
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = margin;
    let hi = g - 1.0 - margin;
    let points: Vec<Point> = angles
        .iter()
        .map(|a| {
            let r = rng.random_range(0.45..1.0) * half;
            [(c[0] + r * a.cos()).clamp(lo, hi), (c[1] + r * a.sin()).clamp(lo, hi)]
        })
        .collect();
    let inside = |p: Point| crate::raster::point_in_polygon(p, &points);
    let leaf_types = crate::structlearn::match_leaf_types(&points, &points, inside)?;
    let tree = crate::structlearn::compose_tree(&[crate::structlearn::PartLandmarks {
        label: PartLabel::Torso,
        points: points.clone(),
        leaf_types: leaf_types.clone(),
    }])?;
    let oriented: Vec<(Point, u8)> = points.iter().zip(&leaf_types).map(|(&p, t)| (p, t.orientation)).collect();
    let mut stack = crate::featurestack::synth::render_shape(std::slice::from_ref(&points), &oriented, &[], grid, grid, 2, 1);
    crate::featurestack::synth::add_noise(&mut stack, RENDERED_NOISE, rng.random())?;
    let weights = WeightVector {
        w_def: [rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)],
        w_edge: -1.0,
        w_app: vec![-1.0, 0.0, 0.0, -1.0],
        w_part: 0.0,
    };
    Ok(RandomInstance {
        unaries: Unaries::build(&stack, &weights, RENDERED_SQUARE_SIDE)?,
        tree,
        w_def: weights.w_def,
        planted: points.iter().map(|p| [p[0].round() as usize, p[1].round() as usize]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GapSample {
    pub approx_energy: f64,
    pub exact_energy: f64,
    /// `(approx - exact) / |exact|`.
    pub rel_gap: f64,
    pub landmark_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ApproxErrorReport {
    pub instances: usize,
    pub mean_rel_energy_error: f64,
    pub median_rel_energy_error: f64,
    pub max_rel_energy_error: f64,
    /// Fraction of instances within 5% of the exact energy.
    pub within_5pct: f64,
    pub mean_landmark_px: f64,
    /// Landmark error divided by the grid's longer side.
    pub mean_landmark_normalized: f64,
    /// Instances where the approximation fell below the exact energy (must be 0).
    pub dominance_violations: usize,
    pub samples: Vec<GapSample>,
}

/// Compares the approximate and exact parse of one problem.
pub fn gap_sample(trees: &[CompTree], unaries: &Unaries, w_def: [f64; 2], cap: usize) -> Result<GapSample> {
    check_cap(unaries.width() * unaries.height(), cap)?;
    let a = parse_mixtures(trees, unaries, w_def, Method::Approximate)?;
    let e = parse_mixtures(trees, unaries, w_def, Method::Exact)?;
    let gap = a.total_energy - e.total_energy;
    let rel_gap = if gap == 0.0 { 0.0 } else { gap / e.total_energy.abs() };
    let landmark_px = a.landmarks.iter().zip(&e.landmarks).map(|(p, q)| dist(*p, *q)).sum::<f64>() / a.landmarks.len() as f64;
    Ok(GapSample {
        approx_energy: a.total_energy,
        exact_energy: e.total_energy,
        rel_gap,
        landmark_px,
    })
}

pub fn summarize_gaps(samples: Vec<GapSample>, max_side: usize) -> Result<ApproxErrorReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no instances"));
    }
    let n = samples.len() as f64;
    let mut rels: Vec<f64> = samples.iter().map(|s| s.rel_gap).collect();
    rels.sort_by(f64::total_cmp);
    let median = if rels.len() % 2 == 1 {
        rels[rels.len() / 2]
    } else {
        (rels[rels.len() / 2 - 1] + rels[rels.len() / 2]) / 2.0
    };
    let mean_px = samples.iter().map(|s| s.landmark_px).sum::<f64>() / n;
    Ok(ApproxErrorReport {
        instances: samples.len(),
        mean_rel_energy_error: rels.iter().sum::<f64>() / n,
        median_rel_energy_error: median,
        max_rel_energy_error: *rels.last().unwrap(),
        within_5pct: rels.iter().filter(|&&r| r <= 0.05).count() as f64 / n,
        mean_landmark_px: mean_px,
        mean_landmark_normalized: mean_px / max_side as f64,
        dominance_violations: samples.iter().filter(|s| s.approx_energy < s.exact_energy - 1e-9).count(),
        samples,
    })
}

/// Gap statistics over `count` seeded random instances.
pub fn random_gap_report(grid: usize, levels: u32, count: usize, seed: u64, kind: InstanceKind) -> Result<ApproxErrorReport> {
    let samples: Vec<GapSample> = (0..count)
        .into_par_iter()
        .map(|i| {
            let inst = random_instance(grid, levels, seed.wrapping_add(i as u64), kind)?;
            gap_sample(std::slice::from_ref(&inst.tree), &inst.unaries, inst.w_def, usize::MAX)
        })
        .collect::<Result<_>>()?;
    summarize_gaps(samples, grid)
}

/// Gap statistics of `model` on real stacks (all at most `cap` cells).
pub fn approx_error_report(model: &MixtureModel, weights: &WeightVector, stacks: &[FeatureStack], cap: usize) -> Result<ApproxErrorReport> {
    let samples: Vec<GapSample> = stacks
        .par_iter()
        .map(|s| {
            let u = Unaries::build(s, weights, model.square_side)?;
            gap_sample(&model.mixtures, &u, weights.w_def, cap)
        })
        .collect::<Result<_>>()?;
    let side = stacks.iter().map(|s| s.width().max(s.height())).max().unwrap_or(1);
    summarize_gaps(samples, side)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComplexityRow {
    pub size: usize,
    pub cells: usize,
    pub approx_seconds: Option<f64>,
    pub exact_seconds: Option<f64>,
    pub envelope_ops: Option<usize>,
    pub envelope_positions: Option<usize>,
    pub over_budget_calls: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComplexityReport {
    pub levels: u32,
    pub repetitions: usize,
    pub rows: Vec<ComplexityRow>,
    /// Log-log slope of time against grid cells.
    pub approx_slope: Option<f64>,
    pub exact_slope: Option<f64>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_parse(inst: &RandomInstance, method: Method, repetitions: usize) -> Result<(f64, EnvelopeStats)> {
    let mut times = Vec::with_capacity(repetitions);
    let mut stats = EnvelopeStats::default();
    // one untimed warm-up run
    parse_tree(&inst.tree, &inst.unaries, inst.w_def, method)?;
    for _ in 0..repetitions.max(1) {
        let t = Instant::now();
        let r = parse_tree(&inst.tree, &inst.unaries, inst.w_def, method)?;
        times.push(t.elapsed().as_secs_f64());
        stats = r.stats;
    }
    Ok((median(times), stats))
}

/// Median parse times per grid size for the approximate and exact paths.
pub fn complexity_bench(
    approx_sizes: &[usize],
    exact_sizes: &[usize],
    levels: u32,
    repetitions: usize,
    seed: u64,
) -> Result<ComplexityReport> {
    let mut sizes: Vec<usize> = approx_sizes.iter().chain(exact_sizes).copied().collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut rows = Vec::new();
    for &size in &sizes {
        let inst = random_instance(size, levels, seed ^ size as u64, InstanceKind::Noise)?;
        let mut row = ComplexityRow {
            size,
            cells: size * size,
            approx_seconds: None,
            exact_seconds: None,
            envelope_ops: None,
            envelope_positions: None,
            over_budget_calls: None,
        };
        if approx_sizes.contains(&size) {
            let (t, st) = time_parse(&inst, Method::Approximate, repetitions)?;
            row.approx_seconds = Some(t);
            row.envelope_ops = Some(st.ops());
            row.envelope_positions = Some(st.positions);
            row.over_budget_calls = Some(st.over_budget_calls);
        }
        if exact_sizes.contains(&size) {
            row.exact_seconds = Some(time_parse(&inst, Method::Exact, repetitions)?.0);
        }
        rows.push(row);
    }
    let slope = |f: fn(&ComplexityRow) -> Option<f64>| {
        log_log_slope(&rows.iter().filter_map(|r| f(r).map(|t| (r.cells as f64, t))).collect::<Vec<_>>())
    };
    Ok(ComplexityReport {
        levels,
        repetitions,
        approx_slope: slope(|r| r.approx_seconds),
        exact_slope: slope(|r| r.exact_seconds),
        rows,
    })
}

/// Binary PPM: the edge-channel maximum in gray, truth contours in green and
/// predicted contours in red.
pub fn overlay_ppm(stack: &FeatureStack, predicted: &[PartPolygon], truth: &[PartPolygon]) -> Vec<u8> {
    let (w, h) = (stack.width(), stack.height());
    let mut rgb = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let m = (0..stack.edge.count()).map(|k| stack.edge.get(k, x, y)).fold(0.0f32, f32::max);
            let v = (m.clamp(0.0, 1.0) * 160.0) as u8;
            rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&[v, v, v]);
        }
    }
    let mut draw = |polys: &[PartPolygon], color: [u8; 3]| {
        for p in polys {
            for i in 0..p.polygon.len() {
                let (a, b) = (p.polygon[i], p.polygon[(i + 1) % p.polygon.len()]);
                for (x, y) in line_pixels(a, b) {
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        let o = (y as usize * w + x as usize) * 3;
                        rgb[o..o + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    };
    draw(truth, [0, 200, 0]);
    draw(predicted, [230, 30, 30]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb);
    out
}
