//! Constrained generalized distance transform.
//!
//! Solves, for every `x` in `1..=n`,
//!
//! ```text
//! gamma(x) = min_{ l(x) <= z <= u(x) }  c * (x - h(z))^2 + g(z)
//! ```
//!
//! with `h` non-decreasing (usually `h(z) = z + shift`), in `O(n)` by
//! maintaining the lower envelope of truncated parabolas. Parabola `z` is only
//! valid on the integer interval `[u^-1(z), l^-1(z)]`; because `l`,
//! `u` and `h` are non-decreasing, both interval endpoints grow with `z`, and a
//! newly inserted parabola always wins on a suffix of its own interval. The
//! envelope is therefore a stack of integer segments and every parabola is
//! pushed and popped at most once.
//!
//! Breakpoints are kept as integer positions (the first grid point where the
//! newer parabola is strictly lower), so the value at a breakpoint is always the
//! smaller of the two adjacent parabolas and no separate fill rule is needed
//! where the envelope jumps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Sentinel for "no minimizer" in packed argmin buffers.
pub const NO_ARG: u32 = u32::MAX;

/// Integer affine constraint `slope * x + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub slope: i64,
    pub offset: i64,
}

impl Affine {
    pub const fn new(slope: i64, offset: i64) -> Self {
        Affine { slope, offset }
    }

    pub const fn constant(offset: i64) -> Self {
        Affine { slope: 0, offset }
    }

    #[inline]
    pub fn eval(&self, x: i64) -> i64 {
        self.slope * x + self.offset
    }

    /// Smallest `x` in `1..=n` with `self(x) >= z`, or `n + 1` if none.
    fn first_at_least(&self, z: i64, n: i64) -> i64 {
        let x = if self.slope == 0 {
            if self.offset >= z {
                1
            } else {
                n + 1
            }
        } else {
            ceil_div(z - self.offset, self.slope)
        };
        x.clamp(1, n + 1)
    }

    /// Largest `x` in `1..=n` with `self(x) <= z`, or `0` if none.
    fn last_at_most(&self, z: i64, n: i64) -> i64 {
        let x = if self.slope == 0 {
            if self.offset <= z {
                n
            } else {
                0
            }
        } else {
            (z - self.offset).div_euclid(self.slope)
        };
        x.clamp(0, n)
    }
}

fn ceil_div(p: i64, q: i64) -> i64 {
    -((-p).div_euclid(q))
}

/// Parabola roots `h(z)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Roots {
    /// `h(z) = z + shift`.
    Shift(f64),
    /// Explicit non-decreasing table `h(1..=n)`.
    Table(Vec<f64>),
}

/// One instance of the 1-D transform. Positions `x` and `z` are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct DtProblem1D {
    /// Data costs `g(1..=n)`; `+inf` marks positions that may not be chosen.
    pub g: Vec<f64>,
    pub roots: Roots,
    /// Multiplier of the quadratic term; 1 for the textbook transform.
    pub curvature: f64,
    pub lower: Affine,
    pub upper: Affine,
}

impl DtProblem1D {
    pub fn new(g: Vec<f64>, shift: f64, lower: Affine, upper: Affine) -> Self {
        DtProblem1D {
            g,
            roots: Roots::Shift(shift),
            curvature: 1.0,
            lower,
            upper,
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn with_roots(g: Vec<f64>, roots: Vec<f64>, lower: Affine, upper: Affine) -> Self {
        DtProblem1D {
            g,
            roots: Roots::Table(roots),
            curvature: 1.0,
            lower,
            upper,
        }
    }

    pub fn with_curvature(mut self, curvature: f64) -> Self {
        self.curvature = curvature;
        self
    }

    pub fn h(&self, z: i64) -> f64 {
        match &self.roots {
            Roots::Shift(shift) => z as f64 + shift,
            Roots::Table(t) => t[(z - 1) as usize],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g.is_empty() {
            return Err(Error::invalid("distance transform needs n >= 1"));
        }
        if self.g.len() >= NO_ARG as usize {
            return Err(Error::invalid("distance transform length exceeds u32 range"));
        }
        if self.lower.slope < 0 || self.upper.slope < 0 {
            return Err(Error::invalid(
                "constraint functions must be non-decreasing (non-negative slopes)",
            ));
        }
        match &self.roots {
            Roots::Shift(shift) if !shift.is_finite() => {
                return Err(Error::invalid("shift must be finite"));
            }
            Roots::Table(t) => {
                if t.len() != self.g.len() {
                    return Err(Error::DimensionMismatch {
                        what: "root table".into(),
                        expected: self.g.len(),
                        found: t.len(),
                    });
                }
                if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::invalid("roots h(z) must be finite and non-decreasing"));
                }
            }
            Roots::Shift(_) => {}
        }
        if !(self.curvature.is_finite() && self.curvature >= 0.0) {
            return Err(Error::NegativeWeight {
                name: "curvature",
                value: self.curvature,
            });
        }
        if let Some(i) = self.g.iter().position(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::invalid(format!(
                "data cost g({}) must be finite or +inf",
                i + 1
            )));
        }
        Ok(())
    }
}

/// Lower envelope: parabola `idx[k]` is the minimizer on the integer interval
/// `range[k]..=end[k]`. Intervals are disjoint and increasing; positions not
/// covered by any interval have an empty feasible set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LowerEnvelope {
    pub idx: Vec<usize>,
    pub range: Vec<i64>,
    pub end: Vec<i64>,
}

impl LowerEnvelope {
    pub fn k(&self) -> usize {
        self.idx.len()
    }
}

/// Counters collected while building envelopes.
///
/// The insertion counters name how each new parabola entered the envelope:
/// after the current last one expired or lost everywhere (`appended`), by
/// splitting the last one at the parabola intersection (`split_at_intersection`),
/// by splitting it where the new parabola's window opens with the new one
/// already lower (`split_at_window_start`, a downward jump), or after evicting
/// one or more parabolas (`evictions` counts each eviction).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EnvelopeStats {
    pub calls: usize,
    pub positions: usize,
    pub pushes: usize,
    pub pops: usize,
    pub appended: usize,
    pub split_at_intersection: usize,
    pub split_at_window_start: usize,
    pub evictions: usize,
    pub equal_roots: usize,
    /// Parabolas never admitted: infinite cost, empty window, or dominated.
    pub rejected: usize,
    /// Calls whose push plus pop count exceeded twice their length.
    pub over_budget_calls: usize,
}

impl EnvelopeStats {
    /// Envelope push plus pop operations.
    pub fn ops(&self) -> usize {
        self.pushes + self.pops
    }

    pub fn merge(&mut self, other: &EnvelopeStats) {
        self.calls += other.calls;
        self.positions += other.positions;
        self.pushes += other.pushes;
        self.pops += other.pops;
        self.appended += other.appended;
        self.split_at_intersection += other.split_at_intersection;
        self.split_at_window_start += other.split_at_window_start;
        self.evictions += other.evictions;
        self.equal_roots += other.equal_roots;
        self.rejected += other.rejected;
        self.over_budget_calls += other.over_budget_calls;
    }
}

impl std::ops::Add for EnvelopeStats {
    type Output = EnvelopeStats;
    fn add(mut self, rhs: EnvelopeStats) -> EnvelopeStats {
        self.merge(&rhs);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtResult1D {
    pub gamma: Vec<f64>,
    /// 1-based minimizer; `None` where the feasible set is empty.
    pub argmin: Vec<Option<usize>>,
}

impl DtResult1D {
    pub fn infeasible_positions(&self) -> Vec<usize> {
        self.argmin
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i + 1)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    z: i64,
    h: f64,
    g: f64,
    start: i64,
    end: i64,
}

/// First integer `x` in `from..=to` where parabola `new` is strictly below
/// parabola `old`, if any. `new.h >= old.h`.
#[inline]
fn first_win(new: &Segment, old: &Segment, curvature: f64, from: i64, to: i64, stats: &mut EnvelopeStats) -> Option<i64> {
    let dh = new.h - old.h;
    if dh == 0.0 || curvature == 0.0 {
        if dh == 0.0 {
            stats.equal_roots += 1;
        }
        return (new.g < old.g).then_some(from);
    }
    // new < old  <=>  x > s
    let s = ((new.g - old.g) / (curvature * dh) + new.h + old.h) * 0.5;
    let limit = (to + 2) as f64;
    let x = if s >= limit {
        to + 1
    } else if s < from as f64 {
        from
    } else {
        s.floor() as i64 + 1
    };
    (x <= to).then_some(x.max(from))
}

/// Builds the envelope for raw inputs into `segs`.
fn build_envelope(
    g: &[f64],
    h: impl Fn(i64) -> f64,
    curvature: f64,
    lower: Affine,
    upper: Affine,
    segs: &mut Vec<Segment>,
) -> EnvelopeStats {
    let n = g.len() as i64;
    let mut stats = EnvelopeStats {
        calls: 1,
        positions: g.len(),
        ..Default::default()
    };
    segs.clear();
    for z in 1..=n {
        let gz = g[(z - 1) as usize];
        let lo = upper.first_at_least(z, n);
        let hi = lower.last_at_most(z, n);
        if !gz.is_finite() || lo > hi {
            stats.rejected += 1;
            continue;
        }
        let mut cand = Segment {
            z,
            h: h(z),
            g: gz,
            start: lo,
            end: hi,
        };
        let mut evicted = false;
        let mut start = lo;
        let mut kind = Insert::Appended;
        while let Some(top) = segs.last_mut() {
            if top.end < lo {
                start = lo;
                kind = Insert::Appended;
                break;
            }
            let from = top.start.max(lo);
            match first_win(&cand, top, curvature, from, top.end, &mut stats) {
                None => {
                    start = top.end + 1;
                    kind = Insert::Appended;
                    break;
                }
                Some(x) if x == from && from == top.start => {
                    start = top.start;
                    segs.pop();
                    stats.pops += 1;
                    stats.evictions += 1;
                    evicted = true;
                    kind = Insert::Appended;
                }
                Some(x) if x == from => {
                    top.end = x - 1;
                    start = x;
                    kind = Insert::WindowStart;
                    break;
                }
                Some(x) => {
                    top.end = x - 1;
                    start = x;
                    kind = Insert::Intersection;
                    break;
                }
            }
        }
        if start > hi {
            stats.rejected += 1;
            continue;
        }
        cand.start = start;
        segs.push(cand);
        stats.pushes += 1;
        if !evicted {
            match kind {
                Insert::Appended => stats.appended += 1,
                Insert::WindowStart => stats.split_at_window_start += 1,
                Insert::Intersection => stats.split_at_intersection += 1,
            }
        }
    }
    if stats.ops() > 2 * g.len() {
        stats.over_budget_calls = 1;
    }
    stats
}

#[derive(Clone, Copy)]
enum Insert {
    Appended,
    WindowStart,
    Intersection,
}

/// Runs the transform on raw slices. `arg` receives 0-based minimizers or
/// [`NO_ARG`]; both outputs must have the length of `g`.
#[allow(clippy::too_many_arguments)]
fn transform_into(
    g: &[f64],
    h: impl Fn(i64) -> f64,
    curvature: f64,
    lower: Affine,
    upper: Affine,
    segs: &mut Vec<Segment>,
    gamma: &mut [f64],
    arg: &mut [u32],
) -> EnvelopeStats {
    let stats = build_envelope(g, h, curvature, lower, upper, segs);
    gamma.fill(f64::INFINITY);
    arg.fill(NO_ARG);
    for seg in segs.iter() {
        for x in seg.start..=seg.end {
            let d = x as f64 - seg.h;
            let i = (x - 1) as usize;
            gamma[i] = curvature * d * d + seg.g;
            arg[i] = (seg.z - 1) as u32;
        }
    }
    stats
}

/// Lower envelope of the truncated parabolas of `problem`.
pub fn lower_envelope(problem: &DtProblem1D) -> Result<(LowerEnvelope, EnvelopeStats)> {
    problem.validate()?;
    let mut segs = Vec::with_capacity(problem.n());
    let stats = build_envelope(
        &problem.g,
        |z| problem.h(z),
        problem.curvature,
        problem.lower,
        problem.upper,
        &mut segs,
    );
    let env = LowerEnvelope {
        idx: segs.iter().map(|s| s.z as usize).collect(),
        range: segs.iter().map(|s| s.start).collect(),
        end: segs.iter().map(|s| s.end).collect(),
    };
    Ok((env, stats))
}

/// Linear-time constrained distance transform.
pub fn cgdt1d(problem: &DtProblem1D) -> Result<DtResult1D> {
    cgdt1d_with_stats(problem).map(|(r, _)| r)
}

pub fn cgdt1d_with_stats(problem: &DtProblem1D) -> Result<(DtResult1D, EnvelopeStats)> {
    problem.validate()?;
    let n = problem.n();
    let mut segs = Vec::with_capacity(n);
    let mut gamma = vec![0.0; n];
    let mut arg = vec![0u32; n];
    let stats = transform_into(
        &problem.g,
        |z| problem.h(z),
        problem.curvature,
        problem.lower,
        problem.upper,
        &mut segs,
        &mut gamma,
        &mut arg,
    );
    let argmin = arg
        .iter()
        .map(|&a| (a != NO_ARG).then_some(a as usize + 1))
        .collect();
    Ok((DtResult1D { gamma, argmin }, stats))
}

/// Exhaustive `O(n^2)` reference for [`cgdt1d`]. Ties resolve to the smallest `z`.
pub fn cgdt_brute_force_1d(problem: &DtProblem1D) -> Result<DtResult1D> {
    problem.validate()?;
    let n = problem.n() as i64;
    let mut gamma = Vec::with_capacity(n as usize);
    let mut argmin = Vec::with_capacity(n as usize);
    for x in 1..=n {
        let lo = problem.lower.eval(x).max(1);
        let hi = problem.upper.eval(x).min(n);
        let mut best = (f64::INFINITY, None);
        for z in lo..=hi {
            let gz = problem.g[(z - 1) as usize];
            if !gz.is_finite() {
                continue;
            }
            let d = x as f64 - problem.h(z);
            let v = problem.curvature * d * d + gz;
            if v < best.0 {
                best = (v, Some(z as usize));
            }
        }
        gamma.push(best.0);
        argmin.push(best.1);
    }
    Ok(DtResult1D { gamma, argmin })
}

/// Output of [`pairwise_min_2d`].
#[derive(Debug, Clone)]
pub struct PairwiseMin {
    /// `min_{S1} 4 wx (x - x1 - dx/2)^2 + 4 wy (y - y1 - dy/2)^2 + E1(S1)`
    /// over `S1` with `2S - S1` inside the grid.
    pub energy: Grid<f64>,
    /// Flat index (`y1 * width + x1`) of the minimizing `S1`, or [`NO_ARG`].
    pub arg: Grid<u32>,
    pub stats: EnvelopeStats,
}

impl PairwiseMin {
    pub fn arg_at(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let a = *self.arg.get(x, y);
        (a != NO_ARG).then(|| (a as usize % self.arg.width(), a as usize / self.arg.width()))
    }
}

/// Deformation-weighted minimum over the first child position, computed as a
/// row transform followed by a column transform.
///
/// With 0-based coordinates the constraint `2S - S1 in grid` reads
/// `2x - (W - 1) <= x1 <= 2x` per axis, the 0-based form of
/// `1 <= 2x - x1 <= W`.
pub fn pairwise_min_2d(e1: &Grid<f64>, w_def: [f64; 2], delta: [f64; 2]) -> Result<PairwiseMin> {
    for (name, w) in [("wDef.x", w_def[0]), ("wDef.y", w_def[1])] {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::NegativeWeight { name, value: w });
        }
    }
    if !(delta[0].is_finite() && delta[1].is_finite()) {
        return Err(Error::invalid("composition offset must be finite"));
    }
    let (w, h) = (e1.width(), e1.height());
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty energy grid"));
    }
    if w * h >= NO_ARG as usize {
        return Err(Error::invalid("energy grid too large"));
    }
    let (wi, hi) = (w as i64, h as i64);

    // Rows: minimize over x1 for every (x, y1).
    let mut row_val = vec![0.0; w * h];
    let mut row_arg = vec![0u32; w * h];
    let row_stats = row_val
        .par_chunks_mut(w)
        .zip(row_arg.par_chunks_mut(w))
        .enumerate()
        .map_init(
            || Vec::with_capacity(w),
            |segs, (y1, (val, arg))| {
                let shift = delta[0] * 0.5;
                transform_into(
                    e1.row(y1),
                    |z| z as f64 + shift,
                    4.0 * w_def[0],
                    Affine::new(2, -wi),
                    Affine::new(2, -1),
                    segs,
                    val,
                    arg,
                )
            },
        )
        .reduce(EnvelopeStats::default, |a, b| a + b);

    // Columns: minimize over y1 for every (x, y); stored transposed.
    let mut col_val = vec![0.0; w * h];
    let mut col_arg = vec![0u32; w * h];
    let col_stats = col_val
        .par_chunks_mut(h)
        .zip(col_arg.par_chunks_mut(h))
        .enumerate()
        .map_init(
            || (Vec::with_capacity(h), vec![0.0; h]),
            |(segs, column), (x, (val, arg))| {
                for (y1, c) in column.iter_mut().enumerate() {
                    *c = row_val[y1 * w + x];
                }
                let shift = delta[1] * 0.5;
                transform_into(
                    column,
                    |z| z as f64 + shift,
                    4.0 * w_def[1],
                    Affine::new(2, -hi),
                    Affine::new(2, -1),
                    segs,
                    val,
                    arg,
                )
            },
        )
        .reduce(EnvelopeStats::default, |a, b| a + b);

    let mut energy = Vec::with_capacity(w * h);
    let mut arg = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = col_val[x * h + y];
            let y1 = col_arg[x * h + y];
            if y1 == NO_ARG || !v.is_finite() {
                energy.push(f64::INFINITY);
                arg.push(NO_ARG);
            } else {
                let x1 = row_arg[y1 as usize * w + x];
                debug_assert_ne!(x1, NO_ARG);
                energy.push(v);
                arg.push(y1 * w as u32 + x1);
            }
        }
    }
    Ok(PairwiseMin {
        energy: Grid::from_vec(w, h, energy),
        arg: Grid::from_vec(w, h, arg),
        stats: row_stats + col_stats,
    })
}
