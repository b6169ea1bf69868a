//! Latent SVM training of the shared weight vector.
//!
//! The energy of a configuration is linear in the weights, `E = w . phi`,
//! with `phi = [sum dx^2, sum dy^2, sum edge, sum app (2C), sum part]`, where
//! `dx`, `dy` are deviations of child offsets from the stored deltas. The
//! score of an example is `F = -min E`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{json_error, Error, Result};
use crate::featurestack::{appearance_feature, edge_feature, FeatureStack};
use crate::inference::{parse, ParseResult};
use crate::shapemodel::{CompTree, MixtureModel, WeightVector};

pub const DEFAULT_INNER_ITERATIONS: usize = 200;
pub const DEFAULT_EPOCHS: usize = 5;
/// Default floor on the deformation weights, equal to their starting value.
pub const DEFAULT_MIN_DEFORMATION: f64 = 0.01;

/// Sufficient statistics of a configuration, laid out like [`WeightVector::to_vec`].
pub fn featurize(tree: &CompTree, stack: &FeatureStack, positions: &[[usize; 2]], square_side: usize) -> Result<Vec<f64>> {
    if positions.len() != tree.len() {
        return Err(Error::DimensionMismatch {
            what: "node positions".into(),
            expected: tree.len(),
            found: positions.len(),
        });
    }
    let c = stack.channels();
    let mut phi = vec![0.0; 4 + 2 * c];
    for node in &tree.nodes {
        let p = positions[node.id];
        let (x, y) = (p[0] as i64, p[1] as i64);
        if let Some(t) = node.leaf_type {
            phi[2] += edge_feature(stack, t, x, y)?;
            for (acc, v) in phi[3..3 + 2 * c].iter_mut().zip(appearance_feature(stack, t, x, y, square_side)?) {
                *acc += v;
            }
        } else if let ([a, b], Some(d)) = (node.children.as_slice(), node.delta) {
            let (pa, pb) = (positions[*a], positions[*b]);
            let ex = pb[0] as f64 - pa[0] as f64 - d[0];
            let ey = pb[1] as f64 - pa[1] as f64 - d[1];
            phi[0] += ex * ex;
            phi[1] += ey * ey;
        }
        if let Some(ch) = node.part_score_channel {
            if ch >= stack.part_channels() {
                return Err(Error::invalid(format!(
                    "node {} uses part channel {ch}, stack has {}",
                    node.id,
                    stack.part_channels()
                )));
            }
            phi[3 + 2 * c] += stack.part.get(ch, p[0], p[1]) as f64;
        }
    }
    Ok(phi)
}

/// Features of a parse result under `model`.
pub fn featurize_parse(model: &MixtureModel, stack: &FeatureStack, r: &ParseResult) -> Result<Vec<f64>> {
    let tree = model
        .mixtures
        .get(r.mixture_index)
        .ok_or_else(|| Error::invalid(format!("mixture {} does not exist", r.mixture_index)))?;
    featurize(tree, stack, &r.positions, model.square_side)
}

/// `F = -min E` over mixtures and placements.
pub fn score_example(model: &MixtureModel, weights: &WeightVector, stack: &FeatureStack) -> Result<f64> {
    Ok(parse(model, stack, weights)?.score)
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub stack: FeatureStack,
    /// +1 or -1.
    pub label: i8,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub c: f64,
    pub epochs: usize,
    pub inner_iterations: usize,
    pub seed: u64,
    pub initial: WeightVector,
    pub solver: Solver,
    /// Lower bound on both deformation weights.
    pub min_deformation: f64,
}

impl TrainConfig {
    pub fn new(channels: usize, c: f64, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            c,
            epochs,
            inner_iterations: DEFAULT_INNER_ITERATIONS,
            seed,
            initial: WeightVector::initial(channels),
            solver: Solver::DualCoordinate,
            min_deformation: DEFAULT_MIN_DEFORMATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RoundReport {
    /// Objective with assignments refreshed at the start of the round.
    pub objective: f64,
    /// Best objective so far within the convex step, one entry per iteration
    /// (the first entry is the starting point).
    pub convex_trace: Vec<f64>,
    /// Training accuracy of the weights entering this round.
    pub accuracy: f64,
    /// Feature vectors in the convex step, cached negatives included.
    pub constraints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainReport {
    #[serde(skip)]
    pub weights: WeightVector,
    pub rounds: Vec<RoundReport>,
    /// Accuracy of the final weights under fresh parses.
    pub final_accuracy: f64,
    /// All training examples carry the same label.
    pub degenerate: bool,
    pub seed: u64,
}

fn project(w: &mut [f64], floor: f64) {
    w[0] = w[0].max(floor);
    w[1] = w[1].max(floor);
}

fn objective(w: &[f64], c: f64, feats: &[(Vec<f64>, f64)]) -> f64 {
    let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = feats.iter().map(|(phi, y)| (1.0 + y * dot(w, phi)).max(0.0)).sum();
    reg + c * hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Subgradient descent on `1/2 |w|^2 + C sum max(0, 1 + y w . phi)` with
/// step `1/t`. Iterates are projected onto `wDef >= 0` and onto the ball
/// `|w| <= sqrt(2 C n)`, which holds the optimum because the objective at
/// zero is `C n`. Both the iterate and the running average are candidates;
/// the best one is returned with the best-so-far trace.
pub fn convex_step(w0: &[f64], c: f64, feats: &[(Vec<f64>, f64)], iterations: usize, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let radius = (2.0 * c * feats.len() as f64).sqrt();
    let mut w = w0.to_vec();
    project(&mut w, floor);
    let mut best = (objective(&w, c, feats), w.clone());
    let mut trace = vec![best.0];
    let mut avg = vec![0.0; w.len()];
    for t in 1..=iterations {
        let mut g = w.clone();
        for (phi, y) in feats {
            if 1.0 + y * dot(&w, phi) > 0.0 {
                for (gi, p) in g.iter_mut().zip(phi) {
                    *gi += c * y * p;
                }
            }
        }
        let eta = 1.0 / t as f64;
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
        project(&mut w, floor);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > radius {
            w.iter_mut().for_each(|v| *v *= radius / norm);
        }
        for (a, v) in avg.iter_mut().zip(&w) {
            *a += (v - *a) / t as f64;
        }
        for cand in [&w, &avg] {
            let obj = objective(cand, c, feats);
            if obj < best.0 {
                best = (obj, cand.clone());
            }
        }
        trace.push(best.0);
    }
    (best.1, trace)
}

/// Dual coordinate ascent on the same objective. With `v = -sum a_i y_i phi_i`
/// the primal point is `w = v` with the deformation entries clamped at zero,
/// and the partial derivative of the dual in `a_i` is the hinge argument
/// `1 + y_i w . phi_i`. Each sweep visits the examples in a seeded random
/// order, taking a Newton step with curvature `|phi_i|^2` clipped to
/// `[0, C]`. The trace holds the best primal objective after each sweep,
/// starting from `w0`.
pub fn dual_coordinate_step(
    w0: &[f64],
    c: f64,
    feats: &[(Vec<f64>, f64)],
    sweeps: usize,
    seed: u64,
    floor: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let dim = w0.len();
    let mut start = w0.to_vec();
    project(&mut start, floor);
    let mut best = (objective(&start, c, feats), start);
    let mut trace = vec![best.0];
    let mut alpha = vec![0.0; feats.len()];
    let mut v = vec![0.0; dim];
    let sq: Vec<f64> = feats.iter().map(|(phi, _)| dot(phi, phi)).collect();
    let clamped = |v: &[f64]| {
        let mut w = v.to_vec();
        project(&mut w, floor);
        w
    };
    for _ in 0..sweeps {
        order.shuffle(&mut rng);
        for &i in &order {
            let (phi, y) = &feats[i];
            if sq[i] == 0.0 {
                continue;
            }
            let w = clamped(&v);
            let grad = 1.0 + y * dot(&w, phi);
            let next = (alpha[i] + grad / sq[i]).clamp(0.0, c);
            let step = next - alpha[i];
            if step != 0.0 {
                for (vj, p) in v.iter_mut().zip(phi) {
                    *vj -= step * y * p;
                }
                alpha[i] = next;
            }
        }
        let w = clamped(&v);
        let obj = objective(&w, c, feats);
        if obj < best.0 {
            best = (obj, w);
        }
        trace.push(best.0);
    }
    (best.1, trace)
}

/// Solver for the convex step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    DualCoordinate,
    Subgradient,
}

fn latent_step(model: &MixtureModel, w: &WeightVector, examples: &[TrainingExample]) -> Result<Vec<(Vec<f64>, f64)>> {
    examples
        .par_iter()
        .map(|ex| {
            let r = parse(model, &ex.stack, w)?;
            Ok((featurize_parse(model, &ex.stack, &r)?, ex.label as f64))
        })
        .collect()
}

/// Fraction of examples whose score sign matches the label (`F > 0` is positive).
pub fn accuracy(model: &MixtureModel, w: &WeightVector, examples: &[TrainingExample]) -> Result<f64> {
    let correct = examples
        .par_iter()
        .map(|ex| score_example(model, w, &ex.stack).map(|f| ((f > 0.0) == (ex.label > 0)) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}

/// Alternates latent re-parsing with a convex weight update for `epochs`
/// rounds. Positives contribute their current parse. Every distinct parse a
/// negative has produced so far stays in the convex step as its own
/// constraint, so a round cannot undo the separation of earlier rounds.
pub fn train_latent_svm(model: &MixtureModel, examples: &[TrainingExample], cfg: &TrainConfig) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if let Some(ex) = examples.iter().find(|e| e.label != 1 && e.label != -1) {
        return Err(Error::invalid(format!("label {} is not +1 or -1", ex.label)));
    }
    if !(cfg.c >= 0.0 && cfg.c.is_finite()) {
        return Err(Error::invalid(format!("C = {} must be finite and non-negative", cfg.c)));
    }
    cfg.initial.validate(model.channels)?;
    let degenerate = examples.iter().all(|e| e.label == examples[0].label);
    let mut w = cfg.initial.clone();
    let mut rounds = Vec::with_capacity(cfg.epochs);
    let mut negative_cache: Vec<Vec<f64>> = Vec::new();
    for round in 0..cfg.epochs {
        let feats = latent_step(model, &w, examples)?;
        let wv = w.to_vec();
        let correct = feats
            .iter()
            .filter(|(phi, y)| (-dot(&wv, phi) > 0.0) == (*y > 0.0))
            .count();
        let obj = objective(&wv, cfg.c, &feats);
        for (phi, y) in &feats {
            if *y < 0.0 && !negative_cache.contains(phi) {
                negative_cache.push(phi.clone());
            }
        }
        let active: Vec<(Vec<f64>, f64)> = feats
            .iter()
            .filter(|(_, y)| *y > 0.0)
            .cloned()
            .chain(negative_cache.iter().map(|phi| (phi.clone(), -1.0)))
            .collect();
        let (next, trace) = match cfg.solver {
            Solver::DualCoordinate => {
                dual_coordinate_step(&wv, cfg.c, &active, cfg.inner_iterations, cfg.seed ^ round as u64, cfg.min_deformation)
            }
            Solver::Subgradient => convex_step(&wv, cfg.c, &active, cfg.inner_iterations, cfg.min_deformation),
        };
        rounds.push(RoundReport {
            objective: obj,
            convex_trace: trace,
            accuracy: correct as f64 / examples.len() as f64,
            constraints: active.len(),
        });
        w = WeightVector::from_vec(&next)?;
    }
    let final_accuracy = accuracy(model, &w, examples)?;
    Ok(TrainReport {
        weights: w,
        rounds,
        final_accuracy,
        degenerate,
        seed: cfg.seed,
    })
}

/// Training manifest: stack manifests with labels, paths relative to this file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub examples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub stack: String,
    pub label: i8,
}

impl TrainManifest {
    pub fn read(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: TrainManifest = serde_json::from_str(&text).map_err(|e| json_error(&path.display().to_string(), &text, e))?;
        Ok((m, path.parent().unwrap_or(Path::new(".")).to_path_buf()))
    }

    pub fn load_examples(&self, base: &Path) -> Result<Vec<TrainingExample>> {
        self.examples
            .iter()
            .map(|e| {
                Ok(TrainingExample {
                    stack: FeatureStack::load(&base.join(&e.stack))?,
                    label: e.label,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_c_collapses_to_zero() {
        let feats = vec![(vec![1.0, 2.0, 3.0, 4.0], 1.0), (vec![0.5, 0.0, 1.0, 2.0], -1.0)];
        let (w, trace) = convex_step(&[0.3, 0.1, -1.0, 2.0], 0.0, &feats, 10, 0.0);
        assert!(w.iter().all(|&v| v == 0.0));
        assert_eq!(*trace.last().unwrap(), 0.0);
    }

    #[test]
    fn trace_is_non_increasing_and_projected() {
        let feats = vec![(vec![4.0, 1.0, -3.0, 2.0], 1.0), (vec![0.0, 5.0, 1.0, -2.0], -1.0)];
        let (w, trace) = convex_step(&[0.01, 0.01, -1.0, 0.0], 2.0, &feats, 50, 0.0);
        assert!(trace.windows(2).all(|p| p[1] <= p[0]));
        assert!(w[0] >= 0.0 && w[1] >= 0.0);
    }
}
