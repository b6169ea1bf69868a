//! Synthetic datasets on disk: template annotations, a random shape family,
//! rendered stacks with ground truth, and the directory layout shared by the
//! `synth`, `train` and `eval` commands.
//!
//! A dataset directory holds `stacks/NNNN/manifest.json` per instance,
//! `ground_truth.json`, `annotations.json` (the ground-truth parts as
//! annotations) and `train.json` (positives, then optional noise negatives).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{json_error, Error, Result};
use crate::featurestack::synth::{clutter_stack, noise_stack, part_channel_count, synth_stack, GroundTruth};
use crate::featurestack::FeatureStack;
use crate::paramlearn::{ManifestEntry, TrainManifest};
use crate::shapemodel::{LandmarkCounts, MixtureModel, PartLabel, PartPolygon, Point};
use crate::structlearn::{tree_from_annotation, AnnotationFile, PartAnnotation};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const TRAIN_FILE: &str = "train.json";

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

fn part(label: PartLabel, polygon: Vec<Point>) -> PartPolygon {
    PartPolygon { label, polygon }
}

/// Three rectangle animals on a `size` square image, built on a lattice of
/// `size / 16` pixels: a 5:3 torso, a 3:1 neck and a square head. The neck
/// rises from the torso, leaves it sideways at the top, or sideways at the
/// bottom. With the default landmark counts every sample falls on a lattice
/// point, including all corners.
pub fn templates(size: usize) -> Vec<PartAnnotation> {
    let u = (size / 16) as f64;
    let r = |x0: f64, y0: f64, x1: f64, y1: f64| rect(x0 * u, y0 * u, x1 * u, y1 * u);
    let torso = r(7.0, 6.0, 12.0, 9.0);
    let arrangements = [
        (r(7.0, 3.0, 8.0, 6.0), r(6.0, 1.0, 8.0, 3.0)),
        (r(4.0, 6.0, 7.0, 7.0), r(2.0, 5.0, 4.0, 7.0)),
        (r(4.0, 8.0, 7.0, 9.0), r(2.0, 8.0, 4.0, 10.0)),
    ];
    arrangements
        .into_iter()
        .enumerate()
        .map(|(i, (neck, head))| PartAnnotation {
            id: format!("template-{i}"),
            width: size,
            height: size,
            parts: vec![
                part(PartLabel::Head, head),
                part(PartLabel::Neck, neck),
                part(PartLabel::Torso, torso.clone()),
            ],
        })
        .collect()
}

/// Random rectangle animals on a 64-pixel image: torso size, neck length,
/// thickness, attachment side and head size all vary.
pub fn shape_family(count: usize, seed: u64) -> Vec<PartAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let tw = rng.random_range(16..=24) as f64;
            let th = rng.random_range(10..=14) as f64;
            let (x0, y0) = (30.0, 28.0);
            let torso = rect(x0, y0, x0 + tw, y0 + th);
            let len = rng.random_range(6..=12) as f64;
            let thick = rng.random_range(3..=4) as f64;
            let hs = rng.random_range(5..=8) as f64;
            let (neck, head) = match rng.random_range(0..4) {
                0 => {
                    let nx = x0 + rng.random_range(0..=4) as f64;
                    let ny = y0 - len;
                    (rect(nx, ny, nx + thick, y0), rect(nx + thick / 2.0 - hs / 2.0, ny - hs, nx + thick / 2.0 + hs / 2.0, ny))
                }
                1 => {
                    let ny = y0 + rng.random_range(0..=3) as f64;
                    let nx = x0 - len;
                    (rect(nx, ny, x0, ny + thick), rect(nx - hs, ny + thick / 2.0 - hs / 2.0, nx, ny + thick / 2.0 + hs / 2.0))
                }
                2 => {
                    let ny = y0 + th - thick - rng.random_range(0..=3) as f64;
                    let nx = x0 - len;
                    (rect(nx, ny, x0, ny + thick), rect(nx - hs, ny + thick / 2.0 - hs / 2.0, nx, ny + thick / 2.0 + hs / 2.0))
                }
                _ => {
                    let nx = x0 + tw - thick - rng.random_range(0..=4) as f64;
                    let ny = y0 - len;
                    (rect(nx, ny, nx + thick, y0), rect(nx + thick / 2.0 - hs / 2.0, ny - hs, nx + thick / 2.0 + hs / 2.0, ny))
                }
            };
            PartAnnotation {
                id: format!("shape-{i}"),
                width: 64,
                height: 64,
                parts: vec![
                    part(PartLabel::Head, head),
                    part(PartLabel::Neck, neck),
                    part(PartLabel::Torso, torso),
                ],
            }
        })
        .collect()
}

/// Renders one annotation through its own single-mixture model, with the
/// root where the annotation puts it.
pub fn render_annotation(
    ann: &PartAnnotation,
    counts: &LandmarkCounts,
    grid_size: usize,
    square_side: usize,
    channels: usize,
    noise: f64,
    seed: u64,
) -> Result<(FeatureStack, GroundTruth)> {
    let (tree, parts) = tree_from_annotation(ann, counts, grid_size)?;
    // leaves were created in landmark order; recompose wants DFS order
    let created: Vec<Point> = parts.iter().flat_map(|p| p.points.iter().copied()).collect();
    let mut ids: Vec<usize> = tree.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect();
    ids.sort_unstable();
    let leaves: Vec<Point> = tree
        .leaves()
        .into_iter()
        .map(|id| created[ids.binary_search(&id).expect("leaf id")])
        .collect();
    let root = tree.recompose(&leaves)?;
    let model = MixtureModel {
        grid_size,
        square_side,
        channels,
        landmark_counts: *counts,
        mixtures: vec![tree],
    };
    let (w, h) = ann.grid_dims(grid_size)?;
    synth_stack(&model, 0, root, noise, seed, (w, h))
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub count: usize,
    pub noise: f64,
    pub seed: u64,
    /// Stacks appended to the training manifest as negatives.
    pub negatives: usize,
    pub negative_kind: NegativeKind,
}

/// What a negative stack shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeKind {
    /// Uniform noise in every channel.
    Noise,
    /// Random rectangles at the dataset's noise level.
    Clutter,
}

pub const CLUTTER_RECTS: usize = 4;

/// Rendered instances and the negatives of a synthetic dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub instances: Vec<(FeatureStack, GroundTruth)>,
    pub negatives: Vec<FeatureStack>,
}

/// Integer translation range keeping every landmark `margin` inside a
/// `size` square, for a shape whose mean landmarks at the origin root are `lm`.
fn offset_range(lm: &[Point], size: usize, margin: f64) -> Result<[(i64, i64); 2]> {
    let mut out = [(0, 0); 2];
    for (d, o) in out.iter_mut().enumerate() {
        let lo = lm.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
        let hi = lm.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
        let a = (margin - lo).ceil() as i64;
        let b = (size as f64 - 1.0 - margin - hi).floor() as i64;
        if a > b {
            return Err(Error::invalid(format!("shape of extent {:.1} does not fit a {size} grid", hi - lo)));
        }
        *o = (a, b);
    }
    Ok(out)
}

/// Renders `count` instances of `model` at its grid size, cycling through
/// the mixtures. Each root is translated by a random integer amount from the
/// position that puts the first landmark on a pixel, so noise-free
/// landmarks stay on pixel centers whenever the mean shape has integer offsets.
pub fn synth_dataset(model: &MixtureModel, cfg: &SynthConfig) -> Result<Dataset> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = model.grid_size;
    let margin = (model.square_side / 2) as f64;
    let mut instances = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let m = i % model.mixtures.len();
        let tree = &model.mixtures[m];
        let lm = tree.mean_shape([0.0, 0.0])?;
        let snap = [lm[0][0].round() - lm[0][0], lm[0][1].round() - lm[0][1]];
        let shifted: Vec<Point> = lm.iter().map(|p| [p[0] + snap[0], p[1] + snap[1]]).collect();
        let [(ax, bx), (ay, by)] = offset_range(&shifted, size, margin)?;
        let t = [rng.random_range(ax..=bx) as f64, rng.random_range(ay..=by) as f64];
        let root = [snap[0] + t[0], snap[1] + t[1]];
        let seed = rng.random::<u64>();
        instances.push(synth_stack(model, m, root, cfg.noise, seed, (size, size))?);
    }
    let parts = part_channel_count(model);
    let negatives = (0..cfg.negatives)
        .map(|_| match cfg.negative_kind {
            NegativeKind::Noise => Ok(noise_stack(size, size, model.channels, parts, rng.random())),
            NegativeKind::Clutter => clutter_stack((size, size), model.channels, parts, CLUTTER_RECTS, cfg.noise, rng.random()),
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { instances, negatives })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    /// Stack manifests, relative to the dataset directory.
    pub stacks: Vec<String>,
    pub truth: Vec<GroundTruth>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn stack_path(kind: &str, i: usize) -> String {
    format!("{kind}/{i:04}/manifest.json")
}

/// Writes the dataset layout described in the module docs.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stacks = Vec::new();
    let mut entries = Vec::new();
    let mut images = Vec::new();
    for (i, (stack, truth)) in data.instances.iter().enumerate() {
        let rel = stack_path("stacks", i);
        stack.save(&dir.join(Path::new(&rel).parent().expect("parent")))?;
        entries.push(ManifestEntry { stack: rel.clone(), label: 1 });
        images.push(PartAnnotation {
            id: format!("instance-{i:04}"),
            width: stack.width(),
            height: stack.height(),
            parts: truth.parts.clone(),
        });
        stacks.push(rel);
    }
    for (i, stack) in data.negatives.iter().enumerate() {
        let rel = stack_path("negatives", i);
        stack.save(&dir.join(Path::new(&rel).parent().expect("parent")))?;
        entries.push(ManifestEntry { stack: rel, label: -1 });
    }
    let truth = GroundTruthFile {
        stacks,
        truth: data.instances.iter().map(|(_, t)| t.clone()).collect(),
    };
    write(&dir.join(GROUND_TRUTH_FILE), &to_json(&truth))?;
    write(&dir.join(ANNOTATIONS_FILE), &to_json(&AnnotationFile { images }))?;
    write(&dir.join(TRAIN_FILE), &to_json(&TrainManifest { examples: entries }))
}

/// Loads the labeled instances of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<(FeatureStack, GroundTruth)>> {
    let path = dir.join(GROUND_TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: GroundTruthFile = serde_json::from_str(&text).map_err(|e| json_error(&path.display().to_string(), &text, e))?;
    if file.stacks.len() != file.truth.len() {
        return Err(Error::Schema {
            what: path.display().to_string(),
            location: "truth".into(),
            message: format!("{} entries for {} stacks", file.truth.len(), file.stacks.len()),
        });
    }
    file.stacks
        .iter()
        .zip(file.truth)
        .map(|(s, t)| Ok((FeatureStack::load(&dir.join(s))?, t)))
        .collect()
}
