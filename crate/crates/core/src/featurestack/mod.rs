//! Evidence grids and the unary feature terms evaluated on them.
//!
//! A [`FeatureStack`] holds three groups of channels on one `W x H` grid:
//! eight per-orientation edge confidences, `C` per-class appearance scores and
//! `P` part-detector score maps.

mod fmap;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fmap::{Channels, FMAP_MAGIC, FMAP_VERSION};

use crate::error::{json_error, Error, Result};
use crate::grid::Grid;
use crate::shapemodel::{orientation_angle, CompNode, LeafType, WeightVector, LEAF_TYPES, ORIENTATIONS};

pub const STACK_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub edge: Channels,
    pub app: Channels,
    pub part: Channels,
}

/// Manifest tying the three FMAP files of a stack together. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub parts: usize,
    pub edge: String,
    pub app: String,
    pub part: String,
}

impl FeatureStack {
    pub fn new(edge: Channels, app: Channels, part: Channels) -> Result<Self> {
        let s = FeatureStack { edge, app, part };
        s.validate()?;
        Ok(s)
    }

    pub fn width(&self) -> usize {
        self.edge.width()
    }

    pub fn height(&self) -> usize {
        self.edge.height()
    }

    /// Appearance channel count `C`.
    pub fn channels(&self) -> usize {
        self.app.count()
    }

    pub fn part_channels(&self) -> usize {
        self.part.count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.edge.count() != ORIENTATIONS as usize {
            return Err(Error::DimensionMismatch {
                what: "edge channels".into(),
                expected: ORIENTATIONS as usize,
                found: self.edge.count(),
            });
        }
        for (name, c) in [("app", &self.app), ("part", &self.part)] {
            if c.width() != self.width() || c.height() != self.height() {
                return Err(Error::invalid(format!(
                    "{name} channels are {}x{}, edge channels {}x{}",
                    c.width(),
                    c.height(),
                    self.width(),
                    self.height()
                )));
            }
        }
        if self.width() == 0 || self.height() == 0 {
            return Err(Error::invalid("feature stack has an empty grid"));
        }
        for (name, c) in [("edge", &self.edge), ("app", &self.app), ("part", &self.part)] {
            if !c.all_finite() {
                return Err(Error::invalid(format!("{name} channels contain non-finite values")));
            }
        }
        Ok(())
    }

    /// Writes `edge.fmap`, `app.fmap`, `part.fmap` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.edge.write(&dir.join("edge.fmap"))?;
        self.app.write(&dir.join("app.fmap"))?;
        self.part.write(&dir.join("part.fmap"))?;
        let manifest = StackManifest {
            version: STACK_MANIFEST_VERSION,
            width: self.width(),
            height: self.height(),
            channels: self.channels(),
            parts: self.part_channels(),
            edge: "edge.fmap".into(),
            app: "app.fmap".into(),
            part: "part.fmap".into(),
        };
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let m: StackManifest =
            serde_json::from_str(&text).map_err(|e| json_error(&manifest_path.display().to_string(), &text, e))?;
        let schema = |location: &str, message: String| Error::Schema {
            what: manifest_path.display().to_string(),
            location: location.into(),
            message,
        };
        if m.version != STACK_MANIFEST_VERSION {
            return Err(schema("version", format!("unsupported version {}", m.version)));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let edge = Channels::read(&base.join(&m.edge))?;
        let app = Channels::read(&base.join(&m.app))?;
        let part = Channels::read(&base.join(&m.part))?;
        if edge.width() != m.width || edge.height() != m.height {
            return Err(schema("width", format!("manifest says {}x{}, edge file is {}x{}", m.width, m.height, edge.width(), edge.height())));
        }
        if app.count() != m.channels {
            return Err(schema("channels", format!("manifest says {}, app file has {}", m.channels, app.count())));
        }
        if part.count() != m.parts {
            return Err(schema("parts", format!("manifest says {}, part file has {}", m.parts, part.count())));
        }
        FeatureStack::new(edge, app, part)
    }

    /// Bilinear resampling of every channel to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> FeatureStack {
        FeatureStack {
            edge: resample(&self.edge, width, height),
            app: resample(&self.app, width, height),
            part: resample(&self.part, width, height),
        }
    }
}

fn resample(src: &Channels, width: usize, height: usize) -> Channels {
    let mut out = Channels::zeros(width, height, src.count());
    let sx = src.width() as f64 / width as f64;
    let sy = src.height() as f64 / height as f64;
    for c in 0..src.count() {
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height() - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(src.height() - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width() - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(src.width() - 1);
                let tx = fx - x0 as f64;
                let v = |x, y| src.get(c, x, y) as f64;
                let top = v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx;
                let bottom = v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx;
                *out.get_mut(c, x, y) = (top * (1.0 - ty) + bottom * ty) as f32;
            }
        }
    }
    out
}

/// Whether offset `(dx, dy)` lies on the normal side `(-sin, cos)` of the
/// orientation's line. Points on the line count as that side.
#[inline]
pub fn on_positive_side(orientation: u8, dx: f64, dy: f64) -> bool {
    let t = orientation_angle(orientation);
    -t.sin() * dx + t.cos() * dy >= -1e-9
}

pub fn window_fits(x: i64, y: i64, side: usize, width: usize, height: usize) -> bool {
    let r = (side / 2) as i64;
    x - r >= 0 && y - r >= 0 && x + r < width as i64 && y + r < height as i64
}

fn check_in_grid(stack: &FeatureStack, x: i64, y: i64) -> Result<()> {
    if x < 0 || y < 0 || x as usize >= stack.width() || y as usize >= stack.height() {
        return Err(Error::OffGrid {
            x,
            y,
            side: 1,
            width: stack.width(),
            height: stack.height(),
        });
    }
    Ok(())
}

/// Edge confidence of the leaf's orientation at `(x, y)`.
pub fn edge_feature(stack: &FeatureStack, leaf: LeafType, x: i64, y: i64) -> Result<f64> {
    check_in_grid(stack, x, y)?;
    Ok(stack.edge.get(leaf.orientation as usize, x as usize, y as usize) as f64)
}

/// Per-channel means over the object side then the non-object side of the
/// `side x side` window at `(x, y)`; length `2C`.
pub fn appearance_feature(stack: &FeatureStack, leaf: LeafType, x: i64, y: i64, side: usize) -> Result<Vec<f64>> {
    if side.is_multiple_of(2) {
        return Err(Error::invalid(format!("appearance window side {side} must be odd")));
    }
    if !window_fits(x, y, side, stack.width(), stack.height()) {
        return Err(Error::OffGrid {
            x,
            y,
            side,
            width: stack.width(),
            height: stack.height(),
        });
    }
    let c = stack.channels();
    let r = (side / 2) as i64;
    let mut pos = vec![0.0; c];
    let mut neg = vec![0.0; c];
    let (mut npos, mut nneg) = (0usize, 0usize);
    for dy in -r..=r {
        for dx in -r..=r {
            let (px, py) = ((x + dx) as usize, (y + dy) as usize);
            let (acc, n) = if on_positive_side(leaf.orientation, dx as f64, dy as f64) {
                (&mut pos, &mut npos)
            } else {
                (&mut neg, &mut nneg)
            };
            *n += 1;
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += stack.app.get(ch, px, py) as f64;
            }
        }
    }
    let mean = |v: &[f64], n: usize| -> Vec<f64> {
        if n == 0 {
            vec![0.0; v.len()]
        } else {
            v.iter().map(|s| s / n as f64).collect()
        }
    };
    let out = match leaf.polarity {
        0 => [mean(&pos, npos), mean(&neg, nneg)].concat(),
        1 => [mean(&neg, nneg), mean(&pos, npos)].concat(),
        _ => {
            let full: Vec<f64> = pos.iter().zip(&neg).map(|(a, b)| a + b).collect();
            [mean(&full, npos + nneg), vec![0.0; c]].concat()
        }
    };
    Ok(out)
}

/// Leaf unary `wEdge * edge + wApp . appearance` for all 24 leaf types.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafUnaryField {
    grids: Vec<Grid<f64>>,
}

impl LeafUnaryField {
    pub fn from_grids(grids: Vec<Grid<f64>>) -> Result<Self> {
        if grids.len() != LEAF_TYPES {
            return Err(Error::DimensionMismatch {
                what: "leaf unary grids".into(),
                expected: LEAF_TYPES,
                found: grids.len(),
            });
        }
        if grids.iter().any(|g| !g.same_shape(&grids[0])) {
            return Err(Error::invalid("leaf unary grids differ in size"));
        }
        Ok(LeafUnaryField { grids })
    }

    pub fn get(&self, leaf: LeafType) -> &Grid<f64> {
        &self.grids[leaf.index()]
    }

    pub fn get_mut(&mut self, leaf: LeafType) -> &mut Grid<f64> {
        &mut self.grids[leaf.index()]
    }

    pub fn width(&self) -> usize {
        self.grids[0].width()
    }

    pub fn height(&self) -> usize {
        self.grids[0].height()
    }

    pub fn grids(&self) -> &[Grid<f64>] {
        &self.grids
    }
}

/// Builds the unary field; positions whose appearance window leaves the grid
/// are `+inf` for every leaf type.
pub fn build_leaf_unaries(stack: &FeatureStack, weights: &WeightVector, side: usize) -> Result<LeafUnaryField> {
    let c = stack.channels();
    if weights.w_app.len() != 2 * c {
        return Err(Error::DimensionMismatch {
            what: "wApp (2C)".into(),
            expected: 2 * c,
            found: weights.w_app.len(),
        });
    }
    if side.is_multiple_of(2) {
        return Err(Error::invalid(format!("appearance window side {side} must be odd")));
    }
    let (w, h) = (stack.width(), stack.height());
    let r = side / 2;
    let integrals: Vec<Vec<f64>> = (0..c).map(|ch| integral_image(stack.app.channel(ch), w, h)).collect();
    let window_sum = |ch: usize, x: usize, y: usize| -> f64 {
        let s = &integrals[ch];
        let (x0, y0, x1, y1) = (x - r, y - r, x + r + 1, y + r + 1);
        let at = |x: usize, y: usize| s[y * (w + 1) + x];
        at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0)
    };
    let (w_obj, w_non) = weights.w_app.split_at(c);

    let per_orientation: Vec<[Grid<f64>; 3]> = (0..ORIENTATIONS)
        .into_par_iter()
        .map(|k| {
            let ri = r as i64;
            let offsets: Vec<(i64, i64)> = (-ri..=ri)
                .flat_map(|dy| (-ri..=ri).map(move |dx| (dx, dy)))
                .filter(|&(dx, dy)| on_positive_side(k, dx as f64, dy as f64))
                .collect();
            let n_pos = offsets.len() as f64;
            let n_all = (side * side) as f64;
            let n_neg = n_all - n_pos;
            let mut out = [
                Grid::filled(w, h, f64::INFINITY),
                Grid::filled(w, h, f64::INFINITY),
                Grid::filled(w, h, f64::INFINITY),
            ];
            if w < side || h < side {
                return out;
            }
            let edge = stack.edge.channel(k as usize);
            let mut pos_mean = vec![0.0; c];
            let mut neg_mean = vec![0.0; c];
            let mut full_mean = vec![0.0; c];
            for y in r..h - r {
                for x in r..w - r {
                    for ch in 0..c {
                        let plane = stack.app.channel(ch);
                        let mut s = 0.0;
                        for &(dx, dy) in &offsets {
                            s += plane[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize] as f64;
                        }
                        let full = window_sum(ch, x, y);
                        pos_mean[ch] = s / n_pos;
                        neg_mean[ch] = if n_neg > 0.0 { (full - s) / n_neg } else { 0.0 };
                        full_mean[ch] = full / n_all;
                    }
                    let e = weights.w_edge * edge[y * w + x] as f64;
                    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                    *out[0].get_mut(x, y) = e + dot(w_obj, &pos_mean) + dot(w_non, &neg_mean);
                    *out[1].get_mut(x, y) = e + dot(w_obj, &neg_mean) + dot(w_non, &pos_mean);
                    *out[2].get_mut(x, y) = e + dot(w_obj, &full_mean);
                }
            }
            out
        })
        .collect();

    let mut grids = Vec::with_capacity(LEAF_TYPES);
    for triple in per_orientation {
        grids.extend(triple);
    }
    LeafUnaryField::from_grids(grids)
}

fn integral_image(plane: &[f32], w: usize, h: usize) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x] as f64;
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// `wPart` times the node's part score map.
pub fn part_unary(stack: &FeatureStack, weights: &WeightVector, node: &CompNode) -> Result<Grid<f64>> {
    let ch = node
        .part_score_channel
        .ok_or_else(|| Error::invalid(format!("node {} has no part score channel", node.id)))?;
    if ch >= stack.part_channels() {
        return Err(Error::invalid(format!(
            "node {} uses part channel {ch}, stack has {}",
            node.id,
            stack.part_channels()
        )));
    }
    let plane = stack.part.channel(ch);
    Ok(Grid::from_vec(
        stack.width(),
        stack.height(),
        plane.iter().map(|&v| weights.w_part * v as f64).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(w: usize, h: usize, c: usize, p: usize) -> FeatureStack {
        FeatureStack::new(Channels::zeros(w, h, 8), Channels::zeros(w, h, c), Channels::zeros(w, h, p)).unwrap()
    }

    #[test]
    fn constant_field_appearance() {
        let mut s = stack(9, 9, 2, 1);
        s.app.channel_mut(0).fill(0.75);
        s.app.channel_mut(1).fill(-2.0);
        for t in LeafType::all().filter(|t| t.polarity < 2) {
            let f = appearance_feature(&s, t, 4, 4, 5).unwrap();
            assert_eq!(f, vec![0.75, -2.0, 0.75, -2.0]);
        }
    }

    #[test]
    fn half_plane_horizontal_leaf() {
        // 1 strictly above row 4, 0 on and below; polarity 1 puts the object above
        let mut s = stack(9, 9, 1, 0);
        for y in 0..4 {
            for x in 0..9 {
                *s.app.get_mut(0, x, y) = 1.0;
            }
        }
        let leaf = LeafType::new(0, 1).unwrap();
        assert_eq!(appearance_feature(&s, leaf, 4, 4, 5).unwrap(), vec![1.0, 0.0]);
        let flipped = LeafType::new(0, 0).unwrap();
        assert_eq!(appearance_feature(&s, flipped, 4, 4, 5).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn off_grid_window() {
        let s = stack(9, 9, 1, 0);
        assert!(matches!(
            appearance_feature(&s, LeafType::new(0, 0).unwrap(), 1, 4, 5),
            Err(Error::OffGrid { .. })
        ));
        assert!(matches!(edge_feature(&s, LeafType::new(0, 0).unwrap(), 9, 0), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn edge_impulse_selectivity() {
        let mut s = stack(7, 7, 1, 0);
        *s.edge.get_mut(3, 2, 5) = 1.0;
        for t in LeafType::all() {
            for y in 0..7 {
                for x in 0..7 {
                    let v = edge_feature(&s, t, x, y).unwrap();
                    let expect = if t.orientation == 3 && (x, y) == (2, 5) { 1.0 } else { 0.0 };
                    assert_eq!(v, expect);
                }
            }
        }
    }

    #[test]
    fn part_unary_scaling_and_errors() {
        let mut s = stack(4, 3, 1, 1);
        *s.part.get_mut(0, 2, 1) = 1.0;
        let mut w = WeightVector::zeros(1);
        w.w_part = -1.0;
        let mut node = CompNode::composite(0, 2, 1, 2, [0.0, 0.0]);
        assert!(part_unary(&s, &w, &node).is_err());
        node.part_score_channel = Some(0);
        let g = part_unary(&s, &w, &node).unwrap();
        assert_eq!(*g.get(2, 1), -1.0);
        assert_eq!(g.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
        node.part_score_channel = Some(3);
        assert!(part_unary(&s, &w, &node).is_err());
    }

    #[test]
    fn channel_count_mismatch_rejected() {
        let s = stack(9, 9, 2, 0);
        assert!(matches!(
            build_leaf_unaries(&s, &WeightVector::zeros(3), 3),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
