//! Annotation parsing, frame-rate reduction, category filtering, scene
//! splits, synthetic scenes and joint trajectory/raster augmentation.

mod augment;
mod scene;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use augment::{apply_transform, augment, sample_transform, warp_raster, AugmentParams, Homography, AUGMENT_RETRY_CAP};
pub use scene::{Affine, Scene, SemanticClass, SemanticRaster, NUM_CLASSES};
pub use split::{split_dataset, Split, SplitSpec};
pub use synthetic::{gen_synthetic, gen_synthetic_set, PathFamily, SyntheticConfig};

use crate::error::{Error, Result};
use crate::trajectory::{Point2, RawTrack};

/// Frame rate every dataset is reduced to before windowing.
pub const TARGET_FPS: f64 = 2.5;

/// Column positions of the annotation fields (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotationSchema {
    pub frame: usize,
    pub agent: usize,
    pub x: usize,
    pub y: usize,
    pub label: Option<usize>,
}

impl Default for AnnotationSchema {
    /// `frame_id agent_id x y [label]`
    fn default() -> Self {
        AnnotationSchema {
            frame: 0,
            agent: 1,
            x: 2,
            y: 3,
            label: Some(4),
        }
    }
}

/// Tracks parsed from an annotation stream, plus per-line diagnostics.
#[derive(Debug, Clone, Default)]
pub struct ParsedAnnotations {
    pub tracks: Vec<RawTrack>,
    pub skipped: usize,
    pub diagnostics: Vec<String>,
}

fn parse_frame(tok: &str) -> Option<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = tok.parse().ok()?;
    (f.fract() == 0.0 && f.is_finite()).then_some(f as i64)
}

/// Parses whitespace-separated annotation lines into per-agent tracks.
///
/// Lines that are blank or start with `#` are ignored. Lines with missing
/// columns or unparseable numbers are skipped and reported. Tracks come
/// back sorted by agent id, samples sorted by frame.
pub fn parse_annotations(text: &str, schema: &AnnotationSchema) -> ParsedAnnotations {
    let mut out = ParsedAnnotations::default();
    let mut by_agent: BTreeMap<String, RawTrack> = BTreeMap::new();
    let needed = [schema.frame, schema.agent, schema.x, schema.y].into_iter().max().unwrap_or(0) + 1;
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let mut reject = |why: String| {
            out.skipped += 1;
            out.diagnostics.push(format!("line {}: {why}", lineno + 1));
        };
        if fields.len() < needed {
            reject(format!("expected at least {needed} fields, got {}", fields.len()));
            continue;
        }
        let Some(frame) = parse_frame(fields[schema.frame]) else {
            reject(format!("bad frame id {:?}", fields[schema.frame]));
            continue;
        };
        let (Ok(x), Ok(y)) = (fields[schema.x].parse::<f64>(), fields[schema.y].parse::<f64>()) else {
            reject(format!("bad coordinates {:?} {:?}", fields[schema.x], fields[schema.y]));
            continue;
        };
        let p = Point2::new(x, y);
        if !p.is_finite() {
            reject("non-finite coordinates".into());
            continue;
        }
        let label = schema
            .label
            .and_then(|i| fields.get(i))
            .map(|s| s.trim_matches('"').to_string());
        let agent = fields[schema.agent].to_string();
        let track = by_agent.entry(agent.clone()).or_insert_with(|| RawTrack {
            agent_id: agent,
            label: None,
            samples: Vec::new(),
        });
        if track.label.is_none() {
            track.label = label;
        }
        track.samples.push((frame, p));
    }
    for mut t in by_agent.into_values() {
        t.samples.sort_by_key(|s| s.0);
        t.samples.dedup_by_key(|s| s.0);
        out.tracks.push(t);
    }
    out
}

/// Serializes tracks as `frame agent x y [label]` lines, frame-major.
pub fn write_annotations(tracks: &[RawTrack]) -> String {
    let mut rows: Vec<(i64, &str, Point2, Option<&str>)> = tracks
        .iter()
        .flat_map(|t| {
            t.samples
                .iter()
                .map(move |&(f, p)| (f, t.agent_id.as_str(), p, t.label.as_deref()))
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut s = String::new();
    for (f, agent, p, label) in rows {
        let _ = match label {
            Some(l) => writeln!(s, "{f} {agent} {} {} {l}", p.x, p.y),
            None => writeln!(s, "{f} {agent} {} {}", p.x, p.y),
        };
    }
    s
}

/// Frame decimation factor `round(source / target)`.
pub fn downsample_factor(source_fps: f64, target_fps: f64) -> Result<i64> {
    if !(target_fps > 0.0) || source_fps < target_fps {
        return Err(Error::Upsample { source_fps, target_fps });
    }
    Ok((source_fps / target_fps).round() as i64)
}

/// Keeps the samples whose frame id is a multiple of `round(source / target)`.
pub fn downsample(tracks: &[RawTrack], source_fps: f64, target_fps: f64) -> Result<Vec<RawTrack>> {
    let k = downsample_factor(source_fps, target_fps)?;
    Ok(tracks
        .iter()
        .map(|t| RawTrack {
            samples: t.samples.iter().copied().filter(|s| s.0.rem_euclid(k) == 0).collect(),
            ..t.clone()
        })
        .filter(|t| !t.is_empty())
        .collect())
}

/// Keeps pedestrian tracks. Labels are compared case-insensitively;
/// unlabeled tracks are kept when `unlabeled_is_pedestrian` is set.
pub fn filter_pedestrians(tracks: &[RawTrack], unlabeled_is_pedestrian: bool) -> Vec<RawTrack> {
    tracks
        .iter()
        .filter(|t| match &t.label {
            Some(l) => l.eq_ignore_ascii_case("pedestrian"),
            None => unlabeled_is_pedestrian,
        })
        .cloned()
        .collect()
}
