//! Scenes paired with the windows cut from their tracks.

use std::path::Path;

use crate::dataset::{
    downsample, filter_pedestrians, gen_synthetic_set, parse_annotations, write_annotations, AnnotationSchema, Scene,
    SyntheticConfig, TARGET_FPS,
};
use crate::error::{Error, Result};
use crate::trajectory::{build_windows, RawTrack, TrajectoryWindow, T_OBS, T_PRED};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: TrajectoryWindow,
    /// Index into [`SceneSet::scenes`].
    pub scene: usize,
}

#[derive(Debug, Clone)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
    pub samples: Vec<Sample>,
    /// Window stride used when cutting tracks.
    pub stride: usize,
    /// Name of the world unit, reported alongside metrics.
    pub unit: String,
}

impl Default for SceneSet {
    fn default() -> Self {
        SceneSet {
            scenes: Vec::new(),
            samples: Vec::new(),
            stride: 1,
            unit: "px".into(),
        }
    }
}

impl SceneSet {
    /// Windows every track; tracks are expected at the target frame rate.
    pub fn from_tracks(parts: Vec<(Scene, Vec<RawTrack>)>, stride: usize) -> Result<Self> {
        let mut set = SceneSet {
            stride,
            ..SceneSet::default()
        };
        for (scene, tracks) in parts {
            let ws = build_windows(&scene.scene_id, &tracks, T_OBS, T_PRED, stride)?;
            let idx = set.scenes.len();
            set.samples
                .extend(ws.windows.into_iter().map(|window| Sample { window, scene: idx }));
            set.scenes.push(scene);
        }
        Ok(set)
    }

    /// `n` synthetic scenes with seeds `cfg.seed + i`.
    pub fn synthetic(cfg: &SyntheticConfig, n: usize, stride: usize) -> Result<Self> {
        Self::from_tracks(gen_synthetic_set(cfg, &cfg.scene_id, n)?, stride)
    }

    /// Loads every `<id>.scene` in `dir` with annotations from `<id>.txt`,
    /// reduced to the target frame rate and to pedestrians.
    pub fn load_dir(dir: &Path, schema: &AnnotationSchema, stride: usize) -> Result<Self> {
        let mut metas: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "scene"))
            .collect();
        metas.sort();
        if metas.is_empty() {
            return Err(Error::Empty(format!("no .scene files in {}", dir.display())));
        }
        let mut parts = Vec::new();
        for meta in metas {
            let scene = Scene::load(&meta)?;
            let ann = meta.with_extension("txt");
            let text = std::fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
            let parsed = parse_annotations(&text, schema);
            for d in &parsed.diagnostics {
                log::warn!("{}: {d}", ann.display());
            }
            let tracks = downsample(&filter_pedestrians(&parsed.tracks, true), scene.source_fps, TARGET_FPS)?;
            parts.push((scene, tracks));
        }
        Self::from_tracks(parts, stride)
    }

    /// Writes `<id>.scene`, `<id>.png` and `<id>.txt` per scene.
    pub fn save_raw(parts: &[(Scene, Vec<RawTrack>)], dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (scene, tracks) in parts {
            scene.save(dir)?;
            let path = dir.join(format!("{}.txt", scene.scene_id));
            std::fs::write(&path, write_annotations(tracks)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scene_of(&self, s: &Sample) -> &Scene {
        &self.scenes[s.scene]
    }

    /// Keeps the scenes named in `ids` and their samples.
    pub fn subset(&self, ids: &[String]) -> SceneSet {
        let mut out = SceneSet {
            stride: self.stride,
            unit: self.unit.clone(),
            ..SceneSet::default()
        };
        let mut remap = vec![None; self.scenes.len()];
        for (i, s) in self.scenes.iter().enumerate() {
            if ids.contains(&s.scene_id) {
                remap[i] = Some(out.scenes.len());
                out.scenes.push(s.clone());
            }
        }
        out.samples = self
            .samples
            .iter()
            .filter_map(|s| {
                remap[s.scene].map(|scene| Sample {
                    window: s.window.clone(),
                    scene,
                })
            })
            .collect();
        out
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> SceneSet {
        SceneSet {
            scenes: self.scenes.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
            stride: self.stride,
            unit: self.unit.clone(),
        }
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.scenes.iter().map(|s| s.scene_id.clone()).collect()
    }

    /// Mean displacement per step over all windows.
    pub fn mean_step_length(&self) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for s in &self.samples {
            for w in s.window.positions.windows(2) {
                total += w[0].dist(w[1]);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_round_trip_through_files() {
        let cfg = SyntheticConfig {
            agents: 4,
            ..SyntheticConfig::default()
        };
        let parts = gen_synthetic_set(&cfg, "syn", 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        SceneSet::save_raw(&parts, dir.path()).unwrap();
        let loaded = SceneSet::load_dir(dir.path(), &AnnotationSchema::default(), 20).unwrap();
        let direct = SceneSet::from_tracks(parts, 20).unwrap();
        assert_eq!(loaded.scenes.len(), 2);
        assert_eq!(loaded.len(), direct.len());
        for (a, b) in loaded.samples.iter().zip(&direct.samples) {
            assert_eq!(a.window.agent_id, b.window.agent_id);
            for (p, q) in a.window.positions.iter().zip(&b.window.positions) {
                assert!(p.dist(*q) < 1e-9);
            }
        }
        let sub = direct.subset(&["syn1".to_string()]);
        assert_eq!(sub.scenes.len(), 1);
        assert!(sub.samples.iter().all(|s| s.window.scene_id == "syn1"));
    }
}
