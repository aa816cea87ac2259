use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trajectory::Point2;

/// Number of semantic classes in a raster.
pub const NUM_CLASSES: usize = 6;

/// Fixed semantic class order of raster files and input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SemanticClass {
    Pavement = 0,
    Terrain = 1,
    Structure = 2,
    Tree = 3,
    Road = 4,
    NotDefined = 5,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] = [
        SemanticClass::Pavement,
        SemanticClass::Terrain,
        SemanticClass::Structure,
        SemanticClass::Tree,
        SemanticClass::Road,
        SemanticClass::NotDefined,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Pavement => "pavement",
            SemanticClass::Terrain => "terrain",
            SemanticClass::Structure => "structure",
            SemanticClass::Tree => "tree",
            SemanticClass::Road => "road",
            SemanticClass::NotDefined => "not-defined",
        }
    }
}

/// Grid of class ids, row-major (`y * width + x`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SemanticRaster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("raster must be at least 1x1".into()));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "raster {width}x{height} needs {} cells, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("class id {bad} out of range 0..{NUM_CLASSES}")));
        }
        Ok(SemanticRaster { width, height, data })
    }

    pub fn filled(width: usize, height: usize, class: SemanticClass) -> Self {
        SemanticRaster {
            width,
            height,
            data: vec![class.id(); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: SemanticClass) {
        self.data[y * self.width + x] = class.id();
    }

    /// Class at the cell nearest to a pixel coordinate, `None` outside the raster.
    pub fn class_at(&self, p: Point2) -> Option<u8> {
        let (x, y) = (p.x.round(), p.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(self.get(x as usize, y as usize))
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.class_at(p).is_some()
    }

    pub fn distinct_classes(&self) -> usize {
        let mut seen = [false; NUM_CLASSES];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    /// Reads a grayscale PNG (pixel value = class id) or a whitespace-separated
    /// text dump with one raster row per line.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let img = image::open(path)?.into_luma8();
            let (w, h) = img.dimensions();
            return SemanticRaster::new(w as usize, h as usize, img.into_raw());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Vec<u8> = line
                .split_whitespace()
                .map(|t| t.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    what: "raster dump".into(),
                    detail: format!("line {}: {e}", lineno + 1),
                })?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Parse {
                        what: "raster dump".into(),
                        detail: format!("line {}: expected {w} values, got {}", lineno + 1, row.len()),
                    })
                }
                _ => {}
            }
            data.extend(row);
            height += 1;
        }
        SemanticRaster::new(width.unwrap_or(0), height, data)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 2);
        for row in self.data.chunks(self.width) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("raster buffer matches its dimensions");
            img.save(path)?;
            Ok(())
        } else {
            std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
        }
    }
}

/// `px = a x + b y + c`, `py = d x + e y + f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
        e: 1.0,
        f: 0.0,
    };

    pub fn scale(s: f64) -> Self {
        Affine {
            a: s,
            e: s,
            ..Self::IDENTITY
        }
    }

    pub fn det(&self) -> f64 {
        self.a * self.e - self.b * self.d
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        Point2::new(
            self.a * p.x + self.b * p.y + self.c,
            self.d * p.x + self.e * p.y + self.f,
        )
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::InvalidArgument("world_to_pixel transform is singular".into()));
        }
        let (a, b, d, e) = (self.e / det, -self.b / det, -self.d / det, self.a / det);
        Ok(Affine {
            a,
            b,
            c: -(a * self.c + b * self.f),
            d,
            e,
            f: -(d * self.c + e * self.f),
        })
    }
}

/// A semantic raster with its world-to-pixel mapping and recording rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub raster: SemanticRaster,
    world_to_pixel: Affine,
    pixel_to_world: Affine,
    pub source_fps: f64,
}

impl Scene {
    pub fn new(scene_id: impl Into<String>, raster: SemanticRaster, world_to_pixel: Affine, source_fps: f64) -> Result<Self> {
        let pixel_to_world = world_to_pixel.inverse()?;
        if !(source_fps > 0.0) {
            return Err(Error::InvalidArgument(format!("source_fps must be positive, got {source_fps}")));
        }
        Ok(Scene {
            scene_id: scene_id.into(),
            raster,
            world_to_pixel,
            pixel_to_world,
            source_fps,
        })
    }

    pub fn world_to_pixel(&self) -> Affine {
        self.world_to_pixel
    }

    pub fn to_pixel(&self, p: Point2) -> Point2 {
        self.world_to_pixel.apply(p)
    }

    pub fn to_world(&self, p: Point2) -> Point2 {
        self.pixel_to_world.apply(p)
    }

    /// Same transform and rate with a different raster.
    pub fn with_raster(&self, raster: SemanticRaster) -> Scene {
        Scene { raster, ..self.clone() }
    }

    /// Metadata text: `key = value` lines with the affine coefficients,
    /// the recording rate and the raster file name.
    pub fn metadata_text(&self, raster_file: &str) -> String {
        let t = self.world_to_pixel;
        let mut s = String::new();
        let _ = writeln!(s, "scene_id = {}", self.scene_id);
        let _ = writeln!(s, "raster = {raster_file}");
        for (k, v) in [("a", t.a), ("b", t.b), ("c", t.c), ("d", t.d), ("e", t.e), ("f", t.f)] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "source_fps = {}", self.source_fps);
        s
    }

    /// Writes `<dir>/<scene_id>.png` and `<dir>/<scene_id>.scene`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let raster_file = format!("{}.png", self.scene_id);
        self.raster.save(&dir.join(&raster_file))?;
        let meta = dir.join(format!("{}.scene", self.scene_id));
        std::fs::write(&meta, self.metadata_text(&raster_file)).map_err(|e| Error::io(&meta, e))
    }

    /// Loads a scene from its metadata file; the raster path is resolved
    /// relative to the metadata file's directory.
    pub fn load(meta_path: &Path) -> Result<Scene> {
        let text = std::fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
        let kv = crate::config::parse_key_values(&text)?;
        let get = |k: &str| -> Result<&str> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Parse {
                    what: meta_path.display().to_string(),
                    detail: format!("missing key {k}"),
                })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|e| Error::Parse {
                what: meta_path.display().to_string(),
                detail: format!("{k}: {e}"),
            })
        };
        let affine = Affine {
            a: num("a")?,
            b: num("b")?,
            c: num("c")?,
            d: num("d")?,
            e: num("e")?,
            f: num("f")?,
        };
        let dir = meta_path.parent().unwrap_or(Path::new("."));
        let raster = SemanticRaster::load(&dir.join(get("raster")?))?;
        let id = match get("scene_id") {
            Ok(id) => id.to_string(),
            Err(_) => meta_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        Scene::new(id, raster, affine, num("source_fps")?)
    }
}
