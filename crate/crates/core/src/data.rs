//! Synthetic referring-segmentation corpus: scenes of coloured shapes,
//! templated instructions (single-, multi- and no-target), and their masks.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{read_pnm, write_pnm, BinaryMask, MaskImage};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    fn word(self, plural: bool) -> &'static str {
        match (self, plural) {
            (Shape::Circle, false) => "circle",
            (Shape::Circle, true) => "circles",
            (Shape::Square, false) => "square",
            (Shape::Square, true) => "squares",
            (Shape::Triangle, false) => "triangle",
            (Shape::Triangle, true) => "triangles",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn channel(self) -> usize {
        self as usize
    }

    fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

impl SizeClass {
    pub const ALL: [SizeClass; 2] = [SizeClass::Small, SizeClass::Large];

    fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }

    /// Inclusive range of half-extents (radius / half-side) in pixels.
    pub fn extent_range(self) -> (i32, i32) {
        match self {
            SizeClass::Small => (4, 5),
            SizeClass::Large => (6, 8),
        }
    }
}

/// One placed object. `(cx, cy)` is on the pixel-corner lattice, so a square
/// of half-extent `e` covers exactly `(2e)²` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    pub cx: i32,
    pub cy: i32,
    pub extent: i32,
}

impl SceneObject {
    /// Radius of a circle around the centre containing the whole shape.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Circle => self.extent as f64,
            Shape::Square | Shape::Triangle => self.extent as f64 * std::f64::consts::SQRT_2,
        }
    }

    /// Pixel-centre inclusion test.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5 - self.cx as f64;
        let py = y as f64 + 0.5 - self.cy as f64;
        let e = self.extent as f64;
        match self.shape {
            Shape::Circle => px * px + py * py <= e * e,
            Shape::Square => px.abs() < e && py.abs() < e,
            Shape::Triangle => py >= -e && py <= e && px.abs() <= (py + e) / 2.0,
        }
    }

    fn matches(&self, p: &Predicate) -> bool {
        p.shape.is_none_or(|s| s == self.shape) && p.color.is_none_or(|c| c == self.color) && p.size.is_none_or(|s| s == self.size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Extra clearance between bounding circles, in pixels.
    pub min_gap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { height: 32, width: 32, min_objects: 1, max_objects: 5, min_gap: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Three binary colour planes, channels last (`H × W × 3`).
    pub fn render_planes(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.height * self.width * 3];
        for o in &self.objects {
            for y in 0..self.height {
                for x in 0..self.width {
                    if o.contains(x, y) {
                        out[(y * self.width + x) * 3 + o.color.channel()] = 1.0;
                    }
                }
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.render_planes().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        write_pnm(path, self.width, self.height, 3, &bytes)
    }
}

/// Reads a scene raster back as channel-last planes in `[0, 1]`.
pub fn read_scene_planes(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (w, h, c, bytes) = read_pnm(path)?;
    if c != 3 {
        return Err(Error::Image(format!("{}: expected P6 scene", path.display())));
    }
    Ok((h, w, bytes.iter().map(|&b| b as f32 / 255.0).collect()))
}

fn overlaps(a: &SceneObject, b: &SceneObject, gap: f64) -> bool {
    let d = (((a.cx - b.cx).pow(2) + (a.cy - b.cy).pow(2)) as f64).sqrt();
    d < a.bounding_radius() + b.bounding_radius() + gap
}

/// Rejection-samples a scene; deterministic for a given RNG state.
pub fn generate_scene<R: Rng>(config: &SceneConfig, rng: &mut R) -> Scene {
    loop {
        let count = rng.gen_range(config.min_objects..=config.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
        let mut failed = false;
        for _ in 0..count {
            let mut placed = false;
            for _attempt in 0..100 {
                let size = *SizeClass::ALL.choose(rng).unwrap();
                let (lo, hi) = size.extent_range();
                let extent = rng.gen_range(lo..=hi);
                let shape = *Shape::ALL.choose(rng).unwrap();
                let color = *Color::ALL.choose(rng).unwrap();
                let (w, h) = (config.width as i32, config.height as i32);
                if 2 * extent > w || 2 * extent > h {
                    continue;
                }
                let cx = rng.gen_range(extent..=w - extent);
                let cy = rng.gen_range(extent..=h - extent);
                let cand = SceneObject { shape, color, size, cx, cy, extent };
                if objects.iter().all(|o| !overlaps(o, &cand, config.min_gap)) {
                    objects.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                failed = true;
                break;
            }
        }
        if !failed {
            return Scene { height: config.height, width: config.width, objects };
        }
    }
}

/// Attribute filter used to phrase a referring expression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Predicate {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<SizeClass>,
}

impl Predicate {
    pub fn select(&self, scene: &Scene) -> Vec<usize> {
        scene.objects.iter().enumerate().filter(|(_, o)| o.matches(self)).map(|(i, _)| i).collect()
    }

    fn phrase(&self, plural: bool) -> String {
        let mut words = Vec::new();
        if let Some(s) = self.size {
            words.push(s.word());
        }
        if let Some(c) = self.color {
            words.push(c.word());
        }
        words.push(match self.shape {
            Some(s) => s.word(plural),
            None if plural => "objects",
            None => "object",
        });
        words.join(" ")
    }

    /// Parses the noun phrase produced by `phrase`.
    fn parse(words: &[&str]) -> Option<Self> {
        let mut p = Predicate::default();
        for w in words {
            match *w {
                "small" => p.size = Some(SizeClass::Small),
                "large" => p.size = Some(SizeClass::Large),
                "red" => p.color = Some(Color::Red),
                "green" => p.color = Some(Color::Green),
                "blue" => p.color = Some(Color::Blue),
                "circle" | "circles" => p.shape = Some(Shape::Circle),
                "square" | "squares" => p.shape = Some(Shape::Square),
                "triangle" | "triangles" => p.shape = Some(Shape::Triangle),
                "object" | "objects" => {}
                _ => return None,
            }
        }
        Some(p)
    }
}

fn all_predicates() -> Vec<Predicate> {
    let mut out = Vec::new();
    let shapes = [None, Some(Shape::Circle), Some(Shape::Square), Some(Shape::Triangle)];
    let colors = [None, Some(Color::Red), Some(Color::Green), Some(Color::Blue)];
    let sizes = [None, Some(SizeClass::Small), Some(SizeClass::Large)];
    for &shape in &shapes {
        for &color in &colors {
            for &size in &sizes {
                if shape.is_some() || color.is_some() || size.is_some() {
                    out.push(Predicate { shape, color, size });
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Multiplicity {
    None,
    One,
    Many,
}

impl Multiplicity {
    pub fn of_count(n: usize) -> Self {
        match n {
            0 => Multiplicity::None,
            1 => Multiplicity::One,
            _ => Multiplicity::Many,
        }
    }
}

const VERBS: [&str; 4] = ["segment", "find", "highlight", "mask"];

#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub text: String,
    pub targets: Vec<usize>,
}

/// Phrases an instruction of the requested multiplicity, or `None` when the
/// scene cannot support it. Singular phrasing is only used for predicates
/// with at most one match; "all" phrasing only with two or more.
pub fn make_instruction<R: Rng>(scene: &Scene, kind: Multiplicity, rng: &mut R) -> Option<Instruction> {
    let verb = VERBS.choose(rng).unwrap();
    let preds = all_predicates();
    let wanted = |n: usize| match kind {
        Multiplicity::None => n == 0,
        Multiplicity::One => n == 1,
        Multiplicity::Many => n >= 2,
    };
    let mut candidates: Vec<(Predicate, Vec<usize>)> = preds
        .into_iter()
        .map(|p| {
            let sel = p.select(scene);
            (p, sel)
        })
        .filter(|(p, sel)| {
            // absent-object prompts must name a shape so they read naturally
            wanted(sel.len()) && (kind != Multiplicity::None || (p.shape.is_some() && p.color.is_some()))
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    if kind == Multiplicity::One {
        // pick the target first so every object is equally likely to be referred to
        let target = candidates.choose(rng).unwrap().1[0];
        candidates.retain(|(_, s)| s[0] == target);
    }
    let (pred, targets) = candidates.choose(rng).unwrap().clone();
    let text = match kind {
        Multiplicity::Many => format!("{verb} all {}", pred.phrase(true)),
        _ => format!("{verb} the {}", pred.phrase(false)),
    };
    Some(Instruction { text, targets })
}

/// Recovers the target set of a generated instruction; used as an oracle.
pub fn resolve_instruction(scene: &Scene, text: &str) -> Option<Vec<usize>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() < 3 || !VERBS.contains(&words[0]) || !matches!(words[1], "the" | "all") {
        return None;
    }
    Some(Predicate::parse(&words[2..])?.select(scene))
}

/// Union of the filled target shapes, hard 0/1.
pub fn render_mask(scene: &Scene, targets: &[usize]) -> MaskImage {
    let mut m = BinaryMask::empty(scene.height, scene.width);
    for &t in targets {
        let o = &scene.objects[t];
        for y in 0..scene.height {
            for x in 0..scene.width {
                if o.contains(x, y) {
                    m.set(y, x, true);
                }
            }
        }
    }
    MaskImage::from_binary(&m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub no_target_frac: f64,
    pub multi_target_frac: f64,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 5000, seed: 0, no_target_frac: 0.1, multi_target_frac: 0.2, scene: SceneConfig::default() }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.no_target_frac) || !ok(self.multi_target_frac) || self.no_target_frac + self.multi_target_frac > 1.0 {
            return Err(Error::Config("target fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        if self.scene.min_objects == 0 || self.scene.min_objects > self.scene.max_objects {
            return Err(Error::Config("object count range must be 1 <= min <= max".into()));
        }
        if self.multi_target_frac > 0.0 && self.scene.max_objects < 2 {
            return Err(Error::Config("multi-target samples need at least two objects".into()));
        }
        Ok(())
    }
}

/// An in-memory sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub scene: Scene,
    pub instruction: String,
    pub targets: Vec<usize>,
    pub mask: MaskImage,
}

impl Sample {
    pub fn multiplicity(&self) -> Multiplicity {
        Multiplicity::of_count(self.targets.len())
    }
}

/// Deterministic sample `id` of the corpus seeded by `config.seed`. Each id
/// draws from its own ChaCha stream, so generation parallelises trivially.
pub fn generate_sample(config: &DatasetConfig, id: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(id);
    let u: f64 = rng.gen();
    let kind = if u < config.no_target_frac {
        Multiplicity::None
    } else if u < config.no_target_frac + config.multi_target_frac {
        Multiplicity::Many
    } else {
        Multiplicity::One
    };
    loop {
        let scene = generate_scene(&config.scene, &mut rng);
        if let Some(ins) = make_instruction(&scene, kind, &mut rng) {
            let mask = render_mask(&scene, &ins.targets);
            return Sample { id, scene, instruction: ins.text, targets: ins.targets, mask };
        }
    }
}

pub fn generate_samples(config: &DatasetConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    Ok((0..config.count as u64).map(|i| generate_sample(config, i)).collect())
}

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub schema: u32,
    pub id: u64,
    pub scene_path: String,
    pub instruction: String,
    pub mask_path: String,
    pub multiplicity: Multiplicity,
    pub targets: Vec<usize>,
    pub objects: Vec<SceneObject>,
    pub height: usize,
    pub width: usize,
}

impl DatasetRecord {
    pub fn scene(&self) -> Scene {
        Scene { height: self.height, width: self.width, objects: self.objects.clone() }
    }

    /// Materialises the sample, reading the mask raster from disk.
    pub fn load(&self, root: &Path) -> Result<Sample> {
        let mask = MaskImage::read_pgm(&root.join(&self.mask_path))?;
        Ok(Sample { id: self.id, scene: self.scene(), instruction: self.instruction.clone(), targets: self.targets.clone(), mask })
    }
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<DatasetRecord>> {
    fs::create_dir_all(dir.join("scenes"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut index = BufWriter::new(fs::File::create(dir.join(INDEX_FILE))?);
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let scene_path = format!("scenes/{:06}.ppm", s.id);
        let mask_path = format!("masks/{:06}.pgm", s.id);
        s.scene.write_ppm(&dir.join(&scene_path))?;
        s.mask.write_pgm(&dir.join(&mask_path))?;
        let rec = DatasetRecord {
            schema: DATASET_SCHEMA_VERSION,
            id: s.id,
            scene_path,
            instruction: s.instruction.clone(),
            mask_path,
            multiplicity: s.multiplicity(),
            targets: s.targets.clone(),
            objects: s.scene.objects.clone(),
            height: s.scene.height,
            width: s.scene.width,
        };
        serde_json::to_writer(&mut index, &rec).map_err(|e| Error::Io(e.into()))?;
        index.write_all(b"\n")?;
        records.push(rec);
    }
    index.flush()?;
    Ok(records)
}

pub fn read_index(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let path: PathBuf = dir.join(INDEX_FILE);
    let f = fs::File::open(&path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, reason: e.to_string() })?;
        if rec.schema != DATASET_SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: rec.schema, expected: DATASET_SCHEMA_VERSION });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_index(dir)?.iter().map(|r| r.load(dir)).collect()
}
