//! Train/validation split generation: stimuli, questions and manifests.
//!
//! Each split is written as `<out>/<split>/manifest.jsonl` (one record per
//! line, ordered by id) plus `<out>/<split>/images/<category>/<id>.png`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::color::ColorSpec;
use crate::par::{self, Parallelism};
use crate::questionbank::{build_options, format_prompt, Category, Format, QuestionBank, QuestionError, Truth};
use crate::stimuli::{
    apply_patch_op, encode_png, render_choice_layout, render_color_pair, render_pair, render_shape_pair, sha256_hex,
    BezierSpec, PairLayout, PatchOp, PatchOpKind, Region, ShapeCanvas, ShapeSpec, StimulusError, StimulusImage,
};

pub const MANIFEST_SCHEMA: &str = "lens/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MAX_DRAWS: usize = 100_000;
const WRITE_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("config: {0}")]
    Config(String),
    #[error("{split}: {first} and {second} pools overlap ({detail})")]
    OverlappingPools { split: String, first: String, second: String, detail: String },
    #[error("cell {cell} in split {split}: {detail}")]
    MissingImages { split: String, cell: String, detail: String },
    #[error("record {id}: {detail}")]
    Record { id: String, detail: String },
    #[error(transparent)]
    Question(#[from] QuestionError),
    #[error(transparent)]
    Stimulus(#[from] StimulusError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// A `(category, format)` pair, written `"color.yes_no"` in configs and ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub category: Category,
    pub format: Format,
}

impl Cell {
    pub fn all() -> Vec<Cell> {
        let mut cells: Vec<Cell> = Category::ALL
            .iter()
            .flat_map(|&category| category.formats().iter().map(move |&format| Cell { category, format }))
            .collect();
        cells.sort_by_key(|c| c.key());
        cells
    }

    pub fn key(&self) -> String {
        format!("{}.{}", self.category, self.format)
    }

    pub fn parse(s: &str) -> Option<Cell> {
        let (c, f) = s.split_once('.')?;
        let cell = Cell { category: Category::parse(c)?, format: Format::parse(f)? };
        cell.category.formats().contains(&cell.format).then_some(cell)
    }

    fn needs_images(&self) -> bool {
        self.category == Category::Semantic || self.category.is_patch()
    }

    /// Number of distinct ground-truth labels the cell balances over.
    fn label_count(&self) -> usize {
        match self.format {
            Format::YesNo | Format::PatchPosition => 2,
            Format::Choice12 => 3,
        }
    }
}

/// Set of colors one split may draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColorPool {
    /// Colors whose hash modulo `modulus` is one of `residues`.
    Residues { modulus: u32, residues: Vec<u32> },
    List { colors: Vec<ColorSpec> },
}

fn color_hash(c: ColorSpec) -> u64 {
    let mut z = (u64::from(c.r) << 16 | u64::from(c.g) << 8 | u64::from(c.b)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ColorPool {
    pub fn contains(&self, c: ColorSpec) -> bool {
        match self {
            ColorPool::Residues { modulus, residues } => {
                residues.contains(&((color_hash(c) % u64::from(*modulus)) as u32))
            }
            ColorPool::List { colors } => colors.contains(&c),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            ColorPool::Residues { modulus, residues } => {
                if *modulus == 0 || residues.is_empty() || residues.iter().any(|r| r >= modulus) {
                    return Err(format!("bad residue pool {residues:?} mod {modulus}"));
                }
            }
            ColorPool::List { colors } if colors.is_empty() => return Err("empty color list".into()),
            ColorPool::List { .. } => {}
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Option<ColorSpec> {
        match self {
            ColorPool::List { colors } => colors.choose(rng).copied(),
            ColorPool::Residues { .. } => (0..MAX_DRAWS)
                .map(|_| ColorSpec::new(rng.gen(), rng.gen(), rng.gen()))
                .find(|&c| self.contains(c)),
        }
    }

    /// A color shared with `other`, if any.
    fn overlap(&self, other: &ColorPool) -> Option<ColorSpec> {
        match (self, other) {
            (ColorPool::List { colors }, p) | (p, ColorPool::List { colors }) => {
                colors.iter().copied().find(|&c| p.contains(c))
            }
            (ColorPool::Residues { modulus: m1, residues: r1 }, ColorPool::Residues { modulus: m2, residues: r2 })
                if m1 == m2 =>
            {
                let r = r1.iter().find(|r| r2.contains(r))?;
                (0..=0xFF_FFFFu32)
                    .map(|v| ColorSpec::new((v >> 16) as u8, (v >> 8) as u8, v as u8))
                    .find(|&c| color_hash(c) % u64::from(*m1) == u64::from(*r))
            }
            _ => (0..=0xFF_FFFFu32)
                .map(|v| ColorSpec::new((v >> 16) as u8, (v >> 8) as u8, v as u8))
                .find(|&c| self.contains(c) && other.contains(c)),
        }
    }
}

/// Bezier hyperparameters and seed range one split may draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapePool {
    pub points: Vec<u32>,
    pub radius: Vec<f64>,
    pub smoothness: Vec<f64>,
    /// Half-open seed range `[lo, hi)`; bounded by `i64::MAX` so configs stay
    /// representable in TOML.
    pub seeds: (u64, u64),
}

impl ShapePool {
    fn tuples(&self) -> BTreeSet<(u32, u64, u64)> {
        let mut out = BTreeSet::new();
        for &p in &self.points {
            for &r in &self.radius {
                for &s in &self.smoothness {
                    out.insert((p, r.to_bits(), s.to_bits()));
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<(), String> {
        if self.points.is_empty() || self.radius.is_empty() || self.smoothness.is_empty() {
            return Err("shape pool needs at least one value per hyperparameter".into());
        }
        if self.seeds.0 >= self.seeds.1 {
            return Err(format!("empty seed range {:?}", self.seeds));
        }
        for (p, r, s) in self.tuples() {
            let spec = BezierSpec { points_count: p, point_radius: f64::from_bits(r), smoothness: f64::from_bits(s), seed: 0 };
            ShapeSpec::Bezier(spec).validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> BezierSpec {
        BezierSpec {
            points_count: *self.points.choose(rng).expect("validated"),
            point_radius: *self.radius.choose(rng).expect("validated"),
            smoothness: *self.smoothness.choose(rng).expect("validated"),
            seed: rng.gen_range(self.seeds.0..self.seeds.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    /// Split name → cell key (`"color.yes_no"`) → record count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub color_pools: BTreeMap<String, ColorPool>,
    /// Minimum Chebyshev channel distance between the colors of a "different" pair.
    pub min_color_distance: u8,
    pub shape_pools: BTreeMap<String, ShapePool>,
    /// Split name → directory whose first-level folders are class labels.
    pub semantic_dirs: BTreeMap<String, PathBuf>,
    /// Side length semantic and patch images are resized to; divisible by 4.
    pub image_size: u32,
    /// Replacement question bank.
    pub questions: Option<PathBuf>,
}

fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

impl Default for SplitConfig {
    fn default() -> Self {
        let train = counts(&[
            ("color.yes_no", 1324),
            ("color.choice_1_2", 1324),
            ("shape.yes_no", 3360),
            ("shape.choice_1_2", 3360),
            ("semantic.yes_no", 3500),
            ("semantic.choice_1_2", 1820),
            ("patch_cross.patch_position", 3500),
            ("patch_self.patch_position", 3500),
            ("patch_mask.patch_position", 3500),
        ]);
        let val = counts(&[
            ("color.yes_no", 284),
            ("color.choice_1_2", 284),
            ("shape.yes_no", 1680),
            ("shape.choice_1_2", 1680),
            ("semantic.yes_no", 1000),
            ("semantic.choice_1_2", 520),
            ("patch_cross.patch_position", 1500),
            ("patch_self.patch_position", 1500),
            ("patch_mask.patch_position", 1500),
        ]);
        SplitConfig {
            seed: 0,
            counts: BTreeMap::from([("train".into(), train), ("val".into(), val)]),
            color_pools: BTreeMap::from([
                ("train".into(), ColorPool::Residues { modulus: 5, residues: vec![1, 2, 3, 4] }),
                ("val".into(), ColorPool::Residues { modulus: 5, residues: vec![0] }),
            ]),
            min_color_distance: 32,
            shape_pools: BTreeMap::from([
                (
                    "train".into(),
                    ShapePool {
                        points: vec![4, 5, 6, 7],
                        radius: vec![0.2, 0.3],
                        smoothness: vec![0.0, 0.5],
                        seeds: (0, 1 << 62),
                    },
                ),
                (
                    "val".into(),
                    ShapePool {
                        points: vec![8, 9, 10],
                        radius: vec![0.25, 0.35],
                        smoothness: vec![0.25, 0.75],
                        seeds: (1 << 62, i64::MAX as u64),
                    },
                ),
            ]),
            semantic_dirs: BTreeMap::new(),
            image_size: 224,
            questions: None,
        }
    }
}

impl SplitConfig {
    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        SplitConfig::from_toml(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Multiplies the counts of the given categories by `factor` (rounded).
    pub fn scale(&mut self, categories: &[Category], factor: f64) {
        for cells in self.counts.values_mut() {
            for (key, n) in cells.iter_mut() {
                if Cell::parse(key).is_some_and(|c| categories.contains(&c.category)) {
                    *n = (*n as f64 * factor).round() as usize;
                }
            }
        }
    }

    pub fn cell_counts(&self, split: &str) -> Result<Vec<(Cell, usize)>, DatasetError> {
        let Some(cells) = self.counts.get(split) else {
            return Err(DatasetError::Config(format!("no counts for split {split:?}")));
        };
        let mut out = Vec::new();
        for (key, &n) in cells {
            let cell = Cell::parse(key).ok_or_else(|| DatasetError::Config(format!("unknown cell {key:?}")))?;
            if n > 0 {
                out.push((cell, n));
            }
        }
        out.sort_by_key(|(c, _)| c.key());
        Ok(out)
    }

    pub fn total(&self, split: &str) -> usize {
        self.counts.get(split).map_or(0, |c| c.values().sum())
    }

    /// Checks ranges and that no two splits share a color, a Bezier
    /// hyperparameter tuple or a Bezier seed.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(DatasetError::Config(format!("image_size {} is not a positive multiple of 4", self.image_size)));
        }
        for split in self.counts.keys() {
            let cells = self.cell_counts(split)?;
            let uses = |cat: Category| cells.iter().any(|(c, _)| c.category == cat);
            if uses(Category::Color) {
                let pool = self.color_pools.get(split).ok_or_else(|| {
                    DatasetError::Config(format!("split {split:?} has color cells but no color pool"))
                })?;
                pool.validate().map_err(DatasetError::Config)?;
            }
            if uses(Category::Shape) {
                let pool = self.shape_pools.get(split).ok_or_else(|| {
                    DatasetError::Config(format!("split {split:?} has shape cells but no shape pool"))
                })?;
                pool.validate().map_err(DatasetError::Config)?;
            }
        }
        let names: Vec<&String> = self.counts.keys().collect();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                let overlap = |detail: String| DatasetError::OverlappingPools {
                    split: "color/shape".into(),
                    first: a.to_string(),
                    second: b.to_string(),
                    detail,
                };
                if let (Some(p), Some(q)) = (self.color_pools.get(*a), self.color_pools.get(*b)) {
                    if let Some(c) = p.overlap(q) {
                        return Err(overlap(format!("color {c} in both")));
                    }
                }
                if let (Some(p), Some(q)) = (self.shape_pools.get(*a), self.shape_pools.get(*b)) {
                    if let Some(t) = p.tuples().intersection(&q.tuples()).next() {
                        return Err(overlap(format!(
                            "bezier tuple (points {}, radius {}, smoothness {}) in both",
                            t.0,
                            f64::from_bits(t.1),
                            f64::from_bits(t.2)
                        )));
                    }
                    if p.seeds.0 < q.seeds.1 && q.seeds.0 < p.seeds.1 {
                        return Err(overlap(format!("seed ranges {:?} and {:?} intersect", p.seeds, q.seeds)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// How a record's stimulus was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// One pair for yes/no, two rows for choice layouts.
    Colors { pairs: Vec<(ColorSpec, ColorSpec)> },
    Shapes { pairs: Vec<(ShapeSpec, ShapeSpec)> },
    /// Source image paths relative to the semantic directory.
    Images { pairs: Vec<(String, String)> },
    Patch { source: String, donor: Option<String>, op: PatchOp },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub schema: String,
    pub id: String,
    pub split: String,
    pub category: Category,
    pub format: Format,
    /// Paths relative to the split directory.
    pub images: Vec<String>,
    pub image_sha256: Vec<String>,
    pub question: String,
    pub template_id: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub answer: String,
    pub seed: u64,
    pub provenance: Provenance,
    pub layout: Vec<Region>,
}

impl ManifestRecord {
    pub fn cell(&self) -> Cell {
        Cell { category: self.category, format: self.format }
    }

    pub fn prompt(&self) -> String {
        format_prompt(&self.question, &self.options)
    }

    pub fn check(&self) -> Result<(), DatasetError> {
        let bad = |detail: String| DatasetError::Record { id: self.id.clone(), detail };
        if self.schema != MANIFEST_SCHEMA {
            return Err(bad(format!("schema {:?}", self.schema)));
        }
        if self.options.get(self.answer_index) != Some(&self.answer) {
            return Err(bad(format!("answer {:?} is not option {}", self.answer, self.answer_index)));
        }
        if self.options.len() != self.format.option_count() {
            return Err(bad(format!("{} options for {}", self.options.len(), self.format)));
        }
        if self.images.len() != self.image_sha256.len() {
            return Err(bad("image and digest counts differ".into()));
        }
        Ok(())
    }
}

/// Images of a class-labelled directory tree.
#[derive(Debug, Clone)]
pub struct SemanticSource {
    root: PathBuf,
    size: u32,
    /// Relative path and class index, sorted by path.
    images: Vec<(String, usize)>,
    by_class: Vec<Vec<usize>>,
}

impl SemanticSource {
    pub fn scan(root: &Path, size: u32) -> Result<Self, DatasetError> {
        let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(io_err(root))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        classes.sort();
        let mut images = Vec::new();
        let mut by_class = Vec::new();
        for dir in &classes {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(io_err(dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            if files.is_empty() {
                continue;
            }
            let class = by_class.len();
            let mut members = Vec::new();
            for f in files {
                let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
                members.push(images.len());
                images.push((rel, class));
            }
            by_class.push(members);
        }
        Ok(SemanticSource { root: root.to_path_buf(), size, images, by_class })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.by_class.len()
    }

    fn usable_for(&self, cell: Cell) -> Result<(), String> {
        if self.images.is_empty() {
            return Err("no images found".into());
        }
        let needs_two_classes = cell.category == Category::Semantic || cell.category == Category::PatchCross;
        if needs_two_classes && self.by_class.len() < 2 {
            return Err("at least two classes are required".into());
        }
        if cell.category == Category::Semantic && !self.by_class.iter().any(|m| m.len() >= 2) {
            return Err("some class must hold at least two images".into());
        }
        Ok(())
    }

    pub fn load(&self, index: usize) -> Result<RgbImage, DatasetError> {
        let path = self.root.join(&self.images[index].0);
        let img = image::open(&path).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
        Ok(imageops::resize(&img.to_rgb8(), self.size, self.size, imageops::FilterType::Triangle))
    }

    fn name(&self, index: usize) -> String {
        self.images[index].0.clone()
    }

    fn same_class_pair<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let eligible: Vec<&Vec<usize>> = self.by_class.iter().filter(|m| m.len() >= 2).collect();
        let members = eligible.choose(rng).expect("checked by usable_for");
        let picked: Vec<usize> = members.choose_multiple(rng, 2).copied().collect();
        (picked[0], picked[1])
    }

    fn different_class_pair<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let classes: Vec<usize> = rand::seq::index::sample(rng, self.by_class.len(), 2).into_vec();
        let a = *self.by_class[classes[0]].choose(rng).expect("nonempty class");
        let b = *self.by_class[classes[1]].choose(rng).expect("nonempty class");
        (a, b)
    }

    fn random_image<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.images.len())
    }

    fn image_outside_class<R: Rng>(&self, rng: &mut R, index: usize) -> usize {
        let class = self.images[index].1;
        let others: Vec<usize> = (0..self.by_class.len()).filter(|&c| c != class).collect();
        match others.choose(rng) {
            Some(&c) => *self.by_class[c].choose(rng).expect("nonempty class"),
            None => self.random_image(rng),
        }
    }
}

/// Deterministic per-record seed derived from the master seed and position.
pub fn record_seed(master: u64, split: &str, cell: Cell, index: usize) -> u64 {
    let digest = Sha256::digest(format!("{master}/{split}/{}/{index}", cell.key()).as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

pub fn record_id(split: &str, cell: Cell, index: usize) -> String {
    format!("{split}-{}-{}-{index:06}", cell.category, cell.format)
}

/// Exactly balanced label sequence, shuffled per cell.
fn balanced_labels(master: u64, split: &str, cell: Cell, n: usize) -> Vec<usize> {
    let k = cell.label_count();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(master, split, cell, usize::MAX));
    labels.shuffle(&mut rng);
    labels
}

struct SplitContext<'a> {
    cfg: &'a SplitConfig,
    bank: &'a QuestionBank,
    split: &'a str,
    semantic: Option<SemanticSource>,
    canvas: ShapeCanvas,
    layout: PairLayout,
}

struct Generated {
    record: ManifestRecord,
    png: Vec<u8>,
}

impl SplitContext<'_> {
    fn color_pair<R: Rng>(&self, rng: &mut R, same: bool, id: &str) -> Result<(ColorSpec, ColorSpec), DatasetError> {
        let pool = &self.cfg.color_pools[self.split];
        let exhausted = || DatasetError::Record { id: id.to_string(), detail: "color pool exhausted".into() };
        let a = pool.sample(rng).ok_or_else(exhausted)?;
        if same {
            return Ok((a, a));
        }
        for _ in 0..MAX_DRAWS {
            let b = pool.sample(rng).ok_or_else(exhausted)?;
            if a.chebyshev_distance(b) >= self.cfg.min_color_distance {
                return Ok((a, b));
            }
        }
        Err(DatasetError::Record {
            id: id.to_string(),
            detail: format!("no pool color at distance {} from {a}", self.cfg.min_color_distance),
        })
    }

    fn shape_pair<R: Rng>(&self, rng: &mut R, same: bool) -> (ShapeSpec, ShapeSpec) {
        let pool = &self.cfg.shape_pools[self.split];
        let a = pool.sample(rng);
        if same {
            return (ShapeSpec::Bezier(a), ShapeSpec::Bezier(a));
        }
        let mut b = pool.sample(rng);
        while b == a {
            b = pool.sample(rng);
        }
        (ShapeSpec::Bezier(a), ShapeSpec::Bezier(b))
    }

    fn semantic(&self) -> &SemanticSource {
        self.semantic.as_ref().expect("checked before generation")
    }

    fn image_pair<R: Rng>(&self, rng: &mut R, same: bool, seed: u64) -> Result<(StimulusImage, (String, String)), DatasetError> {
        let src = self.semantic();
        let (a, b) = if same { src.same_class_pair(rng) } else { src.different_class_pair(rng) };
        let stim = render_pair(&src.load(a)?, &src.load(b)?, &self.layout, seed);
        Ok((stim, (src.name(a), src.name(b))))
    }

    fn generate(&self, cell: Cell, index: usize, label: usize) -> Result<Generated, DatasetError> {
        let id = record_id(self.split, cell, index);
        let seed = record_seed(self.cfg.seed, self.split, cell, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = self.bank.sample(cell.category, cell.format, &mut rng)?;
        let (stimulus, provenance, truth) = match cell.format {
            Format::YesNo => {
                let truth = if label == 0 { Truth::Yes } else { Truth::No };
                let same = (label == 0) != template.inverted;
                let (stim, prov) = match cell.category {
                    Category::Color => {
                        let (a, b) = self.color_pair(&mut rng, same, &id)?;
                        (render_color_pair(a, b, seed), Provenance::Colors { pairs: vec![(a, b)] })
                    }
                    Category::Shape => {
                        let (a, b) = self.shape_pair(&mut rng, same);
                        (render_shape_pair(&a, &b, &self.canvas, &self.layout, seed)?, Provenance::Shapes { pairs: vec![(a, b)] })
                    }
                    Category::Semantic => {
                        let (stim, names) = self.image_pair(&mut rng, same, seed)?;
                        (stim, Provenance::Images { pairs: vec![names] })
                    }
                    other => return Err(DatasetError::Config(format!("{other} has no yes/no format"))),
                };
                (stim, prov, truth)
            }
            Format::Choice12 => {
                let (truth, rows) = match label {
                    0 => (Truth::Sample1, [true, false]),
                    1 => (Truth::Sample2, [false, true]),
                    _ => (Truth::NoAnswer, [false, false]),
                };
                let (stim_a, stim_b, prov) = match cell.category {
                    Category::Color => {
                        let p = self.color_pair(&mut rng, rows[0], &id)?;
                        let q = self.color_pair(&mut rng, rows[1], &id)?;
                        (render_color_pair(p.0, p.1, seed), render_color_pair(q.0, q.1, seed), Provenance::Colors { pairs: vec![p, q] })
                    }
                    Category::Shape => {
                        let p = self.shape_pair(&mut rng, rows[0]);
                        let q = self.shape_pair(&mut rng, rows[1]);
                        let a = render_shape_pair(&p.0, &p.1, &self.canvas, &self.layout, seed)?;
                        let b = render_shape_pair(&q.0, &q.1, &self.canvas, &self.layout, seed)?;
                        (a, b, Provenance::Shapes { pairs: vec![p, q] })
                    }
                    Category::Semantic => {
                        let (a, na) = self.image_pair(&mut rng, rows[0], seed)?;
                        let (b, nb) = self.image_pair(&mut rng, rows[1], seed)?;
                        (a, b, Provenance::Images { pairs: vec![na, nb] })
                    }
                    other => return Err(DatasetError::Config(format!("{other} has no choice format"))),
                };
                (render_choice_layout(&stim_a, &stim_b)?, prov, truth)
            }
            Format::PatchPosition => {
                let src = self.semantic();
                let kind = match cell.category {
                    Category::PatchCross => PatchOpKind::CrossSwap,
                    Category::PatchSelf => PatchOpKind::SelfSwap,
                    _ => PatchOpKind::Mask,
                };
                let source = src.random_image(&mut rng);
                let donor = (kind == PatchOpKind::CrossSwap).then(|| src.image_outside_class(&mut rng, source));
                let donor_img = donor.map(|d| src.load(d)).transpose()?;
                let (stim, op) = apply_patch_op(&src.load(source)?, kind, seed, donor_img.as_ref())?;
                let truth = Truth::Patch { answer: op.answer(), touched: op.touched.clone() };
                let prov = Provenance::Patch { source: src.name(source), donor: donor.map(|d| src.name(d)), op };
                (stim, prov, truth)
            }
        };
        let mut options = build_options(cell.format, &truth, &mut rng)?;
        if cell.format == Format::PatchPosition && options.answer_index != label {
            options.options.swap(0, 1);
            options.answer_index = label;
        }
        let png = encode_png(&stimulus.image);
        let path = format!("images/{}/{id}.png", cell.category);
        let record = ManifestRecord {
            schema: MANIFEST_SCHEMA.into(),
            id,
            split: self.split.to_string(),
            category: cell.category,
            format: cell.format,
            images: vec![path],
            image_sha256: vec![sha256_hex(&png)],
            question: template.text.clone(),
            template_id: template.id.clone(),
            answer: options.answer().to_string(),
            options: options.options,
            answer_index: options.answer_index,
            seed,
            provenance,
            layout: stimulus.layout,
        };
        Ok(Generated { record, png })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub count: usize,
    /// Ground-truth answer index → frequency.
    pub answers: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub manifest: PathBuf,
    pub manifest_sha256: String,
    pub cells: BTreeMap<String, CellSummary>,
}

impl SplitSummary {
    pub fn total(&self) -> usize {
        self.cells.values().map(|c| c.count).sum()
    }
}

fn load_bank(cfg: &SplitConfig) -> Result<std::borrow::Cow<'static, QuestionBank>, DatasetError> {
    Ok(match &cfg.questions {
        Some(p) => std::borrow::Cow::Owned(QuestionBank::load(p)?),
        None => std::borrow::Cow::Borrowed(QuestionBank::builtin()),
    })
}

/// Writes one split under `out/<split>/`. Output is identical for any
/// parallelism.
pub fn generate_split(cfg: &SplitConfig, split: &str, out: &Path, parallelism: Parallelism) -> Result<SplitSummary, DatasetError> {
    cfg.validate()?;
    let bank = load_bank(cfg)?;
    let cells = cfg.cell_counts(split)?;
    let semantic = match cells.iter().find(|(c, _)| c.needs_images()) {
        None => None,
        Some((cell, _)) => {
            let dir = cfg.semantic_dirs.get(split).ok_or_else(|| DatasetError::MissingImages {
                split: split.into(),
                cell: cell.key(),
                detail: "no semantic image directory configured".into(),
            })?;
            let src = SemanticSource::scan(dir, cfg.image_size).map_err(|e| DatasetError::MissingImages {
                split: split.into(),
                cell: cell.key(),
                detail: e.to_string(),
            })?;
            for (cell, _) in cells.iter().filter(|(c, _)| c.needs_images()) {
                src.usable_for(*cell).map_err(|detail| DatasetError::MissingImages {
                    split: split.into(),
                    cell: cell.key(),
                    detail: format!("{}: {detail}", dir.display()),
                })?;
            }
            Some(src)
        }
    };
    let ctx = SplitContext {
        cfg,
        bank: &bank,
        split,
        semantic,
        canvas: ShapeCanvas::default(),
        layout: PairLayout::default(),
    };

    let dir = out.join(split);
    for (cell, _) in &cells {
        let d = dir.join("images").join(cell.category.as_str());
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let tmp_path = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let mut writer = BufWriter::new(File::create(&tmp_path).map_err(io_err(&tmp_path))?);
    let mut hasher = Sha256::new();
    let mut summary = SplitSummary { split: split.into(), manifest: manifest_path.clone(), ..Default::default() };

    for &(cell, n) in &cells {
        let labels = balanced_labels(cfg.seed, split, cell, n);
        let cell_summary = summary.cells.entry(cell.key()).or_default();
        for start in (0..n).step_by(WRITE_CHUNK) {
            let end = (start + WRITE_CHUNK).min(n);
            let results = par::map_range(end - start, parallelism, |k| {
                let index = start + k;
                let g = ctx.generate(cell, index, labels[index])?;
                let path = dir.join(&g.record.images[0]);
                std::fs::write(&path, &g.png).map_err(io_err(&path))?;
                Ok::<_, DatasetError>(g.record)
            });
            for record in results {
                let record = record?;
                let mut line = serde_json::to_string(&record).expect("records serialize");
                line.push('\n');
                hasher.update(line.as_bytes());
                writer.write_all(line.as_bytes()).map_err(io_err(&tmp_path))?;
                cell_summary.count += 1;
                *cell_summary.answers.entry(record.answer_index).or_default() += 1;
            }
        }
        log::info!("{split}: {} records for {}", n, cell.key());
    }
    writer.flush().map_err(io_err(&tmp_path))?;
    drop(writer);
    std::fs::rename(&tmp_path, &manifest_path).map_err(io_err(&manifest_path))?;
    summary.manifest_sha256 = hex::encode(hasher.finalize());
    Ok(summary)
}

/// Generates every split named in the config's counts.
pub fn generate_all(cfg: &SplitConfig, out: &Path, parallelism: Parallelism) -> Result<Vec<SplitSummary>, DatasetError> {
    cfg.validate()?;
    cfg.counts.keys().map(|split| generate_split(cfg, split, out, parallelism)).collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Checks every record's options and that each referenced image exists and
/// matches its stored digest. Returns the record count.
pub fn verify_manifest(path: &Path) -> Result<usize, DatasetError> {
    let root = path.parent().unwrap_or(Path::new("."));
    let records = read_manifest(path)?;
    for r in &records {
        r.check()?;
        for (img, digest) in r.images.iter().zip(&r.image_sha256) {
            let p = root.join(img);
            let bytes = std::fs::read(&p).map_err(io_err(&p))?;
            if &sha256_hex(&bytes) != digest {
                return Err(DatasetError::Record { id: r.id.clone(), detail: format!("{img} does not match its digest") });
            }
        }
    }
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub from: String,
    pub value: String,
}

/// Conversation-style instruction record. The source record rides along
/// under `lens` so the export converts back without loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub image: Vec<String>,
    pub conversations: Vec<Turn>,
    pub lens: ManifestRecord,
}

pub const IMAGE_TOKEN: &str = "<image>";

pub fn export_instruction_records(records: &[ManifestRecord]) -> Vec<InstructionRecord> {
    records
        .iter()
        .map(|r| InstructionRecord {
            id: r.id.clone(),
            image: r.images.clone(),
            conversations: vec![
                Turn { from: "human".into(), value: format!("{IMAGE_TOKEN}\n{}", r.prompt()) },
                Turn { from: "gpt".into(), value: r.answer.clone() },
            ],
            lens: r.clone(),
        })
        .collect()
}

pub fn import_instruction_records(records: &[InstructionRecord]) -> Result<Vec<ManifestRecord>, DatasetError> {
    records
        .iter()
        .map(|ir| {
            let r = &ir.lens;
            let bad = |detail: &str| DatasetError::Record { id: ir.id.clone(), detail: detail.into() };
            let expected = format!("{IMAGE_TOKEN}\n{}", r.prompt());
            match ir.conversations.as_slice() {
                [human, gpt] if human.value == expected && gpt.value == r.answer && ir.id == r.id => {}
                _ => return Err(bad("conversation does not match its embedded record")),
            }
            r.check()?;
            Ok(r.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SplitConfig {
        let mut cfg = SplitConfig::default();
        for cells in cfg.counts.values_mut() {
            cells.retain(|k, _| k.starts_with("color") || k.starts_with("shape"));
            for n in cells.values_mut() {
                *n = 12;
            }
        }
        cfg
    }

    #[test]
    fn default_counts() {
        let cfg = SplitConfig::default();
        let sum = |split: &str, prefix: &str| -> usize {
            cfg.counts[split].iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, n)| n).sum()
        };
        assert_eq!(sum("train", "color."), 2648);
        assert_eq!(sum("val", "color."), 568);
        assert_eq!(sum("train", "shape."), 6720);
        assert_eq!(sum("val", "shape."), 3360);
        cfg.validate().unwrap();
    }

    #[test]
    fn overlapping_pools_rejected() {
        let mut cfg = SplitConfig::default();
        cfg.color_pools.insert("val".into(), ColorPool::Residues { modulus: 5, residues: vec![0, 4] });
        assert!(matches!(cfg.validate(), Err(DatasetError::OverlappingPools { .. })));

        let mut cfg = SplitConfig::default();
        let train = cfg.shape_pools["train"].clone();
        cfg.shape_pools.get_mut("val").unwrap().points.push(train.points[0]);
        cfg.shape_pools.get_mut("val").unwrap().radius.push(train.radius[0]);
        cfg.shape_pools.get_mut("val").unwrap().smoothness.push(train.smoothness[0]);
        assert!(matches!(cfg.validate(), Err(DatasetError::OverlappingPools { .. })));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = SplitConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(SplitConfig::from_toml(&text).unwrap(), cfg);
        let partial = SplitConfig::from_toml("seed = 9\nmin_color_distance = 40\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.counts, SplitConfig::default().counts);
    }

    #[test]
    fn labels_are_balanced() {
        let cell = Cell::parse("color.choice_1_2").unwrap();
        let labels = balanced_labels(0, "train", cell, 1324);
        let counts: Vec<usize> = (0..3).map(|k| labels.iter().filter(|&&l| l == k).count()).collect();
        assert_eq!(counts, vec![442, 441, 441]);
    }

    #[test]
    fn missing_semantic_dir_names_the_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SplitConfig::default();
        cfg.counts.get_mut("val").unwrap().retain(|k, _| k == "semantic.yes_no");
        let err = generate_split(&cfg, "val", dir.path(), Parallelism::Sequential).unwrap_err();
        match err {
            DatasetError::MissingImages { cell, .. } => assert_eq!(cell, "semantic.yes_no"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn generation_is_deterministic_and_verifiable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let sa = generate_split(&cfg, "val", a.path(), Parallelism::Sequential).unwrap();
        let sb = generate_split(&cfg, "val", b.path(), Parallelism::Threads(4)).unwrap();
        assert_eq!(sa.manifest_sha256, sb.manifest_sha256);
        assert_eq!(sa.total(), 48);
        assert_eq!(verify_manifest(&sa.manifest).unwrap(), 48);
        let records = read_manifest(&sa.manifest).unwrap();
        for r in &records {
            assert!(r.options.contains(&r.answer));
        }
        let ids: Vec<&String> = records.iter().map(|r| &r.id).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn instruction_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_split(&small_cfg(), "train", dir.path(), Parallelism::default()).unwrap();
        let records = read_manifest(&s.manifest).unwrap();
        let exported = export_instruction_records(&records);
        assert_eq!(exported.len(), records.len());
        for (e, r) in exported.iter().zip(&records) {
            assert!(e.conversations[0].value.ends_with(&r.options.join(", ")));
        }
        let json = serde_json::to_string(&exported).unwrap();
        let back: Vec<InstructionRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(import_instruction_records(&back).unwrap(), records);
    }
}
