//! Reference-color similarity fields from visual-encoder embeddings, and the
//! color-correction transform that re-renders an image through three of them.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::ColorSpec;
use crate::field::write_atomic;
use crate::metrics::minmax_normalize;
use crate::modelclient::{cosine_similarity, ClientError, Embedder};
use crate::par::{self, Parallelism};
use crate::runner::{run_cells, RunError, RunOptions};

pub const DEFAULT_BINS: usize = 32;
pub const SIMILARITY_SCHEMA: &str = "lens-similarity/1";

#[derive(Debug, Error)]
pub enum ColorCorrectError {
    #[error("bins must divide 256, got {0}")]
    Bins(usize),
    #[error("fields disagree: {0}")]
    Mismatch(String),
    #[error("reference embedding failed: {0}")]
    Reference(ClientError),
    #[error("embedding bin {bin} {color} failed")]
    Bin { bin: usize, color: ColorSpec, source: ClientError },
    #[error(transparent)]
    Run(RunError),
    #[error("unsupported schema {0:?}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Quantized RGB cube with `bins` levels per channel at `c·(256/bins)`.
/// Index is `r·bins² + g·bins + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorBins(pub usize);

impl ColorBins {
    pub fn new(bins: usize) -> Result<Self, ColorCorrectError> {
        if bins == 0 || bins > 256 || 256 % bins != 0 {
            return Err(ColorCorrectError::Bins(bins));
        }
        Ok(ColorBins(bins))
    }

    pub fn len(self) -> usize {
        self.0 * self.0 * self.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    fn step(self) -> u32 {
        256 / self.0 as u32
    }

    /// Nearest bin level for a channel value, ties rounding up.
    pub fn level(self, v: u8) -> usize {
        let step = self.step();
        (((u32::from(v) + step / 2) / step) as usize).min(self.0 - 1)
    }

    pub fn index(self, c: ColorSpec) -> usize {
        let n = self.0;
        (self.level(c.r) * n + self.level(c.g)) * n + self.level(c.b)
    }

    pub fn color(self, index: usize) -> ColorSpec {
        let n = self.0;
        let step = self.step() as usize;
        let ch = |k: usize| (k * step) as u8;
        ColorSpec::new(ch(index / (n * n)), ch(index / n % n), ch(index % n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityField {
    pub schema: String,
    pub model_id: String,
    pub reference: ColorSpec,
    pub bins: usize,
    /// Pooling strategy reported by the encoder, when known.
    pub pooling: Option<String>,
    /// Normalized similarities, one per bin.
    pub values: Vec<f64>,
    pub degenerate: bool,
}

impl SimilarityField {
    pub fn from_values(reference: ColorSpec, bins: usize, values: Vec<f64>) -> Result<Self, ColorCorrectError> {
        let cube = ColorBins::new(bins)?;
        if values.len() != cube.len() {
            return Err(ColorCorrectError::Mismatch(format!("{} values for {} bins", values.len(), cube.len())));
        }
        Ok(SimilarityField {
            schema: SIMILARITY_SCHEMA.into(),
            model_id: String::new(),
            reference,
            bins,
            pooling: None,
            values,
            degenerate: false,
        })
    }

    /// One at the reference's own bin, zero elsewhere.
    pub fn kronecker(reference: ColorSpec, bins: usize) -> Result<Self, ColorCorrectError> {
        let cube = ColorBins::new(bins)?;
        let mut values = vec![0.0; cube.len()];
        values[cube.index(reference)] = 1.0;
        SimilarityField::from_values(reference, bins, values)
    }

    pub fn constant(reference: ColorSpec, bins: usize, value: f64) -> Result<Self, ColorCorrectError> {
        let cube = ColorBins::new(bins)?;
        SimilarityField::from_values(reference, bins, vec![value; cube.len()])
    }

    pub fn cube(&self) -> ColorBins {
        ColorBins(self.bins)
    }

    pub fn lookup(&self, c: ColorSpec) -> f64 {
        self.values[self.cube().index(c)]
    }

    pub fn save(&self, path: &Path) -> Result<(), ColorCorrectError> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ColorCorrectError> {
        let field: SimilarityField = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if field.schema != SIMILARITY_SCHEMA {
            return Err(ColorCorrectError::Schema(field.schema));
        }
        ColorBins::new(field.bins)?;
        if field.values.len() != field.cube().len() {
            return Err(ColorCorrectError::Mismatch(format!("{} values for {} bins", field.values.len(), field.cube().len())));
        }
        Ok(field)
    }
}

/// Cache location of a field: `<dir>/<model>/bins<N>/<r>-<g>-<b>.json`.
pub fn cache_path(dir: &Path, model_id: &str, bins: usize, reference: ColorSpec) -> PathBuf {
    let model: String = model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    dir.join(model)
        .join(format!("bins{bins}"))
        .join(format!("{}-{}-{}.json", reference.r, reference.g, reference.b))
}

fn swatch(c: ColorSpec, (w, h): (u32, u32)) -> RgbImage {
    RgbImage::from_pixel(w.max(1), h.max(1), c.to_rgb())
}

/// Embeds a full-frame swatch of every bin color and of the reference, takes
/// cosine similarities to the reference and min-max normalizes them.
pub fn build_similarity_field<E: Embedder + ?Sized>(
    embedder: &E,
    reference: ColorSpec,
    bins: usize,
    opts: &RunOptions,
) -> Result<SimilarityField, ColorCorrectError> {
    let cube = ColorBins::new(bins)?;
    let size = embedder.input_size();
    let model_id = embedder.model_id();
    let ref_vec = embedder.embed(&swatch(reference, size)).map_err(ColorCorrectError::Reference)?;
    let key = format!("similarity|{model_id}|{reference}|{bins}|{}x{}", size.0, size.1);
    let raw = run_cells(cube.len(), &key, opts, |i| {
        let v = embedder.embed(&swatch(cube.color(i), size))?;
        Ok(cosine_similarity(&ref_vec, &v))
    })
    .map_err(|e| match e {
        RunError::Cell { index, source, .. } => ColorCorrectError::Bin { bin: index, color: cube.color(index), source },
        other => ColorCorrectError::Run(other),
    })?;
    let norm = minmax_normalize(&raw);
    Ok(SimilarityField {
        schema: SIMILARITY_SCHEMA.into(),
        model_id,
        reference,
        bins,
        pooling: embedder.pooling(),
        values: norm.values,
        degenerate: norm.degenerate,
    })
}

fn to_channel(sim: f64) -> u8 {
    (255.0 * sim + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Replaces every pixel by `(255·sim_R, 255·sim_G, 255·sim_B)` looked up at
/// its nearest bin, rounding half up and clamping.
pub fn correct_image(
    img: &RgbImage,
    fields: [&SimilarityField; 3],
    parallelism: Parallelism,
) -> Result<RgbImage, ColorCorrectError> {
    let bins = fields[0].bins;
    for f in &fields {
        if f.bins != bins || f.values.len() != f.cube().len() {
            return Err(ColorCorrectError::Mismatch(format!(
                "bin counts {} / {} / {}",
                fields[0].bins, fields[1].bins, fields[2].bins
            )));
        }
    }
    let cube = ColorBins::new(bins)?;
    let (w, h) = img.dimensions();
    let src = img.as_raw();
    let mut out = vec![0u8; src.len()];
    let row_len = w as usize * 3;
    par::for_each_row_mut(&mut out, row_len, parallelism, |y, row| {
        let line = &src[y * row_len..(y + 1) * row_len];
        for (dst, px) in row.chunks_exact_mut(3).zip(line.chunks_exact(3)) {
            let idx = cube.index(ColorSpec::new(px[0], px[1], px[2]));
            for k in 0..3 {
                dst[k] = to_channel(fields[k].values[idx]);
            }
        }
    });
    Ok(RgbImage::from_raw(w, h, out).expect("buffer sized from source image"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::PixelMeanEmbedder;

    #[test]
    fn bin_lookup() {
        let cube = ColorBins::new(32).unwrap();
        assert_eq!(cube.len(), 32_768);
        assert_eq!(cube.level(0), 0);
        assert_eq!(cube.level(3), 0);
        assert_eq!(cube.level(4), 1);
        assert_eq!(cube.level(255), 31);
        assert_eq!(cube.color(cube.index(ColorSpec::new(248, 8, 128))), ColorSpec::new(248, 8, 128));
        assert_eq!(cube.index(ColorSpec::new(0, 0, 8)), 1);
        assert_eq!(cube.index(ColorSpec::new(8, 0, 0)), 1024);
        assert!(ColorBins::new(30).is_err());
    }

    #[test]
    fn half_sim_rounds_up() {
        assert_eq!(to_channel(0.5), 128);
        assert_eq!(to_channel(1.0), 255);
        assert_eq!(to_channel(0.0), 0);
        assert_eq!(to_channel(1.7), 255);
    }

    #[test]
    fn kronecker_fields_fix_primaries() {
        let f: Vec<_> = [ColorSpec::RED, ColorSpec::GREEN, ColorSpec::BLUE]
            .iter()
            .map(|&c| SimilarityField::kronecker(c, 32).unwrap())
            .collect();
        let mut img = RgbImage::new(3, 1);
        img.put_pixel(0, 0, ColorSpec::RED.to_rgb());
        img.put_pixel(1, 0, ColorSpec::GREEN.to_rgb());
        img.put_pixel(2, 0, ColorSpec::BLUE.to_rgb());
        let out = correct_image(&img, [&f[0], &f[1], &f[2]], Parallelism::Sequential).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn mismatched_fields_rejected() {
        let a = SimilarityField::constant(ColorSpec::RED, 32, 1.0).unwrap();
        let b = SimilarityField::constant(ColorSpec::GREEN, 16, 1.0).unwrap();
        let img = RgbImage::new(2, 2);
        assert!(matches!(
            correct_image(&img, [&a, &b, &a], Parallelism::Sequential),
            Err(ColorCorrectError::Mismatch(_))
        ));
    }

    #[test]
    fn mock_field_reference_bin_is_max() {
        let f = build_similarity_field(&PixelMeanEmbedder::default(), ColorSpec::RED, 8, &RunOptions::default()).unwrap();
        assert_eq!(f.values.len(), 512);
        assert_eq!(f.lookup(ColorSpec::RED), 1.0);
        assert_eq!(f.lookup(ColorSpec::BLACK), 0.0);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = SimilarityField::kronecker(ColorSpec::GREEN, 16).unwrap();
        let p = cache_path(dir.path(), "org/model:7b", 16, ColorSpec::GREEN);
        assert!(p.ends_with("org_model_7b/bins16/0-255-0.json"));
        f.save(&p).unwrap();
        assert_eq!(SimilarityField::load(&p).unwrap(), f);
    }
}
