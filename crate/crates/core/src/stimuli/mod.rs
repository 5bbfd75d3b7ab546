//! Deterministic rendering of the visual stimuli: color boxes, shapes, and
//! patch manipulations of natural images.
//!
//! Every renderer is a pure function of its inputs. Randomness, where present,
//! comes from a ChaCha stream seeded by the caller, so identical
//! `(spec, seed)` pairs yield byte-identical rasters on every platform.

pub mod geometry;
pub mod patch;
pub mod shapes;

use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::color::ColorSpec;
use crate::font;

pub use patch::{apply_patch_op, patch_rect, swap_patches, PatchOp, PatchOpKind};
pub use shapes::{render_shape, render_shape_pair, BezierSpec, ShapeCanvas, ShapeSpec};

#[derive(Debug, Error, PartialEq)]
pub enum StimulusError {
    #[error("{param} = {value} is outside [{min}, {max}]")]
    OutOfRange {
        param: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("image dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch { left: (u32, u32), right: (u32, u32) },
    #[error("image of {width}x{height} cannot be split into a {grid}x{grid} patch grid")]
    NotDivisible { width: u32, height: u32, grid: u32 },
    #[error("cross-swap requires a donor image")]
    MissingDonor,
    #[error("layout region {0:?} lies outside the canvas")]
    RegionOutsideCanvas(String),
    #[error("layout regions {0:?} and {1:?} overlap")]
    OverlappingRegions(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Rect { x, y, width, height }
    }

    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.bottom() && other.y < self.bottom()
    }

    pub fn union(&self, other: &Rect) -> Rect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Rect::new(x, y, self.right().max(other.right()) - x, self.bottom().max(other.bottom()) - y)
    }

    pub fn offset(&self, dx: u32, dy: u32) -> Rect {
        Rect::new(self.x + dx, self.y + dy, self.width, self.height)
    }

    pub fn center(&self) -> (u32, u32) {
        (self.x + self.width / 2, self.y + self.height / 2)
    }
}

/// A named area of a stimulus, e.g. `"left"` or `"Sample 1"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub rect: Rect,
}

/// A rendered raster plus the layout describing where each sample sits.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusImage {
    pub image: RgbImage,
    pub layout: Vec<Region>,
    pub seed: u64,
}

impl StimulusImage {
    /// Validates that every region lies inside the canvas and that regions of
    /// distinct samples do not overlap. A region named `"A/x"` is a child of
    /// `"A"` and may overlap it.
    pub fn new(image: RgbImage, layout: Vec<Region>, seed: u64) -> Result<Self, StimulusError> {
        for r in &layout {
            if r.rect.right() > image.width() || r.rect.bottom() > image.height() {
                return Err(StimulusError::RegionOutsideCanvas(r.name.clone()));
            }
        }
        let top = |n: &str| n.split('/').next().unwrap_or(n).to_string();
        for (i, a) in layout.iter().enumerate() {
            for b in &layout[i + 1..] {
                if top(&a.name) != top(&b.name) && a.rect.intersects(&b.rect) {
                    return Err(StimulusError::OverlappingRegions(a.name.clone(), b.name.clone()));
                }
            }
        }
        Ok(StimulusImage { image, layout, seed })
    }

    /// Wraps a raster with a single region covering the whole canvas.
    pub fn whole(image: RgbImage, name: &str, seed: u64) -> Self {
        let rect = Rect::new(0, 0, image.width(), image.height());
        StimulusImage {
            image,
            layout: vec![Region { name: name.to_string(), rect }],
            seed,
        }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.layout.iter().find(|r| r.name == name)
    }

    pub fn crop(&self, name: &str) -> Option<RgbImage> {
        self.region(name).map(|r| crop(&self.image, r.rect))
    }

    pub fn pixel(&self, x: u32, y: u32) -> ColorSpec {
        ColorSpec::from_rgb(*self.image.get_pixel(x, y))
    }

    pub fn encode_png(&self) -> Vec<u8> {
        encode_png(&self.image)
    }
}

pub fn crop(img: &RgbImage, rect: Rect) -> RgbImage {
    imageops::crop_imm(img, rect.x, rect.y, rect.width, rect.height).to_image()
}

/// Canvas filled with one color.
pub(crate) fn solid(width: u32, height: u32, color: Rgb<u8>) -> RgbImage {
    let n = width as usize * height as usize * 3;
    let [r, g, b] = color.0;
    let raw = if r == g && g == b { vec![r; n] } else { color.0.repeat(n / 3) };
    RgbImage::from_raw(width, height, raw).expect("buffer sized from dimensions")
}

/// Copies `src` into `dst` with its top-left corner at `(x, y)`; `src` must fit.
pub(crate) fn blit(dst: &mut RgbImage, src: &RgbImage, x: u32, y: u32) {
    let dw = dst.width() as usize * 3;
    let sw = src.width() as usize * 3;
    let x0 = x as usize * 3;
    let dst_buf: &mut [u8] = dst;
    for (row, line) in src.as_raw().chunks_exact(sw).enumerate() {
        let start = (y as usize + row) * dw + x0;
        dst_buf[start..start + sw].copy_from_slice(line);
    }
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Vec::new();
    let encoder = PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, PngFilter::Adaptive);
    img.write_with_encoder(encoder).expect("PNG encoding into memory cannot fail");
    buf
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Geometry shared by the two-sample and two-row layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLayout {
    /// Blank border around the boxes; labels are drawn inside the top margin.
    pub margin: u32,
    /// Horizontal space between the left and right box.
    pub gap: u32,
    /// Vertical space between the two rows of a choice layout.
    pub gutter: u32,
    pub labels: bool,
    pub background: ColorSpec,
}

impl Default for PairLayout {
    fn default() -> Self {
        PairLayout {
            margin: 32,
            gap: 32,
            gutter: 16,
            labels: true,
            background: ColorSpec::WHITE,
        }
    }
}

pub const DEFAULT_COLOR_BOX: u32 = 128;
const LABEL_SCALE: u32 = 2;
const LABEL_INK: image::Rgb<u8> = image::Rgb([0, 0, 0]);

impl PairLayout {
    pub fn pair_size(&self, box_w: u32, box_h: u32) -> (u32, u32) {
        (2 * self.margin + self.gap + 2 * box_w, 2 * self.margin + box_h)
    }

    pub fn choice_size(&self, box_w: u32, box_h: u32) -> (u32, u32) {
        let (w, h) = self.pair_size(box_w, box_h);
        (w, 2 * h + self.gutter)
    }

    fn draw_label(&self, img: &mut RgbImage, x: u32, band_top: u32, text: &str) {
        let (_, th) = font::text_size(text, LABEL_SCALE);
        if !self.labels || self.margin < th + 4 {
            return;
        }
        let y = band_top + (self.margin - th) / 2;
        font::draw_text(img, i64::from(x), i64::from(y), text, LABEL_SCALE, LABEL_INK);
    }
}

/// Places two rasters side by side in equal cells named `"left"` and `"right"`.
/// Rasters smaller than the cell are centered.
pub fn render_pair(left: &RgbImage, right: &RgbImage, layout: &PairLayout, seed: u64) -> StimulusImage {
    let box_w = left.width().max(right.width());
    let box_h = left.height().max(right.height());
    let (w, h) = layout.pair_size(box_w, box_h);
    let mut img = solid(w, h, layout.background.to_rgb());
    let left_rect = Rect::new(layout.margin, layout.margin, box_w, box_h);
    let right_rect = Rect::new(layout.margin + box_w + layout.gap, layout.margin, box_w, box_h);
    for (src, cell) in [(left, left_rect), (right, right_rect)] {
        let x = cell.x + (box_w - src.width()) / 2;
        let y = cell.y + (box_h - src.height()) / 2;
        blit(&mut img, src, x, y);
    }
    layout.draw_label(&mut img, left_rect.x, 0, "Sample 1");
    layout.draw_label(&mut img, right_rect.x, 0, "Sample 2");
    StimulusImage {
        image: img,
        layout: vec![
            Region { name: "left".into(), rect: left_rect },
            Region { name: "right".into(), rect: right_rect },
        ],
        seed,
    }
}

pub fn render_color_pair(c1: ColorSpec, c2: ColorSpec, seed: u64) -> StimulusImage {
    render_color_pair_with(c1, c2, DEFAULT_COLOR_BOX, &PairLayout::default(), seed)
}

pub fn render_color_pair_with(c1: ColorSpec, c2: ColorSpec, box_size: u32, layout: &PairLayout, seed: u64) -> StimulusImage {
    let a = solid(box_size, box_size, c1.to_rgb());
    let b = solid(box_size, box_size, c2.to_rgb());
    render_pair(&a, &b, layout, seed)
}

pub fn render_choice_layout(pair_a: &StimulusImage, pair_b: &StimulusImage) -> Result<StimulusImage, StimulusError> {
    render_choice_layout_with(pair_a, pair_b, &PairLayout::default())
}

/// Stacks two pair stimuli into rows `"Sample 1"` (top) and `"Sample 2"`
/// (bottom), separated by `layout.gutter`. Each row is relabeled; the
/// `"Sample N"` region is the union of that row's input regions.
pub fn render_choice_layout_with(
    pair_a: &StimulusImage,
    pair_b: &StimulusImage,
    layout: &PairLayout,
) -> Result<StimulusImage, StimulusError> {
    if pair_a.image.dimensions() != pair_b.image.dimensions() {
        return Err(StimulusError::DimensionMismatch {
            left: pair_a.image.dimensions(),
            right: pair_b.image.dimensions(),
        });
    }
    let (w, h) = pair_a.image.dimensions();
    let mut img = solid(w, 2 * h + layout.gutter, layout.background.to_rgb());
    let mut regions = Vec::new();
    for (row, (pair, name)) in [(pair_a, "Sample 1"), (pair_b, "Sample 2")].into_iter().enumerate() {
        let dy = row as u32 * (h + layout.gutter);
        imageops::replace(&mut img, &pair.image, 0, i64::from(dy));
        let Some(union) = pair.layout.iter().map(|r| r.rect).reduce(|a, b| a.union(&b)) else {
            continue;
        };
        // Clear whatever labels the row carried above its samples.
        for y in dy..dy + union.y {
            for x in 0..w {
                img.put_pixel(x, y, layout.background.to_rgb());
            }
        }
        let band = union.y.min(layout.margin);
        if band > 0 {
            let l = PairLayout { margin: band, ..*layout };
            l.draw_label(&mut img, union.x, dy + union.y - band, name);
        }
        regions.push(Region { name: name.into(), rect: union.offset(0, dy) });
        for r in &pair.layout {
            regions.push(Region {
                name: format!("{name}/{}", r.name),
                rect: r.rect.offset(0, dy),
            });
        }
    }
    StimulusImage::new(img, regions, pair_a.seed ^ pair_b.seed.rotate_left(32))
}
