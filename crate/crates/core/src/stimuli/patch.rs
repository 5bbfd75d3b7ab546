//! 4×4 patch manipulations: self-swap, cross-swap and masking.

use image::{imageops, Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{crop, Rect, Region, StimulusError, StimulusImage};

pub const GRID: u32 = 4;
pub const POSITIONS: u8 = (GRID * GRID) as u8;
const MASKED: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchOpKind {
    SelfSwap,
    CrossSwap,
    Mask,
}

/// Ground truth for a patch manipulation. Positions are 1-based, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOp {
    pub kind: PatchOpKind,
    pub grid: u32,
    /// Swapped pair (self-swap), replaced patch (cross-swap) or blacked
    /// patches (mask), ascending.
    pub touched: Vec<u8>,
    /// Mask only: original position of the probe patch shown beside the image.
    pub probe_position: Option<u8>,
    /// Cross-swap only: donor position the foreign patch was taken from.
    pub donor_position: Option<u8>,
}

impl PatchOp {
    /// Positions that answer the question for this manipulation.
    pub fn answer(&self) -> Vec<u8> {
        match self.kind {
            PatchOpKind::Mask => self.probe_position.into_iter().collect(),
            _ => self.touched.clone(),
        }
    }
}

/// Pixel rectangle of 1-based `position` in a `GRID`×`GRID` split.
pub fn patch_rect(width: u32, height: u32, position: u8) -> Rect {
    let (pw, ph) = (width / GRID, height / GRID);
    let i = u32::from(position - 1);
    Rect::new((i % GRID) * pw, (i / GRID) * ph, pw, ph)
}

pub fn swap_patches(img: &mut RgbImage, a: u8, b: u8) {
    let (w, h) = img.dimensions();
    let ra = patch_rect(w, h, a);
    let rb = patch_rect(w, h, b);
    let pa = crop(img, ra);
    let pb = crop(img, rb);
    imageops::replace(img, &pb, i64::from(ra.x), i64::from(ra.y));
    imageops::replace(img, &pa, i64::from(rb.x), i64::from(rb.y));
}

fn check_divisible(img: &RgbImage) -> Result<(), StimulusError> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 || w % GRID != 0 || h % GRID != 0 {
        return Err(StimulusError::NotDivisible { width: w, height: h, grid: GRID });
    }
    Ok(())
}

fn positions(rng: &mut ChaCha8Rng, k: usize) -> Vec<u8> {
    let mut v: Vec<u8> = sample(rng, usize::from(POSITIONS), k)
        .into_iter()
        .map(|i| i as u8 + 1)
        .collect();
    v.sort_unstable();
    v
}

/// Applies a patch manipulation and returns the manipulated stimulus with
/// its ground truth. The mask variant appends a side panel to the right
/// holding the probe patch (region `"probe"`); the grid is region `"image"`.
pub fn apply_patch_op(
    img: &RgbImage,
    kind: PatchOpKind,
    seed: u64,
    donor: Option<&RgbImage>,
) -> Result<(StimulusImage, PatchOp), StimulusError> {
    check_divisible(img)?;
    let (w, h) = img.dimensions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    let image_region = Region { name: "image".into(), rect: Rect::new(0, 0, w, h) };
    match kind {
        PatchOpKind::SelfSwap => {
            let touched = positions(&mut rng, 2);
            swap_patches(&mut out, touched[0], touched[1]);
            let op = PatchOp { kind, grid: GRID, touched, probe_position: None, donor_position: None };
            Ok((StimulusImage::new(out, vec![image_region], seed)?, op))
        }
        PatchOpKind::CrossSwap => {
            let donor = donor.ok_or(StimulusError::MissingDonor)?;
            if donor.dimensions() != img.dimensions() {
                return Err(StimulusError::DimensionMismatch {
                    left: img.dimensions(),
                    right: donor.dimensions(),
                });
            }
            let target = positions(&mut rng, 1)[0];
            let source = rng.gen_range(1..=POSITIONS);
            let patch = crop(donor, patch_rect(w, h, source));
            let r = patch_rect(w, h, target);
            imageops::replace(&mut out, &patch, i64::from(r.x), i64::from(r.y));
            let op = PatchOp {
                kind,
                grid: GRID,
                touched: vec![target],
                probe_position: None,
                donor_position: Some(source),
            };
            Ok((StimulusImage::new(out, vec![image_region], seed)?, op))
        }
        PatchOpKind::Mask => {
            let touched = positions(&mut rng, MASKED);
            let probe_position = touched[rng.gen_range(0..MASKED)];
            let probe_rect = patch_rect(w, h, probe_position);
            let probe = crop(img, probe_rect);
            for &p in &touched {
                let r = patch_rect(w, h, p);
                for y in r.y..r.bottom() {
                    for x in r.x..r.right() {
                        out.put_pixel(x, y, Rgb([0, 0, 0]));
                    }
                }
            }
            let pad = (probe_rect.width / 4).max(1);
            let panel_w = probe_rect.width + 2 * pad;
            let mut canvas = RgbImage::from_pixel(w + panel_w, h, Rgb([255, 255, 255]));
            imageops::replace(&mut canvas, &out, 0, 0);
            let probe_at = Rect::new(w + pad, (h - probe_rect.height) / 2, probe_rect.width, probe_rect.height);
            imageops::replace(&mut canvas, &probe, i64::from(probe_at.x), i64::from(probe_at.y));
            let op = PatchOp {
                kind,
                grid: GRID,
                touched,
                probe_position: Some(probe_position),
                donor_position: None,
            };
            let layout = vec![image_region, Region { name: "probe".into(), rect: probe_at }];
            Ok((StimulusImage::new(canvas, layout, seed)?, op))
        }
    }
}
