//! Measurements on rendered silhouettes.

use image::RgbImage;

/// A pixel counts as ink when its luminance is below mid-gray.
pub fn is_ink(p: &image::Rgb<u8>) -> bool {
    (u32::from(p[0]) + u32::from(p[1]) + u32::from(p[2])) < 3 * 128
}

pub fn ink_mask(img: &RgbImage) -> Vec<bool> {
    img.pixels().map(is_ink).collect()
}

/// Half-width and half-height of the ink bounding box, in pixels.
pub fn ink_extents(img: &RgbImage) -> Option<(f64, f64)> {
    let mut bounds: Option<(u32, u32, u32, u32)> = None;
    for (x, y, p) in img.enumerate_pixels() {
        if is_ink(p) {
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }
    bounds.map(|(x0, y0, x1, y1)| (f64::from(x1 - x0 + 1) / 2.0, f64::from(y1 - y0 + 1) / 2.0))
}

/// Intersection over union of the ink masks of two equally sized rasters.
/// Two blank rasters have IoU 1.
pub fn ink_iou(a: &RgbImage, b: &RgbImage) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        let (ia, ib) = (is_ink(pa), is_ink(pb));
        inter += u64::from(ia && ib);
        union += u64::from(ia || ib);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn cross(o: [i64; 2], a: [i64; 2], b: [i64; 2]) -> i64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull of the ink pixel corners (monotone chain, counterclockwise,
/// collinear points dropped).
pub fn ink_hull(img: &RgbImage) -> Vec<[i64; 2]> {
    let mut pts = Vec::new();
    for (x, y, p) in img.enumerate_pixels() {
        if is_ink(p) {
            let (x, y) = (i64::from(x), i64::from(y));
            pts.extend([[x, y], [x + 1, y], [x, y + 1], [x + 1, y + 1]]);
        }
    }
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[i64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[i64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Counts convex corners of the silhouette: hull vertices are grouped into
/// runs whose span stays within a few pixels, and a run counts as a corner
/// when its accumulated turning angle is at least `min_turn_deg`.
pub fn convex_corners(img: &RgbImage, min_turn_deg: f64) -> usize {
    let hull = ink_hull(img);
    let n = hull.len();
    if n < 3 {
        return 0;
    }
    let merge = (f64::from(img.width().max(img.height())) * 0.04).max(3.0);
    let turn = |i: usize| {
        let p = hull[(i + n - 1) % n];
        let c = hull[i];
        let q = hull[(i + 1) % n];
        let a1 = ((c[1] - p[1]) as f64).atan2((c[0] - p[0]) as f64);
        let a2 = ((q[1] - c[1]) as f64).atan2((q[0] - c[0]) as f64);
        let mut d = (a2 - a1).to_degrees();
        while d <= -180.0 {
            d += 360.0;
        }
        while d > 180.0 {
            d -= 360.0;
        }
        d.abs()
    };
    let dist = |a: [i64; 2], b: [i64; 2]| (((a[0] - b[0]).pow(2) + (a[1] - b[1]).pow(2)) as f64).sqrt();
    // Start at the vertex after the longest edge so no cluster wraps around.
    let start = (0..n)
        .max_by(|&i, &j| dist(hull[i], hull[(i + 1) % n]).total_cmp(&dist(hull[j], hull[(j + 1) % n])))
        .map(|i| (i + 1) % n)
        .unwrap_or(0);
    let mut corners = 0;
    let mut acc = 0.0;
    let mut anchor = hull[start];
    for k in 0..n {
        let i = (start + k) % n;
        if dist(hull[i], anchor) > merge {
            if acc >= min_turn_deg {
                corners += 1;
            }
            acc = 0.0;
            anchor = hull[i];
        }
        acc += turn(i);
    }
    if acc >= min_turn_deg {
        corners += 1;
    }
    corners
}
