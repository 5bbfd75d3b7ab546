//! Parametric and Bezier-blob silhouettes, drawn black on white.

use std::f64::consts::{PI, TAU};

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_pair, PairLayout, StimulusError, StimulusImage};

pub const MAX_ECCENTRICITY: f64 = 0.9;
pub const MIN_VERTICES: u32 = 3;
pub const MAX_VERTICES: u32 = 30;
pub const SIZE_LEVELS: u32 = 200;
/// Bezier curve samples per segment when flattening the outline.
const CURVE_STEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    Circle,
    /// Equal-area ellipse with its major axis horizontal.
    Ellipse { eccentricity: f64 },
    /// Regular polygon inscribed in the reference circle, one vertex up.
    RegularPolygon { vertices: u32 },
    /// Circle whose radius is taken from the size sweep; see [`ShapeCanvas::scaled_radius`].
    ScaledCircle { level: u32 },
    Bezier(BezierSpec),
}

/// Random closed blob: `points_count` anchors on an annulus, joined by cubic
/// segments whose handles sit `point_radius` × (segment length) away from the
/// anchors. `smoothness` of 1 gives the roundest joins, 0 the edgiest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BezierSpec {
    pub points_count: u32,
    pub point_radius: f64,
    pub smoothness: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeCanvas {
    pub size: u32,
    pub reference_radius: f64,
    /// Size sweep covers `[lo, hi] × reference_radius`.
    pub size_range: (f64, f64),
    pub antialias: bool,
}

impl Default for ShapeCanvas {
    fn default() -> Self {
        ShapeCanvas {
            size: 160,
            reference_radius: 48.0,
            size_range: (0.5, 1.5),
            antialias: false,
        }
    }
}

impl ShapeCanvas {
    /// Radius for a size-sweep level. Levels are the midpoints of
    /// `SIZE_LEVELS` equal cells spanning `size_range`, so integer levels
    /// 1..=100 are smaller than the reference, 101..=200 larger, and the
    /// fractional level 100.5 reproduces the reference radius.
    pub fn scaled_radius(&self, level: f64) -> f64 {
        let (lo, hi) = self.size_range;
        self.reference_radius * (lo + (hi - lo) * (level - 0.5) / f64::from(SIZE_LEVELS))
    }

    pub fn center(&self) -> (f64, f64) {
        let c = f64::from(self.size) / 2.0;
        (c, c)
    }
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<(), StimulusError> {
        fn check(param: &'static str, value: f64, min: f64, max: f64) -> Result<(), StimulusError> {
            if value.is_finite() && (min..=max).contains(&value) {
                Ok(())
            } else {
                Err(StimulusError::OutOfRange { param, value, min, max })
            }
        }
        match *self {
            ShapeSpec::Circle => Ok(()),
            ShapeSpec::Ellipse { eccentricity } => check("eccentricity", eccentricity, 0.0, MAX_ECCENTRICITY),
            ShapeSpec::RegularPolygon { vertices } => check(
                "vertices",
                f64::from(vertices),
                f64::from(MIN_VERTICES),
                f64::from(MAX_VERTICES),
            ),
            ShapeSpec::ScaledCircle { level } => check("level", f64::from(level), 1.0, f64::from(SIZE_LEVELS)),
            ShapeSpec::Bezier(b) => {
                check("points_count", f64::from(b.points_count), 3.0, 32.0)?;
                check("point_radius", b.point_radius, 0.0, 1.0)?;
                check("smoothness", b.smoothness, 0.0, 1.0)
            }
        }
    }
}

enum Geometry {
    Ellipse { a: f64, b: f64 },
    Polygon(Vec<[f64; 2]>),
}

enum Row {
    Ellipse { cx: f64, a: f64, dy2: f64 },
    Crossings(Vec<f64>),
}

impl Row {
    fn contains(&self, x: f64) -> bool {
        match self {
            Row::Ellipse { cx, a, dy2 } => {
                let dx = (x - cx) / a;
                dx * dx + dy2 <= 1.0
            }
            Row::Crossings(c) => (c.len() - c.partition_point(|&v| v <= x)) % 2 == 1,
        }
    }
}

impl Geometry {
    /// Membership test for points on the horizontal line at `y`.
    fn row(&self, y: f64, (cx, cy): (f64, f64)) -> Row {
        match self {
            Geometry::Ellipse { a, b } => {
                let dy = (y - cy) / b;
                Row::Ellipse { cx, a: *a, dy2: dy * dy }
            }
            Geometry::Polygon(pts) => Row::Crossings(row_crossings(pts, y)),
        }
    }

    fn bounds(&self, (cx, cy): (f64, f64)) -> [f64; 4] {
        match self {
            Geometry::Ellipse { a, b } => [cx - a, cy - b, cx + a, cy + b],
            Geometry::Polygon(pts) => pts.iter().fold(
                [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
                |[x0, y0, x1, y1], p| [x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])],
            ),
        }
    }
}

/// Sorted abscissae where the horizontal line at `y` crosses the ring's
/// edges; a point on that line is inside iff an odd number lie to its right.
fn row_crossings(pts: &[[f64; 2]], y: f64) -> Vec<f64> {
    let n = pts.len();
    if n < 3 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (pts[i][0], pts[i][1]);
        let (xj, yj) = (pts[j][0], pts[j][1]);
        if (yi > y) != (yj > y) {
            out.push((xj - xi) * (y - yi) / (yj - yi) + xi);
        }
        j = i;
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Semi-axes `(a, b)` of the equal-area ellipse: `a·b = R²`, `b/a = √(1−e²)`.
pub fn ellipse_axes(reference_radius: f64, eccentricity: f64) -> (f64, f64) {
    let ratio = (1.0 - eccentricity * eccentricity).sqrt();
    let a = reference_radius / ratio.sqrt();
    (a, a * ratio)
}

pub fn polygon_vertices(n: u32, circumradius: f64, (cx, cy): (f64, f64)) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let t = -PI / 2.0 + TAU * f64::from(k) / f64::from(n);
            [cx + circumradius * t.cos(), cy + circumradius * t.sin()]
        })
        .collect()
}

impl BezierSpec {
    /// Anchor points on an annulus around the canvas center, sorted by angle,
    /// with the first anchor repeated at the end to close the curve.
    pub fn anchors(&self, canvas: &ShapeCanvas) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (cx, cy) = canvas.center();
        let outer = canvas.reference_radius * 1.25;
        let mut polar: Vec<(f64, f64)> = (0..self.points_count)
            .map(|_| (rng.gen_range(0.0..TAU), rng.gen_range(0.5 * outer..=outer)))
            .collect();
        polar.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut pts: Vec<[f64; 2]> = polar
            .iter()
            .map(|&(t, r)| [cx + r * t.cos(), cy + r * t.sin()])
            .collect();
        pts.push(pts[0]);
        pts
    }

    /// Control polygon of the closed cubic spline: `4·n` points per segment
    /// layout `[p0, h0, h1, p1]`, flattened. First and last points coincide.
    pub fn control_points(&self, canvas: &ShapeCanvas) -> Vec<[f64; 2]> {
        let anchors = self.anchors(canvas);
        let n = anchors.len() - 1;
        let edgy = 1.0 - self.smoothness;
        let p = edgy.atan() / PI + 0.5;
        let dir: Vec<f64> = (0..n)
            .map(|i| {
                let d = [anchors[i + 1][0] - anchors[i][0], anchors[i + 1][1] - anchors[i][1]];
                d[1].atan2(d[0]).rem_euclid(TAU)
            })
            .collect();
        // Tangent at anchor i blends the outgoing and incoming segment directions.
        let tangent: Vec<f64> = (0..n)
            .map(|i| {
                let out = dir[i];
                let inc = dir[(i + n - 1) % n];
                let mut t = p * out + (1.0 - p) * inc;
                if (inc - out).abs() > PI {
                    t += PI;
                }
                t
            })
            .collect();
        let mut ctrl = Vec::with_capacity(4 * n);
        for i in 0..n {
            let a = anchors[i];
            let b = anchors[i + 1];
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let r = self.point_radius * len;
            let t0 = tangent[i];
            let t1 = tangent[(i + 1) % n] + PI;
            ctrl.push(a);
            ctrl.push([a[0] + r * t0.cos(), a[1] + r * t0.sin()]);
            ctrl.push([b[0] + r * t1.cos(), b[1] + r * t1.sin()]);
            ctrl.push(b);
        }
        ctrl
    }

    /// Flattened outline of the closed curve.
    pub fn outline(&self, canvas: &ShapeCanvas) -> Vec<[f64; 2]> {
        let ctrl = self.control_points(canvas);
        let mut pts = Vec::with_capacity(ctrl.len() / 4 * CURVE_STEPS + 1);
        for seg in ctrl.chunks_exact(4) {
            for s in 0..CURVE_STEPS {
                let t = s as f64 / CURVE_STEPS as f64;
                let u = 1.0 - t;
                let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
                let x = (0..4).map(|k| w[k] * seg[k][0]).sum();
                let y = (0..4).map(|k| w[k] * seg[k][1]).sum();
                pts.push([x, y]);
            }
        }
        pts.push(pts[0]);
        pts
    }
}

fn geometry(spec: &ShapeSpec, canvas: &ShapeCanvas) -> Geometry {
    let r = canvas.reference_radius;
    match *spec {
        ShapeSpec::Circle => {
            let (a, b) = ellipse_axes(r, 0.0);
            Geometry::Ellipse { a, b }
        }
        ShapeSpec::Ellipse { eccentricity } => {
            let (a, b) = ellipse_axes(r, eccentricity);
            Geometry::Ellipse { a, b }
        }
        ShapeSpec::ScaledCircle { level } => {
            let s = canvas.scaled_radius(f64::from(level));
            Geometry::Ellipse { a: s, b: s }
        }
        ShapeSpec::RegularPolygon { vertices } => Geometry::Polygon(polygon_vertices(vertices, r, canvas.center())),
        ShapeSpec::Bezier(b) => Geometry::Polygon(b.outline(canvas)),
    }
}

/// Renders a single silhouette centered in a square canvas. Without
/// antialiasing a pixel is inked iff its center lies inside the shape.
pub fn render_shape(spec: &ShapeSpec, canvas: &ShapeCanvas, seed: u64) -> Result<StimulusImage, StimulusError> {
    spec.validate()?;
    let geom = geometry(spec, canvas);
    let c = canvas.center();
    let size = canvas.size;
    let mut img = super::solid(size, size, Rgb([255, 255, 255]));
    let [x0, y0, x1, y1] = geom.bounds(c);
    let clamp = |v: f64| v.max(0.0).min(f64::from(size)) as u32;
    let (xs, xe) = (clamp(x0.floor() - 1.0), clamp(x1.ceil() + 1.0));
    let (ys, ye) = (clamp(y0.floor() - 1.0), clamp(y1.ceil() + 1.0));
    const SUB: u32 = 4;
    for y in ys..ye {
        let rows: Vec<Row> = if canvas.antialias {
            (0..SUB).map(|sy| geom.row(f64::from(y) + (f64::from(sy) + 0.5) / f64::from(SUB), c)).collect()
        } else {
            vec![geom.row(f64::from(y) + 0.5, c)]
        };
        for x in xs..xe {
            let ink = if canvas.antialias {
                let mut hits = 0;
                for row in &rows {
                    for sx in 0..SUB {
                        let px = f64::from(x) + (f64::from(sx) + 0.5) / f64::from(SUB);
                        hits += u32::from(row.contains(px));
                    }
                }
                f64::from(hits) / f64::from(SUB * SUB)
            } else if rows[0].contains(f64::from(x) + 0.5) {
                1.0
            } else {
                0.0
            };
            if ink > 0.0 {
                let v = (255.0 * (1.0 - ink)).round() as u8;
                img.put_pixel(x, y, Rgb([v, v, v]));
            }
        }
    }
    Ok(StimulusImage::whole(img, "shape", seed))
}

/// Reference shape in the left cell, target in the right.
pub fn render_shape_pair(
    reference: &ShapeSpec,
    target: &ShapeSpec,
    canvas: &ShapeCanvas,
    layout: &PairLayout,
    seed: u64,
) -> Result<StimulusImage, StimulusError> {
    let a = render_shape(reference, canvas, seed)?;
    let b = render_shape(target, canvas, seed)?;
    Ok(render_pair(&a.image, &b.image, layout, seed))
}
