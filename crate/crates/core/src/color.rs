use std::fmt;

use serde::{Deserialize, Serialize};

/// An 8-bit sRGB triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColorSpec {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hsv {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
}

impl ColorSpec {
    pub const RED: ColorSpec = ColorSpec::new(255, 0, 0);
    pub const GREEN: ColorSpec = ColorSpec::new(0, 255, 0);
    pub const BLUE: ColorSpec = ColorSpec::new(0, 0, 255);
    pub const BLACK: ColorSpec = ColorSpec::new(0, 0, 0);
    pub const WHITE: ColorSpec = ColorSpec::new(255, 255, 255);

    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        ColorSpec { r, g, b }
    }

    pub fn channels(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    pub fn to_rgb(self) -> image::Rgb<u8> {
        image::Rgb([self.r, self.g, self.b])
    }

    pub fn from_rgb(px: image::Rgb<u8>) -> Self {
        ColorSpec::new(px[0], px[1], px[2])
    }

    /// Builds a color from HSV coordinates. Hue wraps modulo 360; saturation and
    /// value are clamped to `[0, 1]`.
    pub fn from_hsv(hue: f64, saturation: f64, value: f64) -> Self {
        let h = hue.rem_euclid(360.0);
        let s = saturation.clamp(0.0, 1.0);
        let v = value.clamp(0.0, 1.0);
        let c = v * s;
        let hp = h / 60.0;
        let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
        let (r1, g1, b1) = match hp as u32 {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = v - c;
        let to_u8 = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
        ColorSpec::new(to_u8(r1), to_u8(g1), to_u8(b1))
    }

    pub fn to_hsv(self) -> Hsv {
        let r = f64::from(self.r) / 255.0;
        let g = f64::from(self.g) / 255.0;
        let b = f64::from(self.b) / 255.0;
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        let hue = if delta == 0.0 {
            0.0
        } else if max == r {
            60.0 * ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            60.0 * ((b - r) / delta + 2.0)
        } else {
            60.0 * ((r - g) / delta + 4.0)
        };
        let saturation = if max == 0.0 { 0.0 } else { delta / max };
        Hsv {
            hue: hue.rem_euclid(360.0),
            saturation,
            value: max,
        }
    }

    /// Largest absolute per-channel difference.
    pub fn chebyshev_distance(self, other: ColorSpec) -> u8 {
        self.channels()
            .iter()
            .zip(other.channels())
            .map(|(a, b)| a.abs_diff(b))
            .max()
            .unwrap_or(0)
    }

    /// Euclidean distance in RGB, with channels scaled to `[0, 1]`.
    pub fn unit_rgb_distance(self, other: ColorSpec) -> f64 {
        self.channels()
            .iter()
            .zip(other.channels())
            .map(|(&a, b)| {
                let d = (f64::from(a) - f64::from(b)) / 255.0;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl fmt::Display for ColorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.r, self.g, self.b)
    }
}

impl std::str::FromStr for ColorSpec {
    type Err = String;

    /// Accepts `r,g,b`, `#rrggbb` or a primary's name.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some(p) = Primary::parse(s) {
            return Ok(p.color());
        }
        if let Some(hex) = s.strip_prefix('#') {
            let v = (hex.len() == 6).then(|| u32::from_str_radix(hex, 16).ok()).flatten();
            return v
                .map(|v| ColorSpec::new((v >> 16) as u8, (v >> 8) as u8, v as u8))
                .ok_or_else(|| format!("bad hex color {s:?}"));
        }
        let parts: Vec<&str> = s.trim_matches(|c| c == '(' || c == ')').split(',').map(str::trim).collect();
        match parts.as_slice() {
            [r, g, b] => {
                let ch = |v: &str| v.parse::<u8>().map_err(|e| format!("bad channel {v:?} in {s:?}: {e}"));
                Ok(ColorSpec::new(ch(r)?, ch(g)?, ch(b)?))
            }
            _ => Err(format!("expected r,g,b, #rrggbb or a primary name, got {s:?}")),
        }
    }
}

/// Named reference primaries used throughout the examinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primary {
    Red,
    Green,
    Blue,
}

impl Primary {
    pub const ALL: [Primary; 3] = [Primary::Red, Primary::Green, Primary::Blue];

    pub fn color(self) -> ColorSpec {
        match self {
            Primary::Red => ColorSpec::RED,
            Primary::Green => ColorSpec::GREEN,
            Primary::Blue => ColorSpec::BLUE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Primary::Red => "red",
            Primary::Green => "green",
            Primary::Blue => "blue",
        }
    }

    pub fn parse(s: &str) -> Option<Primary> {
        match s.to_ascii_lowercase().as_str() {
            "red" | "r" => Some(Primary::Red),
            "green" | "g" => Some(Primary::Green),
            "blue" | "b" => Some(Primary::Blue),
            _ => None,
        }
    }

    /// Output channel this primary drives in a color-corrected image.
    pub fn channel(self) -> usize {
        self as usize
    }
}
