//! Procedural scenes: colored shapes, striped patches and bitmap text over a
//! noisy background, rendered to small RGB images with per-element masks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::image::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    fn hue(self) -> f32 {
        match self {
            Color::Red => 0.0,
            Color::Yellow => 55.0,
            Color::Green => 125.0,
            Color::Blue => 225.0,
            Color::Purple => 285.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Element {
    Shape {
        shape: Shape,
        color: Color,
        /// Hue offset in degrees and value multiplier applied to the base color.
        hue_shift: f32,
        value: f32,
        cy: f32,
        cx: f32,
        radius: f32,
    },
    Stripes {
        orientation: Orientation,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
        period: usize,
    },
    Text {
        text: String,
        y0: usize,
        x0: usize,
        scale: usize,
        color: [u8; 3],
        background: Option<[u8; 3]>,
    },
}

/// Noise and jitter knobs shared by every generator built on scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub size: usize,
    /// Std-dev of per-pixel Gaussian noise, in 0..255 units.
    pub pixel_noise: f32,
    /// Max absolute hue jitter in degrees.
    pub hue_jitter: f32,
    pub min_radius: f32,
    pub max_radius: f32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: 32,
            pixel_noise: 12.0,
            hue_jitter: 12.0,
            min_radius: 5.0,
            max_radius: 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub background: [u8; 3],
    pub noise_seed: u64,
    pub pixel_noise: f32,
    pub elements: Vec<Element>,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

const GLYPHS: [[u8; 5]; 26] = [
    [0b010, 0b101, 0b111, 0b101, 0b101],
    [0b110, 0b101, 0b110, 0b101, 0b110],
    [0b011, 0b100, 0b100, 0b100, 0b011],
    [0b110, 0b101, 0b101, 0b101, 0b110],
    [0b111, 0b100, 0b110, 0b100, 0b111],
    [0b111, 0b100, 0b110, 0b100, 0b100],
    [0b011, 0b100, 0b101, 0b101, 0b011],
    [0b101, 0b101, 0b111, 0b101, 0b101],
    [0b111, 0b010, 0b010, 0b010, 0b111],
    [0b001, 0b001, 0b001, 0b101, 0b010],
    [0b101, 0b101, 0b110, 0b101, 0b101],
    [0b100, 0b100, 0b100, 0b100, 0b111],
    [0b101, 0b111, 0b111, 0b101, 0b101],
    [0b110, 0b101, 0b101, 0b101, 0b101],
    [0b010, 0b101, 0b101, 0b101, 0b010],
    [0b110, 0b101, 0b110, 0b100, 0b100],
    [0b010, 0b101, 0b101, 0b110, 0b011],
    [0b110, 0b101, 0b110, 0b101, 0b101],
    [0b011, 0b100, 0b010, 0b001, 0b110],
    [0b111, 0b010, 0b010, 0b010, 0b010],
    [0b101, 0b101, 0b101, 0b101, 0b111],
    [0b101, 0b101, 0b101, 0b101, 0b010],
    [0b101, 0b101, 0b111, 0b111, 0b101],
    [0b101, 0b101, 0b010, 0b101, 0b101],
    [0b101, 0b101, 0b010, 0b010, 0b010],
    [0b111, 0b001, 0b010, 0b100, 0b111],
];

/// Pixel extent `(height, width)` of rendered text at a glyph scale.
pub fn text_extent(text: &str, scale: usize) -> (usize, usize) {
    let n = text.chars().count();
    (5 * scale + 2, (n * 4).saturating_sub(1) * scale + 2)
}

impl Element {
    /// Whether pixel (y, x) belongs to this element's footprint.
    fn covers(&self, y: usize, x: usize) -> bool {
        let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
        match self {
            Element::Shape {
                shape, cy, cx, radius, ..
            } => {
                let (dy, dx) = (fy - cy, fx - cx);
                match shape {
                    Shape::Circle => dy * dy + dx * dx <= radius * radius,
                    Shape::Square => dy.abs() <= radius * 0.85 && dx.abs() <= radius * 0.85,
                    Shape::Triangle => {
                        let top = cy - radius;
                        let bottom = cy + radius * 0.8;
                        if fy < top || fy > bottom {
                            return false;
                        }
                        let half = (fy - top) / (bottom - top) * radius;
                        dx.abs() <= half
                    }
                }
            }
            Element::Stripes { y0, x0, h, w, .. } => y >= *y0 && y < y0 + h && x >= *x0 && x < x0 + w,
            Element::Text { text, y0, x0, scale, .. } => {
                let (th, tw) = text_extent(text, *scale);
                y >= *y0 && y < y0 + th && x >= *x0 && x < x0 + tw
            }
        }
    }

    fn paint(&self, y: usize, x: usize) -> Option<[u8; 3]> {
        if !self.covers(y, x) {
            return None;
        }
        match self {
            Element::Shape {
                color, hue_shift, value, ..
            } => Some(hsv_to_rgb(color.hue() + hue_shift, 0.85, *value)),
            Element::Stripes {
                orientation,
                y0,
                x0,
                period,
                ..
            } => {
                let t = match orientation {
                    Orientation::Horizontal => y - y0,
                    Orientation::Vertical => x - x0,
                };
                Some(if (t / period.max(&1)) % 2 == 0 { [235, 235, 235] } else { [25, 25, 25] })
            }
            Element::Text {
                text,
                y0,
                x0,
                scale,
                color,
                background,
            } => {
                let (ly, lx) = (y - y0, x - x0);
                if ly == 0 || lx == 0 {
                    return *background;
                }
                let (gy, gx) = ((ly - 1) / scale, (lx - 1) / scale);
                let (ci, col) = (gx / 4, gx % 4);
                let ch = text.chars().nth(ci)?;
                if gy >= 5 || col == 3 || !ch.is_ascii_lowercase() {
                    return *background;
                }
                let row = GLYPHS[(ch as u8 - b'a') as usize][gy];
                if row & (0b100 >> col) != 0 {
                    Some(*color)
                } else {
                    *background
                }
            }
        }
    }
}

impl Scene {
    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::filled(self.size, self.size, self.background);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        for y in 0..self.size {
            for x in 0..self.size {
                let mut px = self.background;
                for e in &self.elements {
                    if let Some(c) = e.paint(y, x) {
                        px = c;
                    }
                }
                if self.pixel_noise > 0.0 {
                    let is_text = self.elements.iter().any(|e| matches!(e, Element::Text { .. }) && e.covers(y, x));
                    if !is_text {
                        px = px.map(|v| {
                            let n: f32 = rng.sample(rand_distr::StandardNormal);
                            (v as f32 + n * self.pixel_noise).round().clamp(0.0, 255.0) as u8
                        });
                    }
                }
                img.set_pixel(y, x, px);
            }
        }
        img
    }

    /// Footprint of element `i`, dilated by `pad` pixels, excluding later elements drawn on top.
    pub fn element_mask(&self, i: usize, pad: usize) -> Mask {
        let n = self.size;
        let mut base = vec![false; n * n];
        for y in 0..n {
            for x in 0..n {
                let topmost = self.elements.iter().rposition(|e| e.covers(y, x));
                base[y * n + x] = topmost == Some(i);
            }
        }
        let mut out = base.clone();
        for y in 0..n {
            for x in 0..n {
                if base[y * n + x] {
                    for yy in y.saturating_sub(pad)..(y + pad + 1).min(n) {
                        for xx in x.saturating_sub(pad)..(x + pad + 1).min(n) {
                            out[yy * n + xx] = true;
                        }
                    }
                }
            }
        }
        Mask::new(n, n, out).expect("square mask")
    }

    pub fn random_background<R: Rng>(rng: &mut R) -> [u8; 3] {
        let v: u8 = rng.random_range(95..150);
        let tint = |r: &mut R| v.saturating_add(r.random_range(0..12));
        [tint(rng), tint(rng), tint(rng)]
    }

    #[cfg(test)]
    pub(crate) fn random_for_test(seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SceneParams::default();
        let mut scene = Scene {
            size: params.size,
            background: Scene::random_background(&mut rng),
            noise_seed: seed,
            pixel_noise: params.pixel_noise,
            elements: vec![],
        };
        scene.elements.push(random_shape(&mut rng, &params, Shape::Circle, Color::Red));
        scene
    }
}

pub fn random_shape<R: Rng>(rng: &mut R, params: &SceneParams, shape: Shape, color: Color) -> Element {
    let radius = rng.random_range(params.min_radius..=params.max_radius);
    let lo = radius;
    let hi = (params.size as f32 - radius).max(lo + 0.01);
    Element::Shape {
        shape,
        color,
        hue_shift: rng.random_range(-params.hue_jitter..=params.hue_jitter),
        value: rng.random_range(0.75..=1.0),
        cy: rng.random_range(lo..hi),
        cx: rng.random_range(lo..hi),
        radius,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic() {
        let s = Scene::random_for_test(9);
        assert_eq!(s.render(), s.render());
    }

    #[test]
    fn text_label_renders_glyphs() {
        let scene = Scene {
            size: 32,
            background: [120, 120, 120],
            noise_seed: 0,
            pixel_noise: 0.0,
            elements: vec![Element::Text {
                text: "ab".into(),
                y0: 1,
                x0: 1,
                scale: 1,
                color: [255, 255, 255],
                background: Some([0, 0, 0]),
            }],
        };
        let img = scene.render();
        // 'a' row 0 = 010 -> pixel at glyph column 1.
        assert_eq!(img.pixel(2, 3), [255, 255, 255]);
        assert_eq!(img.pixel(2, 2), [0, 0, 0]);
        let mask = scene.element_mask(0, 0);
        assert_eq!(mask.count_ones(), text_extent("ab", 1).0 * text_extent("ab", 1).1);
    }
}
