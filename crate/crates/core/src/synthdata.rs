//! Procedural paired data: a flat-lay garment and the same garment worn by
//! a stylized figure.
//!
//! Images are `[3, S, S]` tensors in `[0, 1]`. All geometry is authored on a
//! 64 px canvas and scaled to `S`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::PI;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
/// Flat-lay backgrounds are at least this bright in every channel.
pub const BACKGROUND_MIN: f32 = 0.92;
pub const MAX_DISPLACEMENT: f32 = 6.0;
/// Bound on the Frobenius norm of the warp Jacobian, px/px.
pub const MAX_WARP_GRADIENT: f32 = 1.5;
pub const OCCLUSION_BUDGET: f32 = 0.15;
/// Minimum share of interior spectral energy above a quarter of Nyquist
/// for the high-frequency patterns.
pub const HIGH_FREQ_MIN: f32 = 0.10;
pub const FREQUENCY_RANGE: (f32, f32) = (5.0, 12.0);
const SUPERSAMPLE: usize = 4;
const CANVAS: f32 = 64.0;

fn rem(a: f32, b: f32) -> f32 {
    a - b * libm::floorf(a / b)
}

fn sq(a: f32) -> f32 {
    a * a
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Silhouette {
    Tshirt,
    Longsleeve,
    Vest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Solid,
    Stripes,
    Checks,
    Dots,
    LogoPatch,
}

impl Silhouette {
    pub const ALL: [Silhouette; 3] = [Silhouette::Tshirt, Silhouette::Longsleeve, Silhouette::Vest];

    pub fn name(self) -> &'static str {
        match self {
            Silhouette::Tshirt => "tshirt",
            Silhouette::Longsleeve => "longsleeve",
            Silhouette::Vest => "vest",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|v| v.name() == s) {
            Some(v) => Ok(*v),
            None => bail!(Format, "unknown silhouette {:?}", s),
        }
    }
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [Pattern::Solid, Pattern::Stripes, Pattern::Checks, Pattern::Dots, Pattern::LogoPatch];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Solid => "solid",
            Pattern::Stripes => "stripes",
            Pattern::Checks => "checks",
            Pattern::Dots => "dots",
            Pattern::LogoPatch => "logo-patch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|v| v.name() == s) {
            Some(v) => Ok(*v),
            None => bail!(Format, "unknown pattern {:?}", s),
        }
    }

    pub fn is_high_frequency(self) -> bool {
        matches!(self, Pattern::Stripes | Pattern::Checks | Pattern::Dots)
    }
}

/// Everything needed to redraw a garment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GarmentSpec {
    pub silhouette: Silhouette,
    pub pattern: Pattern,
    pub base: [f32; 3],
    pub secondary: [f32; 3],
    /// Pattern cycles per canvas width.
    pub frequency: f32,
    /// Pattern orientation, radians.
    pub angle: f32,
    pub seed: u64,
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = rem(h, 360.0) / 60.0;
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
    [r + m, g + m, b + m]
}

/// Hue in degrees, `None` for achromatic colors.
pub fn rgb_hue(rgb: [f32; 3]) -> Option<f32> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d < 1e-4 {
        return None;
    }
    let h = if max == r {
        60.0 * rem((g - b) / d, 6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    Some(h)
}

/// Smallest angle between two hues, degrees.
pub fn hue_distance(a: f32, b: f32) -> f32 {
    let d = rem(a - b, 360.0);
    d.min(360.0 - d)
}

impl GarmentSpec {
    /// Draws a spec from the default distribution. The secondary color
    /// shares the base hue, so the garment has one dominant hue.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let silhouette = Silhouette::ALL[rng.random_range(0..3)];
        let pattern = Pattern::ALL[rng.random_range(0..5)];
        let hue = rng.random_range(0.0..360.0);
        let sat = rng.random_range(0.45..0.9);
        let val = rng.random_range(0.35..0.8);
        let val2 = if val > 0.55 { val - 0.3 } else { val + 0.3 };
        Self {
            silhouette,
            pattern,
            base: hsv_to_rgb(hue, sat, val),
            secondary: hsv_to_rgb(hue, sat * 0.7, val2),
            frequency: rng.random_range(FREQUENCY_RANGE.0..FREQUENCY_RANGE.1),
            angle: rng.random_range(0.0..PI),
            seed: rng.random(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |c: &[f32; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !ok(&self.base) || !ok(&self.secondary) {
            bail!(Range, "garment colors must lie in [0, 1]");
        }
        if self.base.iter().all(|&v| v >= BACKGROUND_MIN) {
            bail!(Range, "base color is indistinguishable from the background");
        }
        if !(self.frequency.is_finite() && self.frequency > 0.0 && self.frequency <= CANVAS / 2.0) {
            bail!(Range, "pattern frequency {} outside (0, 32]", self.frequency);
        }
        if !self.angle.is_finite() {
            bail!(Range, "pattern angle must be finite");
        }
        Ok(())
    }

    /// One line, `;`-separated `key=value` fields, no whitespace.
    pub fn serialize(&self) -> String {
        let c = |v: [f32; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        format!(
            "silhouette={};pattern={};base={};secondary={};freq={};angle={};seed={}",
            self.silhouette.name(),
            self.pattern.name(),
            c(self.base),
            c(self.secondary),
            self.frequency,
            self.angle,
            self.seed
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut fields: [Option<&str>; 7] = [None; 7];
        const KEYS: [&str; 7] = ["silhouette", "pattern", "base", "secondary", "freq", "angle", "seed"];
        for part in line.trim().split(';') {
            let Some((k, v)) = part.split_once('=') else {
                bail!(Format, "spec field {:?} lacks '='", part);
            };
            match KEYS.iter().position(|&x| x == k) {
                Some(i) => fields[i] = Some(v),
                None => bail!(Format, "unknown spec field {:?}", k),
            }
        }
        let get = |i: usize| fields[i].ok_or_else(|| crate::Error::Format(format!("spec lacks {}", KEYS[i])));
        let num = |s: &str| s.parse::<f32>().map_err(|_| crate::Error::Format(format!("bad number {:?}", s)));
        let color = |s: &str| -> Result<[f32; 3]> {
            let v: Vec<&str> = s.split(',').collect();
            if v.len() != 3 {
                bail!(Format, "color {:?} needs three components", s);
            }
            Ok([num(v[0])?, num(v[1])?, num(v[2])?])
        };
        let spec = Self {
            silhouette: Silhouette::parse(get(0)?)?,
            pattern: Pattern::parse(get(1)?)?,
            base: color(get(2)?)?,
            secondary: color(get(3)?)?,
            frequency: num(get(4)?)?,
            angle: num(get(5)?)?,
            seed: get(6)?.parse().map_err(|_| crate::Error::Format(format!("bad seed {:?}", fields[6])))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for GarmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Even-odd point-in-polygon.
fn in_polygon(poly: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn mirror(poly: &[(f32, f32)]) -> Vec<(f32, f32)> {
    poly.iter().map(|&(x, y)| (CANVAS - x, y)).collect()
}

/// Garment membership on the 64 px canvas.
fn garment_contains(s: Silhouette, x: f32, y: f32) -> bool {
    let neck = |r: f32| (x - 32.0) * (x - 32.0) + (y - 15.0) * (y - 15.0) < r * r;
    match s {
        Silhouette::Vest => {
            let body = [(24.0, 16.0), (40.0, 16.0), (44.0, 28.0), (44.0, 56.0), (20.0, 56.0), (20.0, 28.0)];
            in_polygon(&body, x, y) && !neck(7.0)
        }
        Silhouette::Tshirt | Silhouette::Longsleeve => {
            let torso = (20.0..=44.0).contains(&x) && (16.0..=56.0).contains(&y);
            let sleeve: &[(f32, f32)] = if s == Silhouette::Tshirt {
                &[(20.0, 16.0), (11.0, 23.0), (15.0, 31.0), (20.0, 27.0)]
            } else {
                &[(20.0, 16.0), (11.0, 22.0), (10.0, 50.0), (16.0, 50.0), (20.0, 29.0)]
            };
            (torso || in_polygon(sleeve, x, y) || in_polygon(&mirror(sleeve), x, y)) && !neck(5.0)
        }
    }
}

fn logo_offset(seed: u64) -> (f32, f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
}

/// Pattern color at a canvas point, in the garment frame.
fn pattern_color(spec: &GarmentSpec, logo: (f32, f32), x: f32, y: f32) -> [f32; 3] {
    let (dx, dy) = (x - 32.0, y - 32.0);
    let (s, c) = (libm::sinf(spec.angle), libm::cosf(spec.angle));
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    let p = CANVAS / spec.frequency;
    let second = match spec.pattern {
        Pattern::Solid => false,
        Pattern::Stripes => rem(u / p, 1.0) < 0.5,
        Pattern::Checks => {
            let a = libm::floorf(2.0 * u / p) as i64;
            let b = libm::floorf(2.0 * v / p) as i64;
            (a + b).rem_euclid(2) == 0
        }
        Pattern::Dots => {
            let cu = u - libm::roundf(u / p) * p;
            let cv = v - libm::roundf(v / p) * p;
            cu * cu + cv * cv < (0.3 * p) * (0.3 * p)
        }
        Pattern::LogoPatch => {
            let (lx, ly) = (x - 32.0 - logo.0, y - 28.0 - logo.1);
            let in_patch = lx.abs() <= 5.0 && ly.abs() <= 4.0;
            let in_mark = lx.abs() + ly.abs() <= 2.5;
            in_patch && !in_mark
        }
    };
    if second {
        spec.secondary
    } else {
        spec.base
    }
}

/// Supersampled garment color and coverage on the `size` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GarmentLayer {
    pub size: usize,
    pub color: Vec<[f32; 3]>,
    pub coverage: Vec<f32>,
}

impl GarmentLayer {
    /// Bilinear lookup with zero coverage outside the grid.
    fn sample(&self, x: f32, y: f32) -> ([f32; 3], f32) {
        let n = self.size as i64;
        let (x0, y0) = (libm::floorf(x), libm::floorf(y));
        let (fx, fy) = (x - x0, y - y0);
        let mut col = [0.0; 3];
        let mut cov = 0.0;
        for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (xi, yi) = (x0 as i64 + ox, y0 as i64 + oy);
                if xi < 0 || yi < 0 || xi >= n || yi >= n {
                    continue;
                }
                let i = (yi * n + xi) as usize;
                for (c, v) in col.iter_mut().zip(self.color[i]) {
                    *c += w * v;
                }
                cov += w * self.coverage[i];
            }
        }
        (col, cov)
    }
}

pub fn garment_layer(spec: &GarmentSpec, size: usize) -> GarmentLayer {
    let scale = CANVAS / size as f32;
    let logo = logo_offset(spec.seed);
    let ss = SUPERSAMPLE as f32;
    let mut color = Vec::with_capacity(size * size);
    let mut coverage = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f32; 3];
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f32 + (sx as f32 + 0.5) / ss) * scale;
                    let y = (py as f32 + (sy as f32 + 0.5) / ss) * scale;
                    for (a, v) in acc.iter_mut().zip(pattern_color(spec, logo, x, y)) {
                        *a += v;
                    }
                    hits += garment_contains(spec.silhouette, x, y) as usize;
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
            color.push(acc.map(|a| a / n));
            coverage.push(hits as f32 / n);
        }
    }
    GarmentLayer { size, color, coverage }
}

fn background_of(spec: &GarmentSpec) -> [f32; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xb9c0);
    let v = rng.random_range(0.95..0.99);
    [v, v, rng.random_range(v - 0.02..v)]
}

fn planes_to_tensor(size: usize, px: &[[f32; 3]]) -> Tensor {
    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = p[c].clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, size, size], data).expect("3 planes")
}

/// The flat-lay image: the garment centered on a near-white background.
pub fn render_flat(spec: &GarmentSpec) -> Tensor {
    render_flat_sized(spec, IMAGE_SIZE)
}

pub fn render_flat_sized(spec: &GarmentSpec, size: usize) -> Tensor {
    let layer = garment_layer(spec, size);
    let bg = background_of(spec);
    let px: Vec<[f32; 3]> = layer
        .color
        .iter()
        .zip(&layer.coverage)
        .map(|(g, &c)| [0, 1, 2].map(|k| c * g[k] + (1.0 - c) * bg[k]))
        .collect();
    planes_to_tensor(size, &px)
}

/// A smooth displacement field: two sinusoids per axis with analytic
/// bounds on magnitude and Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    /// Per axis: (amplitude px, kx, ky cycles per canvas, phase).
    pub waves: [[(f32, f32, f32, f32); 2]; 2],
    pub size: f32,
}

impl WarpField {
    pub fn zero(size: usize) -> Self {
        Self { waves: [[(0.0, 1.0, 0.0, 0.0); 2]; 2], size: size as f32 }
    }

    fn random<R: Rng + ?Sized>(rng: &mut R, size: usize, strength: f32) -> Self {
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 2]; 2];
        for axis in waves.iter_mut() {
            for w in axis.iter_mut() {
                let (kx, ky) = loop {
                    let k = (rng.random_range(-2i32..=2) as f32, rng.random_range(-2i32..=2) as f32);
                    if k != (0.0, 0.0) {
                        break k;
                    }
                };
                *w = (rng.random_range(1.0..4.0), kx, ky, rng.random_range(0.0..2.0 * PI));
            }
        }
        let mut f = Self { waves, size: size as f32 };
        let s = (MAX_DISPLACEMENT / f.displacement_bound()).min(MAX_WARP_GRADIENT / f.gradient_bound()).min(1.0) * strength;
        for axis in f.waves.iter_mut() {
            for w in axis.iter_mut() {
                w.0 *= s;
            }
        }
        f
    }

    pub fn displacement(&self, x: f32, y: f32) -> [f32; 2] {
        self.waves.map(|axis| {
            axis.iter()
                .map(|&(a, kx, ky, ph)| a * libm::sinf(2.0 * PI * (kx * x + ky * y) / self.size + ph))
                .sum()
        })
    }

    /// Rows are axes, columns are d/dx and d/dy.
    pub fn jacobian(&self, x: f32, y: f32) -> [[f32; 2]; 2] {
        self.waves.map(|axis| {
            let mut row = [0.0; 2];
            for &(a, kx, ky, ph) in &axis {
                let c = a * 2.0 * PI / self.size * libm::cosf(2.0 * PI * (kx * x + ky * y) / self.size + ph);
                row[0] += c * kx;
                row[1] += c * ky;
            }
            row
        })
    }

    /// Upper bound on `|d|` over the plane.
    pub fn displacement_bound(&self) -> f32 {
        let s = |axis: &[(f32, f32, f32, f32); 2]| axis.iter().map(|w| w.0.abs()).sum::<f32>();
        libm::hypotf(s(&self.waves[0]), s(&self.waves[1]))
    }

    /// Upper bound on the Jacobian's Frobenius norm over the plane.
    pub fn gradient_bound(&self) -> f32 {
        let mut sq = 0.0;
        for axis in &self.waves {
            for d in 0..2 {
                let b: f32 = axis.iter().map(|w| w.0.abs() * 2.0 * PI / self.size * if d == 0 { w.1.abs() } else { w.2.abs() }).sum();
                sq += b * b;
            }
        }
        libm::sqrtf(sq)
    }
}

/// Controls for the worn rendering; the default is the dataset setting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WornOptions {
    /// Multiplier on the warp amplitude, `0` disables warping.
    pub warp: f32,
    pub max_occluders: usize,
    pub lighting: bool,
}

impl Default for WornOptions {
    fn default() -> Self {
        Self { warp: 1.0, max_occluders: 2, lighting: true }
    }
}

/// A worn image plus the generator's own masks.
#[derive(Clone, Debug)]
pub struct WornRender {
    pub image: Tensor,
    /// Garment coverage after warping, before occlusion.
    pub garment_mask: Vec<f32>,
    pub occluder_mask: Vec<f32>,
    pub warp: WarpField,
    pub occluders: usize,
}

impl WornRender {
    /// Share of the garment area hidden by occluders.
    pub fn occluded_fraction(&self) -> f32 {
        occluded_fraction(&self.garment_mask, &self.occluder_mask)
    }
}

fn occluded_fraction(garment: &[f32], occ: &[f32]) -> f32 {
    let area: f32 = garment.iter().sum();
    if area == 0.0 {
        return 0.0;
    }
    garment.iter().zip(occ).map(|(g, o)| g * o).sum::<f32>() / area
}

#[derive(Clone, Copy, Debug)]
enum Occluder {
    /// Center, radii.
    Hair { cx: f32, cy: f32, rx: f32, ry: f32 },
    /// Thick segment.
    Band { x0: f32, y0: f32, x1: f32, y1: f32, half: f32 },
}

impl Occluder {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Occluder::Hair { cx, cy, rx, ry } => sq((x - cx) / rx) + sq((y - cy) / ry) <= 1.0,
            Occluder::Band { x0, y0, x1, y1, half } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let t = (((x - x0) * vx + (y - y0) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * vx - x, y0 + t * vy - y);
                px * px + py * py <= half * half
            }
        }
    }

    fn shrink(&mut self, f: f32) {
        match self {
            Occluder::Hair { rx, ry, .. } => {
                *rx *= f;
                *ry *= f;
            }
            Occluder::Band { half, x1, y1, x0, y0 } => {
                *half *= f;
                *x1 = *x0 + (*x1 - *x0) * f;
                *y1 = *y0 + (*y1 - *y0) * f;
            }
        }
    }
}

struct Body {
    bg_top: [f32; 3],
    bg_bottom: [f32; 3],
    skin: [f32; 3],
    pants: [f32; 3],
    hair: [f32; 3],
}

const SKIN_TONES: [[f32; 3]; 5] = [
    [0.96, 0.80, 0.69],
    [0.89, 0.67, 0.52],
    [0.78, 0.57, 0.42],
    [0.55, 0.38, 0.26],
    [0.36, 0.24, 0.16],
];

fn body_color(b: &Body, x: f32, y: f32) -> [f32; 3] {
    let head = sq(x - 32.0) + sq(y - 9.0) <= 6.5 * 6.5;
    let neck = (29.0..=35.0).contains(&x) && (13.0..=18.0).contains(&y);
    let torso = (18.0..=46.0).contains(&x) && y >= 16.0;
    let arm = [(18.0, 17.0), (11.0, 22.0), (9.0, 55.0), (15.0, 55.0), (18.0, 30.0)];
    let arms = in_polygon(&arm, x, y) || in_polygon(&mirror(&arm), x, y);
    if torso && y >= 54.0 {
        b.pants
    } else if head || neck || torso || arms {
        b.skin
    } else {
        let t = y / CANVAS;
        [0, 1, 2].map(|k| (1.0 - t) * b.bg_top[k] + t * b.bg_bottom[k])
    }
}

/// The garment warped onto a stylized figure, with optional occluders and
/// a lighting gradient on everything but the garment.
pub fn render_worn(spec: &GarmentSpec, body_seed: u64) -> WornRender {
    render_worn_with(spec, body_seed, &WornOptions::default(), IMAGE_SIZE)
}

pub fn render_worn_with(spec: &GarmentSpec, body_seed: u64, opts: &WornOptions, size: usize) -> WornRender {
    let mut rng = ChaCha8Rng::seed_from_u64(body_seed);
    let layer = garment_layer(spec, size);
    let scale = CANVAS / size as f32;
    let muted = |rng: &mut ChaCha8Rng| hsv_to_rgb(rng.random_range(0.0..360.0), rng.random_range(0.05..0.3), rng.random_range(0.35..0.75));
    let body = Body {
        bg_top: muted(&mut rng),
        bg_bottom: muted(&mut rng),
        skin: SKIN_TONES[rng.random_range(0..SKIN_TONES.len())],
        pants: hsv_to_rgb(rng.random_range(0.0..360.0), rng.random_range(0.2..0.6), rng.random_range(0.15..0.4)),
        hair: hsv_to_rgb(rng.random_range(15.0..40.0), rng.random_range(0.3..0.7), rng.random_range(0.05..0.35)),
    };
    let warp = if opts.warp > 0.0 { WarpField::random(&mut rng, size, opts.warp) } else { WarpField::zero(size) };
    let light_dir = rng.random_range(0.0..2.0 * PI);
    let light_amp = if opts.lighting { rng.random_range(0.04..0.1) } else { 0.0 };

    // Warped garment, sampled backwards.
    let n = size * size;
    let mut g_col = Vec::with_capacity(n);
    let mut g_cov = Vec::with_capacity(n);
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f32, py as f32);
            let d = warp.displacement(x, y);
            let (c, a) = layer.sample(x + d[0], y + d[1]);
            g_col.push(c);
            g_cov.push(a);
        }
    }

    // Occluders, shrunk until the budget holds.
    let count = if opts.max_occluders == 0 { 0 } else { rng.random_range(0..=opts.max_occluders) };
    let mut shapes: Vec<(Occluder, [f32; 3])> = (0..count)
        .map(|_| {
            if rng.random_bool(0.5) {
                let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                let occ = Occluder::Hair {
                    cx: 32.0 + side * rng.random_range(4.0..8.0),
                    cy: rng.random_range(14.0..20.0),
                    rx: rng.random_range(4.0..7.0),
                    ry: rng.random_range(6.0..11.0),
                };
                (occ, body.hair)
            } else {
                let y0 = rng.random_range(30.0..50.0);
                let occ = Occluder::Band {
                    x0: if rng.random_bool(0.5) { 10.0 } else { 54.0 },
                    y0,
                    x1: 32.0 + rng.random_range(-6.0..6.0),
                    y1: y0 + rng.random_range(-6.0..6.0),
                    half: rng.random_range(2.0..3.5),
                };
                (occ, body.skin)
            }
        })
        .collect();
    let occ_masks = |shapes: &[(Occluder, [f32; 3])]| -> (Vec<f32>, Vec<[f32; 3]>) {
        let mut mask = vec![0.0; n];
        let mut col = vec![[0.0; 3]; n];
        let ss = SUPERSAMPLE as f32;
        for py in 0..size {
            for px in 0..size {
                let i = py * size + px;
                let mut acc = [0.0; 3];
                let mut hits = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (px as f32 + (sx as f32 + 0.5) / ss) * scale;
                        let y = (py as f32 + (sy as f32 + 0.5) / ss) * scale;
                        if let Some((_, c)) = shapes.iter().rev().find(|(o, _)| o.contains(x, y)) {
                            hits += 1.0;
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                }
                if hits > 0.0 {
                    mask[i] = hits / (ss * ss);
                    col[i] = acc.map(|a| a / hits);
                }
            }
        }
        (mask, col)
    };
    let (mut o_mask, mut o_col) = occ_masks(&shapes);
    while occluded_fraction(&g_cov, &o_mask) > OCCLUSION_BUDGET {
        for (o, _) in shapes.iter_mut() {
            o.shrink(0.85);
        }
        (o_mask, o_col) = occ_masks(&shapes);
    }

    let (ldx, ldy) = (libm::cosf(light_dir), libm::sinf(light_dir));
    let ss = SUPERSAMPLE as f32;
    let mut px_out = Vec::with_capacity(n);
    for py in 0..size {
        for px in 0..size {
            let i = py * size + px;
            let mut b = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f32 + (sx as f32 + 0.5) / ss) * scale;
                    let y = (py as f32 + (sy as f32 + 0.5) / ss) * scale;
                    let c = body_color(&body, x, y);
                    for k in 0..3 {
                        b[k] += c[k] / (ss * ss);
                    }
                }
            }
            let t = ((px as f32 + 0.5) / size as f32 - 0.5) * ldx + ((py as f32 + 0.5) / size as f32 - 0.5) * ldy;
            let light = 1.0 + 2.0 * light_amp * t;
            let cov = g_cov[i];
            let garment = g_col[i];
            let mut p = [0.0; 3];
            for k in 0..3 {
                let under = cov * garment[k] + (1.0 - cov) * b[k] * light;
                p[k] = o_mask[i] * o_col[i][k] * light + (1.0 - o_mask[i]) * under;
            }
            px_out.push(p);
        }
    }
    WornRender { image: planes_to_tensor(size, &px_out), garment_mask: g_cov, occluder_mask: o_mask, warp, occluders: shapes.len() }
}

/// Share of mean-removed luma energy in the torso interior above a quarter
/// of the Nyquist frequency, by direct 2-D DFT.
pub fn high_frequency_fraction(spec: &GarmentSpec) -> f32 {
    let layer = garment_layer(spec, IMAGE_SIZE);
    let (x0, x1, y0, y1) = (22usize, 42usize, 24usize, 48usize);
    let (w, h) = (x1 - x0, y1 - y0);
    let mut luma = Vec::with_capacity(w * h);
    for y in y0..y1 {
        for x in x0..x1 {
            let c = layer.color[y * IMAGE_SIZE + x];
            luma.push((0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]) as f64);
        }
    }
    let m = luma.iter().sum::<f64>() / luma.len() as f64;
    luma.iter_mut().for_each(|v| *v -= m);
    let (mut total, mut high) = (0.0, 0.0);
    for v in 0..h {
        for u in 0..w {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for y in 0..h {
                for x in 0..w {
                    let ph = -2.0 * core::f64::consts::PI * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                    re += luma[y * w + x] * libm::cos(ph);
                    im += luma[y * w + x] * libm::sin(ph);
                }
            }
            let e = re * re + im * im;
            let fu = if u <= w / 2 { u } else { w - u } as f64 / w as f64;
            let fv = if v <= h / 2 { v } else { h - v } as f64 / h as f64;
            total += e;
            if libm::sqrt(fu * fu + fv * fv) > 0.125 {
                high += e;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        (high / total) as f32
    }
}

/// Deterministic 64-bit mix.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn pair_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Held-out split: one index in ten by hash, independent of the seed so
/// external datasets in the same layout split the same way.
pub fn is_test_index(index: usize) -> bool {
    splitmix64(index as u64 ^ 0x7e57_5a17) % 10 == 0
}

/// One training example.
#[derive(Clone, Debug)]
pub struct GarmentPair {
    /// Flat-lay target.
    pub flat: Tensor,
    /// Person wearing the garment.
    pub worn: Tensor,
    pub spec: GarmentSpec,
}

/// Renders example `index` of the dataset drawn with `seed`.
pub fn render_pair(seed: u64, index: usize) -> Result<GarmentPair> {
    let ps = pair_seed(seed, index);
    let spec = GarmentSpec::sample(&mut ChaCha8Rng::seed_from_u64(ps));
    if spec.pattern.is_high_frequency() {
        let f = high_frequency_fraction(&spec);
        if f < HIGH_FREQ_MIN {
            bail!(Contract, "pair {}: high-frequency share {:.3} below {}", index, f, HIGH_FREQ_MIN);
        }
    }
    let worn = render_worn(&spec, splitmix64(ps ^ 0xb0d1));
    Ok(GarmentPair { flat: render_flat(&spec), worn: worn.image, spec })
}
