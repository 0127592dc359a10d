//! Procedural 2-D face renderer.
//!
//! Faces are layered analytic shapes (hair, face, eyes, brows, mouth) drawn
//! with one-pixel anti-aliased edges from signed distances. Identity controls
//! colors and proportions; expression controls brows, eyes and mouth only, so
//! two expressions of the same identity differ only inside the feature boxes
//! reported with every render.

use std::ops::RangeInclusive;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affect::AffectClass;
use crate::error::{Error, Result};

pub const HUE_RANGE: RangeInclusive<f64> = 0.0..=360.0;
pub const SKIN_TONE_RANGE: RangeInclusive<f64> = 0.35..=0.85;
pub const FACE_ASPECT_RANGE: RangeInclusive<f64> = 0.85..=1.15;
pub const EYE_SPACING_RANGE: RangeInclusive<f64> = 0.26..=0.34;
pub const BROW_THICKNESS_RANGE: RangeInclusive<f64> = 0.015..=0.03;

pub const BROW_ANGLE_RANGE: RangeInclusive<f64> = -0.6..=0.6;
pub const CURVATURE_RANGE: RangeInclusive<f64> = -1.0..=1.0;
pub const OPENNESS_RANGE: RangeInclusive<f64> = 0.0..=1.0;

/// Pose offset bound in face units (the face spans roughly `[0, 1]`).
const MAX_SHIFT: f64 = 0.015;

/// Per-character appearance. Ranges are the `*_RANGE` constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub identity_id: u32,
    /// Degrees in `[0, 360]`; drives hair color and a skin tint.
    pub face_hue: f64,
    /// Skin lightness.
    pub skin_tone: f64,
    /// Face width relative to the default.
    pub face_aspect: f64,
    /// Distance between eye centers, face units.
    pub eye_spacing: f64,
    pub brow_thickness: f64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Order-sensitive seed mixing for per-record derivation.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_f00d_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn lerp_range(r: &RangeInclusive<f64>, t: f64) -> f64 {
    r.start() + (r.end() - r.start()) * t
}

impl IdentityParams {
    /// Deterministic in `(corpus_seed, identity_id)`. Hues follow a golden
    /// ratio sequence so consecutive identities are far apart on the wheel.
    pub fn derive(corpus_seed: u64, identity_id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[corpus_seed, identity_id as u64, 1]));
        let offset = (splitmix(corpus_seed) >> 11) as f64 / (1u64 << 53) as f64;
        let golden = 0.618_033_988_749_894_9;
        let hue = (offset + identity_id as f64 * golden).fract() * 360.0;
        Self {
            identity_id,
            face_hue: hue,
            skin_tone: lerp_range(&SKIN_TONE_RANGE, rng.random()),
            face_aspect: lerp_range(&FACE_ASPECT_RANGE, rng.random()),
            eye_spacing: lerp_range(&EYE_SPACING_RANGE, rng.random()),
            brow_thickness: lerp_range(&BROW_THICKNESS_RANGE, rng.random()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check("face_hue", self.face_hue, &HUE_RANGE)?;
        check("skin_tone", self.skin_tone, &SKIN_TONE_RANGE)?;
        check("face_aspect", self.face_aspect, &FACE_ASPECT_RANGE)?;
        check("eye_spacing", self.eye_spacing, &EYE_SPACING_RANGE)?;
        check("brow_thickness", self.brow_thickness, &BROW_THICKNESS_RANGE)
    }
}

fn check(name: &str, v: f64, range: &RangeInclusive<f64>) -> Result<()> {
    if !range.contains(&v) {
        return Err(Error::domain(format!(
            "{name} = {v} outside [{}, {}]",
            range.start(),
            range.end()
        )));
    }
    Ok(())
}

/// Facial feature pose. Positive brow angle lifts the inner brow ends,
/// positive curvature lifts the mouth corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionParams {
    pub brow_angle: f64,
    pub mouth_curvature: f64,
    pub eye_openness: f64,
    pub mouth_openness: f64,
}

impl ExpressionParams {
    pub const NEUTRAL: ExpressionParams = ExpressionParams {
        brow_angle: 0.0,
        mouth_curvature: 0.0,
        eye_openness: 0.5,
        mouth_openness: 0.05,
    };

    /// Canonical pose of each affect.
    pub fn canonical(affect: AffectClass) -> Self {
        let (brow_angle, mouth_curvature, eye_openness, mouth_openness) = match affect {
            AffectClass::Neutral => return Self::NEUTRAL,
            AffectClass::Joy => (0.05, 0.9, 0.4, 0.35),
            AffectClass::Sadness => (0.35, -0.7, 0.35, 0.0),
            AffectClass::Anger => (-0.45, -0.25, 0.6, 0.12),
            AffectClass::Disgust => (-0.2, -0.45, 0.2, 0.25),
            AffectClass::Fear => (0.45, -0.2, 0.85, 0.4),
            AffectClass::Surprise => (0.15, 0.0, 1.0, 0.75),
        };
        Self {
            brow_angle,
            mouth_curvature,
            eye_openness,
            mouth_openness,
        }
    }

    /// Frame-to-frame variation around the canonical pose. Neutral stays at
    /// rest and surprise keeps its eyes fully open.
    pub fn jittered(affect: AffectClass, rng: &mut impl Rng) -> Self {
        let base = Self::canonical(affect);
        if affect == AffectClass::Neutral {
            return base;
        }
        let mut wobble = |v: f64, amp: f64, range: &RangeInclusive<f64>| {
            (v + rng.random_range(-amp..=amp)).clamp(*range.start(), *range.end())
        };
        let brow_angle = wobble(base.brow_angle, 0.04, &BROW_ANGLE_RANGE);
        let mouth_curvature = wobble(base.mouth_curvature, 0.06, &CURVATURE_RANGE);
        let eye = wobble(base.eye_openness, 0.04, &OPENNESS_RANGE);
        let mouth_openness = wobble(base.mouth_openness, 0.04, &OPENNESS_RANGE);
        Self {
            brow_angle,
            mouth_curvature,
            eye_openness: if affect == AffectClass::Surprise { 1.0 } else { eye },
            mouth_openness,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check("brow_angle", self.brow_angle, &BROW_ANGLE_RANGE)?;
        check("mouth_curvature", self.mouth_curvature, &CURVATURE_RANGE)?;
        check("eye_openness", self.eye_openness, &OPENNESS_RANGE)?;
        check("mouth_openness", self.mouth_openness, &OPENNESS_RANGE)
    }
}

/// Pixel rectangle, inclusive bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

pub struct Rendered {
    pub image: RgbImage,
    /// Boxes enclosing every pixel the expression can influence.
    pub feature_regions: Vec<Rect>,
}

type Color = [f64; 3];

fn hsv(h: f64, s: f64, v: f64) -> Color {
    let h = (h % 360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
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

fn mix(under: Color, over: Color, alpha: f64) -> Color {
    [
        under[0] + (over[0] - under[0]) * alpha,
        under[1] + (over[1] - under[1]) * alpha,
        under[2] + (over[2] - under[2]) * alpha,
    ]
}

fn ellipse_sd(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
}

fn segment_sd(x: f64, y: f64, a: (f64, f64), b: (f64, f64), half_width: f64) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((x - a.0) * vx + (y - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (px, py) = (a.0 + t * vx - x, a.1 + t * vy - y);
    (px * px + py * py).sqrt() - half_width
}

/// Everything the renderer draws, resolved to face units.
struct Layout {
    skin: Color,
    hair: Color,
    brow_color: Color,
    shift: (f64, f64),
    face_rx: f64,
    eyes: [(f64, f64); 2],
    eye_rx: f64,
    eye_ry: f64,
    brows: [((f64, f64), (f64, f64)); 2],
    brow_half: f64,
    mouth: (f64, f64),
    mouth_half_width: f64,
    curvature: f64,
    open_up: f64,
    open_down: f64,
}

const BACKGROUND: Color = [0.22, 0.24, 0.28];
const EYE_WHITE: Color = [0.95, 0.95, 0.93];
const PUPIL: Color = [0.08, 0.08, 0.12];
const LIPS: Color = [0.72, 0.26, 0.30];
const MOUTH_INSIDE: Color = [0.16, 0.04, 0.07];
const LIP_THICKNESS: f64 = 0.012;
const BROW_LEN: f64 = 0.08;
const CURVE_AMP: f64 = 0.06;
const OPEN_UP: f64 = 0.045;
const OPEN_DOWN: f64 = 0.06;

impl Layout {
    fn new(id: &IdentityParams, ex: &ExpressionParams, jitter_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
        let shift = (
            rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        );
        let tint = hsv(id.face_hue, 0.6, id.skin_tone);
        let base = [id.skin_tone, id.skin_tone * 0.84, id.skin_tone * 0.72];
        let hair = hsv(id.face_hue, 0.7, 0.75);

        let (sx, sy) = shift;
        let half = id.eye_spacing / 2.0;
        let eye_y = 0.50 + sy;
        let eyes = [(0.5 - half + sx, eye_y), (0.5 + half + sx, eye_y)];
        let eye_ry = 0.008 + 0.05 * ex.eye_openness;

        let brow_y = eye_y - 0.075 - 0.035 * ex.eye_openness;
        let (dx, dy) = (BROW_LEN * ex.brow_angle.cos(), BROW_LEN * ex.brow_angle.sin());
        // Inner ends face the nose; positive angle raises them.
        let left = ((eyes[0].0 - dx, brow_y + dy), (eyes[0].0 + dx, brow_y - dy));
        let right = ((eyes[1].0 - dx, brow_y - dy), (eyes[1].0 + dx, brow_y + dy));

        Self {
            skin: mix(base, tint, 0.25),
            hair,
            brow_color: [hair[0] * 0.45, hair[1] * 0.45, hair[2] * 0.45],
            shift,
            face_rx: 0.29 * id.face_aspect,
            eyes,
            eye_rx: 0.062,
            eye_ry,
            brows: [left, right],
            brow_half: id.brow_thickness / 2.0,
            mouth: (0.5 + sx, 0.72 + sy),
            mouth_half_width: 0.12,
            curvature: ex.mouth_curvature * CURVE_AMP,
            open_up: ex.mouth_openness * OPEN_UP,
            open_down: ex.mouth_openness * OPEN_DOWN,
        }
    }

    /// Signed distance to the open mouth cavity (a lens around the lip line).
    fn mouth_sd(&self, x: f64, y: f64) -> f64 {
        let t = (x - self.mouth.0) / self.mouth_half_width;
        let tc = t.clamp(-1.0, 1.0);
        let center = self.mouth.1 - self.curvature * tc * tc;
        let bulge = 1.0 - tc * tc;
        let top = center - self.open_up * bulge;
        let bottom = center + self.open_down * bulge;
        (top - y).max(y - bottom).max((t.abs() - 1.0) * self.mouth_half_width)
    }

    fn shade(&self, x: f64, y: f64, px: f64) -> Color {
        let cover = |sd: f64| (0.5 - sd / px).clamp(0.0, 1.0);
        let (sx, sy) = self.shift;
        let mut c = BACKGROUND;
        c = mix(c, self.hair, cover(ellipse_sd(x, y, 0.5 + sx, 0.42 + sy, self.face_rx * 1.18, 0.38)));
        c = mix(c, self.skin, cover(ellipse_sd(x, y, 0.5 + sx, 0.57 + sy, self.face_rx, 0.36)));
        for &(ex, ey) in &self.eyes {
            let white = ellipse_sd(x, y, ex, ey, self.eye_rx, self.eye_ry);
            c = mix(c, EYE_WHITE, cover(white));
            let pupil = ellipse_sd(x, y, ex, ey, 0.024, 0.024).max(white);
            c = mix(c, PUPIL, cover(pupil));
        }
        for &(a, b) in &self.brows {
            c = mix(c, self.brow_color, cover(segment_sd(x, y, a, b, self.brow_half)));
        }
        let cavity = self.mouth_sd(x, y);
        c = mix(c, LIPS, cover(cavity - LIP_THICKNESS));
        mix(c, MOUTH_INSIDE, cover(cavity))
    }

    fn regions(&self, size: u32) -> Vec<Rect> {
        let to_px = |v: f64| v * size as f64;
        let margin = 2.0;
        let rect = |x0: f64, y0: f64, x1: f64, y1: f64| {
            let clampi = |v: f64| v.clamp(0.0, (size - 1) as f64) as u32;
            Rect {
                x0: clampi((to_px(x0) - margin).floor()),
                y0: clampi((to_px(y0) - margin).floor()),
                x1: clampi((to_px(x1) + margin).ceil()),
                y1: clampi((to_px(y1) + margin).ceil()),
            }
        };
        let mut out = Vec::new();
        // Eyes and brows share one box per side; it spans every pose the
        // parameters allow so boxes of different expressions coincide.
        let brow_reach = BROW_LEN + self.brow_half;
        for &(ex, ey) in &self.eyes {
            out.push(rect(
                ex - brow_reach.max(self.eye_rx),
                ey - 0.075 - 0.035 - brow_reach,
                ex + brow_reach.max(self.eye_rx),
                ey + 0.058,
            ));
        }
        let (mx, my) = self.mouth;
        let hw = self.mouth_half_width + LIP_THICKNESS;
        out.push(rect(
            mx - hw,
            my - CURVE_AMP - OPEN_UP - LIP_THICKNESS,
            mx + hw,
            my + CURVE_AMP + OPEN_DOWN + LIP_THICKNESS,
        ));
        out
    }
}

/// Renders one `size`×`size` RGB face.
pub fn render_face(
    identity: &IdentityParams,
    expression: &ExpressionParams,
    jitter_seed: u64,
    size: u32,
) -> Result<Rendered> {
    identity.validate()?;
    expression.validate()?;
    if size < 8 {
        return Err(Error::domain(format!("render size {size} too small")));
    }
    let layout = Layout::new(identity, expression, jitter_seed);
    let px = 1.0 / size as f64;
    let image = RgbImage::from_fn(size, size, |x, y| {
        let c = layout.shade((x as f64 + 0.5) * px, (y as f64 + 0.5) * px, px);
        Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    Ok(Rendered {
        image,
        feature_regions: layout.regions(size),
    })
}
