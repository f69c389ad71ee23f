//! Procedural face proxies and the five artifact generators.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::RngState;

pub const CHANNELS: usize = 3;
pub const SIZE: usize = 32;
pub const PIXELS: usize = SIZE * SIZE;
pub const IMAGE_LEN: usize = CHANNELS * PIXELS;

/// Half-open pixel rectangle `[top, top + height) x [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoxRegion {
    fn around(cy: f64, cx: f64, height: usize, width: usize) -> Self {
        BoxRegion {
            top: (cy - height as f64 / 2.0).round().max(0.0) as usize,
            left: (cx - width as f64 / 2.0).round().max(0.0) as usize,
            height,
            width,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.bottom() <= h && self.right() <= w
    }

    /// Grown by `m` pixels on every side, clipped to the image.
    pub fn expand(&self, m: usize) -> Self {
        let top = self.top.saturating_sub(m);
        let left = self.left.saturating_sub(m);
        BoxRegion {
            top,
            left,
            height: (self.bottom() + m).min(SIZE) - top,
            width: (self.right() + m).min(SIZE) - left,
        }
    }

    pub fn union(&self, o: &BoxRegion) -> Self {
        let top = self.top.min(o.top);
        let left = self.left.min(o.left);
        BoxRegion {
            top,
            left,
            height: self.bottom().max(o.bottom()) - top,
            width: self.right().max(o.right()) - left,
        }
    }
}

const CENTER: f64 = (SIZE as f64 - 1.0) / 2.0;
const CENTER_JITTER: f64 = 1.5;
const AXIS_V: (f64, f64) = (12.0, 14.0);
const AXIS_H: (f64, f64) = (10.0, 12.0);
const EYE: (usize, usize) = (3, 4);
const MOUTH: (usize, usize) = (3, 8);
pub const NOISE_SIGMA: f64 = 0.03;

/// Parameters of one face proxy. Everything random about an image is
/// captured here, the pixel noise through `noise_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    /// `(row, col)` of the ellipse center.
    pub center: (f64, f64),
    /// `(vertical, horizontal)` semi-axes.
    pub axes: (f64, f64),
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub left_eye: BoxRegion,
    pub right_eye: BoxRegion,
    pub mouth: BoxRegion,
    pub noise_seed: u64,
}

fn landmarks(center: (f64, f64), axes: (f64, f64)) -> [BoxRegion; 3] {
    let (cy, cx) = center;
    let (ay, ax) = axes;
    let eye_y = cy - 0.42 * ay;
    [
        BoxRegion::around(eye_y, cx - 0.4 * ax, EYE.0, EYE.1),
        BoxRegion::around(eye_y, cx + 0.4 * ax, EYE.0, EYE.1),
        BoxRegion::around(cy + 0.55 * ay, cx, MOUTH.0, MOUTH.1),
    ]
}

/// Bounding boxes of `[left_eye, right_eye, mouth]` over every face the
/// sampler can produce.
pub fn canonical_landmarks() -> [BoxRegion; 3] {
    let mut out: Option<[BoxRegion; 3]> = None;
    for dy in [-CENTER_JITTER, CENTER_JITTER] {
        for dx in [-CENTER_JITTER, CENTER_JITTER] {
            for ay in [AXIS_V.0, AXIS_V.1] {
                for ax in [AXIS_H.0, AXIS_H.1] {
                    let l = landmarks((CENTER + dy, CENTER + dx), (ay, ax));
                    out = Some(match out {
                        None => l,
                        Some(o) => [o[0].union(&l[0]), o[1].union(&l[1]), o[2].union(&l[2])],
                    });
                }
            }
        }
    }
    out.unwrap()
}

impl FaceParams {
    pub fn sample(rng: &mut RngState) -> Self {
        let center = (
            CENTER + rng.uniform_range(-CENTER_JITTER, CENTER_JITTER),
            CENTER + rng.uniform_range(-CENTER_JITTER, CENTER_JITTER),
        );
        let axes = (
            rng.uniform_range(AXIS_V.0, AXIS_V.1),
            rng.uniform_range(AXIS_H.0, AXIS_H.1),
        );
        let background = [0; 3].map(|_| rng.uniform_range(0.15, 0.45));
        let skin = [
            rng.uniform_range(0.6, 0.8),
            rng.uniform_range(0.42, 0.6),
            rng.uniform_range(0.3, 0.48),
        ];
        let [left_eye, right_eye, mouth] = landmarks(center, axes);
        FaceParams {
            center,
            axes,
            background,
            skin,
            left_eye,
            right_eye,
            mouth,
            noise_seed: rng.next_u64(),
        }
    }

    /// Normalized elliptical radius of pixel `(y, x)`; 1 on the outline.
    pub fn radius(&self, y: usize, x: usize) -> f64 {
        let dy = (y as f64 - self.center.0) / self.axes.0;
        let dx = (x as f64 - self.center.1) / self.axes.1;
        (dy * dy + dx * dx).sqrt()
    }

    /// Clean image, `[3, 32, 32]` row-major, values in `[0, 1]`.
    pub fn render(&self) -> Vec<f64> {
        const EYE_RGB: [f64; 3] = [0.12, 0.1, 0.1];
        const MOUTH_RGB: [f64; 3] = [0.55, 0.15, 0.18];
        let mut noise = RngState::new(self.noise_seed);
        let mut img = vec![0.0; IMAGE_LEN];
        for c in 0..CHANNELS {
            for y in 0..SIZE {
                for x in 0..SIZE {
                    // one pixel of anti-aliasing along the outline
                    let edge = ((1.0 - self.radius(y, x)) * self.axes.1 + 0.5).clamp(0.0, 1.0);
                    let mut v = self.background[c] + edge * (self.skin[c] - self.background[c]);
                    if self.left_eye.contains(y, x) || self.right_eye.contains(y, x) {
                        v = EYE_RGB[c];
                    } else if self.mouth.contains(y, x) {
                        v = MOUTH_RGB[c];
                    }
                    img[c * PIXELS + y * SIZE + x] = v;
                }
            }
        }
        for v in &mut img {
            *v = (*v + NOISE_SIGMA * noise.normal()).clamp(0.0, 1.0);
        }
        img
    }
}

/// The five manipulation families of the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GeneratorId {
    Df,
    F2f,
    Fsh,
    Fsw,
    Nt,
}

impl GeneratorId {
    pub const ALL: [GeneratorId; 5] = [
        GeneratorId::Df,
        GeneratorId::F2f,
        GeneratorId::Fsh,
        GeneratorId::Fsw,
        GeneratorId::Nt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorId::Df => "G-DF",
            GeneratorId::F2f => "G-F2F",
            GeneratorId::Fsh => "G-FSh",
            GeneratorId::Fsw => "G-FSw",
            GeneratorId::Nt => "G-NT",
        }
    }
}

impl fmt::Display for GeneratorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorId {
    type Err = Error;

    /// Accepts `G-DF` or `DF`, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let t = t.strip_prefix("G-").or_else(|| t.strip_prefix("g-")).unwrap_or(t);
        GeneratorId::ALL
            .into_iter()
            .find(|g| g.as_str()[2..].eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::invalid(format!("unknown generator {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactRegion {
    FaceBoundary,
    SymmetricMask,
    FullFaceTexture,
    BlendSeam,
    Mouth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    CheckerResidue,
    GaussianBlurPatch,
    AdditiveSine,
    SeamEdge,
    MouthWarp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub id: GeneratorId,
    pub region: ArtifactRegion,
    pub kind: ArtifactKind,
    /// Artifact strength in `[0, 0.5]`; 0 plants nothing.
    pub amplitude: f64,
}

impl GeneratorSpec {
    pub fn default_for(id: GeneratorId) -> Self {
        use ArtifactKind as K;
        use ArtifactRegion as R;
        let (region, kind, amplitude) = match id {
            GeneratorId::Df => (R::FaceBoundary, K::CheckerResidue, 0.1),
            GeneratorId::F2f => (R::SymmetricMask, K::GaussianBlurPatch, 0.4),
            GeneratorId::Fsh => (R::FullFaceTexture, K::AdditiveSine, 0.1),
            GeneratorId::Fsw => (R::BlendSeam, K::SeamEdge, 0.1),
            GeneratorId::Nt => (R::Mouth, K::MouthWarp, 0.25),
        };
        GeneratorSpec {
            id,
            region,
            kind,
            amplitude,
        }
    }

    pub fn defaults() -> Vec<GeneratorSpec> {
        GeneratorId::ALL.into_iter().map(Self::default_for).collect()
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.amplitude) {
            return Err(Error::invalid(format!(
                "{}: amplitude {} not in [0, 0.5]",
                self.id, self.amplitude
            )));
        }
        Ok(())
    }

    /// Pixels this generator may modify on the face described by `p`.
    pub fn region_mask(&self, p: &FaceParams) -> Vec<bool> {
        region_mask(self.region, p)
    }
}

pub fn region_mask(region: ArtifactRegion, p: &FaceParams) -> Vec<bool> {
    let mouth = p.mouth.expand(2);
    let mut m = vec![false; PIXELS];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let r = p.radius(y, x);
            m[y * SIZE + x] = match region {
                ArtifactRegion::FaceBoundary => (0.85..=1.15).contains(&r),
                ArtifactRegion::SymmetricMask => {
                    let dy = (y as f64 - p.center.0) / p.axes.0;
                    (x as f64 - p.center.1).abs() <= 0.55 * p.axes.1 && (-0.6..=0.75).contains(&dy)
                }
                ArtifactRegion::FullFaceTexture => r <= 1.0,
                ArtifactRegion::BlendSeam => (0.62..=0.82).contains(&r),
                ArtifactRegion::Mouth => mouth.contains(y, x),
            };
        }
    }
    m
}

/// 3x3 binomial blur of one channel with clamped borders.
fn blur(plane: &[f64]) -> Vec<f64> {
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, SIZE as isize - 1) as usize;
        let x = x.clamp(0, SIZE as isize - 1) as usize;
        plane[y * SIZE + x]
    };
    let mut out = vec![0.0; PIXELS];
    for y in 0..SIZE as isize {
        for x in 0..SIZE as isize {
            let mut s = 0.0;
            for (i, ky) in K.iter().enumerate() {
                for (j, kx) in K.iter().enumerate() {
                    s += ky * kx * at(y + i as isize - 1, x + j as isize - 1);
                }
            }
            out[y as usize * SIZE + x as usize] = s;
        }
    }
    out
}

/// Bilinear read of one channel at a fractional row, integer column.
fn sample_row(plane: &[f64], y: f64, x: usize) -> f64 {
    let y = y.clamp(0.0, (SIZE - 1) as f64);
    let y0 = y.floor() as usize;
    let y1 = (y0 + 1).min(SIZE - 1);
    let t = y - y0 as f64;
    (1.0 - t) * plane[y0 * SIZE + x] + t * plane[y1 * SIZE + x]
}

/// Plants `spec`'s artifact into `img` (a rendering of `p`). Only pixels
/// inside `spec.region_mask(p)` change. `rng` supplies per-instance
/// phases.
pub fn apply_artifact(spec: &GeneratorSpec, p: &FaceParams, img: &mut [f64], rng: &mut RngState) {
    let a = spec.amplitude;
    let mask = spec.region_mask(p);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    // texture orientation varies a little around the diagonal
    let angle = std::f64::consts::FRAC_PI_4 + rng.uniform_range(-0.2, 0.2);
    for c in 0..CHANNELS {
        let plane = &mut img[c * PIXELS..(c + 1) * PIXELS];
        let source = plane.to_vec();
        let blurred = match spec.kind {
            ArtifactKind::GaussianBlurPatch => blur(&source),
            _ => Vec::new(),
        };
        for y in 0..SIZE {
            for x in 0..SIZE {
                let i = y * SIZE + x;
                if !mask[i] {
                    continue;
                }
                let v = source[i];
                let nv = match spec.kind {
                    ArtifactKind::CheckerResidue => {
                        v + if (y + x) % 2 == 0 { a } else { -a }
                    }
                    ArtifactKind::GaussianBlurPatch => {
                        let w = (2.0 * a).min(1.0);
                        v + w * (blurred[i] - v)
                    }
                    ArtifactKind::AdditiveSine => {
                        let t = (y as f64 * angle.cos() + x as f64 * angle.sin()) / 5.0;
                        v + a * (std::f64::consts::TAU * t + phase).sin()
                    }
                    ArtifactKind::SeamEdge => {
                        if p.radius(y, x) < 0.72 {
                            v + a
                        } else {
                            v - a
                        }
                    }
                    ArtifactKind::MouthWarp => {
                        let dy = 8.0 * a * (std::f64::consts::TAU * x as f64 / 4.0 + phase).sin();
                        sample_row(&source, y as f64 + dy, x)
                    }
                };
                plane[i] = nv.clamp(0.0, 1.0);
            }
        }
    }
}
