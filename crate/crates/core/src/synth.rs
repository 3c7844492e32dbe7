//! Deterministic synthetic videos.
//!
//! Every token is a point on a circle in its own random 2-plane:
//! `r·(cos φ·u + sin φ·v)` with orthonormal `u, v`. Moving a token means
//! advancing `φ`, so the dissimilarity between consecutive frames of a token
//! rotated by `Δθ` is exactly `2·sin(Δθ/2)`. A motion rate of `1.0` is a half
//! turn per frame (antipodal tokens).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{self, Mat};
use crate::visual::VideoTokens;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid video spec: {0}")]
    InvalidSpec(String),
    #[error("cannot parse pattern {input:?}: {reason}")]
    Parse { input: String, reason: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// One stretch of frames inside a [`Pattern::Mixed`] video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Frames copy their predecessor.
    Hold,
    /// Every token advances by `rate·π` per frame.
    Motion { rate: f64 },
    /// The first frame is redrawn from scratch, the rest hold.
    Cut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub kind: SegmentKind,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    /// One token repeated everywhere.
    Static,
    UniformMotion {
        rate: f64,
    },
    /// Listed frames (0-based) get fresh random tokens; the others copy
    /// their predecessor.
    Burst {
        frames: Vec<usize>,
    },
    /// Empty segments select the built-in preset for the video's length.
    Mixed {
        segments: Vec<SegmentSpec>,
    },
}

impl Pattern {
    /// Hold, slow motion, a scene cut, then fast motion, in roughly equal parts.
    pub fn default_mixed(n: usize) -> Vec<SegmentSpec> {
        let quarter = n / 4;
        let lens = [quarter, quarter, quarter, n - 3 * quarter];
        let kinds = [
            SegmentKind::Hold,
            SegmentKind::Motion { rate: 0.2 },
            SegmentKind::Cut,
            SegmentKind::Motion { rate: 0.5 },
        ];
        kinds
            .into_iter()
            .zip(lens)
            .map(|(kind, frames)| SegmentSpec { kind, frames })
            .collect()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate.is_finite() && (0.0..=1.0).contains(&rate)) {
        return Err(SynthError::InvalidSpec(format!(
            "motion rate {rate} outside [0, 1]"
        )));
    }
    Ok(())
}

fn parse_err(input: &str, reason: impl Into<String>) -> SynthError {
    SynthError::Parse {
        input: input.to_string(),
        reason: reason.into(),
    }
}

fn parse_f64(input: &str, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| parse_err(input, format!("{s:?} is not a number")))
}

fn parse_usize(input: &str, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_err(input, format!("{s:?} is not a count")))
}

/// Accepts `static`, `motion[:RATE]`, `burst:I,J,..`, `mixed` and
/// `mixed:SEG+SEG+..` where `SEG` is `hold*N`, `cut*N` or `motion@RATE*N`.
impl FromStr for Pattern {
    type Err = SynthError;

    fn from_str(input: &str) -> Result<Self> {
        let (head, arg) = match input.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (input, None),
        };
        match (head, arg) {
            ("static", None) => Ok(Pattern::Static),
            ("motion" | "uniform_motion", None) => Ok(Pattern::UniformMotion { rate: 0.25 }),
            ("motion" | "uniform_motion", Some(a)) => Ok(Pattern::UniformMotion {
                rate: parse_f64(input, a)?,
            }),
            ("burst", Some(a)) => {
                let frames = a
                    .split(',')
                    .map(|s| parse_usize(input, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Pattern::Burst { frames })
            }
            ("mixed", None) => Ok(Pattern::Mixed { segments: vec![] }),
            ("mixed", Some(a)) => {
                let segments = a
                    .split('+')
                    .map(|seg| {
                        let (kind, count) = seg
                            .split_once('*')
                            .ok_or_else(|| parse_err(input, format!("segment {seg:?} lacks *N")))?;
                        let frames = parse_usize(input, count)?;
                        let kind = match kind.split_once('@') {
                            None if kind == "hold" => SegmentKind::Hold,
                            None if kind == "cut" => SegmentKind::Cut,
                            Some(("motion", rate)) => SegmentKind::Motion {
                                rate: parse_f64(input, rate)?,
                            },
                            _ => return Err(parse_err(input, format!("unknown segment {kind:?}"))),
                        };
                        Ok(SegmentSpec { kind, frames })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Pattern::Mixed { segments })
            }
            _ => Err(parse_err(input, "unknown pattern")),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Static => write!(f, "static"),
            Pattern::UniformMotion { rate } => write!(f, "motion:{rate}"),
            Pattern::Burst { frames } => {
                let list: Vec<String> = frames.iter().map(usize::to_string).collect();
                write!(f, "burst:{}", list.join(","))
            }
            Pattern::Mixed { segments } if segments.is_empty() => write!(f, "mixed"),
            Pattern::Mixed { segments } => {
                let parts: Vec<String> = segments
                    .iter()
                    .map(|s| match s.kind {
                        SegmentKind::Hold => format!("hold*{}", s.frames),
                        SegmentKind::Cut => format!("cut*{}", s.frames),
                        SegmentKind::Motion { rate } => format!("motion@{rate}*{}", s.frames),
                    })
                    .collect();
                write!(f, "mixed:{}", parts.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoSpec {
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub pattern: Pattern,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.f == 0 || self.d < 2 {
            return Err(SynthError::InvalidSpec(format!(
                "need n >= 1, f >= 1, d >= 2 (n={}, f={}, d={})",
                self.n, self.f, self.d
            )));
        }
        match &self.pattern {
            Pattern::Static => Ok(()),
            Pattern::UniformMotion { rate } => check_rate(*rate),
            Pattern::Burst { frames } => match frames.iter().find(|&&t| t >= self.n) {
                Some(t) => Err(SynthError::InvalidSpec(format!(
                    "burst frame {t} >= frame count {}",
                    self.n
                ))),
                None => Ok(()),
            },
            Pattern::Mixed { segments } => {
                let total: usize = segments.iter().map(|s| s.frames).sum();
                if !segments.is_empty() && total != self.n {
                    return Err(SynthError::InvalidSpec(format!(
                        "mixed segments cover {total} frames, video has {}",
                        self.n
                    )));
                }
                for s in segments {
                    if let SegmentKind::Motion { rate } = s.kind {
                        check_rate(rate)?;
                    }
                }
                Ok(())
            }
        }
    }
}

/// A token on its circle.
#[derive(Debug, Clone)]
struct Orbit {
    u: Vec<f64>,
    v: Vec<f64>,
    phase: f64,
    radius: f64,
}

impl Orbit {
    fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let mut draw =
            || -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect() };
        let mut u = draw();
        let mut v = draw();
        // Gram-Schmidt; redraw in the measure-zero degenerate case
        loop {
            u = math::l2_normalize(&u);
            let proj = math::dot(&u, &v);
            let w: Vec<f64> = v.iter().zip(&u).map(|(x, y)| x - proj * y).collect();
            if math::l2_norm(&w) > 1e-6 && math::l2_norm(&u) > 0.5 {
                v = math::l2_normalize(&w);
                break;
            }
            u = draw();
            v = draw();
        }
        Self {
            u,
            v,
            phase: rng.random_range(0.0..2.0 * PI),
            radius: rng.random_range(0.5..2.0),
        }
    }

    fn position(&self) -> impl Iterator<Item = f64> + '_ {
        let (s, c) = self.phase.sin_cos();
        self.u
            .iter()
            .zip(&self.v)
            .map(move |(a, b)| self.radius * (c * a + s * b))
    }
}

fn fresh_frame(rng: &mut ChaCha8Rng, f: usize, d: usize) -> Vec<Orbit> {
    (0..f).map(|_| Orbit::random(rng, d)).collect()
}

fn advance(frame: &mut [Orbit], angle: f64) {
    for o in frame {
        o.phase += angle;
    }
}

/// Generates the video described by `spec`; equal specs give equal tensors.
pub fn gen_synthetic_video(spec: &SyntheticVideoSpec) -> Result<VideoTokens> {
    spec.validate()?;
    let SyntheticVideoSpec { n, f, d, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(n * f * d);

    let emit = |frame: &[Orbit], data: &mut Vec<f64>| {
        for o in frame {
            data.extend(o.position());
        }
    };

    match &spec.pattern {
        Pattern::Static => {
            let token: Vec<f64> = Orbit::random(&mut rng, d).position().collect();
            for _ in 0..n * f {
                data.extend_from_slice(&token);
            }
        }
        Pattern::UniformMotion { rate } => {
            let mut frame = fresh_frame(&mut rng, f, d);
            for t in 0..n {
                if t > 0 {
                    advance(&mut frame, rate * PI);
                }
                emit(&frame, &mut data);
            }
        }
        Pattern::Burst { frames } => {
            let mut frame = fresh_frame(&mut rng, f, d);
            for t in 0..n {
                if t > 0 && frames.contains(&t) {
                    frame = fresh_frame(&mut rng, f, d);
                }
                emit(&frame, &mut data);
            }
        }
        Pattern::Mixed { segments } => {
            let segments = if segments.is_empty() {
                Pattern::default_mixed(n)
            } else {
                segments.clone()
            };
            let mut frame = fresh_frame(&mut rng, f, d);
            let mut t = 0;
            for seg in &segments {
                for k in 0..seg.frames {
                    if t > 0 {
                        match seg.kind {
                            SegmentKind::Hold => {}
                            SegmentKind::Motion { rate } => advance(&mut frame, rate * PI),
                            SegmentKind::Cut if k == 0 => frame = fresh_frame(&mut rng, f, d),
                            SegmentKind::Cut => {}
                        }
                    }
                    emit(&frame, &mut data);
                    t += 1;
                }
            }
        }
    }

    let mat = Mat::new(n * f, d, data).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    VideoTokens::new(n, f, d, mat).map_err(|e| SynthError::InvalidSpec(e.to_string()))
}
