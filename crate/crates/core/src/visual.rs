//! Pre-decoder visual token pruning.
//!
//! Every token gets a spatial score (dissimilarity to its frame's mean token)
//! and a temporal score (dissimilarity to the same-position token in the
//! previous frame). The combined score `T + w·S` ranks tokens inside a frame,
//! and a [`TokenSelector`] decides how many survive. The adaptive selector
//! derives each frame's retention ratio from the norm of its temporal scores,
//! `‖T_t‖₂ / (2√f)`, so static frames shrink to a single anchor token while
//! high-motion frames keep nearly everything.
//!
//! Scoring is `O(n·f·d)`: there is no token-pair comparison anywhere.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{self, Mat, MathError};

/// Default weight on the spatial term.
pub const DEFAULT_SPATIAL_WEIGHT: f64 = 1.0;
/// Default fixed threshold for [`ManualSelector`].
pub const DEFAULT_MANUAL_K: f64 = 1.6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VisualError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("invalid video: {0}")]
    InvalidVideo(String),
    #[error(
        "score shape mismatch: expected {expected_frames}x{expected_tokens}, got {frames}x{tokens}"
    )]
    ShapeMismatch {
        expected_frames: usize,
        expected_tokens: usize,
        frames: usize,
        tokens: usize,
    },
    #[error("keep count {keep} outside [1, {tokens}]")]
    KeepCountOutOfRange { keep: usize, tokens: usize },
    #[error("spatial weight must be finite and >= 0, got {0}")]
    InvalidWeight(f64),
    #[error("manual threshold K={k} outside [0, {max}]")]
    InvalidManualThreshold { k: f64, max: f64 },
}

pub type Result<T> = std::result::Result<T, VisualError>;

/// `n` frames of `f` tokens of dimension `d`, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTokens {
    n: usize,
    f: usize,
    d: usize,
    data: Mat,
}

impl VideoTokens {
    pub fn new(n: usize, f: usize, d: usize, data: Mat) -> Result<Self> {
        if n == 0 || f == 0 || d == 0 {
            return Err(VisualError::InvalidVideo(format!(
                "all dimensions must be >= 1 (n={n}, f={f}, d={d})"
            )));
        }
        if data.rows() != n * f || data.cols() != d {
            return Err(VisualError::InvalidVideo(format!(
                "expected {}x{d} token matrix, got {}x{}",
                n * f,
                data.rows(),
                data.cols()
            )));
        }
        Ok(Self { n, f, d, data })
    }

    pub fn frames(&self) -> usize {
        self.n
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.f
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn total_tokens(&self) -> usize {
        self.n * self.f
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn token(&self, frame: usize, index: usize) -> &[f64] {
        self.data.row(frame * self.f + index)
    }

    /// Copy of frame `t` as an `f × d` matrix.
    pub fn frame(&self, t: usize) -> Mat {
        self.data.slice_rows(t * self.f, (t + 1) * self.f)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            data: self.data.scaled(alpha),
            ..*self
        }
    }
}

/// Per-token spatial, temporal and combined scores, indexed `[frame][token]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub spatial: Vec<Vec<f64>>,
    pub temporal: Vec<Vec<f64>>,
    pub combined: Vec<Vec<f64>>,
    pub w: f64,
}

/// How a [`RetentionPlan`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SelectionMode {
    Adaptive,
    Manual { k: f64 },
    KeepAll,
}

impl SelectionMode {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionMode::Adaptive => "adaptive",
            SelectionMode::Manual { .. } => "manual",
            SelectionMode::KeepAll => "keep-all",
        }
    }

    /// Builds the built-in selector for this mode.
    pub fn selector(&self) -> Box<dyn TokenSelector> {
        match *self {
            SelectionMode::Adaptive => Box::new(AdaptiveSelector),
            SelectionMode::Manual { k } => Box::new(ManualSelector { k }),
            SelectionMode::KeepAll => Box::new(KeepAllSelector),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPlan {
    /// Information-aware retention ratio per frame, in `[0, 1]`.
    pub thresholds: Vec<f64>,
    pub keep_counts: Vec<usize>,
    /// Ascending within-frame indices of surviving tokens.
    pub kept_indices: Vec<Vec<usize>>,
    pub mode: SelectionMode,
}

impl RetentionPlan {
    pub fn total_kept(&self) -> usize {
        self.keep_counts.iter().sum()
    }
}

/// Surviving tokens in their original frame-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedVideo {
    pub tokens: Mat,
    /// `(frame, within-frame index)` of each row of `tokens`.
    pub origin: Vec<(usize, usize)>,
    /// Fraction of the input tokens that were retained.
    pub vr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub w: f64,
    pub mode: SelectionMode,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            w: DEFAULT_SPATIAL_WEIGHT,
            mode: SelectionMode::Adaptive,
        }
    }
}

/// Chooses which tokens of one frame survive, given the frame's combined
/// scores and its information-aware threshold.
pub trait TokenSelector: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn mode(&self) -> SelectionMode;

    /// Rejects parameter combinations that make no sense for weight `w`.
    fn validate(&self, _w: f64) -> Result<()> {
        Ok(())
    }

    /// Returns ascending within-frame indices, never empty.
    fn select(&self, importance: &[f64], threshold: f64) -> Result<Vec<usize>>;
}

/// Keeps `clamp(round(threshold·f), 1, f)` top-scoring tokens per frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdaptiveSelector;

impl TokenSelector for AdaptiveSelector {
    fn name(&self) -> &'static str {
        "adaptive"
    }

    fn mode(&self) -> SelectionMode {
        SelectionMode::Adaptive
    }

    fn select(&self, importance: &[f64], threshold: f64) -> Result<Vec<usize>> {
        select_topk(importance, adaptive_keep_count(threshold, importance.len()))
    }
}

/// Keeps every token whose combined score reaches a fixed `k`, with a floor
/// of one token (the frame's argmax) per frame.
#[derive(Debug, Clone, Copy)]
pub struct ManualSelector {
    pub k: f64,
}

impl Default for ManualSelector {
    fn default() -> Self {
        Self {
            k: DEFAULT_MANUAL_K,
        }
    }
}

impl TokenSelector for ManualSelector {
    fn name(&self) -> &'static str {
        "manual"
    }

    fn mode(&self) -> SelectionMode {
        SelectionMode::Manual { k: self.k }
    }

    fn validate(&self, w: f64) -> Result<()> {
        // combined scores live in [0, 2(1+w)]
        let max = 2.0 * (1.0 + w);
        if !(self.k.is_finite() && (0.0..=max).contains(&self.k)) {
            return Err(VisualError::InvalidManualThreshold { k: self.k, max });
        }
        Ok(())
    }

    fn select(&self, importance: &[f64], _threshold: f64) -> Result<Vec<usize>> {
        let kept: Vec<usize> = importance
            .iter()
            .enumerate()
            .filter(|(_, &s)| s >= self.k)
            .map(|(i, _)| i)
            .collect();
        if kept.is_empty() {
            return select_topk(importance, 1);
        }
        Ok(kept)
    }
}

/// Disables pruning.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeepAllSelector;

impl TokenSelector for KeepAllSelector {
    fn name(&self) -> &'static str {
        "keep-all"
    }

    fn mode(&self) -> SelectionMode {
        SelectionMode::KeepAll
    }

    fn select(&self, importance: &[f64], _threshold: f64) -> Result<Vec<usize>> {
        Ok((0..importance.len()).collect())
    }
}

/// Rounds half away from zero and clamps to `[1, f]`.
pub fn adaptive_keep_count(threshold: f64, f: usize) -> usize {
    let raw = (threshold * f as f64).round();
    (raw.max(1.0) as usize).min(f)
}

fn frame_spatial(frame: &Mat) -> Result<Vec<f64>> {
    let mean = math::mean_rows(frame)?;
    Ok(math::row_dissim(frame, &mean)?)
}

/// Dissimilarity of each token to its frame's mean token.
pub fn spatial_importance(video: &VideoTokens) -> Result<Vec<Vec<f64>>> {
    (0..video.frames())
        .map(|t| frame_spatial(&video.frame(t)))
        .collect()
}

/// Dissimilarity of each token to the same-position token one frame earlier.
///
/// The first frame is compared against a virtual predecessor whose tokens all
/// equal its own mean, so its temporal scores coincide with its spatial ones.
pub fn temporal_importance(video: &VideoTokens) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(video.frames());
    let mut prev = video.frame(0);
    out.push(frame_spatial(&prev)?);
    for t in 1..video.frames() {
        let cur = video.frame(t);
        out.push(math::paired_row_dissim(&cur, &prev)?);
        prev = cur;
    }
    Ok(out)
}

fn check_same_shape(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    let expected_tokens = a.first().map_or(0, Vec::len);
    let mismatch = a.len() != b.len()
        || a.iter().any(|r| r.len() != expected_tokens)
        || b.iter().any(|r| r.len() != expected_tokens);
    if mismatch {
        return Err(VisualError::ShapeMismatch {
            expected_frames: a.len(),
            expected_tokens,
            frames: b.len(),
            tokens: b.first().map_or(0, Vec::len),
        });
    }
    Ok(())
}

fn check_weight(w: f64) -> Result<()> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(VisualError::InvalidWeight(w));
    }
    Ok(())
}

/// Element-wise `temporal + w·spatial`.
pub fn combined_importance(
    spatial: &[Vec<f64>],
    temporal: &[Vec<f64>],
    w: f64,
) -> Result<Vec<Vec<f64>>> {
    check_weight(w)?;
    check_same_shape(temporal, spatial)?;
    Ok(temporal
        .iter()
        .zip(spatial)
        .map(|(t_row, s_row)| t_row.iter().zip(s_row).map(|(t, s)| t + w * s).collect())
        .collect())
}

/// Per-frame retention ratio `‖T_t‖₂ / (2√f)`; frame 0 uses its spatial scores.
pub fn frame_thresholds(spatial: &[Vec<f64>], temporal: &[Vec<f64>], f: usize) -> Result<Vec<f64>> {
    check_same_shape(temporal, spatial)?;
    if temporal.first().is_some_and(|r| r.len() != f) {
        return Err(VisualError::ShapeMismatch {
            expected_frames: temporal.len(),
            expected_tokens: f,
            frames: temporal.len(),
            tokens: temporal[0].len(),
        });
    }
    let bound = 2.0 * (f as f64).sqrt();
    Ok(temporal
        .iter()
        .enumerate()
        .map(|(t, row)| {
            let source = if t == 0 { &spatial[0] } else { row };
            (math::l2_norm(source) / bound).min(1.0)
        })
        .collect())
}

/// Indices of the `keep` largest scores, ties to the lower index, ascending.
pub fn select_topk(scores: &[f64], keep: usize) -> Result<Vec<usize>> {
    if keep == 0 || keep > scores.len() {
        return Err(VisualError::KeepCountOutOfRange {
            keep,
            tokens: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

/// Scores every token and computes the per-frame thresholds.
pub fn score_video(video: &VideoTokens, w: f64) -> Result<(ImportanceMap, Vec<f64>)> {
    let spatial = spatial_importance(video)?;
    let temporal = temporal_importance(video)?;
    let combined = combined_importance(&spatial, &temporal, w)?;
    let thresholds = frame_thresholds(&spatial, &temporal, video.tokens_per_frame())?;
    Ok((
        ImportanceMap {
            spatial,
            temporal,
            combined,
            w,
        },
        thresholds,
    ))
}

/// Runs the full visual stage with one of the built-in selection modes.
pub fn prune_video(
    video: &VideoTokens,
    config: &PruneConfig,
) -> Result<(PrunedVideo, ImportanceMap, RetentionPlan)> {
    let selector = config.mode.selector();
    prune_video_with(video, config.w, selector.as_ref())
}

/// Runs the full visual stage with an arbitrary selector.
pub fn prune_video_with(
    video: &VideoTokens,
    w: f64,
    selector: &dyn TokenSelector,
) -> Result<(PrunedVideo, ImportanceMap, RetentionPlan)> {
    check_weight(w)?;
    selector.validate(w)?;
    let (importance, thresholds) = score_video(video, w)?;
    let f = video.tokens_per_frame();

    let mut kept_indices = Vec::with_capacity(video.frames());
    for (row, &threshold) in importance.combined.iter().zip(&thresholds) {
        let kept = selector.select(row, threshold)?;
        if kept.is_empty() || kept.len() > f {
            return Err(VisualError::KeepCountOutOfRange {
                keep: kept.len(),
                tokens: f,
            });
        }
        kept_indices.push(kept);
    }
    let keep_counts: Vec<usize> = kept_indices.iter().map(Vec::len).collect();

    let total: usize = keep_counts.iter().sum();
    let mut data = Vec::with_capacity(total * video.dim());
    let mut origin = Vec::with_capacity(total);
    for (t, kept) in kept_indices.iter().enumerate() {
        for &i in kept {
            data.extend_from_slice(video.token(t, i));
            origin.push((t, i));
        }
    }
    let tokens = Mat::new(total, video.dim(), data)?;
    let vr = total as f64 / video.total_tokens() as f64;

    let plan = RetentionPlan {
        thresholds,
        keep_counts,
        kept_indices,
        mode: selector.mode(),
    };
    Ok((PrunedVideo { tokens, origin, vr }, importance, plan))
}
