//! Degradation-aware KV-cache eviction inside the decoder.
//!
//! After prefill, each layer's visual hidden states are compared with the
//! visual embeddings that entered the decoder. Layers whose mean cosine
//! similarity has dropped below a threshold `M` lose their visual cache
//! entries; everything else stays. Remaining entries are then renumbered so
//! position ids are contiguous again.
//!
//! Only hidden states and cache contents are read here. Nothing in this module
//! needs the softmax weights of any attention head.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{KvCacheLayer, LayeredKvCache, Segment, SegmentedSequence};
use crate::math::{self, Mat, MathError};

/// Default degradation threshold.
pub const DEFAULT_DEGRADATION_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(
        "layer {layer} hidden states are {rows}x{cols}, expected {expected_rows}x{expected_cols}"
    )]
    TraceShape {
        layer: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("visual span is empty")]
    EmptyVisualSpan,
    #[error("visual span {start}..{end} exceeds sequence length {len}")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("discard plan covers {plan} layers but cache has {cache}")]
    LayerCountMismatch { plan: usize, cache: usize },
}

pub type Result<T> = std::result::Result<T, MemoryError>;

/// Mean cosine similarity of visual hidden states to the original visual
/// features, one value per decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationProfile {
    pub per_layer_sim: Vec<f64>,
}

/// Which layers lose their visual cache entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardPlan {
    pub per_layer: Vec<bool>,
    pub threshold: f64,
}

impl DiscardPlan {
    pub fn retain_all(layers: usize) -> Self {
        Self {
            per_layer: vec![false; layers],
            threshold: -1.0,
        }
    }

    pub fn discarded_layers(&self) -> Vec<usize> {
        self.per_layer
            .iter()
            .enumerate()
            .filter_map(|(l, &d)| d.then_some(l))
            .collect()
    }
}

/// Turns a degradation profile into a discard plan.
pub trait EvictionPolicy: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn decide(&self, profile: &DegradationProfile) -> DiscardPlan;
}

/// Discards a layer's visual entries when its similarity is strictly below `m`.
#[derive(Debug, Clone, Copy)]
pub struct DegradationPolicy {
    pub m: f64,
}

impl Default for DegradationPolicy {
    fn default() -> Self {
        Self {
            m: DEFAULT_DEGRADATION_THRESHOLD,
        }
    }
}

impl EvictionPolicy for DegradationPolicy {
    fn name(&self) -> &'static str {
        "degradation"
    }

    fn decide(&self, profile: &DegradationProfile) -> DiscardPlan {
        discard_decision(profile, self.m)
    }
}

/// Never evicts.
#[derive(Debug, Clone, Copy, Default)]
pub struct RetainAllPolicy;

impl EvictionPolicy for RetainAllPolicy {
    fn name(&self) -> &'static str {
        "retain-all"
    }

    fn decide(&self, profile: &DegradationProfile) -> DiscardPlan {
        DiscardPlan::retain_all(profile.per_layer_sim.len())
    }
}

/// Per-layer mean over the visual span of `cos(hidden[l][i], original[i])`.
///
/// `hidden_trace[l]` is the input to decoder layer `l`.
pub fn degradation_profile(
    hidden_trace: &[Mat],
    original: &Mat,
    spans: &SegmentedSequence,
) -> Result<DegradationProfile> {
    let visual = spans.visual.clone();
    if visual.is_empty() {
        return Err(MemoryError::EmptyVisualSpan);
    }
    if visual.end > original.rows() {
        return Err(MemoryError::SpanOutOfRange {
            start: visual.start,
            end: visual.end,
            len: original.rows(),
        });
    }
    let mut per_layer_sim = Vec::with_capacity(hidden_trace.len());
    for (layer, hidden) in hidden_trace.iter().enumerate() {
        if hidden.rows() != original.rows() || hidden.cols() != original.cols() {
            return Err(MemoryError::TraceShape {
                layer,
                rows: hidden.rows(),
                cols: hidden.cols(),
                expected_rows: original.rows(),
                expected_cols: original.cols(),
            });
        }
        let mut sum = 0.0;
        for i in visual.clone() {
            sum += math::cosine_sim(hidden.row(i), original.row(i))?;
        }
        per_layer_sim.push(sum / visual.len() as f64);
    }
    Ok(DegradationProfile { per_layer_sim })
}

/// Marks layer `l` for discard iff `profile[l] < m`. `m` is clamped to `[-1, 1]`.
pub fn discard_decision(profile: &DegradationProfile, m: f64) -> DiscardPlan {
    let m = m.clamp(-1.0, 1.0);
    DiscardPlan {
        per_layer: profile.per_layer_sim.iter().map(|&s| s < m).collect(),
        threshold: m,
    }
}

/// Removes visual entries from every layer the plan marks. Other layers are
/// returned untouched, and non-visual entries are never removed.
pub fn apply_discard(cache: &LayeredKvCache, plan: &DiscardPlan) -> Result<LayeredKvCache> {
    if plan.per_layer.len() != cache.num_layers() {
        return Err(MemoryError::LayerCountMismatch {
            plan: plan.per_layer.len(),
            cache: cache.num_layers(),
        });
    }
    let layers = cache
        .layers
        .iter()
        .zip(&plan.per_layer)
        .map(|(layer, &discard)| {
            let mut layer = layer.clone();
            if discard {
                layer.retain_segments(|tag| tag != Segment::Visual);
            }
            layer
        })
        .collect();
    Ok(LayeredKvCache { layers })
}

/// Rewrites position ids to `0..len` keeping their order.
pub fn reencode_positions(layer: &KvCacheLayer) -> KvCacheLayer {
    let mut out = layer.clone();
    out.set_position_ids((0..layer.len()).collect());
    out
}

/// Re-encodes every layer of a cache.
pub fn reencode_cache(cache: &LayeredKvCache) -> LayeredKvCache {
    LayeredKvCache {
        layers: cache.layers.iter().map(reencode_positions).collect(),
    }
}

/// Retained entries across all layers of `after` over those of `before`.
pub fn mr_metric(before: &LayeredKvCache, after: &LayeredKvCache) -> f64 {
    let total = before.total_entries();
    if total == 0 {
        return 1.0;
    }
    after.total_entries() as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cache_for(spans: &SegmentedSequence, layers: usize) -> LayeredKvCache {
        let mut cache = LayeredKvCache::new(layers, 2, 3);
        for (l, layer) in cache.layers.iter_mut().enumerate() {
            for pos in 0..spans.total_len {
                let row = [(l * 1000 + pos) as f64; 6];
                layer.push(&row, &row, pos, spans.segment_at(pos)).unwrap();
            }
        }
        cache
    }

    fn profile(v: &[f64]) -> DegradationProfile {
        DegradationProfile {
            per_layer_sim: v.to_vec(),
        }
    }

    #[test]
    fn identity_trace_profiles_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = (0..10 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let orig = Mat::new(10, 4, data).unwrap();
        let spans = SegmentedSequence::from_lengths(2, 6, 2);
        let p = degradation_profile(&[orig.clone(), orig.clone(), orig.clone()], &orig, &spans)
            .unwrap();
        for s in p.per_layer_sim {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_trace_profiles_to_zero() {
        let orig = Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let rotated = Mat::from_rows(&[[0.0, 1.0], [0.0, -1.0], [1.0, 0.0]]).unwrap();
        let spans = SegmentedSequence::from_lengths(0, 3, 0);
        let p = degradation_profile(&[orig.clone(), rotated], &orig, &spans).unwrap();
        assert_eq!(p.per_layer_sim[1], 0.0);
    }

    #[test]
    fn profile_errors() {
        let orig = Mat::zeros(4, 2);
        let spans = SegmentedSequence::from_lengths(2, 0, 2);
        assert_eq!(
            degradation_profile(std::slice::from_ref(&orig), &orig, &spans),
            Err(MemoryError::EmptyVisualSpan)
        );
        let spans = SegmentedSequence::from_lengths(1, 2, 1);
        assert!(matches!(
            degradation_profile(&[Mat::zeros(3, 2)], &orig, &spans),
            Err(MemoryError::TraceShape { layer: 0, .. })
        ));
        let spans = SegmentedSequence::from_lengths(3, 2, 0);
        assert!(matches!(
            degradation_profile(std::slice::from_ref(&orig), &orig, &spans),
            Err(MemoryError::SpanOutOfRange { .. })
        ));
    }

    #[test]
    fn discard_decision_examples() {
        let p = profile(&[0.9, 0.5, 0.19, 0.05]);
        assert_eq!(discard_decision(&p, -1.0).per_layer, vec![false; 4]);
        assert_eq!(discard_decision(&p, 1.0).per_layer, vec![true; 4]);
        assert_eq!(discard_decision(&p, 7.0).threshold, 1.0);
        assert_eq!(
            discard_decision(&p, 0.2).per_layer,
            vec![false, false, true, true]
        );
        // strict inequality
        assert_eq!(
            discard_decision(&p, 0.5).per_layer,
            vec![false, false, true, true]
        );
    }

    #[test]
    fn all_false_plan_is_identity() {
        let spans = SegmentedSequence::from_lengths(2, 5, 3);
        let cache = cache_for(&spans, 3);
        let out = apply_discard(&cache, &DiscardPlan::retain_all(3)).unwrap();
        assert_eq!(out, cache);
    }

    #[test]
    fn all_true_plan_drops_visual_everywhere() {
        let spans = SegmentedSequence::from_lengths(4, 128, 4);
        let cache = cache_for(&spans, 5);
        let plan = discard_decision(&profile(&[0.0; 5]), 0.5);
        let out = apply_discard(&cache, &plan).unwrap();
        for (b, a) in cache.layers.iter().zip(&out.layers) {
            assert_eq!(b.len() - a.len(), 128);
            assert_eq!(a.count(Segment::Visual), 0);
        }
        assert_eq!(cache.bytes() - out.bytes(), 5 * 128 * 2 * 2 * 3 * 8);
    }

    #[test]
    fn plan_length_mismatch() {
        let spans = SegmentedSequence::from_lengths(1, 1, 1);
        let cache = cache_for(&spans, 2);
        assert_eq!(
            apply_discard(&cache, &DiscardPlan::retain_all(3)),
            Err(MemoryError::LayerCountMismatch { plan: 3, cache: 2 })
        );
    }

    #[test]
    fn reencode_examples() {
        let spans = SegmentedSequence::from_lengths(2, 3, 3);
        let cache = cache_for(&spans, 1);
        let same = reencode_positions(&cache.layers[0]);
        assert_eq!(same, cache.layers[0]);

        let plan = discard_decision(&profile(&[0.0]), 0.5);
        let pruned = apply_discard(&cache, &plan).unwrap();
        assert_eq!(pruned.layers[0].position_ids(), &[0, 1, 5, 6, 7]);
        let re = reencode_positions(&pruned.layers[0]);
        assert_eq!(re.position_ids(), &[0, 1, 2, 3, 4]);
        assert_eq!(re.key(2), pruned.layers[0].key(2));
    }

    #[test]
    fn mr_examples() {
        let spans = SegmentedSequence::from_lengths(2, 6, 2);
        let cache = cache_for(&spans, 4);
        assert_eq!(mr_metric(&cache, &cache), 1.0);
        let all = apply_discard(&cache, &discard_decision(&profile(&[0.0; 4]), 0.5)).unwrap();
        assert_eq!(mr_metric(&cache, &all), 0.4);
        // layers 1 and 3 discard: (10 + 4 + 10 + 4) / 40
        let mixed = apply_discard(
            &cache,
            &discard_decision(&profile(&[0.9, 0.1, 0.9, 0.1]), 0.5),
        )
        .unwrap();
        assert_eq!(mr_metric(&cache, &mixed), 28.0 / 40.0);
    }

    #[test]
    fn policies() {
        let p = profile(&[1.0, 0.3, 0.1]);
        assert_eq!(
            DegradationPolicy::default().decide(&p).per_layer,
            vec![false, false, true]
        );
        assert_eq!(RetainAllPolicy.decide(&p), DiscardPlan::retain_all(3));
    }

    proptest! {
        #[test]
        fn discard_never_touches_text(
            sys in 0usize..5, vis in 1usize..20, ins in 0usize..5,
            mask in prop::collection::vec(any::<bool>(), 4),
        ) {
            let spans = SegmentedSequence::from_lengths(sys, vis, ins);
            let cache = cache_for(&spans, 4);
            let plan = DiscardPlan { per_layer: mask.clone(), threshold: 0.0 };
            let out = apply_discard(&cache, &plan).unwrap();
            let mut expected_total = 0;
            for (l, layer) in out.layers.iter().enumerate() {
                prop_assert_eq!(layer.count(Segment::System), sys);
                prop_assert_eq!(layer.count(Segment::Instruction), ins);
                let expected_len = if mask[l] { sys + ins } else { sys + vis + ins };
                prop_assert_eq!(layer.len(), expected_len);
                expected_total += expected_len;
                if !mask[l] {
                    prop_assert_eq!(layer, &cache.layers[l]);
                }
            }
            prop_assert_eq!(
                mr_metric(&cache, &out),
                expected_total as f64 / (4 * spans.total_len) as f64
            );
        }

        #[test]
        fn reencode_is_monotone_bijection(gaps in prop::collection::vec(1usize..9, 1..40)) {
            let mut layer = KvCacheLayer::new(1, 1);
            let mut pos = 0;
            for g in &gaps {
                pos += g;
                layer.push(&[pos as f64], &[0.0], pos, Segment::Visual).unwrap();
            }
            let re = reencode_positions(&layer);
            prop_assert_eq!(re.position_ids(), &(0..gaps.len()).collect::<Vec<_>>()[..]);
            prop_assert_eq!(&reencode_positions(&re), &re);
            for i in 0..layer.len() {
                prop_assert_eq!(re.key(i), layer.key(i));
            }
        }

        #[test]
        fn discard_set_monotone_in_m(
            sims in prop::collection::vec(-1.0f64..1.0, 1..12),
            m1 in -1.0f64..1.0, m2 in -1.0f64..1.0,
        ) {
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            let p = profile(&sims);
            let a = discard_decision(&p, lo);
            let b = discard_decision(&p, hi);
            for l in 0..sims.len() {
                prop_assert!(!a.per_layer[l] || b.per_layer[l]);
            }
        }
    }
}
