//! Scaling measurements for the visual scoring stage and the KV cache.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::SegmentedSequence;
use crate::decoder::{Decoder, DecoderConfig};
use crate::math::Mat;
use crate::synth::{gen_synthetic_video, Pattern, SyntheticVideoSpec};
use crate::visual::{self, PruneConfig};
use crate::Result;

/// Minimum repetitions per timed size.
pub const MIN_REPETITIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSize {
    pub n: usize,
    pub f: usize,
    pub d: usize,
}

impl VideoSize {
    pub fn elements(&self) -> usize {
        self.n * self.f * self.d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub size: VideoSize,
    pub median_seconds: f64,
    /// Median time relative to the first size of the ladder.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachePoint {
    pub retained_len: usize,
    pub bytes: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub token_ladder: Vec<ScalingPoint>,
    pub dim_ladder: Vec<ScalingPoint>,
    pub cache_ladder: Vec<CachePoint>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[mid - 1] + xs[mid]) / 2.0
    } else {
        xs[mid]
    }
}

/// Median wall time of a full adaptive visual pruning pass at each size.
///
/// Sizes run sequentially; each is warmed up once before timing.
pub fn scoring_cost_scaling(
    sizes: &[VideoSize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<ScalingPoint>> {
    let repetitions = repetitions.max(MIN_REPETITIONS);
    let config = PruneConfig::default();
    let mut points: Vec<ScalingPoint> = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let video = gen_synthetic_video(&SyntheticVideoSpec {
            n: size.n,
            f: size.f,
            d: size.d,
            pattern: Pattern::Mixed { segments: vec![] },
            seed,
        })?;
        std::hint::black_box(visual::prune_video(&video, &config)?);
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            std::hint::black_box(visual::prune_video(std::hint::black_box(&video), &config)?);
            samples.push(start.elapsed().as_secs_f64());
        }
        let median_seconds = median(samples);
        let ratio = points
            .first()
            .map_or(1.0, |base| median_seconds / base.median_seconds);
        points.push(ScalingPoint {
            size,
            median_seconds,
            ratio,
        });
    }
    Ok(points)
}

/// Cache footprint after prefilling sequences of the given lengths.
pub fn cache_bytes_scaling(config: &DecoderConfig, lengths: &[usize]) -> Result<Vec<CachePoint>> {
    let decoder = Decoder::new(config.clone())?;
    let d = config.model_dim;
    let mut points: Vec<CachePoint> = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let data = (0..len * d)
            .map(|i| ((i % 17) as f64 - 8.0) / 8.0)
            .collect();
        let seq = Mat::new(len, d, data)?;
        let out = decoder.prefill(&seq, &SegmentedSequence::from_lengths(0, len, 0))?;
        let bytes = out.cache.bytes();
        let ratio = points
            .first()
            .map_or(1.0, |base| bytes as f64 / base.bytes as f64);
        points.push(CachePoint {
            retained_len: len,
            bytes,
            ratio,
        });
    }
    Ok(points)
}

/// Doubling ladders over tokens (`n·f`) and over `d`, plus a cache ladder.
pub fn run_bench(
    base: VideoSize,
    steps: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    let ladder = |scale_tokens: bool| -> Vec<VideoSize> {
        (0..steps)
            .map(|i| {
                let k = 1 << i;
                if scale_tokens {
                    VideoSize {
                        n: base.n * k,
                        ..base
                    }
                } else {
                    VideoSize {
                        d: base.d * k,
                        ..base
                    }
                }
            })
            .collect()
    };
    let token_ladder = scoring_cost_scaling(&ladder(true), repetitions, seed)?;
    let dim_ladder = scoring_cost_scaling(&ladder(false), repetitions, seed)?;
    let lengths: Vec<usize> = (0..steps).map(|i| 16 << i).collect();
    let cache_ladder = cache_bytes_scaling(
        &DecoderConfig {
            max_positions: lengths.last().copied().unwrap_or(16).max(16),
            ..DecoderConfig::default()
        },
        &lengths,
    )?;
    Ok(BenchReport {
        token_ladder,
        dim_ladder,
        cache_ladder,
    })
}
