//! End-to-end run: visual pruning, prefill, degradation profiling, cache
//! eviction with position re-encoding, then greedy decoding.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::{CacheSnapshot, SegmentedSequence};
use crate::decoder::{greedy, Decoder, DecoderConfig};
use crate::math::{self, Mat};
use crate::memory::{
    self, DegradationPolicy, EvictionPolicy, RetainAllPolicy, DEFAULT_DEGRADATION_THRESHOLD,
};
use crate::visual::{
    self, AdaptiveSelector, KeepAllSelector, SelectionMode, TokenSelector, VideoTokens,
    DEFAULT_SPATIAL_WEIGHT,
};
use crate::{Error, Result};

/// Text embeddings that surround the visual tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub system: Mat,
    pub instruction: Mat,
}

impl Prompt {
    /// Standard-normal system and instruction embeddings drawn from `seed`.
    pub fn synthetic(d: usize, system_len: usize, instruction_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7E47);
        let mut draw = |rows: usize| {
            let data = (0..rows * d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Mat::new(rows, d, data).expect("finite samples")
        };
        let system = draw(system_len);
        let instruction = draw(instruction_len);
        Self {
            system,
            instruction,
        }
    }
}

pub const DEFAULT_SYSTEM_LEN: usize = 8;
pub const DEFAULT_INSTRUCTION_LEN: usize = 8;
pub const DEFAULT_DECODE_STEPS: usize = 8;

/// Both pruning stages plus decode length.
#[derive(Debug)]
pub struct SharpvConfig {
    pub w: f64,
    pub selector: Box<dyn TokenSelector>,
    pub policy: Box<dyn EvictionPolicy>,
    pub decode_steps: usize,
}

impl SharpvConfig {
    pub fn new(w: f64, mode: SelectionMode, m: f64, decode_steps: usize) -> Self {
        Self {
            w,
            selector: mode.selector(),
            policy: Box::new(DegradationPolicy { m }),
            decode_steps,
        }
    }

    /// Keep every visual token and every cache entry.
    pub fn disabled(decode_steps: usize) -> Self {
        Self {
            w: DEFAULT_SPATIAL_WEIGHT,
            selector: Box::new(KeepAllSelector),
            policy: Box::new(RetainAllPolicy),
            decode_steps,
        }
    }
}

impl Default for SharpvConfig {
    fn default() -> Self {
        Self {
            w: DEFAULT_SPATIAL_WEIGHT,
            selector: Box::new(AdaptiveSelector),
            policy: Box::new(DegradationPolicy {
                m: DEFAULT_DEGRADATION_THRESHOLD,
            }),
            decode_steps: DEFAULT_DECODE_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub selector: String,
    pub memory: String,
    pub w: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<f64>,
    pub m: f64,
    pub decode_steps: usize,
    pub n: usize,
    pub f: usize,
    pub d: usize,
    /// Where the video came from (pattern or file); filled in by callers.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub input: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub video_seed: Option<u64>,
    pub decoder: DecoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub system: usize,
    pub visual: usize,
    pub instruction: usize,
    pub total: usize,
}

/// Wall-clock fields, excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub ttft_seconds: f64,
    pub tpot_seconds: f64,
    pub visual_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub vr: f64,
    pub mr: f64,
    pub token_budget: f64,
    pub per_frame_thresholds: Vec<f64>,
    pub keep_counts: Vec<usize>,
    pub per_layer_sim: Vec<f64>,
    pub discarded_layers: Vec<usize>,
    pub generated_tokens: Vec<usize>,
    pub cache_bytes_before: usize,
    pub cache_bytes_after: usize,
    pub cache_before: CacheSnapshot,
    pub cache_after: CacheSnapshot,
    pub sequence: SequenceLayout,
    pub config: ConfigEcho,
    pub timing: Timing,
}

impl RunReport {
    /// Checks the report's internal consistency.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        if !in_unit(self.vr) {
            return Err(format!("vr {} outside (0, 1]", self.vr));
        }
        if !in_unit(self.mr) {
            return Err(format!("mr {} outside (0, 1]", self.mr));
        }
        if self.token_budget != self.vr * self.mr {
            return Err(format!(
                "token budget {} != vr*mr {}",
                self.token_budget,
                self.vr * self.mr
            ));
        }
        if let Some(t) = self
            .per_frame_thresholds
            .iter()
            .find(|t| !(0.0..=1.0).contains(*t))
        {
            return Err(format!("threshold {t} outside [0, 1]"));
        }
        if self.per_frame_thresholds.len() != self.config.n
            || self.keep_counts.len() != self.config.n
        {
            return Err("per-frame vectors do not match frame count".into());
        }
        if self
            .keep_counts
            .iter()
            .any(|&k| k == 0 || k > self.config.f)
        {
            return Err("keep count outside [1, f]".into());
        }
        if self.per_layer_sim.len() != self.config.decoder.layers {
            return Err("profile length does not match layer count".into());
        }
        if self.cache_bytes_after > self.cache_bytes_before {
            return Err("cache grew during eviction".into());
        }
        Ok(())
    }
}

/// Scales each visual token to unit RMS before it enters the decoder.
pub fn embed_visual(tokens: &Mat) -> Mat {
    let d = tokens.cols() as f64;
    let rows: Vec<Vec<f64>> = tokens
        .row_iter()
        .map(|r| {
            let norm = math::l2_norm(r);
            if norm < math::NORM_EPS {
                return r.to_vec();
            }
            let s = d.sqrt() / norm;
            r.iter().map(|x| x * s).collect()
        })
        .collect();
    Mat::from_rows(&rows).unwrap_or_else(|_| Mat::zeros(0, tokens.cols()))
}

/// Runs both pruning stages around a greedy decode of `decode_steps` tokens.
pub fn run_pipeline(
    decoder: &Decoder,
    video: &VideoTokens,
    prompt: &Prompt,
    config: &SharpvConfig,
) -> Result<(Vec<usize>, RunReport)> {
    let d = decoder.config().model_dim;
    if video.dim() != d || prompt.system.cols() != d || prompt.instruction.cols() != d {
        return Err(Error::Config(format!(
            "video dim {}, prompt dims {}/{} must equal model dim {d}",
            video.dim(),
            prompt.system.cols(),
            prompt.instruction.cols()
        )));
    }

    let start = Instant::now();
    let (pruned, _importance, plan) =
        visual::prune_video_with(video, config.w, config.selector.as_ref())?;
    let visual_seconds = start.elapsed().as_secs_f64();

    let visual_embedded = embed_visual(&pruned.tokens);
    let embedded = Mat::vstack(&[&prompt.system, &visual_embedded, &prompt.instruction])?;
    let spans = SegmentedSequence::from_lengths(
        prompt.system.rows(),
        visual_embedded.rows(),
        prompt.instruction.rows(),
    );

    let prefill = decoder.prefill(&embedded, &spans)?;
    let profile = memory::degradation_profile(&prefill.trace.layers, &embedded, &spans)?;
    let discard = config.policy.decide(&profile);
    let before = prefill.cache;
    let after = memory::reencode_cache(&memory::apply_discard(&before, &discard)?);
    let mr = memory::mr_metric(&before, &after);
    let first = greedy(&prefill.logits);
    let ttft_seconds = start.elapsed().as_secs_f64();

    let mut cache = after.clone();
    let mut tokens = Vec::with_capacity(config.decode_steps);
    let decode_start = Instant::now();
    if config.decode_steps > 0 {
        tokens.push(first);
        while tokens.len() < config.decode_steps {
            let prev = *tokens.last().expect("non-empty");
            let out = decoder.decode_step(&mut cache, decoder.token_embedding(prev))?;
            tokens.push(greedy(&out.logits));
        }
    }
    let decode_count = config.decode_steps.saturating_sub(1);
    let tpot_seconds = if decode_count == 0 {
        0.0
    } else {
        decode_start.elapsed().as_secs_f64() / decode_count as f64
    };

    let (k, selector) = match config.selector.mode() {
        SelectionMode::Manual { k } => (Some(k), "manual".to_string()),
        mode => (None, mode.name().to_string()),
    };
    let report = RunReport {
        vr: pruned.vr,
        mr,
        token_budget: pruned.vr * mr,
        per_frame_thresholds: plan.thresholds,
        keep_counts: plan.keep_counts,
        per_layer_sim: profile.per_layer_sim,
        discarded_layers: discard.discarded_layers(),
        generated_tokens: tokens.clone(),
        cache_bytes_before: before.bytes(),
        cache_bytes_after: after.bytes(),
        cache_before: before.snapshot(),
        cache_after: after.snapshot(),
        sequence: SequenceLayout {
            system: spans.system.len(),
            visual: spans.visual.len(),
            instruction: spans.instruction.len(),
            total: spans.total_len,
        },
        config: ConfigEcho {
            selector,
            memory: config.policy.name().to_string(),
            w: config.w,
            k,
            m: discard.threshold,
            decode_steps: config.decode_steps,
            n: video.frames(),
            f: video.tokens_per_frame(),
            d: video.dim(),
            input: None,
            video_seed: None,
            decoder: decoder.config().clone(),
        },
        timing: Timing {
            ttft_seconds,
            tpot_seconds,
            visual_seconds,
        },
    };
    report.validate().map_err(Error::Invariant)?;
    Ok((tokens, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_synthetic_video, Pattern, SyntheticVideoSpec};

    fn setup(pattern: Pattern) -> (Decoder, VideoTokens, Prompt) {
        let dec = Decoder::new(DecoderConfig {
            layers: 4,
            model_dim: 16,
            heads: 2,
            mlp_dim: 32,
            vocab: 50,
            seed: 3,
            max_positions: 256,
        })
        .unwrap();
        let video = gen_synthetic_video(&SyntheticVideoSpec {
            n: 4,
            f: 6,
            d: 16,
            pattern,
            seed: 9,
        })
        .unwrap();
        let prompt = Prompt::synthetic(16, 3, 3, 1);
        (dec, video, prompt)
    }

    #[test]
    fn static_video_budget() {
        let (dec, video, prompt) = setup(Pattern::Static);
        let (_, report) = run_pipeline(&dec, &video, &prompt, &SharpvConfig::default()).unwrap();
        assert_eq!(report.vr, 1.0 / 6.0);
        assert_eq!(report.token_budget, report.mr / 6.0);
        assert_eq!(report.sequence.visual, 4);
    }

    #[test]
    fn disabled_keeps_everything() {
        let (dec, video, prompt) = setup(Pattern::Mixed { segments: vec![] });
        let (tokens, report) =
            run_pipeline(&dec, &video, &prompt, &SharpvConfig::disabled(5)).unwrap();
        assert_eq!(tokens.len(), 5);
        assert_eq!(report.vr, 1.0);
        assert_eq!(report.mr, 1.0);
        assert!(report.discarded_layers.is_empty());
        assert_eq!(report.cache_bytes_before, report.cache_bytes_after);
    }

    #[test]
    fn discard_everything_shrinks_cache() {
        let (dec, video, prompt) = setup(Pattern::UniformMotion { rate: 0.5 });
        let cfg = SharpvConfig::new(1.0, SelectionMode::Adaptive, 1.0, 3);
        let (_, report) = run_pipeline(&dec, &video, &prompt, &cfg).unwrap();
        // layer 0 sees the raw embeddings: similarity exactly 1, never < 1
        assert!(!report.discarded_layers.contains(&0));
        for &l in &report.discarded_layers {
            assert_eq!(report.cache_after.layers[l].visual, 0);
        }
        assert!(report.mr < 1.0);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let (dec, video, _) = setup(Pattern::Static);
        let prompt = Prompt::synthetic(8, 3, 3, 1);
        assert!(matches!(
            run_pipeline(&dec, &video, &prompt, &SharpvConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn report_validation_catches_bad_budget() {
        let (dec, video, prompt) = setup(Pattern::Static);
        let (_, mut report) =
            run_pipeline(&dec, &video, &prompt, &SharpvConfig::default()).unwrap();
        report.token_budget += 1e-12;
        assert!(report.validate().is_err());
    }
}
