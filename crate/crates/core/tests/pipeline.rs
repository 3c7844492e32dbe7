use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sharpv_core::cache::{Segment, SegmentedSequence};
use sharpv_core::math::Mat;
use sharpv_core::memory::{self, DiscardPlan};
use sharpv_core::tensor_io;
use sharpv_core::{
    gen_synthetic_video, run_pipeline, Decoder, DecoderConfig, Pattern, Prompt, SelectionMode,
    SharpvConfig, StrategyParams, StrategyRegistry, SyntheticVideoSpec, VideoTokens,
};

fn decoder() -> Decoder {
    Decoder::new(DecoderConfig {
        layers: 4,
        model_dim: 32,
        heads: 4,
        mlp_dim: 64,
        vocab: 64,
        seed: 5,
        max_positions: 512,
    })
    .unwrap()
}

fn video(pattern: &str, seed: u64) -> VideoTokens {
    gen_synthetic_video(&SyntheticVideoSpec {
        n: 6,
        f: 12,
        d: 32,
        pattern: pattern.parse().unwrap(),
        seed,
    })
    .unwrap()
}

#[test]
fn runs_are_deterministic_apart_from_timing() {
    let dec = decoder();
    let v = video("mixed", 1);
    let prompt = Prompt::synthetic(32, 4, 4, 1);
    let (ta, mut a) = run_pipeline(&dec, &v, &prompt, &SharpvConfig::default()).unwrap();
    let (tb, b) = run_pipeline(&dec, &v, &prompt, &SharpvConfig::default()).unwrap();
    assert_eq!(ta, tb);
    a.timing = b.timing.clone();
    assert_eq!(a, b);
    assert_eq!(dec.weight_checksum(), decoder().weight_checksum());
}

#[test]
fn static_video_keeps_one_token_per_frame() {
    let (_, report) = run_pipeline(
        &decoder(),
        &video("static", 2),
        &Prompt::synthetic(32, 4, 4, 2),
        &SharpvConfig::default(),
    )
    .unwrap();
    assert_eq!(report.vr, 1.0 / 12.0);
    assert_eq!(report.keep_counts, vec![1; 6]);
}

#[test]
fn all_true_plan_removes_exactly_the_visual_span() {
    let dec = decoder();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spans = SegmentedSequence::from_lengths(3, 20, 5);
    let data = (0..28 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = dec
        .prefill(&Mat::new(28, 32, data).unwrap(), &spans)
        .unwrap();
    let plan = DiscardPlan {
        per_layer: vec![true; 4],
        threshold: 1.0,
    };
    let after = memory::reencode_cache(&memory::apply_discard(&out.cache, &plan).unwrap());
    for (before, layer) in out.cache.layers.iter().zip(&after.layers) {
        assert_eq!(before.len() - layer.len(), 20);
        assert_eq!(layer.count(Segment::Visual), 0);
        assert_eq!(layer.position_ids(), (0..8).collect::<Vec<_>>().as_slice());
        // text keys survive untouched
        assert_eq!(layer.key(3), before.key(23));
    }
    assert_eq!(out.cache.bytes() - after.bytes(), 4 * 20 * 2 * 32 * 8);
}

#[test]
fn memory_stage_only_drops_visual_entries() {
    let (_, report) = run_pipeline(
        &decoder(),
        &video("motion:0.4", 4),
        &Prompt::synthetic(32, 4, 4, 4),
        &SharpvConfig::new(1.0, SelectionMode::Adaptive, 1.0, 3),
    )
    .unwrap();
    // M = 1 discards every layer but the first, whose input is the embedding itself
    assert!(report.discarded_layers.len() >= 3);
    for (b, a) in report
        .cache_before
        .layers
        .iter()
        .zip(&report.cache_after.layers)
    {
        assert_eq!((a.system, a.instruction), (b.system, b.instruction));
    }
    let kept: usize = report.cache_after.layers.iter().map(|l| l.visual).sum();
    assert_eq!(
        kept,
        (report.per_layer_sim.len() - report.discarded_layers.len()) * report.sequence.visual
    );
}

#[test]
fn disabled_config_is_lossless() {
    let (_, report) = run_pipeline(
        &decoder(),
        &video("mixed", 6),
        &Prompt::synthetic(32, 4, 4, 6),
        &SharpvConfig::disabled(4),
    )
    .unwrap();
    assert_eq!((report.vr, report.mr, report.token_budget), (1.0, 1.0, 1.0));
    assert!(report.discarded_layers.is_empty());
    assert_eq!(report.config.memory, "retain-all");
}

#[test]
fn registry_strategies_drive_the_pipeline() {
    let registry = StrategyRegistry::builtin();
    let params = StrategyParams { k: 1.2, m: 0.5 };
    let config = SharpvConfig {
        w: 1.0,
        selector: registry.selector("manual", &params).unwrap(),
        policy: registry.policy("degradation", &params).unwrap(),
        decode_steps: 2,
    };
    let (tokens, report) = run_pipeline(
        &decoder(),
        &video("mixed", 7),
        &Prompt::synthetic(32, 4, 4, 7),
        &config,
    )
    .unwrap();
    assert_eq!(tokens.len(), 2);
    assert_eq!(report.config.selector, "manual");
    assert_eq!(report.config.k, Some(1.2));
    assert_eq!(report.config.m, 0.5);
}

#[test]
fn dimension_mismatch_is_a_config_error() {
    let err = run_pipeline(
        &decoder(),
        &gen_synthetic_video(&SyntheticVideoSpec {
            n: 2,
            f: 4,
            d: 16,
            pattern: Pattern::Static,
            seed: 0,
        })
        .unwrap(),
        &Prompt::synthetic(32, 4, 4, 0),
        &SharpvConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, sharpv_core::Error::Config(_)), "{err}");
}

#[test]
fn file_round_trip_preserves_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("video.bin");
    let original = video("burst:2,4", 8);
    tensor_io::write_path(&path, &original).unwrap();
    let loaded = tensor_io::read_path(&path).unwrap();
    assert_eq!(loaded, tensor_io::quantize(&original));
    let dec = decoder();
    let prompt = Prompt::synthetic(32, 4, 4, 8);
    let (ta, a) = run_pipeline(&dec, &loaded, &prompt, &SharpvConfig::default()).unwrap();
    let (tb, b) = run_pipeline(
        &dec,
        &tensor_io::quantize(&original),
        &prompt,
        &SharpvConfig::default(),
    )
    .unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.keep_counts, b.keep_counts);
}

#[test]
fn report_has_documented_keys() {
    let (_, report) = run_pipeline(
        &decoder(),
        &video("mixed", 9),
        &Prompt::synthetic(32, 4, 4, 9),
        &SharpvConfig::default(),
    )
    .unwrap();
    let value = serde_json::to_value(&report).unwrap();
    let mut keys: Vec<&str> = value
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        [
            "cache_after",
            "cache_before",
            "cache_bytes_after",
            "cache_bytes_before",
            "config",
            "discarded_layers",
            "generated_tokens",
            "keep_counts",
            "mr",
            "per_frame_thresholds",
            "per_layer_sim",
            "sequence",
            "timing",
            "token_budget",
            "vr",
        ]
    );
    let config = value["config"].as_object().unwrap();
    for key in [
        "selector",
        "memory",
        "w",
        "m",
        "decode_steps",
        "n",
        "f",
        "d",
        "decoder",
    ] {
        assert!(config.contains_key(key), "config.{key}");
    }
    for key in ["ttft_seconds", "tpot_seconds", "visual_seconds"] {
        assert!(value["timing"][key].as_f64().unwrap() >= 0.0);
    }
    let back: sharpv_core::RunReport = serde_json::from_value(value).unwrap();
    assert_eq!(back, report);
}
