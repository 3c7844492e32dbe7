//! A small deterministic pre-norm transformer decoder with a real KV cache.
//!
//! Each block is `h += Attn(RMSNorm(h)); h += MLP(RMSNorm(h))` with GELU in the
//! MLP. Attention adds an ALiBi-style bias `-slope_h · (q_pos - k_pos)` instead
//! of positional embeddings, so positions live only in the cache's position
//! ids and compacting them after eviction needs no key re-rotation.
//!
//! Weights are drawn from a ChaCha8 stream seeded by `DecoderConfig::seed`, in
//! this order: token embedding, then per layer `wq, wk, wv, wo, w_in, w_out`,
//! then the unembedding. Every entry is a standard normal scaled by
//! `1/√fan_in` (`1/√d` for the embedding table). `wo` and `w_out` carry an
//! extra gain of 3 so the residual stream drifts far enough from the input
//! over eight layers for the deeper layers to look degraded.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::{CacheError, KvCacheLayer, LayeredKvCache, Segment, SegmentedSequence};
use crate::math::{self, Mat};

const RMS_EPS: f64 = 1e-6;
/// Extra scale on the two projections that write into the residual stream.
const OUTPUT_GAIN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("position {pos} exceeds max_positions {max}")]
    PositionOverflow { pos: usize, max: usize },
    #[error("input width {got} does not match model dim {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("cache has {got} layers, decoder has {expected}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("spans cover {spans} positions but sequence has {rows}")]
    SpanMismatch { spans: usize, rows: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Cache(#[from] CacheError),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub vocab: usize,
    pub seed: u64,
    pub max_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            model_dim: 64,
            heads: 4,
            mlp_dim: 256,
            vocab: 256,
            seed: 42,
            max_positions: 2048,
        }
    }
}

impl DecoderConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("vocab", self.vocab),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(DecoderError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(DecoderError::InvalidConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Input hidden states of every decoder layer for a prefill sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub layers: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub trace: HiddenTrace,
    pub cache: LayeredKvCache,
    /// Next-token logits for the last position.
    pub logits: Vec<f64>,
    /// Final-layer residual stream of the last position.
    pub last_hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Block {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    w_in: Mat,
    w_out: Mat,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    embedding: Mat,
    blocks: Vec<Block>,
    unembed: Mat,
    slopes: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Mat::new(rows, cols, data).expect("gaussian samples are finite")
}

/// `x · W` for `W` stored `in × out`.
fn matvec(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (xi, row) in x.iter().zip(w.row_iter()) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = math::dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Index of the largest logit; ties go to the lower index.
pub fn greedy(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Cache rows visible to one query, with the position each row is read at.
struct KeyView<'a> {
    layer: &'a KvCacheLayer,
    rows: Vec<usize>,
    positions: Vec<usize>,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d_scale = 1.0 / (d as f64).sqrt();
        let mlp_scale = 1.0 / (config.mlp_dim as f64).sqrt();

        let embedding = gaussian(&mut rng, config.vocab, d, d_scale);
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: gaussian(&mut rng, d, d, d_scale),
                wk: gaussian(&mut rng, d, d, d_scale),
                wv: gaussian(&mut rng, d, d, d_scale),
                wo: gaussian(&mut rng, d, d, OUTPUT_GAIN * d_scale),
                w_in: gaussian(&mut rng, d, config.mlp_dim, d_scale),
                w_out: gaussian(&mut rng, config.mlp_dim, d, OUTPUT_GAIN * mlp_scale),
            })
            .collect();
        let unembed = gaussian(&mut rng, d, config.vocab, d_scale);
        let slopes = (0..config.heads)
            .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / config.heads as f64))
            .collect();
        Ok(Self {
            config,
            embedding,
            blocks,
            unembed,
            slopes,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn token_embedding(&self, token: usize) -> &[f64] {
        self.embedding.row(token % self.config.vocab)
    }

    pub fn new_cache(&self) -> LayeredKvCache {
        LayeredKvCache::new(
            self.config.layers,
            self.config.heads,
            self.config.head_dim(),
        )
    }

    /// SHA-256 over the little-endian bytes of every weight, in generation order.
    pub fn weight_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |m: &Mat| {
            for v in m.as_slice() {
                hasher.update(v.to_le_bytes());
            }
        };
        feed(&self.embedding);
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_in, &b.w_out] {
                feed(m);
            }
        }
        feed(&self.unembed);
        format!("{:x}", hasher.finalize())
    }

    fn attend(&self, q: &[f64], query_pos: usize, view: &KeyView<'_>) -> Vec<f64> {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; self.config.model_dim];
        let mut scores = vec![0.0; view.rows.len()];
        for (h, &slope) in self.slopes.iter().enumerate() {
            let span = h * hd..(h + 1) * hd;
            let qh = &q[span.clone()];
            let mut max = f64::NEG_INFINITY;
            for (s, (&row, &pos)) in scores.iter_mut().zip(view.rows.iter().zip(&view.positions)) {
                let kh = &view.layer.key(row)[span.clone()];
                let distance = query_pos as f64 - pos as f64;
                *s = math::dot(qh, kh) * scale - slope * distance;
                max = max.max(*s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            let oh = &mut out[span.clone()];
            for (&p, &row) in scores.iter().zip(&view.rows) {
                let vh = &view.layer.value(row)[span.clone()];
                for (o, v) in oh.iter_mut().zip(vh) {
                    *o += p / denom * v;
                }
            }
        }
        out
    }

    fn mlp(&self, block: &Block, h: &mut [f64]) {
        let mut inner = matvec(&rms_norm(h), &block.w_in);
        inner.iter_mut().for_each(|x| *x = gelu(*x));
        add_assign(h, &matvec(&inner, &block.w_out));
    }

    fn head(&self, hidden: &[f64]) -> Vec<f64> {
        matvec(&rms_norm(hidden), &self.unembed)
    }

    /// Runs causal self-attention over the whole sequence, filling a fresh cache.
    pub fn prefill(&self, embedded: &Mat, spans: &SegmentedSequence) -> Result<PrefillOutput> {
        let d = self.config.model_dim;
        let len = embedded.rows();
        if len == 0 {
            return Err(DecoderError::EmptySequence);
        }
        if embedded.cols() != d {
            return Err(DecoderError::WidthMismatch {
                expected: d,
                got: embedded.cols(),
            });
        }
        if spans.total_len != len {
            return Err(DecoderError::SpanMismatch {
                spans: spans.total_len,
                rows: len,
            });
        }
        spans.validate()?;
        if len > self.config.max_positions {
            return Err(DecoderError::PositionOverflow {
                pos: len - 1,
                max: self.config.max_positions,
            });
        }

        let mut cache = self.new_cache();
        let mut trace = Vec::with_capacity(self.config.layers);
        let mut hidden = embedded.clone();
        for (block, layer) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            trace.push(hidden.clone());
            let mut queries = Vec::with_capacity(len);
            for pos in 0..len {
                let normed = rms_norm(hidden.row(pos));
                queries.push(matvec(&normed, &block.wq));
                let k = matvec(&normed, &block.wk);
                let v = matvec(&normed, &block.wv);
                layer.push(&k, &v, pos, spans.segment_at(pos))?;
            }
            for (pos, q) in queries.iter().enumerate() {
                let view = KeyView {
                    layer: &*layer,
                    rows: (0..=pos).collect(),
                    positions: layer.position_ids()[..=pos].to_vec(),
                };
                let attn = self.attend(q, pos, &view);
                let h = hidden.row_mut(pos);
                add_assign(h, &matvec(&attn, &block.wo));
                self.mlp(block, h);
            }
        }
        let last_hidden = hidden.row(len - 1).to_vec();
        let logits = self.head(&last_hidden);
        Ok(PrefillOutput {
            trace: HiddenTrace { layers: trace },
            cache,
            logits,
            last_hidden,
        })
    }

    /// Feeds one embedding through the decoder, appending a generated entry
    /// to every cache layer.
    pub fn decode_step(&self, cache: &mut LayeredKvCache, input: &[f64]) -> Result<StepOutput> {
        self.step(cache, input, None)
    }

    /// Like [`Decoder::decode_step`], but entries flagged in `exclude[layer]`
    /// stay in the cache and are skipped when reading it. Positions of the
    /// remaining entries are taken as their rank among non-excluded entries,
    /// matching what eviction plus position re-encoding produces. Entries past
    /// the end of an `exclude` row are visible.
    pub fn decode_step_excluding(
        &self,
        cache: &mut LayeredKvCache,
        input: &[f64],
        exclude: &[Vec<bool>],
    ) -> Result<StepOutput> {
        self.step(cache, input, Some(exclude))
    }

    fn step(
        &self,
        cache: &mut LayeredKvCache,
        input: &[f64],
        exclude: Option<&[Vec<bool>]>,
    ) -> Result<StepOutput> {
        let d = self.config.model_dim;
        if input.len() != d {
            return Err(DecoderError::WidthMismatch {
                expected: d,
                got: input.len(),
            });
        }
        if cache.num_layers() != self.config.layers {
            return Err(DecoderError::LayerMismatch {
                expected: self.config.layers,
                got: cache.num_layers(),
            });
        }
        let mut h = input.to_vec();
        for (l, (block, layer)) in self.blocks.iter().zip(cache.layers.iter_mut()).enumerate() {
            let stored_pos = layer.next_position();
            if stored_pos >= self.config.max_positions {
                return Err(DecoderError::PositionOverflow {
                    pos: stored_pos,
                    max: self.config.max_positions,
                });
            }
            let normed = rms_norm(&h);
            let q = matvec(&normed, &block.wq);
            let k = matvec(&normed, &block.wk);
            let v = matvec(&normed, &block.wv);
            layer.push(&k, &v, stored_pos, Segment::Generated)?;

            let (view, query_pos) = match exclude {
                None => (
                    KeyView {
                        layer: &*layer,
                        rows: (0..layer.len()).collect(),
                        positions: layer.position_ids().to_vec(),
                    },
                    stored_pos,
                ),
                Some(masks) => {
                    let mask = masks.get(l).map(Vec::as_slice).unwrap_or(&[]);
                    let rows: Vec<usize> = (0..layer.len())
                        .filter(|&j| !mask.get(j).copied().unwrap_or(false))
                        .collect();
                    let positions: Vec<usize> = (0..rows.len()).collect();
                    let query_pos = rows.len() - 1;
                    (
                        KeyView {
                            layer: &*layer,
                            rows,
                            positions,
                        },
                        query_pos,
                    )
                }
            };
            let attn = self.attend(&q, query_pos, &view);
            add_assign(&mut h, &matvec(&attn, &block.wo));
            self.mlp(block, &mut h);
        }
        Ok(StepOutput {
            logits: self.head(&h),
            hidden: h,
        })
    }

    /// Greedy generation of `steps` tokens after a prefill: the first token
    /// comes from the prefill logits, each later one from a decode step.
    pub fn greedy_decode(
        &self,
        cache: &mut LayeredKvCache,
        prefill_logits: &[f64],
        steps: usize,
    ) -> Result<Vec<usize>> {
        let mut tokens = Vec::with_capacity(steps);
        if steps == 0 {
            return Ok(tokens);
        }
        tokens.push(greedy(prefill_logits));
        while tokens.len() < steps {
            let prev = *tokens.last().expect("non-empty");
            let out = self.decode_step(cache, self.token_embedding(prev))?;
            tokens.push(greedy(&out.logits));
        }
        Ok(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            mlp_dim: 16,
            vocab: 32,
            seed: 42,
            max_positions: 64,
        }
    }

    fn random_seq(seed: u64, len: usize, d: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Mat::new(len, d, data).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.heads = 3;
        assert!(Decoder::new(c).is_err());
        let mut c = small();
        c.layers = 0;
        assert!(matches!(
            Decoder::new(c),
            Err(DecoderError::InvalidConfig(_))
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Decoder::new(small()).unwrap().weight_checksum();
        let b = Decoder::new(small()).unwrap().weight_checksum();
        assert_eq!(a, b);
        let mut c = small();
        c.seed = 43;
        assert_ne!(a, Decoder::new(c).unwrap().weight_checksum());
    }

    #[test]
    fn length_one_prefill() {
        let dec = Decoder::new(small()).unwrap();
        let seq = random_seq(1, 1, 8);
        let out = dec
            .prefill(&seq, &SegmentedSequence::from_lengths(0, 1, 0))
            .unwrap();
        assert!(out.cache.layers.iter().all(|l| l.len() == 1));
        assert_eq!(out.trace.layers.len(), 2);
        assert_eq!(out.trace.layers[0], seq);
        assert_eq!(out.logits.len(), 32);
    }

    #[test]
    fn prefill_rejects_bad_input() {
        let mut c = small();
        c.max_positions = 4;
        let dec = Decoder::new(c).unwrap();
        let seq = random_seq(1, 5, 8);
        assert!(matches!(
            dec.prefill(&seq, &SegmentedSequence::from_lengths(1, 3, 1)),
            Err(DecoderError::PositionOverflow { .. })
        ));
        assert!(matches!(
            dec.prefill(&seq, &SegmentedSequence::from_lengths(1, 1, 1)),
            Err(DecoderError::SpanMismatch { .. })
        ));
        assert!(matches!(
            dec.prefill(
                &random_seq(1, 2, 4),
                &SegmentedSequence::from_lengths(1, 1, 0)
            ),
            Err(DecoderError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn decode_overflows_at_max_positions() {
        let mut c = small();
        c.max_positions = 3;
        let dec = Decoder::new(c).unwrap();
        let seq = random_seq(2, 3, 8);
        let mut out = dec
            .prefill(&seq, &SegmentedSequence::from_lengths(1, 1, 1))
            .unwrap();
        let e = dec.token_embedding(0).to_vec();
        assert!(matches!(
            dec.decode_step(&mut out.cache, &e),
            Err(DecoderError::PositionOverflow { pos: 3, max: 3 })
        ));
    }

    #[test]
    fn incremental_matches_full_prefill() {
        let dec = Decoder::new(DecoderConfig::default()).unwrap();
        let seq = random_seq(3, 12, 64);
        let full = dec
            .prefill(&seq, &SegmentedSequence::from_lengths(2, 8, 2))
            .unwrap();
        for split in [1, 5, 11] {
            let prefix = seq.slice_rows(0, split);
            let mut out = dec
                .prefill(&prefix, &SegmentedSequence::from_lengths(0, split, 0))
                .unwrap();
            let mut last = out.last_hidden.clone();
            for pos in split..12 {
                last = dec
                    .decode_step(&mut out.cache, seq.row(pos))
                    .unwrap()
                    .hidden;
            }
            for (a, b) in last.iter().zip(&full.last_hidden) {
                assert!((a - b).abs() < 1e-5, "split {split}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn decode_appends_generated_entries() {
        let dec = Decoder::new(small()).unwrap();
        let seq = random_seq(4, 6, 8);
        let mut out = dec
            .prefill(&seq, &SegmentedSequence::from_lengths(2, 2, 2))
            .unwrap();
        let tokens = dec.greedy_decode(&mut out.cache, &out.logits, 4).unwrap();
        assert_eq!(tokens.len(), 4);
        for l in &out.cache.layers {
            assert_eq!(l.len(), 9);
            assert_eq!(l.count(Segment::Generated), 3);
        }
    }

    #[test]
    fn empty_exclusion_matches_plain_decode() {
        let dec = Decoder::new(small()).unwrap();
        let seq = random_seq(5, 6, 8);
        let out = dec
            .prefill(&seq, &SegmentedSequence::from_lengths(2, 2, 2))
            .unwrap();
        let e = dec.token_embedding(3).to_vec();
        let mut a = out.cache.clone();
        let mut b = out.cache.clone();
        let x = dec.decode_step(&mut a, &e).unwrap();
        let y = dec.decode_step_excluding(&mut b, &e, &[]).unwrap();
        assert_eq!(x.logits, y.logits);
    }

    #[test]
    fn greedy_ties_to_lowest() {
        assert_eq!(greedy(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(greedy(&[2.0]), 0);
    }
}
