//! Per-layer key/value storage with segment tags and position ids.

use std::mem::size_of;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BYTES_PER_REAL: usize = size_of::<f64>();

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("entry width {got} does not match heads*head_dim = {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("position {pos} does not follow last position {last}")]
    NonIncreasingPosition { last: usize, pos: usize },
    #[error("segments must be contiguous and cover [0, {total})")]
    BadSegments { total: usize },
}

/// Which part of the prompt an entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    System,
    Visual,
    Instruction,
    Generated,
}

/// System, visual and instruction spans of a prefill sequence, in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedSequence {
    pub system: Range<usize>,
    pub visual: Range<usize>,
    pub instruction: Range<usize>,
    pub total_len: usize,
}

impl SegmentedSequence {
    pub fn from_lengths(system: usize, visual: usize, instruction: usize) -> Self {
        Self {
            system: 0..system,
            visual: system..system + visual,
            instruction: system + visual..system + visual + instruction,
            total_len: system + visual + instruction,
        }
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let ok = self.system.start == 0
            && self.system.end == self.visual.start
            && self.visual.end == self.instruction.start
            && self.instruction.end == self.total_len
            && self.system.start <= self.system.end
            && self.visual.start <= self.visual.end
            && self.instruction.start <= self.instruction.end;
        if ok {
            Ok(())
        } else {
            Err(CacheError::BadSegments {
                total: self.total_len,
            })
        }
    }

    pub fn segment_at(&self, pos: usize) -> Segment {
        if self.system.contains(&pos) {
            Segment::System
        } else if self.visual.contains(&pos) {
            Segment::Visual
        } else if self.instruction.contains(&pos) {
            Segment::Instruction
        } else {
            Segment::Generated
        }
    }
}

/// Keys and values of one decoder layer, one row of `heads·head_dim` per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheLayer {
    heads: usize,
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    position_ids: Vec<usize>,
    tags: Vec<Segment>,
}

impl KvCacheLayer {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        Self {
            heads,
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
            position_ids: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    pub fn push(
        &mut self,
        key: &[f64],
        value: &[f64],
        position: usize,
        tag: Segment,
    ) -> Result<(), CacheError> {
        let width = self.width();
        for got in [key.len(), value.len()] {
            if got != width {
                return Err(CacheError::WidthMismatch {
                    expected: width,
                    got,
                });
            }
        }
        if let Some(&last) = self.position_ids.last() {
            if position <= last {
                return Err(CacheError::NonIncreasingPosition {
                    last,
                    pos: position,
                });
            }
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.position_ids.push(position);
        self.tags.push(tag);
        Ok(())
    }

    pub fn key(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.keys[i * w..(i + 1) * w]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn position_ids(&self) -> &[usize] {
        &self.position_ids
    }

    pub fn tags(&self) -> &[Segment] {
        &self.tags
    }

    /// Position the next appended entry should take.
    pub fn next_position(&self) -> usize {
        self.position_ids.last().map_or(0, |p| p + 1)
    }

    pub fn count(&self, segment: Segment) -> usize {
        self.tags.iter().filter(|&&t| t == segment).count()
    }

    pub fn bytes(&self) -> usize {
        self.len() * 2 * self.width() * BYTES_PER_REAL
    }

    /// Keeps only entries for which `keep(tag)` holds, preserving order.
    pub fn retain_segments(&mut self, mut keep: impl FnMut(Segment) -> bool) {
        let width = self.width();
        let mut write = 0;
        for read in 0..self.len() {
            if !keep(self.tags[read]) {
                continue;
            }
            if write != read {
                self.keys
                    .copy_within(read * width..(read + 1) * width, write * width);
                self.values
                    .copy_within(read * width..(read + 1) * width, write * width);
                self.position_ids[write] = self.position_ids[read];
                self.tags[write] = self.tags[read];
            }
            write += 1;
        }
        self.keys.truncate(write * width);
        self.values.truncate(write * width);
        self.position_ids.truncate(write);
        self.tags.truncate(write);
    }

    pub(crate) fn set_position_ids(&mut self, ids: Vec<usize>) {
        debug_assert_eq!(ids.len(), self.len());
        self.position_ids = ids;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredKvCache {
    pub layers: Vec<KvCacheLayer>,
}

impl LayeredKvCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers: vec![KvCacheLayer::new(heads, head_dim); layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(KvCacheLayer::len).sum()
    }

    pub fn bytes(&self) -> usize {
        self.layers.iter().map(KvCacheLayer::bytes).sum()
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSnapshot {
                    system: l.count(Segment::System),
                    visual: l.count(Segment::Visual),
                    instruction: l.count(Segment::Instruction),
                    generated: l.count(Segment::Generated),
                    bytes: l.bytes(),
                })
                .collect(),
        }
    }
}

/// Entry counts per segment and byte footprint of each layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub layers: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub system: usize,
    pub visual: usize,
    pub instruction: usize,
    pub generated: usize,
    pub bytes: usize,
}
