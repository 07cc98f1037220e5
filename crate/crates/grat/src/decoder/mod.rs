//! Gated residual attention decoder.
//!
//! An L-layer transformer decoder over a fixed set of N instance queries.
//! Each layer cross-attends to the current frame's feature tokens, decides
//! per query whether the fresh query is worth keeping (the gate), falls back
//! to the previous frame's final query where it is not, and runs
//! self-attention restricted by a gate-derived mask. Queries whose gate is
//! closed under the row-bypass mask skip self-attention and the feed-forward
//! block entirely, so the fallback row survives the layer bit-exactly.

mod layer;
pub(crate) mod params;

pub use layer::{
    cross_attention, decoder_forward, decoder_layer_forward, feed_forward, masked_self_attention,
    DecoderOutput,
};
pub use params::{AttnParams, DecoderParams, FfnParams, LayerParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::DEFAULT_TAU;
use crate::tensor::Tensor;

/// Which query-to-query attention edges survive, as a function of gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskConfig {
    /// No masking; gates only drive the residual selection.
    AllToAll,
    /// Closed-gate queries do not see each other (diagonal kept).
    AllButZeroToZero,
    /// Closed-gate queries do not see open-gate queries.
    AllButZeroToOne,
    /// Closed-gate queries drop out of the query set entirely (row
    /// bypass); open-gate queries attend to the global key set.
    OneToZero,
}

impl MaskConfig {
    pub const ALL: [MaskConfig; 4] = [
        MaskConfig::AllToAll,
        MaskConfig::AllButZeroToZero,
        MaskConfig::AllButZeroToOne,
        MaskConfig::OneToZero,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MaskConfig::AllToAll => "all_to_all",
            MaskConfig::AllButZeroToZero => "all_but_zero_to_zero",
            MaskConfig::AllButZeroToOne => "all_but_zero_to_one",
            MaskConfig::OneToZero => "one_to_zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MaskConfig::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown mask_config '{s}'")))
    }
}

/// Where the gated residual sits relative to the attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePlacement {
    /// One gate per frame, after the full decoder stack.
    InterFrame,
    /// One gate per layer, after the layer's feed-forward block.
    InterLayer,
    /// One gate per layer, between cross- and self-attention (default).
    InterAttention,
}

impl GatePlacement {
    pub const ALL: [GatePlacement; 3] = [
        GatePlacement::InterFrame,
        GatePlacement::InterLayer,
        GatePlacement::InterAttention,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GatePlacement::InterFrame => "inter_frame",
            GatePlacement::InterLayer => "inter_layer",
            GatePlacement::InterAttention => "inter_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        GatePlacement::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown gate_placement '{s}'")))
    }
}

/// Static decoder shape and gating choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Instance query count.
    pub n: usize,
    /// Model width.
    pub c: usize,
    /// Decoder layer count.
    pub l: usize,
    /// Attention head count; must divide `c`.
    pub h: usize,
    /// Gate temperature.
    pub tau: f64,
    pub mask_config: MaskConfig,
    pub gate_placement: GatePlacement,
    /// With gating disabled the decoder is the plain (vanilla) baseline:
    /// every query refreshes every frame and attention is unmasked.
    pub gating_enabled: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n: 8,
            c: 32,
            l: 3,
            h: 4,
            tau: DEFAULT_TAU,
            mask_config: MaskConfig::OneToZero,
            gate_placement: GatePlacement::InterAttention,
            gating_enabled: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.l == 0 || self.c == 0 || self.h == 0 {
            return Err(Error::BadConfig(format!(
                "decoder dims must be positive (n={}, c={}, l={}, h={})",
                self.n, self.c, self.l, self.h
            )));
        }
        if self.c % self.h != 0 {
            return Err(Error::BadConfig(format!(
                "head count {} must divide width {}",
                self.h, self.c
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::BadTemperature { tau: self.tau });
        }
        Ok(())
    }

    /// Per-head width.
    pub fn head_dim(&self) -> usize {
        self.c / self.h
    }
}

/// A frame's worth of query vectors with its position in the clip.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// [N, C] query matrix.
    pub queries: Tensor,
    pub frame: usize,
}

/// Encoded frame tokens, [T, C].
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub tokens: Tensor,
}

impl FrameFeatures {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::BadShape {
                op: "frame_features",
                shape: tokens.shape().to_vec(),
                reason: "rank-2 token matrix required",
            });
        }
        Ok(FrameFeatures { tokens })
    }
}

/// Which query-to-query edges are admissible, plus which query rows skip
/// self-attention entirely. `allowed` is row-major N×N; entry (i, j) is
/// whether query i may attend to key j. Bypassed rows never reach softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    pub allowed: Vec<bool>,
    pub bypass_rows: Vec<bool>,
}

impl AttentionMask {
    /// Additive mask entry as conventionally written: 0 for admissible,
    /// −∞ for forbidden. Only used by oracles; the forward path works
    /// with the boolean form directly.
    pub fn additive(&self, i: usize, j: usize) -> f64 {
        if self.allowed[i * self.n + j] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn is_bypass(&self, i: usize) -> bool {
        self.bypass_rows[i]
    }

    /// Indices of rows that participate in self-attention.
    pub fn active_rows(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| !self.bypass_rows[i]).collect()
    }
}

/// Derives the self-attention mask from the hard gate bits.
pub fn build_attention_mask(gates: &[bool], mask_config: MaskConfig) -> AttentionMask {
    let n = gates.len();
    let mut allowed = vec![true; n * n];
    let mut bypass_rows = vec![false; n];
    match mask_config {
        MaskConfig::AllToAll => {}
        MaskConfig::AllButZeroToZero => {
            for i in 0..n {
                for j in 0..n {
                    if i != j && !gates[i] && !gates[j] {
                        allowed[i * n + j] = false;
                    }
                }
            }
        }
        MaskConfig::AllButZeroToOne => {
            for i in 0..n {
                for j in 0..n {
                    if !gates[i] && gates[j] {
                        allowed[i * n + j] = false;
                    }
                }
            }
        }
        MaskConfig::OneToZero => {
            // Closed rows leave the query set; open rows keep the global
            // key set, closed rows included.
            for (i, &g) in gates.iter().enumerate() {
                bypass_rows[i] = !g;
            }
        }
    }
    AttentionMask { n, allowed, bypass_rows }
}
