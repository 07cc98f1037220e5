//! Post-run accounting: gate-activation series, track quality metrics
//! (identity switches, precision/recall, duplicate rate), and exact
//! attention FLOPs counting.
//!
//! Everything here is pure post-processing over logs — no tapes, no
//! randomness — so identical inputs always give identical numbers.

use serde::{Deserialize, Serialize};

use crate::decoder::{GatePlacement, MaskConfig};
use crate::gating::GateTraceRow;
use crate::propagation::{ModelConfig, Prediction};
use crate::synthworld::VideoClip;

/// Default center-distance threshold (scene units) for counting a
/// prediction as having found a ground-truth instance.
pub const MATCH_THRESHOLD: f64 = 0.1;

// ── gate activation series ─────────────────────────────────────────────

/// Activation fraction of one (frame, gated stage) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerActivation {
    pub frame: usize,
    pub layer: usize,
    pub fraction: f64,
}

/// Activation fraction of one frame across all gated stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameActivation {
    pub frame: usize,
    pub fraction: f64,
}

/// Per-frame and per-(frame, layer) gate activation series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub per_frame: Vec<FrameActivation>,
    pub per_layer: Vec<LayerActivation>,
}

impl GateStats {
    /// Mean activation over the whole log (1.0 for an empty log: an
    /// ungated run updates everything).
    pub fn mean(&self) -> f64 {
        if self.per_frame.is_empty() {
            return 1.0;
        }
        self.per_frame.iter().map(|f| f.fraction).sum::<f64>() / self.per_frame.len() as f64
    }

    /// Mean activation over a frame range (inclusive bounds), for
    /// comparing shock windows against quiet stretches.
    pub fn mean_over(&self, from: usize, to: usize) -> f64 {
        let rows: Vec<f64> = self
            .per_frame
            .iter()
            .filter(|f| f.frame >= from && f.frame <= to)
            .map(|f| f.fraction)
            .collect();
        if rows.is_empty() {
            return 1.0;
        }
        rows.iter().sum::<f64>() / rows.len() as f64
    }

    /// "frame,layer,active_fraction" rows.
    pub fn csv(&self) -> String {
        let mut out = String::from("frame,layer,active_fraction\n");
        for r in &self.per_layer {
            out.push_str(&format!("{},{},{}\n", r.frame, r.layer, r.fraction));
        }
        out
    }
}

/// Aggregates a gate trace into activation fractions. Frames and layers
/// appear in ascending order; frames absent from the trace are absent
/// from the series.
pub fn gate_activation_stats(trace: &[GateTraceRow]) -> GateStats {
    use std::collections::BTreeMap;
    let mut per_cell: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    let mut per_frame: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for row in trace {
        let cell = per_cell.entry((row.frame, row.layer)).or_insert((0, 0));
        cell.0 += row.hard as usize;
        cell.1 += 1;
        let f = per_frame.entry(row.frame).or_insert((0, 0));
        f.0 += row.hard as usize;
        f.1 += 1;
    }
    GateStats {
        per_frame: per_frame
            .into_iter()
            .map(|(frame, (open, all))| FrameActivation {
                frame,
                fraction: open as f64 / all as f64,
            })
            .collect(),
        per_layer: per_cell
            .into_iter()
            .map(|((frame, layer), (open, all))| LayerActivation {
                frame,
                layer,
                fraction: open as f64 / all as f64,
            })
            .collect(),
    }
}

// ── matching and track metrics ─────────────────────────────────────────

/// Greedy nearest-center matching of one frame's predictions against the
/// visible ground truth: a (query, instance) pair is eligible when the
/// query claims the instance's class and its center lies within
/// `threshold`; pairs are taken cheapest-first, each side used once.
/// Ties break on distance, then query index, then instance id.
pub fn match_frame(
    preds: &[Prediction],
    clip: &VideoClip,
    frame: usize,
    threshold: f64,
) -> Vec<(usize, usize)> {
    let visible = clip.visible_at(frame);
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (q, p) in preds.iter().enumerate() {
        if !p.is_object() {
            continue;
        }
        for (track, center, _) in &visible {
            if p.argmax() != track.class - 1 {
                continue;
            }
            let d = ((p.center[0] - center[0]).powi(2) + (p.center[1] - center[1]).powi(2)).sqrt();
            if d <= threshold {
                candidates.push((d, q, track.id));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("distances are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_q = std::collections::HashSet::new();
    let mut used_i = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for (_, q, id) in candidates {
        if used_q.contains(&q) || used_i.contains(&id) {
            continue;
        }
        used_q.insert(q);
        used_i.insert(id);
        pairs.push((q, id));
    }
    pairs
}

/// Number of identity switches: frames where a ground-truth instance's
/// matched query differs from the query it was last matched to. Input is
/// one matched-pair list per frame, in frame order.
pub fn id_switches(matches_per_frame: &[Vec<(usize, usize)>]) -> usize {
    let mut last: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut switches = 0;
    for frame in matches_per_frame {
        for &(q, id) in frame {
            if let Some(&prev) = last.get(&id) {
                if prev != q {
                    switches += 1;
                }
            }
            last.insert(id, q);
        }
    }
    switches
}

/// Clip-level detection and tracking quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    /// Mean over frames of TP / claimed-objects (1.0 on frames where
    /// nothing is claimed: the empty-set convention).
    pub precision: f64,
    /// Mean over frames of TP / visible instances (vacuously 1.0 on
    /// frames with no visible instance).
    pub recall: f64,
    /// Fraction of frames where at least two claiming queries fall on
    /// the same instance (within threshold, agreeing class).
    pub duplicate_rate: f64,
    pub id_switches: usize,
}

impl TrackMetrics {
    pub const CSV_HEADER: &'static str = "precision,recall,duplicate_rate,id_switches";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.precision, self.recall, self.duplicate_rate, self.id_switches)
    }
}

/// Computes precision, recall, duplicate rate, and identity switches for
/// a full clip run under the stated matching rule.
pub fn track_metrics(
    preds_per_frame: &[Vec<Prediction>],
    clip: &VideoClip,
    threshold: f64,
) -> TrackMetrics {
    let frames = preds_per_frame.len();
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut dup_frames = 0usize;
    let mut all_matches = Vec::with_capacity(frames);
    for (f, preds) in preds_per_frame.iter().enumerate() {
        let visible = clip.visible_at(f);
        let claimed: Vec<usize> =
            (0..preds.len()).filter(|&q| preds[q].is_object()).collect();
        let pairs = match_frame(preds, clip, f, threshold);
        let tp = pairs.len() as f64;
        precision_sum += if claimed.is_empty() { 1.0 } else { tp / claimed.len() as f64 };
        recall_sum += if visible.is_empty() { 1.0 } else { tp / visible.len() as f64 };
        let duplicated = visible.iter().any(|(track, center, _)| {
            let eligible = claimed
                .iter()
                .filter(|&&q| {
                    let p = &preds[q];
                    p.argmax() == track.class - 1
                        && ((p.center[0] - center[0]).powi(2) + (p.center[1] - center[1]).powi(2))
                            .sqrt()
                            <= threshold
                })
                .count();
            eligible >= 2
        });
        if duplicated {
            dup_frames += 1;
        }
        all_matches.push(pairs);
    }
    let n = frames.max(1) as f64;
    TrackMetrics {
        precision: precision_sum / n,
        recall: recall_sum / n,
        duplicate_rate: dup_frames as f64 / n,
        id_switches: id_switches(&all_matches),
    }
}

// ── FLOPs accounting ───────────────────────────────────────────────────

/// Exact FLOP counts of one decoder layer at one frame, split by stage.
/// Convention: one multiply-accumulate is 2 FLOPs, so a [m,k]×[k,n]
/// matmul costs 2·m·k·n.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    /// Active (non-bypassed) query rows in this layer's self-attention.
    pub k: usize,
    pub q_proj: u64,
    pub kv_proj: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub out_proj: u64,
    pub cross_attn: u64,
    pub ffn: u64,
}

impl LayerFlops {
    /// The parts of self-attention that scale with the active-row count.
    pub fn row_dependent(&self) -> u64 {
        self.q_proj + self.scores + self.weighted_sum + self.out_proj
    }

    pub fn total(&self) -> u64 {
        self.row_dependent() + self.kv_proj + self.cross_attn + self.ffn
    }
}

/// Per-frame layer breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFlops {
    pub frame: usize,
    pub layers: Vec<LayerFlops>,
}

impl FrameFlops {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.total()).sum()
    }
}

/// Whole-run FLOPs report, with the ungated decoder as the yardstick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub frames: Vec<FrameFlops>,
    pub total: u64,
    pub ungated_total: u64,
    /// total / ungated_total.
    pub ratio: f64,
}

impl FlopsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> crate::error::Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::error::Error::BadFile(e.to_string()))
    }
}

/// One decoder layer's exact counts with `k` of `n` query rows active,
/// width `c`, and `t_tokens` feature tokens for cross-attention.
///
/// Self-attention: q_proj/out_proj run on k rows (2·k·c·c each); scores
/// and the weighted sum touch all n keys per active row (2·k·n·c each);
/// kv_proj always projects the full n rows — the key set is global — and
/// is skipped only when k = 0, since nothing consumes the keys. The FFN
/// (c → 4c → c) runs on active rows only. Cross-attention always runs on
/// all n rows (the gate sits downstream of it). Head count cancels out
/// of every term.
pub fn layer_flops(layer: usize, k: usize, n: usize, c: usize, t_tokens: usize) -> LayerFlops {
    let (k64, n64, c64, t64) = (k as u64, n as u64, c as u64, t_tokens as u64);
    let cross = 2 * n64 * c64 * c64        // q_proj
        + 2 * (2 * t64 * c64 * c64)        // kv_proj over feature tokens
        + 2 * n64 * t64 * c64              // scores
        + 2 * n64 * t64 * c64              // weighted sum
        + 2 * n64 * c64 * c64; // out_proj
    LayerFlops {
        layer,
        k,
        q_proj: 2 * k64 * c64 * c64,
        kv_proj: if k == 0 { 0 } else { 2 * (2 * n64 * c64 * c64) },
        scores: 2 * k64 * n64 * c64,
        weighted_sum: 2 * k64 * n64 * c64,
        out_proj: 2 * k64 * c64 * c64,
        cross_attn: cross,
        ffn: 16 * k64 * c64 * c64,
    }
}

/// Exact decoder FLOPs for a run described by its per-frame, per-layer
/// active-row counts (`per_layer_k[frame][layer]`).
pub fn flops_count(
    n: usize,
    c: usize,
    t_tokens: usize,
    per_layer_k: &[Vec<usize>],
) -> FlopsReport {
    let mut frames = Vec::with_capacity(per_layer_k.len());
    let mut total = 0u64;
    let mut ungated = 0u64;
    for (frame, ks) in per_layer_k.iter().enumerate() {
        let layers: Vec<LayerFlops> = ks
            .iter()
            .enumerate()
            .map(|(l, &k)| layer_flops(l, k, n, c, t_tokens))
            .collect();
        for (l, lf) in layers.iter().enumerate() {
            total += lf.total();
            ungated += layer_flops(l, n, n, c, t_tokens).total();
        }
        frames.push(FrameFlops { frame, layers });
    }
    let ratio = if ungated == 0 { 1.0 } else { total as f64 / ungated as f64 };
    FlopsReport { frames, total, ungated_total: ungated, ratio }
}

/// Derives per-layer active-row counts for a run. Rows are bypassed only
/// in the row-bypass topology with per-layer gates; every other setup
/// computes all N rows, whatever the gates say.
pub fn active_counts_for_run(
    config: &ModelConfig,
    trace: &[GateTraceRow],
    frames: usize,
) -> Vec<Vec<usize>> {
    let d = &config.decoder;
    let bypassing = d.gating_enabled
        && d.mask_config == MaskConfig::OneToZero
        && d.gate_placement == GatePlacement::InterAttention;
    if !bypassing {
        return vec![vec![d.n; d.l]; frames];
    }
    let mut counts = vec![vec![0usize; d.l]; frames];
    for row in trace {
        if row.frame < frames && row.layer < d.l {
            counts[row.frame][row.layer] += row.hard as usize;
        }
    }
    counts
}

/// FLOPs report straight from a model config and a gate trace.
pub fn flops_for_run(config: &ModelConfig, trace: &[GateTraceRow], frames: usize) -> FlopsReport {
    let t_tokens = config.grid * config.grid;
    let counts = active_counts_for_run(config, trace, frames);
    flops_count(config.decoder.n, config.decoder.c, t_tokens, &counts)
}
