//! Decoder forward passes.
//!
//! Layer ordering is pre-norm throughout: each block computes
//! `x + Block(LayerNorm(x))`, with attention scores scaled by 1/√(C/H) and
//! a feed-forward hidden width of 4·C.
//!
//! The gated layer pipeline (gate between cross- and self-attention):
//!   1. cross-attend to the frame tokens,
//!   2. one logit per query from the fresh queries, hardened to a bit,
//!   3. gated residual: closed rows fall back to the previous frame's
//!      final queries,
//!   4. self-attention under the gate-derived mask — bypassed rows are
//!      excluded from the query set but stay visible as keys,
//!   5. feed-forward, skipped for bypassed rows so their fallback values
//!      survive the layer bit-exactly.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gating::{
    deterministic_bit, gumbel_softmax, sample_gumbel_pair, straight_through_gates, GateMode,
    GateSample,
};
use crate::tensor::{Tape, Tensor};

use super::{
    build_attention_mask, AttentionMask, AttnParams, DecoderConfig, DecoderParams, FfnParams,
    LayerParams, MaskConfig,
};

/// Final queries for one frame plus every gate decision made on the way.
/// `gates` holds one inner vector per gated stage (layers for the
/// per-layer placements, a single entry for the per-frame placement);
/// ungated runs return no samples.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub queries: Tensor,
    pub gates: Vec<Vec<GateSample>>,
}

/// Multi-head attention of query rows over `keys` rows (shared K/V
/// source), with optional per-row key admissibility. `allowed` is
/// row-major [rows(q), rows(keys)]; `None` means unrestricted.
fn attention(
    tape: &mut Tape,
    q_src: &Tensor,
    kv_src: &Tensor,
    p: &AttnParams,
    heads: usize,
    allowed: Option<&[bool]>,
) -> Result<Tensor> {
    let c = q_src.shape()[1];
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(q_src, &p.w_q)?;
    let q = tape.add_row(&q, &p.b_q)?;
    let k = tape.matmul(kv_src, &p.w_k)?;
    let k = tape.add_row(&k, &p.b_k)?;
    let v = tape.matmul(kv_src, &p.w_v)?;
    let v = tape.add_row(&v, &p.b_v)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(&q, h * dh, dh)?;
        let kh = tape.slice_cols(&k, h * dh, dh)?;
        let vh = tape.slice_cols(&v, h * dh, dh)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scores = tape.scale(&scores, scale)?;
        let probs = match allowed {
            Some(a) => tape.masked_softmax_rows(&scores, a)?,
            None => tape.softmax_rows(&scores)?,
        };
        head_outs.push(tape.matmul(&probs, &vh)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let concat = tape.concat_cols(&refs)?;
    let out = tape.matmul(&concat, &p.w_o)?;
    tape.add_row(&out, &p.b_o)
}

/// Queries attend to the frame's feature tokens: `x + Attn(LN(x), tokens)`.
pub fn cross_attention(
    tape: &mut Tape,
    x: &Tensor,
    features: &Tensor,
    p: &AttnParams,
    heads: usize,
) -> Result<Tensor> {
    if x.rank() != 2 || features.rank() != 2 || x.shape()[1] != features.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            lhs: x.shape().to_vec(),
            rhs: features.shape().to_vec(),
        });
    }
    let ln = tape.layer_norm(x, &p.ln_g, &p.ln_b)?;
    let out = attention(tape, &ln, features, p, heads, None)?;
    tape.add(x, &out)
}

/// Self-attention under a gate-derived mask. Bypassed rows are returned
/// unchanged (they never enter layer norm, projections, or softmax);
/// active rows attend over the full key set filtered by `mask.allowed`.
pub fn masked_self_attention(
    tape: &mut Tape,
    x: &Tensor,
    mask: &AttentionMask,
    p: &AttnParams,
    heads: usize,
) -> Result<Tensor> {
    let n = x.shape()[0];
    if mask.n != n {
        return Err(Error::ShapeMismatch {
            op: "masked_self_attention",
            lhs: x.shape().to_vec(),
            rhs: vec![mask.n, mask.n],
        });
    }
    let active = mask.active_rows();
    if active.is_empty() {
        return Ok(x.clone());
    }
    let ln_all = tape.layer_norm(x, &p.ln_g, &p.ln_b)?;
    if active.len() == n {
        let out = attention(tape, &ln_all, &ln_all, p, heads, Some(&mask.allowed))?;
        return tape.add(x, &out);
    }
    let q_rows = tape.gather_rows(&ln_all, &active)?;
    let sub_allowed: Vec<bool> = active
        .iter()
        .flat_map(|&i| mask.allowed[i * n..(i + 1) * n].iter().copied())
        .collect();
    let out = attention(tape, &q_rows, &ln_all, p, heads, Some(&sub_allowed))?;
    let x_active = tape.gather_rows(x, &active)?;
    let updated = tape.add(&x_active, &out)?;
    tape.scatter_rows(x, &active, &updated)
}

/// Pre-norm feed-forward block applied to the given rows only; rows
/// outside `active` pass through untouched. `None` means every row.
pub fn feed_forward(
    tape: &mut Tape,
    x: &Tensor,
    p: &FfnParams,
    active: Option<&[usize]>,
) -> Result<Tensor> {
    let n = x.shape()[0];
    let full: Vec<usize>;
    let rows = match active {
        None => {
            full = (0..n).collect();
            &full[..]
        }
        Some(r) => r,
    };
    if rows.is_empty() {
        return Ok(x.clone());
    }
    let (src, partial) = if rows.len() == n {
        (x.clone(), false)
    } else {
        (tape.gather_rows(x, rows)?, true)
    };
    let ln = tape.layer_norm(&src, &p.ln_g, &p.ln_b)?;
    let h = tape.matmul(&ln, &p.w1)?;
    let h = tape.add_row(&h, &p.b1)?;
    let h = tape.relu(&h)?;
    let o = tape.matmul(&h, &p.w2)?;
    let o = tape.add_row(&o, &p.b2)?;
    let updated = tape.add(&src, &o)?;
    if partial {
        tape.scatter_rows(x, rows, &updated)
    } else {
        Ok(updated)
    }
}

/// Draws gate decisions for a column of logits, returning the selector
/// tensor (exact {0,1} values, straight-through gradient in training) and
/// the per-query samples for logging.
fn gate_stage(
    tape: &mut Tape,
    logits: &Tensor,
    tau: f64,
    mode: GateMode,
    noise: &[(f64, f64)],
) -> Result<(Tensor, Vec<GateSample>)> {
    let n = logits.numel();
    match mode {
        GateMode::Soft | GateMode::StraightThrough => {
            if noise.len() != n {
                return Err(Error::BadShape {
                    op: "gate_stage",
                    shape: vec![noise.len()],
                    reason: "one noise pair per query required",
                });
            }
            let diff: Vec<f64> = noise.iter().map(|&(g0, g1)| g1 - g0).collect();
            let gates = if mode == GateMode::StraightThrough {
                straight_through_gates(tape, logits, &diff, tau)?
            } else {
                crate::gating::soft_gates_on_tape(tape, logits, &diff, tau)?
            };
            let samples = logits
                .values()
                .iter()
                .zip(noise)
                .map(|(&logit, &nz)| {
                    Ok(GateSample {
                        logit,
                        noise: nz,
                        soft: gumbel_softmax(logit, nz, tau)?,
                        hard: logit + nz.1 - nz.0 >= 0.0,
                        mode,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((gates, samples))
        }
        GateMode::Deterministic => {
            let bits: Vec<f64> = logits
                .values()
                .iter()
                .map(|&l| if deterministic_bit(l) { 1.0 } else { 0.0 })
                .collect();
            let gates = Tensor::new(bits, logits.shape())?;
            let samples = logits
                .values()
                .iter()
                .map(|&logit| GateSample::deterministic(logit, tau))
                .collect::<Result<Vec<_>>>()?;
            Ok((gates, samples))
        }
    }
}

fn hard_bits(samples: &[GateSample]) -> Vec<bool> {
    samples.iter().map(|s| s.hard).collect()
}

/// The gated residual. Hard modes copy whole rows (no blending, so the
/// fallback survives bit-exactly); soft mode blends
/// `prev + g ⊙ (cur − prev)` rowwise, which is the differentiable
/// relaxation used for end-to-end gradient verification.
fn gate_residual(
    tape: &mut Tape,
    mode: GateMode,
    gates: &Tensor,
    cur: &Tensor,
    prev: &Tensor,
) -> Result<Tensor> {
    if mode == GateMode::Soft {
        let dx = tape.sub(cur, prev)?;
        let scaled = tape.row_scale(&dx, gates)?;
        tape.add(prev, &scaled)
    } else {
        tape.select_rows(gates, cur, prev)
    }
}

/// One gated decoder layer (gate between cross- and self-attention).
/// `noise` must hold one Gumbel pair per query in the noisy modes; it is
/// ignored in deterministic mode and when gating is disabled.
pub fn decoder_layer_forward(
    tape: &mut Tape,
    x: &Tensor,
    features: &Tensor,
    q_prev_final: &Tensor,
    lp: &LayerParams,
    config: &DecoderConfig,
    mode: GateMode,
    noise: &[(f64, f64)],
) -> Result<(Tensor, Vec<GateSample>)> {
    let x1 = cross_attention(tape, x, features, &lp.cross, config.h)?;
    if !config.gating_enabled {
        let mask = build_attention_mask(&vec![true; config.n], MaskConfig::AllToAll);
        let x3 = masked_self_attention(tape, &x1, &mask, &lp.self_attn, config.h)?;
        let x4 = feed_forward(tape, &x3, &lp.ffn, None)?;
        return Ok((x4, Vec::new()));
    }
    let raw = tape.matmul(&x1, &lp.gate_w)?;
    let logits = tape.add_row(&raw, &lp.gate_b)?;
    let (gates, samples) = gate_stage(tape, &logits, config.tau, mode, noise)?;
    let mask = build_attention_mask(&hard_bits(&samples), config.mask_config);
    let x2 = gate_residual(tape, mode, &gates, &x1, q_prev_final)?;
    let x3 = masked_self_attention(tape, &x2, &mask, &lp.self_attn, config.h)?;
    let active = mask.active_rows();
    let x4 = feed_forward(tape, &x3, &lp.ffn, Some(&active))?;
    Ok((x4, samples))
}

/// One ungated layer: cross-attention, unmasked self-attention,
/// feed-forward — the building block of the vanilla baseline and of the
/// placements that gate outside the layer body.
fn plain_layer(
    tape: &mut Tape,
    x: &Tensor,
    features: &Tensor,
    lp: &LayerParams,
    config: &DecoderConfig,
) -> Result<Tensor> {
    let x1 = cross_attention(tape, x, features, &lp.cross, config.h)?;
    let mask = build_attention_mask(&vec![true; config.n], MaskConfig::AllToAll);
    let x2 = masked_self_attention(tape, &x1, &mask, &lp.self_attn, config.h)?;
    feed_forward(tape, &x2, &lp.ffn, None)
}

/// Full decoder pass for one frame. The frame's input queries and the
/// gated-residual fallback are both the previous frame's final-layer
/// queries (the learned initial embeddings at the first frame).
///
/// Placements:
/// - between cross- and self-attention: L gated layers;
/// - between layers: L ungated layers, each followed by a gate choosing
///   the layer output vs the fallback;
/// - between frames: L ungated layers, one gate at the very end (the last
///   layer's gate head is reused, since only one head is meaningful).
pub fn decoder_forward(
    tape: &mut Tape,
    features: &Tensor,
    q_prev_final: &Tensor,
    params: &DecoderParams,
    config: &DecoderConfig,
    mode: GateMode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<DecoderOutput> {
    config.validate()?;
    if params.layers.len() != config.l {
        return Err(Error::BadConfig(format!(
            "parameter set has {} layers, config wants {}",
            params.layers.len(),
            config.l
        )));
    }
    let needs_noise = config.gating_enabled && mode != GateMode::Deterministic;
    let draw = |rng: &mut Option<&mut ChaCha8Rng>| -> Result<Vec<(f64, f64)>> {
        if !needs_noise {
            return Ok(Vec::new());
        }
        match rng {
            Some(r) => Ok((0..config.n).map(|_| sample_gumbel_pair(r)).collect()),
            None => Err(Error::BadConfig(
                "straight-through gating needs a noise source".into(),
            )),
        }
    };

    let mut x = q_prev_final.clone();
    let mut gates: Vec<Vec<GateSample>> = Vec::new();
    use super::GatePlacement::*;
    match config.gate_placement {
        InterAttention => {
            for lp in &params.layers {
                let noise = draw(&mut rng)?;
                let (next, samples) =
                    decoder_layer_forward(tape, &x, features, q_prev_final, lp, config, mode, &noise)?;
                x = next;
                if !samples.is_empty() {
                    gates.push(samples);
                }
            }
        }
        InterLayer => {
            for lp in &params.layers {
                let x3 = plain_layer(tape, &x, features, lp, config)?;
                if config.gating_enabled {
                    let raw = tape.matmul(&x3, &lp.gate_w)?;
                    let logits = tape.add_row(&raw, &lp.gate_b)?;
                    let noise = draw(&mut rng)?;
                    let (g, samples) = gate_stage(tape, &logits, config.tau, mode, &noise)?;
                    x = gate_residual(tape, mode, &g, &x3, q_prev_final)?;
                    gates.push(samples);
                } else {
                    x = x3;
                }
            }
        }
        InterFrame => {
            for lp in &params.layers {
                x = plain_layer(tape, &x, features, lp, config)?;
            }
            if config.gating_enabled {
                let lp = params.layers.last().expect("validated l >= 1");
                let raw = tape.matmul(&x, &lp.gate_w)?;
                let logits = tape.add_row(&raw, &lp.gate_b)?;
                let noise = draw(&mut rng)?;
                let (g, samples) = gate_stage(tape, &logits, config.tau, mode, &noise)?;
                x = gate_residual(tape, mode, &g, &x, q_prev_final)?;
                gates.push(samples);
            }
        }
    }
    Ok(DecoderOutput { queries: x, gates })
}
