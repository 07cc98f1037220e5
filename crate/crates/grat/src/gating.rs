//! Per-query binary relevance gate.
//!
//! A linear head maps a query vector to one logit. During training the gate
//! is sampled with Gumbel noise: the forward pass commits to a hard bit (the
//! argmax of the two perturbed log-probabilities) while the backward pass
//! flows through the temperature-relaxed soft gate — a straight-through
//! estimator, so the gate head learns without any loss term of its own.
//! At inference the gate is deterministic: bit = (logit > 0), no noise.
//!
//! The two-way relaxed gate collapses algebraically: with π₁ = σ(g) and
//! π₀ = 1 − σ(g), log π₁ − log π₀ = g, so
//!     soft = σ((g + n₁ − n₀) / τ)
//! which is the numerically stable form used throughout (no exp overflow).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Default gate temperature.
pub const DEFAULT_TAU: f64 = 2.0 / 3.0;

/// How a gate value is produced from a logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Relaxed value in (0,1); no hard commitment (analysis only).
    Soft,
    /// Hard bit forward, soft gradient backward (training).
    StraightThrough,
    /// Hard bit from the logit sign, no noise, no gradient (inference).
    Deterministic,
}

/// One gate decision with everything needed to audit it.
#[derive(Debug, Clone, Copy)]
pub struct GateSample {
    pub logit: f64,
    /// (noise for the "off" class, noise for the "on" class).
    pub noise: (f64, f64),
    /// Relaxed gate in (0,1).
    pub soft: f64,
    /// Committed bit.
    pub hard: bool,
    pub mode: GateMode,
}

/// One JSONL row of the gate trace an experiment emits.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GateTraceRow {
    pub frame: usize,
    pub layer: usize,
    pub query: usize,
    pub logit: f64,
    pub soft: f64,
    pub hard: u8,
}

/// Gumbel(0,1) variate from a uniform draw, clamped away from {0,1}.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Draws the pair of i.i.d. Gumbel(0,1) noises for one gate decision.
/// Order is fixed (off-class first) so traces are reproducible.
pub fn sample_gumbel_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let g0 = gumbel_from_uniform(rng.gen::<f64>());
    let g1 = gumbel_from_uniform(rng.gen::<f64>());
    (g0, g1)
}

/// Relaxed gate value for a single logit with frozen noise.
pub fn gumbel_softmax(logit: f64, noise: (f64, f64), tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::BadTemperature { tau });
    }
    Ok(stable_sigmoid((logit + noise.1 - noise.0) / tau))
}

/// Hard bit by the Gumbel-Max rule; ties resolve to 1 (propagate current).
pub fn harden_bit(logit: f64, noise: (f64, f64)) -> bool {
    logit + noise.1 - noise.0 >= 0.0
}

/// Inference-time bit: strict sign test on the logit, no noise.
pub fn deterministic_bit(logit: f64) -> bool {
    logit > 0.0
}

impl GateSample {
    /// Draws one noisy gate (training modes). `Soft` keeps the relaxed
    /// value as the decision; `StraightThrough` commits to the hard bit.
    pub fn draw(logit: f64, tau: f64, mode: GateMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        if mode == GateMode::Deterministic {
            return Self::deterministic(logit, tau);
        }
        let noise = sample_gumbel_pair(rng);
        let soft = gumbel_softmax(logit, noise, tau)?;
        Ok(GateSample { logit, noise, soft, hard: harden_bit(logit, noise), mode })
    }

    /// Noise-free gate used at inference.
    pub fn deterministic(logit: f64, tau: f64) -> Result<Self> {
        let soft = gumbel_softmax(logit, (0.0, 0.0), tau)?;
        Ok(GateSample {
            logit,
            noise: (0.0, 0.0),
            soft,
            hard: deterministic_bit(logit),
            mode: GateMode::Deterministic,
        })
    }
}

/// Linear gate head: one logit per query row.
#[derive(Debug, Clone)]
pub struct GateHead {
    /// Weight column [C, 1] so a batch of queries maps by one matmul.
    pub weight: Tensor,
    /// Scalar bias [1].
    pub bias: Tensor,
    pub tau: f64,
}

impl GateHead {
    pub fn new(weight: Tensor, bias: Tensor, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::BadTemperature { tau });
        }
        if weight.rank() != 2 || weight.shape()[1] != 1 {
            return Err(Error::BadShape {
                op: "gate_head",
                shape: weight.shape().to_vec(),
                reason: "weight must be a [C, 1] column",
            });
        }
        if bias.numel() != 1 {
            return Err(Error::BadShape {
                op: "gate_head",
                shape: bias.shape().to_vec(),
                reason: "bias must be a single scalar",
            });
        }
        Ok(GateHead { weight, bias, tau })
    }

    /// Logits for a batch of query rows: x[N, C] → [N, 1].
    pub fn logits(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.weight.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "gate_logit",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let raw = tape.matmul(x, &self.weight)?;
        tape.add_row(&raw, &self.bias)
    }
}

/// Relaxed gates for a column of logits with frozen per-row noise, on tape:
/// soft[i] = σ((logit[i] + diff[i]) / τ) where diff[i] = n₁ − n₀.
pub fn soft_gates_on_tape(
    tape: &mut Tape,
    logits: &Tensor,
    noise_diff: &[f64],
    tau: f64,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::BadTemperature { tau });
    }
    if noise_diff.len() != logits.numel() {
        return Err(Error::BadShape {
            op: "soft_gates",
            shape: vec![noise_diff.len()],
            reason: "one noise difference per logit required",
        });
    }
    let shifted = tape.add_const(logits, noise_diff)?;
    let scaled = tape.scale(&shifted, 1.0 / tau)?;
    tape.sigmoid(&scaled)
}

/// Straight-through gate column: hard bits forward, soft gradient backward.
/// Returns the tape tensor (shape of `logits`) whose values are exactly
/// {0, 1} — directly usable as the row selector of a gated residual.
pub fn straight_through_gates(
    tape: &mut Tape,
    logits: &Tensor,
    noise_diff: &[f64],
    tau: f64,
) -> Result<Tensor> {
    let soft = soft_gates_on_tape(tape, logits, noise_diff, tau)?;
    let hard: Vec<f64> = logits
        .values()
        .iter()
        .zip(noise_diff)
        .map(|(&l, &d)| if l + d >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    tape.straight_through(&soft, &hard)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, stream_rng};
    use crate::tensor::grad_check;

    #[test]
    fn zero_head_maps_everything_to_zero() {
        let mut tape = Tape::new();
        let head = GateHead::new(
            Tensor::new(vec![0.0; 4], &[4, 1]).unwrap(),
            Tensor::new(vec![0.0], &[1]).unwrap(),
            DEFAULT_TAU,
        )
        .unwrap();
        let q = Tensor::new(vec![1.0, -2.0, 3.0, 4.5], &[1, 4]).unwrap();
        let l = head.logits(&mut tape, &q).unwrap();
        assert_eq!(l.values(), &[0.0]);
    }

    #[test]
    fn unit_row_extracts_one_coordinate() {
        let mut tape = Tape::new();
        let mut w = vec![0.0; 5];
        w[2] = 1.0;
        let head = GateHead::new(
            Tensor::new(w, &[5, 1]).unwrap(),
            Tensor::new(vec![0.0], &[1]).unwrap(),
            DEFAULT_TAU,
        )
        .unwrap();
        let mut q = vec![0.0; 5];
        q[2] = 3.2;
        let l = head.logits(&mut tape, &Tensor::new(q, &[1, 5]).unwrap()).unwrap();
        assert_eq!(l.values(), &[3.2]);
    }

    #[test]
    fn logits_match_naive_dot_product() {
        let mut rng = stream_rng(5, stream::PARAM_INIT);
        let c = 8;
        let w: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: f64 = rng.gen_range(-1.0..1.0);
        let q: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let naive: f64 = w.iter().zip(&q).map(|(a, x)| a * x).sum::<f64>() + b;

        let mut tape = Tape::new();
        let head = GateHead::new(
            Tensor::new(w, &[c, 1]).unwrap(),
            Tensor::new(vec![b], &[1]).unwrap(),
            DEFAULT_TAU,
        )
        .unwrap();
        let l = head.logits(&mut tape, &Tensor::new(q, &[1, c]).unwrap()).unwrap();
        assert!((l.values()[0] - naive).abs() < 1e-12);
    }

    #[test]
    fn gumbel_fixed_point_at_one_over_e() {
        let g = gumbel_from_uniform(1.0 / std::f64::consts::E);
        assert!(g.abs() < 1e-12, "got {g}");
    }

    #[test]
    fn gumbel_mean_matches_euler_mascheroni() {
        let mut rng = stream_rng(7, stream::GATE_NOISE);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += gumbel_from_uniform(rng.gen::<f64>());
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5772).abs() < 0.02, "empirical mean {mean}");
    }

    #[test]
    fn gumbel_cdf_at_zero_is_one_over_e() {
        let mut rng = stream_rng(8, stream::GATE_NOISE);
        let n = 100_000;
        let below: usize = (0..n)
            .filter(|_| gumbel_from_uniform(rng.gen::<f64>()) < 0.0)
            .count();
        let p = below as f64 / n as f64;
        assert!((p - 1.0 / std::f64::consts::E).abs() < 0.01, "empirical P(g<0) = {p}");
    }

    #[test]
    fn symmetric_gate_is_half() {
        let v = gumbel_softmax(0.0, (0.0, 0.0), DEFAULT_TAU).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn saturated_logit_pins_gate_to_one() {
        let v = gumbel_softmax(100.0, (3.0, -3.0), DEFAULT_TAU).unwrap();
        assert!(v > 1.0 - 1e-12, "got {v}");
        let w = gumbel_softmax(-100.0, (-3.0, 3.0), DEFAULT_TAU).unwrap();
        assert!(w < 1e-12, "got {w}");
    }

    #[test]
    fn relaxed_gate_matches_two_way_softmax_formula() {
        // Direct evaluation of the two-way relaxed softmax:
        // exp((log π₁ + n₁)/τ) / Σ_k exp((log π_k + n_k)/τ)
        let logit = 1.0;
        let (g0, g1) = (-0.2, 0.3);
        let tau = DEFAULT_TAU;
        let p1 = stable_sigmoid(logit);
        let p0 = 1.0 - p1;
        let a = ((p1.ln() + g1) / tau).exp();
        let b = ((p0.ln() + g0) / tau).exp();
        let oracle = a / (a + b);
        let ours = gumbel_softmax(logit, (g0, g1), tau).unwrap();
        assert!((ours - oracle).abs() < 1e-12, "ours {ours} oracle {oracle}");
    }

    #[test]
    fn rejects_non_positive_temperature() {
        assert!(matches!(
            gumbel_softmax(0.0, (0.0, 0.0), 0.0).unwrap_err(),
            Error::BadTemperature { .. }
        ));
        assert!(matches!(
            gumbel_softmax(0.0, (0.0, 0.0), -1.0).unwrap_err(),
            Error::BadTemperature { .. }
        ));
    }

    #[test]
    fn noise_overrides_neutral_logit() {
        // π₁ = π₀ at logit 0, so the bit follows the larger noise
        assert!(harden_bit(0.0, (0.0, 2.0)));
        assert!(!harden_bit(0.0, (2.0, 0.0)));
    }

    #[test]
    fn deterministic_mode_thresholds_at_zero() {
        assert!(!deterministic_bit(-0.3));
        assert!(deterministic_bit(0.3));
        // exactly zero stays closed: strict sign test
        assert!(!deterministic_bit(0.0));
        let s = GateSample::deterministic(-0.3, DEFAULT_TAU).unwrap();
        assert!(!s.hard);
        assert_eq!(s.noise, (0.0, 0.0));
    }

    #[test]
    fn hard_bit_is_argmax_of_perturbed_log_probs() {
        // The committed bit must equal the argmax over
        // {log π₀ + n₀, log π₁ + n₁} for any τ — τ only shapes the
        // relaxation, never the decision.
        let mut rng = stream_rng(9, stream::GATE_NOISE);
        for _ in 0..1000 {
            let logit: f64 = rng.gen_range(-4.0..4.0);
            let noise = sample_gumbel_pair(&mut rng);
            let p1 = stable_sigmoid(logit);
            let argmax_is_one = p1.ln() + noise.1 >= (1.0 - p1).ln() + noise.0;
            assert_eq!(harden_bit(logit, noise), argmax_is_one);
            for tau in [2.0 / 3.0, 0.1, 3.0] {
                let s = GateSample {
                    logit,
                    noise,
                    soft: gumbel_softmax(logit, noise, tau).unwrap(),
                    hard: harden_bit(logit, noise),
                    mode: GateMode::StraightThrough,
                };
                assert_eq!(s.hard, argmax_is_one);
            }
        }
    }

    #[test]
    fn soft_gate_approaches_hard_bit_as_temperature_drops() {
        let mut rng = stream_rng(10, stream::GATE_NOISE);
        for _ in 0..200 {
            let logit: f64 = rng.gen_range(-3.0..3.0);
            let noise = sample_gumbel_pair(&mut rng);
            let bit = if harden_bit(logit, noise) { 1.0 } else { 0.0 };
            let mut last_gap = f64::INFINITY;
            for tau in [2.0 / 3.0, 0.1, 0.01, 0.001] {
                let soft = gumbel_softmax(logit, noise, tau).unwrap();
                let gap = (soft - bit).abs();
                assert!(
                    gap <= last_gap + 1e-15,
                    "gap grew from {last_gap} to {gap} at tau {tau}"
                );
                last_gap = gap;
            }
            assert!(last_gap < 1e-3, "soft gate did not converge, gap {last_gap}");
        }
    }

    #[test]
    fn hard_sample_frequency_matches_sigmoid() {
        let mut rng = stream_rng(11, stream::GATE_NOISE);
        let n = 100_000;
        for logit in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let p = stable_sigmoid(logit);
            let hits: usize = (0..n)
                .filter(|_| harden_bit(logit, sample_gumbel_pair(&mut rng)))
                .count();
            let freq = hits as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "logit {logit}: frequency {freq} vs sigmoid {p} (3 sigma = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn soft_gate_gradient_matches_finite_differences() {
        let logits = Tensor::new(vec![0.8, -1.3, 0.1], &[3, 1]).unwrap().requiring_grad();
        let diff = [0.4, -0.7, 1.1];
        let err = grad_check(
            |tape, p| {
                let soft = soft_gates_on_tape(tape, &p[0], &diff, DEFAULT_TAU)?;
                let sq = tape.mul(&soft, &soft)?;
                tape.sum(&sq)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn straight_through_column_is_binary_with_soft_gradient() {
        let mut tape = Tape::new();
        let logits = Tensor::new(vec![0.8, -1.3], &[2, 1]).unwrap().requiring_grad();
        let diff = [0.1, 0.2];
        let gates = straight_through_gates(&mut tape, &logits, &diff, DEFAULT_TAU).unwrap();
        assert_eq!(gates.values(), &[1.0, 0.0]);
        let loss = tape.sum(&gates).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&logits).unwrap();
        // gradient of σ((l+d)/τ): s(1-s)/τ, never zero
        for (i, (&l, &d)) in logits.values().iter().zip(&diff).enumerate() {
            let s = stable_sigmoid((l + d) / DEFAULT_TAU);
            let expect = s * (1.0 - s) / DEFAULT_TAU;
            assert!((g[i] - expect).abs() < 1e-12, "entry {i}");
        }
    }

    #[test]
    fn gate_trace_rows_round_trip_as_jsonl() {
        let rows = vec![
            GateTraceRow { frame: 0, layer: 1, query: 3, logit: 0.25, soft: 0.61, hard: 1 },
            GateTraceRow { frame: 1, layer: 0, query: 0, logit: -1.5, soft: 0.08, hard: 0 },
        ];
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        let back: Vec<GateTraceRow> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, rows);
    }
}
