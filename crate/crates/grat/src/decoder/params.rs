//! Decoder parameters: shapes, deterministic initialization, naming.
//!
//! Every parameter carries a stable dotted name ("layer0.cross.w_q", …).
//! The same names key checkpoint arrays, optimizer state, and the tape's
//! named leaves, so the loss graph can be audited by leaf name.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::tensor::{Tape, Tensor};

use super::DecoderConfig;

/// One attention block's projections and its pre-norm affine.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
}

/// Feed-forward block parameters (hidden width 4·C) and its pre-norm.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
}

/// One decoder layer: cross-attention, self-attention, feed-forward, gate.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub cross: AttnParams,
    pub self_attn: AttnParams,
    pub ffn: FfnParams,
    /// Gate projection column [C, 1].
    pub gate_w: Tensor,
    /// Gate bias [1]; initialized positive so early training keeps gates
    /// open and every query refreshes until the loss says otherwise.
    pub gate_b: Tensor,
}

/// All decoder parameters plus the learned initial query embeddings, which
/// double as the frame −1 fallback.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub layers: Vec<LayerParams>,
    pub query_embed: Tensor,
}

/// Gate bias at initialization.
pub const GATE_BIAS_INIT: f64 = 1.0;

/// Scale applied on top of Xavier for projections that write into the
/// residual stream (attention output, FFN second layer). The stream is
/// never re-normalized, and queries recur across every frame of a clip,
/// so unscaled writes compound until downstream logits saturate; small
/// initial writes keep early training in the responsive regime.
pub const RESIDUAL_WRITE_SCALE: f64 = 0.25;

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let v: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Ok(Tensor::new(v, &[fan_in, fan_out])?.requiring_grad())
}

fn residual_write(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let t = xavier(rng, fan_in, fan_out)?;
    let v: Vec<f64> = t.values().iter().map(|x| x * RESIDUAL_WRITE_SCALE).collect();
    Ok(Tensor::new(v, t.shape())?.requiring_grad())
}

pub(crate) fn zeros_vec(n: usize) -> Result<Tensor> {
    Ok(Tensor::new(vec![0.0; n], &[n])?.requiring_grad())
}

fn ones_vec(n: usize) -> Result<Tensor> {
    Ok(Tensor::new(vec![1.0; n], &[n])?.requiring_grad())
}

impl AttnParams {
    fn init(rng: &mut ChaCha8Rng, c: usize) -> Result<Self> {
        Ok(AttnParams {
            w_q: xavier(rng, c, c)?,
            b_q: zeros_vec(c)?,
            w_k: xavier(rng, c, c)?,
            b_k: zeros_vec(c)?,
            w_v: xavier(rng, c, c)?,
            b_v: zeros_vec(c)?,
            w_o: residual_write(rng, c, c)?,
            b_o: zeros_vec(c)?,
            ln_g: ones_vec(c)?,
            ln_b: zeros_vec(c)?,
        })
    }

    fn fields(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln_g", &self.ln_g),
            ("ln_b", &self.ln_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 10] {
        [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln_g", &mut self.ln_g),
            ("ln_b", &mut self.ln_b),
        ]
    }
}

impl FfnParams {
    fn init(rng: &mut ChaCha8Rng, c: usize) -> Result<Self> {
        let hidden = 4 * c;
        Ok(FfnParams {
            w1: xavier(rng, c, hidden)?,
            b1: zeros_vec(hidden)?,
            w2: residual_write(rng, hidden, c)?,
            b2: zeros_vec(c)?,
            ln_g: ones_vec(c)?,
            ln_b: zeros_vec(c)?,
        })
    }

    fn fields(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln_g", &self.ln_g),
            ("ln_b", &self.ln_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln_g", &mut self.ln_g),
            ("ln_b", &mut self.ln_b),
        ]
    }
}

impl DecoderParams {
    /// Deterministic initialization from the experiment seed. The draw
    /// order is fixed (query embeddings, then layers front to back), so a
    /// given (config, seed) always produces the same parameters.
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, stream::PARAM_INIT);
        let c = config.c;
        let limit = (3.0 / c as f64).sqrt();
        let qe: Vec<f64> = (0..config.n * c).map(|_| rng.gen_range(-limit..limit)).collect();
        let query_embed = Tensor::new(qe, &[config.n, c])?.requiring_grad();
        let mut layers = Vec::with_capacity(config.l);
        for _ in 0..config.l {
            let cross = AttnParams::init(&mut rng, c)?;
            let self_attn = AttnParams::init(&mut rng, c)?;
            let ffn = FfnParams::init(&mut rng, c)?;
            let gate_w = xavier(&mut rng, c, 1)?;
            let gate_b = Tensor::new(vec![GATE_BIAS_INIT], &[1])?.requiring_grad();
            layers.push(LayerParams { cross, self_attn, ffn, gate_w, gate_b });
        }
        Ok(DecoderParams { layers, query_embed })
    }

    /// Stable (name, tensor) listing; iteration order is the draw order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("query_embed".to_string(), &self.query_embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (f, t) in layer.cross.fields() {
                out.push((format!("layer{l}.cross.{f}"), t));
            }
            for (f, t) in layer.self_attn.fields() {
                out.push((format!("layer{l}.self.{f}"), t));
            }
            for (f, t) in layer.ffn.fields() {
                out.push((format!("layer{l}.ffn.{f}"), t));
            }
            out.push((format!("layer{l}.gate.w"), &layer.gate_w));
            out.push((format!("layer{l}.gate.b"), &layer.gate_b));
        }
        out
    }

    /// Mutable variant of `named` with identical ordering (optimizer use).
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("query_embed".to_string(), &mut self.query_embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (f, t) in layer.cross.fields_mut() {
                out.push((format!("layer{l}.cross.{f}"), t));
            }
            for (f, t) in layer.self_attn.fields_mut() {
                out.push((format!("layer{l}.self.{f}"), t));
            }
            for (f, t) in layer.ffn.fields_mut() {
                out.push((format!("layer{l}.ffn.{f}"), t));
            }
            out.push((format!("layer{l}.gate.w"), &mut layer.gate_w));
            out.push((format!("layer{l}.gate.b"), &mut layer.gate_b));
        }
        out
    }

    /// Registers every parameter as a named tape leaf ("param.<name>") so
    /// the loss graph can be audited for what the loss actually touches.
    pub fn register(&self, tape: &mut Tape) -> Result<()> {
        for (name, t) in self.named() {
            tape.leaf(t, &format!("param.{name}"))?;
        }
        Ok(())
    }

    /// Rebuilds parameters from named arrays (checkpoint load). Shapes are
    /// validated against a freshly initialized skeleton for the config.
    pub fn from_named(
        config: &DecoderConfig,
        arrays: &std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut skeleton = DecoderParams::init(config, 0)?;
        for (name, slot) in skeleton.named_mut() {
            let (shape, values) = arrays
                .get(&name)
                .ok_or_else(|| Error::BadFile(format!("missing parameter array '{name}'")))?;
            if shape != slot.shape() {
                return Err(Error::BadFile(format!(
                    "parameter '{name}' has shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(values.clone(), shape)?.requiring_grad();
        }
        let extra: Vec<&String> = {
            let known: std::collections::HashSet<String> =
                skeleton.named().into_iter().map(|(n, _)| n).collect();
            arrays.keys().filter(|k| !known.contains(*k)).collect()
        };
        if !extra.is_empty() {
            return Err(Error::BadFile(format!("unknown parameter arrays: {extra:?}")));
        }
        Ok(skeleton)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = DecoderConfig::default();
        let a = DecoderParams::init(&cfg, 42).unwrap();
        let b = DecoderParams::init(&cfg, 42).unwrap();
        for ((na, ta), (nb, tb)) in a.named().iter().zip(b.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values(), "mismatch in {na}");
        }
        let c = DecoderParams::init(&cfg, 43).unwrap();
        assert_ne!(
            a.query_embed.values(),
            c.query_embed.values(),
            "different seeds must differ"
        );
    }

    #[test]
    fn naming_is_unique_and_complete() {
        let cfg = DecoderConfig::default();
        let p = DecoderParams::init(&cfg, 1).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
        // 1 query embed + L * (10 cross + 10 self + 6 ffn + 2 gate)
        assert_eq!(names.len(), 1 + cfg.l * 28);
        assert!(names.contains(&"layer2.gate.w".to_string()));
    }

    #[test]
    fn gate_bias_starts_open() {
        let cfg = DecoderConfig::default();
        let p = DecoderParams::init(&cfg, 7).unwrap();
        for layer in &p.layers {
            assert_eq!(layer.gate_b.values(), &[GATE_BIAS_INIT]);
        }
    }

    #[test]
    fn named_round_trip_restores_everything() {
        let cfg = DecoderConfig::default();
        let p = DecoderParams::init(&cfg, 9).unwrap();
        let arrays: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = p
            .named()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.values().to_vec())))
            .collect();
        let q = DecoderParams::from_named(&cfg, &arrays).unwrap();
        for ((na, ta), (_, tb)) in p.named().iter().zip(q.named().iter()) {
            assert_eq!(ta.values(), tb.values(), "mismatch in {na}");
        }
    }

    #[test]
    fn from_named_rejects_missing_and_unknown() {
        let cfg = DecoderConfig::default();
        let p = DecoderParams::init(&cfg, 9).unwrap();
        let mut arrays: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = p
            .named()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.values().to_vec())))
            .collect();
        arrays.remove("layer0.ffn.w1");
        assert!(DecoderParams::from_named(&cfg, &arrays).is_err());
        let mut arrays2: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = p
            .named()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.values().to_vec())))
            .collect();
        arrays2.insert("mystery".into(), (vec![1], vec![0.0]));
        assert!(DecoderParams::from_named(&cfg, &arrays2).is_err());
    }
}
