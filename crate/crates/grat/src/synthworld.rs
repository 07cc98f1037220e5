//! Deterministic synthetic clip generator and frame encoder.
//!
//! Clips are a handful of disc-shaped objects drifting through the unit
//! square on piecewise-linear paths (reflecting off the walls), with one
//! scripted stress event per scenario: an occlusion window, a mid-clip
//! trajectory crossing, a birth plus a death, or a noise burst. Occlusion
//! and absence delete the object's signal from the encoded features
//! outright — the feature stream simply stops carrying that object, which
//! is exactly the condition the gate has to learn to detect.
//!
//! The encoder stands in for a learned backbone and is deliberately
//! frozen: sinusoidal positional codes plus seeded random class
//! embeddings, weighted by a Gaussian bump around each visible object.
//! (spec, seed) fully determines a clip and its features, so clips
//! serialize as a JSONL header plus per-frame track states and the
//! features are regenerated on load.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;

/// Fixed seed for the per-class embedding table, shared by every
/// experiment so models trained under different experiment seeds see the
/// same world.
const CLASS_EMBED_SEED: u64 = 0xC1A55;

/// Side of the square token grid (T = G² tokens per frame).
pub const DEFAULT_GRID: usize = 4;

/// Smallest and largest legal object radius.
pub const RADIUS_RANGE: (f64, f64) = (0.03, 0.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Visible,
    Occluded,
    Absent,
}

/// One object's full life across a clip. Centers and radii are defined on
/// every frame (the trajectory exists even while hidden); `visibility`
/// says whether the encoder may see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub id: usize,
    /// Class label in 1..=K.
    pub class: usize,
    pub centers: Vec<[f64; 2]>,
    pub radii: Vec<f64>,
    pub visibility: Vec<Visibility>,
}

impl ObjectTrack {
    pub fn is_visible(&self, frame: usize) -> bool {
        self.visibility[frame] == Visibility::Visible
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTag {
    Occlusion,
    Crossing,
    BirthDeath,
    NoiseBurst,
    Calm,
}

impl ScenarioTag {
    pub const ALL: [ScenarioTag; 5] = [
        ScenarioTag::Occlusion,
        ScenarioTag::Crossing,
        ScenarioTag::BirthDeath,
        ScenarioTag::NoiseBurst,
        ScenarioTag::Calm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioTag::Occlusion => "occlusion",
            ScenarioTag::Crossing => "crossing",
            ScenarioTag::BirthDeath => "birth_death",
            ScenarioTag::NoiseBurst => "noise_burst",
            ScenarioTag::Calm => "calm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ScenarioTag::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::BadScenario(format!("unknown scenario '{s}'")))
    }
}

/// What kind of clip to generate. The shock interval is inclusive on both
/// ends; its meaning depends on the tag (occluded window, birth frame /
/// death frame, noise-burst window). Crossing and calm ignore it beyond
/// the in-clip check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub tag: ScenarioTag,
    pub objects: usize,
    pub frames: usize,
    pub shock_start: usize,
    pub shock_end: usize,
    /// Ambient per-dimension Gaussian noise amplitude on the features.
    pub noise: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects == 0 || self.frames == 0 {
            return Err(Error::BadScenario(format!(
                "need at least one object and one frame (objects={}, frames={})",
                self.objects, self.frames
            )));
        }
        if self.shock_start > self.shock_end || self.shock_end >= self.frames {
            return Err(Error::BadScenario(format!(
                "shock interval [{}, {}] must lie inside the clip of {} frames",
                self.shock_start, self.shock_end, self.frames
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::BadScenario(format!("negative noise amplitude {}", self.noise)));
        }
        match self.tag {
            ScenarioTag::Crossing if self.objects < 2 => {
                Err(Error::BadScenario("crossing needs at least two objects".into()))
            }
            ScenarioTag::Crossing if self.frames < 3 => {
                Err(Error::BadScenario("crossing needs at least three frames".into()))
            }
            ScenarioTag::BirthDeath if self.objects < 2 => {
                Err(Error::BadScenario("birth_death needs at least two objects".into()))
            }
            ScenarioTag::BirthDeath if self.shock_start == 0 || self.shock_end + 1 >= self.frames => {
                Err(Error::BadScenario(
                    "birth_death needs a nonempty absent prefix and suffix".into(),
                ))
            }
            ScenarioTag::NoiseBurst if self.noise <= 0.0 => {
                Err(Error::BadScenario("noise_burst needs a positive ambient amplitude".into()))
            }
            _ => Ok(()),
        }
    }

    /// Noise amplitude in effect at a frame (the burst multiplies the
    /// ambient level by 10 inside the shock window).
    pub fn noise_at(&self, frame: usize) -> f64 {
        if self.tag == ScenarioTag::NoiseBurst
            && frame >= self.shock_start
            && frame <= self.shock_end
        {
            self.noise * 10.0
        } else {
            self.noise
        }
    }
}

/// A generated clip: the spec and seed that made it plus the tracks.
/// Features are not stored; regenerate them with `encode_clip`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub spec: ScenarioSpec,
    pub seed: u64,
    pub k_classes: usize,
    pub tracks: Vec<ObjectTrack>,
}

impl VideoClip {
    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    /// (track, center, radius) for every visible instance of a frame.
    pub fn visible_at(&self, frame: usize) -> Vec<(&ObjectTrack, [f64; 2], f64)> {
        self.tracks
            .iter()
            .filter(|t| t.is_visible(frame))
            .map(|t| (t, t.centers[frame], t.radii[frame]))
            .collect()
    }
}

/// Reflects a coordinate into [lo, hi] (billiard fold).
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * span);
    if y > span {
        y = 2.0 * span - y;
    }
    lo + y
}

/// Generates a clip. Fully determined by (spec, k_classes, seed).
pub fn generate_scene(spec: &ScenarioSpec, k_classes: usize, seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    if k_classes == 0 {
        return Err(Error::BadScenario("need at least one class".into()));
    }
    let mut rng = stream_rng(seed, stream::CLIP_GEN);
    let f = spec.frames;
    let mut tracks = Vec::with_capacity(spec.objects);
    for id in 0..spec.objects {
        let class = rng.gen_range(1..=k_classes);
        let start = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let total = rng.gen_range(0.2..0.6);
        let step = if f > 1 { total / (f - 1) as f64 } else { 0.0 };
        let radius = rng.gen_range(0.08..0.2);
        let centers: Vec<[f64; 2]> = (0..f)
            .map(|t| {
                let d = step * t as f64;
                [
                    reflect(start[0] + d * angle.cos(), 0.05, 0.95),
                    reflect(start[1] + d * angle.sin(), 0.05, 0.95),
                ]
            })
            .collect();
        tracks.push(ObjectTrack {
            id,
            class,
            centers,
            radii: vec![radius; f],
            visibility: vec![Visibility::Visible; f],
        });
    }

    match spec.tag {
        ScenarioTag::Calm | ScenarioTag::NoiseBurst => {}
        ScenarioTag::Occlusion => {
            for t in spec.shock_start..=spec.shock_end {
                tracks[0].visibility[t] = Visibility::Occluded;
            }
        }
        ScenarioTag::Crossing => {
            // Objects 0 and 1 pass through a common point at mid-clip.
            let cross = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
            let t_mid = (f - 1) as f64 / 2.0;
            for (obj, base_angle) in [(0usize, 0.0), (1usize, std::f64::consts::FRAC_PI_2)] {
                let angle = base_angle + rng.gen_range(-0.5..0.5);
                let speed = rng.gen_range(0.015..0.04);
                tracks[obj].centers = (0..f)
                    .map(|t| {
                        let d = speed * (t as f64 - t_mid);
                        [
                            reflect(cross[0] + d * angle.cos(), 0.05, 0.95),
                            reflect(cross[1] + d * angle.sin(), 0.05, 0.95),
                        ]
                    })
                    .collect();
            }
        }
        ScenarioTag::BirthDeath => {
            // Object 0 is born at shock_start; object 1 dies after shock_end.
            for t in 0..spec.shock_start {
                tracks[0].visibility[t] = Visibility::Absent;
            }
            for t in spec.shock_end + 1..f {
                tracks[1].visibility[t] = Visibility::Absent;
            }
        }
    }

    Ok(VideoClip { spec: *spec, seed, k_classes, tracks })
}

/// Fixed embedding for a class label (1-based), width C. Seeded once for
/// the whole artifact — not trainable, not experiment-dependent.
pub fn class_embedding(class: usize, c: usize) -> Vec<f64> {
    let mut rng = stream_rng(CLASS_EMBED_SEED, class as u64);
    (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Sinusoidal 2D positional code for a point in the unit square.
pub fn positional_encoding(u: [f64; 2], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    let half = c / 2;
    for i in 0..half {
        let freq = std::f64::consts::PI * (2.0_f64).powf((i / 2) as f64);
        let phase = if i % 2 == 0 { u[0] } else { u[1] } * freq;
        out[i] = phase.sin();
        out[half + i] = phase.cos();
    }
    out
}

/// Gaussian signal weight of an object at a token position.
pub fn bump_weight(token: [f64; 2], center: [f64; 2], radius: f64) -> f64 {
    let dx = token[0] - center[0];
    let dy = token[1] - center[1];
    (-(dx * dx + dy * dy) / (radius * radius)).exp()
}

/// Center of grid token `idx` on a G×G grid (row-major).
pub fn token_center(idx: usize, grid: usize) -> [f64; 2] {
    let gy = idx / grid;
    let gx = idx % grid;
    [(gx as f64 + 0.5) / grid as f64, (gy as f64 + 0.5) / grid as f64]
}

fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box–Muller; u clamped away from 0 so the log is finite.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Encodes one frame: token(u) = positional(u) + Σ_visible emb(class) ·
/// exp(−‖u−center‖²/r²) + ε. Hidden objects contribute nothing at all.
/// `rng` advances only when the effective noise amplitude is positive.
pub fn encode_frame(
    clip: &VideoClip,
    frame: usize,
    c: usize,
    grid: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if frame >= clip.frames() {
        return Err(Error::BadScenario(format!(
            "frame {frame} out of range for a {}-frame clip",
            clip.frames()
        )));
    }
    let t_tokens = grid * grid;
    let visible = clip.visible_at(frame);
    let embeds: Vec<Vec<f64>> =
        visible.iter().map(|(tr, _, _)| class_embedding(tr.class, c)).collect();
    let amp = clip.spec.noise_at(frame);
    let mut values = Vec::with_capacity(t_tokens * c);
    for idx in 0..t_tokens {
        let u = token_center(idx, grid);
        let mut token = positional_encoding(u, c);
        for ((_, center, radius), emb) in visible.iter().zip(&embeds) {
            let w = bump_weight(u, *center, *radius);
            for (t, e) in token.iter_mut().zip(emb) {
                *t += w * e;
            }
        }
        if amp > 0.0 {
            let mut d = 0;
            while d < c {
                let (a, b) = normal_pair(rng);
                token[d] += amp * a;
                if d + 1 < c {
                    token[d + 1] += amp * b;
                }
                d += 2;
            }
        }
        values.extend_from_slice(&token);
    }
    Tensor::new(values, &[t_tokens, c])
}

/// Encodes every frame of a clip. Noise is drawn from the clip's own seed
/// (feature stream), so a clip's features are reproducible in isolation.
pub fn encode_clip(clip: &VideoClip, c: usize, grid: usize) -> Result<Vec<Tensor>> {
    let mut rng = stream_rng(clip.seed, stream::FEATURE_NOISE);
    (0..clip.frames()).map(|t| encode_frame(clip, t, c, grid, &mut rng)).collect()
}

// ── serialization ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ClipHeader {
    spec: ScenarioSpec,
    seed: u64,
    k_classes: usize,
    objects: usize,
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    frame: usize,
    states: Vec<FrameTrack>,
}

#[derive(Serialize, Deserialize)]
struct FrameTrack {
    id: usize,
    class: usize,
    center: [f64; 2],
    radius: f64,
    visibility: Visibility,
}

/// Writes a clip as JSONL: one header line, then one line per frame.
pub fn write_clip_jsonl<W: Write>(clip: &VideoClip, mut w: W) -> Result<()> {
    let header = ClipHeader {
        spec: clip.spec,
        seed: clip.seed,
        k_classes: clip.k_classes,
        objects: clip.tracks.len(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::BadFile(e.to_string()))?;
    writeln!(w, "{line}")?;
    for frame in 0..clip.frames() {
        let states: Vec<FrameTrack> = clip
            .tracks
            .iter()
            .map(|t| FrameTrack {
                id: t.id,
                class: t.class,
                center: t.centers[frame],
                radius: t.radii[frame],
                visibility: t.visibility[frame],
            })
            .collect();
        let line = serde_json::to_string(&FrameLine { frame, states })
            .map_err(|e| Error::BadFile(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a clip back from JSONL, validating frame count and track order.
pub fn read_clip_jsonl<R: BufRead>(r: R) -> Result<VideoClip> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::BadFile("empty clip file".into()))??;
    let header: ClipHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::BadFile(format!("bad header: {e}")))?;
    header.spec.validate()?;
    let f = header.spec.frames;
    let mut tracks: Vec<ObjectTrack> = (0..header.objects)
        .map(|id| ObjectTrack {
            id,
            class: 0,
            centers: Vec::with_capacity(f),
            radii: Vec::with_capacity(f),
            visibility: Vec::with_capacity(f),
        })
        .collect();
    let mut seen = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fl: FrameLine =
            serde_json::from_str(&line).map_err(|e| Error::BadFile(format!("bad frame line: {e}")))?;
        if fl.frame != seen {
            return Err(Error::BadFile(format!("frame {} out of order (expected {seen})", fl.frame)));
        }
        if fl.states.len() != tracks.len() {
            return Err(Error::BadFile(format!(
                "frame {} has {} states, expected {}",
                fl.frame,
                fl.states.len(),
                tracks.len()
            )));
        }
        for (slot, st) in tracks.iter_mut().zip(&fl.states) {
            if st.id != slot.id {
                return Err(Error::BadFile(format!(
                    "track order changed at frame {} (id {} vs {})",
                    fl.frame, st.id, slot.id
                )));
            }
            if slot.centers.is_empty() {
                slot.class = st.class;
            } else if slot.class != st.class {
                return Err(Error::BadFile(format!("track {} changes class mid-clip", st.id)));
            }
            slot.centers.push(st.center);
            slot.radii.push(st.radius);
            slot.visibility.push(st.visibility);
        }
        seen += 1;
    }
    if seen != f {
        return Err(Error::BadFile(format!("clip has {seen} frame lines, header says {f}")));
    }
    Ok(VideoClip { spec: header.spec, seed: header.seed, k_classes: header.k_classes, tracks })
}
