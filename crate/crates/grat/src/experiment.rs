//! Experiment orchestration: the resolved run configuration and its flat
//! text form, dataset generation, training runs, evaluation, ablation
//! sweeps, and the finite-difference gradient suite.
//!
//! Everything here is deterministic in (config, seed): clip seeds derive
//! from the run seed through fixed streams, training consumes its own
//! streams, and evaluation uses deterministic gates — so rerunning a
//! command with the same inputs reproduces every artifact byte for byte.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, GatePlacement, MaskConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    flops_count, gate_activation_stats, track_metrics, FlopsReport, GateStats, TrackMetrics,
    MATCH_THRESHOLD,
};
use crate::propagation::{
    propagate_clip, train, LossWeights, MetricRow, Model, ModelConfig, RunMode, TrainConfig,
};
use crate::rng::{child_seed, stream};
use crate::synthworld::{encode_clip, generate_scene, ScenarioSpec, ScenarioTag, VideoClip};
use crate::tensor::Tensor;

// ── scenario selection ─────────────────────────────────────────────────

/// Which scenario(s) a dataset draws from. `Mix` cycles through the
/// three eventful scenarios (occlusion, crossing, birth/death).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    Single(ScenarioTag),
    Mix,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Single(t) => t.name(),
            ScenarioKind::Mix => "mix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "mix" {
            return Ok(ScenarioKind::Mix);
        }
        Ok(ScenarioKind::Single(ScenarioTag::parse(s)?))
    }

    /// The tag used for the i-th clip of a dataset.
    pub fn tag_for(&self, index: usize) -> ScenarioTag {
        match self {
            ScenarioKind::Single(t) => *t,
            ScenarioKind::Mix => {
                const ROTATION: [ScenarioTag; 3] =
                    [ScenarioTag::Occlusion, ScenarioTag::Crossing, ScenarioTag::BirthDeath];
                ROTATION[index % ROTATION.len()]
            }
        }
    }
}

/// Dataset description: scenario family plus the per-clip spec fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scenario: ScenarioKind,
    pub objects: usize,
    pub frames: usize,
    pub shock_start: usize,
    pub shock_end: usize,
    pub noise: f64,
    /// Number of clips in the dataset.
    pub clips: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenario: ScenarioKind::Mix,
            objects: 3,
            frames: 12,
            shock_start: 4,
            shock_end: 6,
            noise: 0.02,
            clips: 24,
        }
    }
}

/// Training knobs that live in the config file (clip length and seed are
/// supplied by the data section and the run seed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPart {
    pub learning_rate: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub clips_per_step: usize,
    pub lambda_cls: f64,
    pub lambda_pos: f64,
}

impl Default for TrainPart {
    fn default() -> Self {
        TrainPart {
            learning_rate: 1e-3,
            steps: 800,
            warmup_steps: 400,
            clips_per_step: 1,
            lambda_cls: 1.0,
            lambda_pos: 1.0,
        }
    }
}

/// The fully resolved description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tag: String,
    pub seed: u64,
    /// Output root; when empty the driver falls back to an environment
    /// default.
    pub out_dir: String,
    pub model: ModelConfig,
    pub train: TrainPart,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tag: "run".into(),
            seed: 0,
            out_dir: String::new(),
            model: ModelConfig::default(),
            train: TrainPart::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tag.is_empty() || self.tag.contains(['/', '\\']) {
            return Err(Error::BadConfig(format!("bad run tag '{}'", self.tag)));
        }
        self.model.validate()?;
        self.train_config().validate()?;
        if self.data.clips == 0 {
            return Err(Error::BadConfig("need at least one clip".into()));
        }
        if self.data.objects > self.model.decoder.n {
            return Err(Error::BadConfig(format!(
                "{} objects cannot be tracked by {} queries",
                self.data.objects, self.model.decoder.n
            )));
        }
        // every scenario this config can emit must be generable
        let tags: &[ScenarioTag] = match self.data.scenario {
            ScenarioKind::Single(ref t) => std::slice::from_ref(t),
            ScenarioKind::Mix => {
                &[ScenarioTag::Occlusion, ScenarioTag::Crossing, ScenarioTag::BirthDeath]
            }
        };
        for &tag in tags {
            self.scenario_spec_with(tag).validate()?;
        }
        Ok(())
    }

    fn scenario_spec_with(&self, tag: ScenarioTag) -> ScenarioSpec {
        ScenarioSpec {
            tag,
            objects: self.data.objects,
            frames: self.data.frames,
            shock_start: self.data.shock_start,
            shock_end: self.data.shock_end,
            noise: self.data.noise,
        }
    }

    /// Spec and generation seed of the i-th clip of the training set.
    pub fn train_clip_spec(&self, index: usize) -> (ScenarioSpec, u64) {
        (
            self.scenario_spec_with(self.data.scenario.tag_for(index)),
            child_seed(self.seed, stream::CLIP_GEN ^ index as u64),
        )
    }

    /// Spec and generation seed of the i-th clip of the held-out set.
    pub fn eval_clip_spec(&self, index: usize) -> (ScenarioSpec, u64) {
        (
            self.scenario_spec_with(self.data.scenario.tag_for(index)),
            child_seed(self.seed, stream::EVAL_CLIP_GEN ^ index as u64),
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            steps: self.train.steps,
            warmup_steps: self.train.warmup_steps,
            clip_len: self.data.frames,
            clips_per_step: self.train.clips_per_step,
            lambda_cls: self.train.lambda_cls,
            lambda_pos: self.train.lambda_pos,
            seed: self.seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_cls: self.train.lambda_cls, lambda_pos: self.train.lambda_pos }
    }

    /// Renders the config as its flat text form: one `key = value` per
    /// line, stable order, parseable by `from_text`.
    pub fn to_text(&self) -> String {
        let d = &self.model.decoder;
        let mut s = String::new();
        s.push_str("# experiment configuration (flat key = value, '#' comments)\n");
        s.push_str(&format!("run.tag = {}\n", self.tag));
        s.push_str(&format!("run.seed = {}\n", self.seed));
        s.push_str(&format!("run.out_dir = {}\n", self.out_dir));
        s.push_str(&format!("model.n = {}\n", d.n));
        s.push_str(&format!("model.c = {}\n", d.c));
        s.push_str(&format!("model.l = {}\n", d.l));
        s.push_str(&format!("model.h = {}\n", d.h));
        s.push_str(&format!("model.tau = {}\n", d.tau));
        s.push_str(&format!("model.mask_config = {}\n", d.mask_config.name()));
        s.push_str(&format!("model.gate_placement = {}\n", d.gate_placement.name()));
        s.push_str(&format!("model.gating_enabled = {}\n", d.gating_enabled));
        s.push_str(&format!("model.k_classes = {}\n", self.model.k_classes));
        s.push_str(&format!("model.grid = {}\n", self.model.grid));
        s.push_str(&format!("train.learning_rate = {}\n", self.train.learning_rate));
        s.push_str(&format!("train.steps = {}\n", self.train.steps));
        s.push_str(&format!("train.warmup_steps = {}\n", self.train.warmup_steps));
        s.push_str(&format!("train.clips_per_step = {}\n", self.train.clips_per_step));
        s.push_str(&format!("train.lambda_cls = {}\n", self.train.lambda_cls));
        s.push_str(&format!("train.lambda_pos = {}\n", self.train.lambda_pos));
        s.push_str(&format!("data.scenario = {}\n", self.data.scenario.name()));
        s.push_str(&format!("data.objects = {}\n", self.data.objects));
        s.push_str(&format!("data.frames = {}\n", self.data.frames));
        s.push_str(&format!("data.shock_start = {}\n", self.data.shock_start));
        s.push_str(&format!("data.shock_end = {}\n", self.data.shock_end));
        s.push_str(&format!("data.noise = {}\n", self.data.noise));
        s.push_str(&format!("data.clips = {}\n", self.data.clips));
        s
    }

    /// Parses the flat text form. Starts from defaults, so a file may
    /// state only the keys it changes. Unknown keys are rejected by name.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::BadConfig(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::BadConfig(format!("bad value '{v}' for key '{key}'")))
        }
        let d = &mut self.model.decoder;
        match key {
            "run.tag" => self.tag = value.to_string(),
            "run.seed" => self.seed = num(key, value)?,
            "run.out_dir" => self.out_dir = value.to_string(),
            "model.n" => d.n = num(key, value)?,
            "model.c" => d.c = num(key, value)?,
            "model.l" => d.l = num(key, value)?,
            "model.h" => d.h = num(key, value)?,
            "model.tau" => d.tau = num(key, value)?,
            "model.mask_config" => d.mask_config = MaskConfig::parse(value)?,
            "model.gate_placement" => d.gate_placement = GatePlacement::parse(value)?,
            "model.gating_enabled" => d.gating_enabled = num(key, value)?,
            "model.k_classes" => self.model.k_classes = num(key, value)?,
            "model.grid" => self.model.grid = num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = num(key, value)?,
            "train.steps" => self.train.steps = num(key, value)?,
            "train.warmup_steps" => self.train.warmup_steps = num(key, value)?,
            "train.clips_per_step" => self.train.clips_per_step = num(key, value)?,
            "train.lambda_cls" => self.train.lambda_cls = num(key, value)?,
            "train.lambda_pos" => self.train.lambda_pos = num(key, value)?,
            "data.scenario" => self.data.scenario = ScenarioKind::parse(value)?,
            "data.objects" => self.data.objects = num(key, value)?,
            "data.frames" => self.data.frames = num(key, value)?,
            "data.shock_start" => self.data.shock_start = num(key, value)?,
            "data.shock_end" => self.data.shock_end = num(key, value)?,
            "data.noise" => self.data.noise = num(key, value)?,
            "data.clips" => self.data.clips = num(key, value)?,
            other => {
                return Err(Error::BadConfig(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }
}

// ── datasets ───────────────────────────────────────────────────────────

/// Generates the training clips of a config.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Vec<VideoClip>> {
    (0..cfg.data.clips)
        .map(|i| {
            let (spec, seed) = cfg.train_clip_spec(i);
            generate_scene(&spec, cfg.model.k_classes, seed)
        })
        .collect()
}

/// Generates the held-out evaluation clips of a config.
pub fn eval_dataset(cfg: &ExperimentConfig) -> Result<Vec<VideoClip>> {
    (0..cfg.data.clips)
        .map(|i| {
            let (spec, seed) = cfg.eval_clip_spec(i);
            generate_scene(&spec, cfg.model.k_classes, seed)
        })
        .collect()
}

/// Pairs clips with their encoded features.
pub fn encode_dataset(
    cfg: &ExperimentConfig,
    clips: Vec<VideoClip>,
) -> Result<Vec<(VideoClip, Vec<Tensor>)>> {
    clips
        .into_iter()
        .map(|c| {
            let feats = encode_clip(&c, cfg.model.decoder.c, cfg.model.grid)?;
            Ok((c, feats))
        })
        .collect()
}

// ── training and evaluation ────────────────────────────────────────────

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
}

/// Trains a fresh model per the config.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let dataset = encode_dataset(cfg, generate_dataset(cfg)?)?;
    let mut model = Model::init(&cfg.model, cfg.seed)?;
    let metrics = train(&mut model, &dataset, &cfg.train_config())?;
    Ok(TrainedRun { model, metrics })
}

/// Aggregated evaluation over the held-out clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_clip: Vec<TrackMetrics>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_duplicate_rate: f64,
    pub mean_id_switches: f64,
    pub total_id_switches: usize,
    /// Mean fraction of open gates across all eval decisions.
    pub gate_rate: f64,
    pub gate_stats: GateStats,
    pub flops: FlopsReport,
}

impl EvalSummary {
    pub const CSV_HEADER: &'static str =
        "precision,recall,duplicate_rate,mean_id_switches,total_id_switches,gate_rate,flops_ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mean_precision,
            self.mean_recall,
            self.mean_duplicate_rate,
            self.mean_id_switches,
            self.total_id_switches,
            self.gate_rate,
            self.flops.ratio
        )
    }
}

/// Runs the model over the config's evaluation clips with deterministic
/// gates and aggregates metrics, the gate series, and the FLOPs report.
pub fn evaluate(cfg: &ExperimentConfig, model: &Model) -> Result<EvalSummary> {
    let dataset = encode_dataset(cfg, eval_dataset(cfg)?)?;
    let mut per_clip = Vec::with_capacity(dataset.len());
    let mut merged_trace = Vec::new();
    let mut per_layer_k: Vec<Vec<usize>> = Vec::new();
    for (clip, feats) in &dataset {
        let mut tape = crate::tensor::Tape::new();
        let run = propagate_clip(
            &mut tape,
            model,
            clip,
            feats,
            RunMode::Eval,
            &cfg.weights(),
            None,
        )?;
        per_clip.push(track_metrics(&run.predictions, clip, MATCH_THRESHOLD));
        per_layer_k.extend(crate::evalkit::active_counts_for_run(
            &model.config,
            &run.gate_trace,
            clip.frames(),
        ));
        merged_trace.extend(run.gate_trace);
    }
    let clips = per_clip.len() as f64;
    let gate_stats = gate_activation_stats(&merged_trace);
    let gate_rate = if merged_trace.is_empty() {
        1.0
    } else {
        merged_trace.iter().map(|r| r.hard as usize).sum::<usize>() as f64
            / merged_trace.len() as f64
    };
    let flops = flops_count(
        model.config.decoder.n,
        model.config.decoder.c,
        model.config.grid * model.config.grid,
        &per_layer_k,
    );
    Ok(EvalSummary {
        mean_precision: per_clip.iter().map(|m| m.precision).sum::<f64>() / clips,
        mean_recall: per_clip.iter().map(|m| m.recall).sum::<f64>() / clips,
        mean_duplicate_rate: per_clip.iter().map(|m| m.duplicate_rate).sum::<f64>() / clips,
        mean_id_switches: per_clip.iter().map(|m| m.id_switches as f64).sum::<f64>() / clips,
        total_id_switches: per_clip.iter().map(|m| m.id_switches).sum(),
        per_clip,
        gate_rate,
        gate_stats,
        flops,
    })
}

// ── ablations ──────────────────────────────────────────────────────────

/// One (variant, seed) cell of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub id_switches: f64,
    pub recall: f64,
    pub gate_rate: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.variant, self.seed, self.id_switches, self.recall, self.gate_rate
        )
    }
}

fn ablation_cell(cfg: &ExperimentConfig, variant: &str) -> Result<AblationRow> {
    let trained = run_training(cfg)?;
    let summary = evaluate(cfg, &trained.model)?;
    Ok(AblationRow {
        variant: variant.to_string(),
        seed: cfg.seed,
        id_switches: summary.mean_id_switches,
        recall: summary.mean_recall,
        gate_rate: summary.gate_rate,
    })
}

/// Trains and evaluates every masking topology over the shared seeds.
/// Rows come back variant-major, seeds ascending within a variant.
pub fn ablate_masks(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut cells = Vec::new();
    for mask in MaskConfig::ALL {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.decoder.mask_config = mask;
            cfg.seed = seed;
            cells.push((cfg, mask.name()));
        }
    }
    crate::par::run_each(cells, |(cfg, name)| ablation_cell(&cfg, name))
        .into_iter()
        .collect()
}

/// Trains and evaluates every gate placement over the shared seeds.
pub fn ablate_placements(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut cells = Vec::new();
    for placement in GatePlacement::ALL {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.decoder.gate_placement = placement;
            cfg.seed = seed;
            cells.push((cfg, placement.name()));
        }
    }
    crate::par::run_each(cells, |(cfg, name)| ablation_cell(&cfg, name))
        .into_iter()
        .collect()
}

/// Renders ablation rows as a CSV body under the given variant column
/// name ("mask_config" or "placement").
pub fn ablation_csv(variant_column: &str, rows: &[AblationRow]) -> String {
    let mut out = format!("{variant_column},seed,id_switches,recall,gate_rate\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

// ── gradient suite ─────────────────────────────────────────────────────

/// Result of one finite-difference case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
}

/// The full gradient suite: every differentiable primitive, the gated
/// decoder layer in each placement, and a two-frame unroll, all checked
/// against central finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub cases: Vec<GradCase>,
    pub max_rel_err: f64,
}

/// Runs the whole suite. Only genuinely differentiable paths are
/// checked: gates run in their relaxed form with frozen noise (hard
/// commitments are piecewise-constant and have no derivative to check).
pub fn grad_suite(seed: u64) -> Result<GradSuiteReport> {
    use crate::gating::GateMode;
    use crate::rng::stream_rng;
    use crate::tensor::check::grad_check;
    use rand::Rng;

    let mut rng = stream_rng(seed, 0xD1FF);
    let mut cases: Vec<GradCase> = Vec::new();
    let mut rnd = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    };

    // primitive ops, one probe each
    let a = Tensor::new(rnd(6), &[2, 3])?;
    let b = Tensor::new(rnd(6), &[2, 3])?;
    let m_right = Tensor::new(rnd(12), &[3, 4])?;
    let row = Tensor::new(rnd(3), &[3])?;
    let gamma = Tensor::new(rnd(3).iter().map(|x| 1.0 + 0.2 * x).collect::<Vec<_>>(), &[3])?;
    let beta = Tensor::new(rnd(3), &[3])?;
    let pos = Tensor::new(rnd(6).iter().map(|x| 2.5 + x).collect::<Vec<_>>(), &[2, 3])?;
    let off_zero = Tensor::new(rnd(6).iter().map(|x| x + 3.0 * x.signum()).collect::<Vec<_>>(), &[2, 3])?;
    let scales = Tensor::new(rnd(2), &[2])?;

    type Case<'a> = (
        &'a str,
        Vec<Tensor>,
        Box<dyn Fn(&mut crate::tensor::Tape, &[Tensor]) -> Result<Tensor>>,
    );
    let prims: Vec<Case> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, p| {
            let y = t.add(&p[0], &p[1])?;
            t.sum(&y)
        })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, p| {
            let y = t.sub(&p[0], &p[1])?;
            t.sum(&y)
        })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, p| {
            let y = t.mul(&p[0], &p[1])?;
            t.sum(&y)
        })),
        ("scale_add_const", vec![a.clone()], Box::new(|t, p| {
            let y = t.scale(&p[0], -1.7)?;
            let y = t.add_const(&y, &[0.3])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("sigmoid", vec![a.clone()], Box::new(|t, p| {
            let y = t.sigmoid(&p[0])?;
            t.sum(&y)
        })),
        ("log", vec![pos.clone()], Box::new(|t, p| {
            let y = t.log(&p[0])?;
            t.sum(&y)
        })),
        ("exp", vec![a.clone()], Box::new(|t, p| {
            let y = t.exp(&p[0])?;
            t.sum(&y)
        })),
        ("relu_off_zero", vec![off_zero.clone()], Box::new(|t, p| {
            let y = t.relu(&p[0])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("matmul", vec![a.clone(), m_right.clone()], Box::new(|t, p| {
            let y = t.matmul(&p[0], &p[1])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("transpose", vec![a.clone()], Box::new(|t, p| {
            let y = t.transpose(&p[0])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, p| {
            let y = t.add_row(&p[0], &p[1])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("row_scale", vec![a.clone(), scales.clone()], Box::new(|t, p| {
            let y = t.row_scale(&p[0], &p[1])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("softmax_rows", vec![a.clone()], Box::new(|t, p| {
            let y = t.softmax_rows(&p[0])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("log_softmax_rows", vec![a.clone()], Box::new(|t, p| {
            let y = t.log_softmax_rows(&p[0])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("masked_softmax_rows", vec![a.clone()], Box::new(|t, p| {
            let allowed = vec![true, false, true, true, true, false];
            let y = t.masked_softmax_rows(&p[0], &allowed)?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("layer_norm", vec![a.clone(), gamma.clone(), beta.clone()], Box::new(|t, p| {
            let y = t.layer_norm(&p[0], &p[1], &p[2])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("mean", vec![a.clone()], Box::new(|t, p| {
            let y = t.mul(&p[0], &p[0])?;
            t.mean(&y)
        })),
        ("gather_scatter", vec![a.clone()], Box::new(|t, p| {
            let g = t.gather_rows(&p[0], &[1])?;
            let g2 = t.mul(&g, &g)?;
            let y = t.scatter_rows(&p[0], &[0], &g2)?;
            t.sum(&y)
        })),
        ("select_rows_frozen_gates", vec![a.clone(), b.clone()], Box::new(|t, p| {
            let bits = Tensor::new(vec![1.0, 0.0], &[2, 1])?;
            let bits = t.leaf(&bits, "data.bits")?;
            let y = t.select_rows(&bits, &p[0], &p[1])?;
            let y = t.mul(&y, &y)?;
            t.sum(&y)
        })),
        ("slice_concat_pick", vec![a.clone()], Box::new(|t, p| {
            let left = t.slice_cols(&p[0], 0, 2)?;
            let right = t.slice_cols(&p[0], 2, 1)?;
            let y = t.concat_cols(&[&right, &left])?;
            let picked = t.pick_per_row(&y, &[2, 0])?;
            let y = t.mul(&picked, &picked)?;
            t.sum(&y)
        })),
    ];
    for (name, probes, f) in prims {
        let rel = grad_check(&f, &probes, 1e-5)?;
        cases.push(GradCase { name: format!("op.{name}"), max_rel_err: rel });
    }

    // full decoder layer per placement, relaxed gates, frozen noise
    for placement in GatePlacement::ALL {
        let cfg = ModelConfig {
            decoder: DecoderConfig {
                n: 4,
                c: 8,
                l: 1,
                h: 2,
                gate_placement: placement,
                ..DecoderConfig::default()
            },
            k_classes: 3,
            grid: 2,
        };
        let model = Model::init(&cfg, seed ^ 0xBEEF)?;
        let spec = ScenarioSpec {
            tag: ScenarioTag::Calm,
            objects: 2,
            frames: 2,
            shock_start: 0,
            shock_end: 0,
            noise: 0.0,
        };
        let clip = generate_scene(&spec, cfg.k_classes, seed ^ 0x51DE)?;
        let feats = encode_clip(&clip, cfg.decoder.c, cfg.grid)?;
        let mut probes: Vec<Tensor> = vec![feats[0].clone(), feats[1].clone()];
        probes.extend(model.named().into_iter().map(|(_, t)| t.clone().requiring_grad()));
        let cfg2 = cfg.clone();
        let rel = grad_check(
            |tape, p| {
                let m = model_from_probes(&cfg2, &p[2..]);
                let mut noise_rng = stream_rng(seed ^ 0xA1CE, stream::GATE_NOISE);
                let mut q_prev = m.decoder.query_embed.clone();
                let mut total: Option<Tensor> = None;
                for frame in 0..2 {
                    let out = crate::decoder::decoder_forward(
                        tape,
                        &p[frame],
                        &q_prev,
                        &m.decoder,
                        &cfg2.decoder,
                        GateMode::Soft,
                        Some(&mut noise_rng),
                    )?;
                    let y = tape.mul(&out.queries, &out.queries)?;
                    let y = tape.sum(&y)?;
                    total = Some(match total {
                        None => y,
                        Some(acc) => tape.add(&acc, &y)?,
                    });
                    q_prev = out.queries;
                }
                Ok(total.expect("two frames"))
            },
            &probes,
            1e-5,
        )?;
        cases.push(GradCase {
            name: format!("decoder.unroll.{}", placement.name()),
            max_rel_err: rel,
        });
    }

    let max_rel_err = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradSuiteReport { cases, max_rel_err })
}

/// Builds a model whose parameter slots are the given tensors in
/// `named()` order (keeps tape-bound probes bound).
fn model_from_probes(cfg: &ModelConfig, probes: &[Tensor]) -> Model {
    let mut m = Model::init(cfg, 0).expect("skeleton init");
    let slots = m.named_mut();
    assert_eq!(slots.len(), probes.len());
    for ((_, slot), p) in slots.into_iter().zip(probes) {
        *slot = p.clone();
    }
    m
}
