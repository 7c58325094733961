//! End-to-end model: encoders, p-step cell rollout, output unit, the
//! composite loss, pairwise/four-way accuracy, and the training loop.
//!
//! Two fusion variants share everything except the rollout wiring:
//! * mid fusion: one cell whose read units cover the enabled modalities,
//!   fused inside each step;
//! * late fusion: one single-modality cell per enabled modality, with the
//!   final memories fused by the same affine-concat scheme.
//!
//! One shared head scores every candidate from [q, m_p, a_k].

use crate::adam::{adam_step, AdamState};
use crate::cell::{self, AffineIds, CellIds, CellState};
use crate::data::{Modality, QAInstance};
use crate::encoders::{self, KbNodes, LstmIds};
use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::rng::Rng;
use crate::synth;
use crate::tape::{Graph, NodeId};
use crate::tensor::{Dtype, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Mid,
    Late,
}

impl Fusion {
    pub fn tag(self) -> &'static str {
        match self {
            Fusion::Mid => "mid",
            Fusion::Late => "late",
        }
    }

    pub fn from_tag(s: &str) -> Option<Fusion> {
        match s {
            "mid" => Some(Fusion::Mid),
            "late" => Some(Fusion::Late),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Affine,
    TwoLayer,
}

impl Head {
    pub fn tag(self) -> &'static str {
        match self {
            Head::Affine => "affine",
            Head::TwoLayer => "two-layer",
        }
    }

    pub fn from_tag(s: &str) -> Option<Head> {
        match s {
            "affine" => Some(Head::Affine),
            "two-layer" => Some(Head::TwoLayer),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn from_tag(s: &str) -> Option<Precision> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Per-stream raw input widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputWidths {
    pub question: usize,
    pub answer: usize,
    pub visual: usize,
    pub transcript: usize,
    pub acoustic: usize,
}

impl InputWidths {
    pub fn uniform(w: usize) -> Self {
        InputWidths { question: w, answer: w, visual: w, transcript: w, acoustic: w }
    }

    pub fn of(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual,
            Modality::Transcript => self.transcript,
            Modality::Acoustic => self.acoustic,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Reasoning steps.
    pub p: usize,
    /// Model width; must be even (the encoders split it across directions).
    pub d: usize,
    /// Enabled modalities in canonical order. May be empty: an answers-only
    /// model for bias probing, in which the fused read degenerates to a
    /// learned bias vector.
    pub modalities: Vec<Modality>,
    pub fusion: Fusion,
    pub head: Head,
    pub widths: InputWidths,
    pub precision: Precision,
    /// Share one question transform across steps instead of one per step.
    pub share_q_transform: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            p: 12,
            d: 512,
            modalities: Modality::ALL.to_vec(),
            fusion: Fusion::Mid,
            head: Head::TwoLayer,
            widths: InputWidths::uniform(16),
            precision: Precision::F32,
            share_q_transform: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::Config { key: "p".into(), reason: "must be at least 1".into() });
        }
        if self.d < 2 || self.d % 2 != 0 {
            return Err(Error::Config { key: "d".into(), reason: "must be even and at least 2".into() });
        }
        let mut seen = Vec::new();
        for m in &self.modalities {
            if seen.contains(m) {
                return Err(Error::Config {
                    key: "modalities".into(),
                    reason: format!("duplicate modality {m}"),
                });
            }
            seen.push(*m);
        }
        Ok(())
    }

    /// Modalities in canonical (V, T, Ac) order.
    pub fn canonical_modalities(&self) -> Vec<Modality> {
        Modality::ALL.iter().copied().filter(|m| self.modalities.contains(m)).collect()
    }
}

/// Architecture-specific parameter handles.
enum Arch {
    Mid { cell: CellIds },
    Late { cells: Vec<(Modality, CellIds)>, fuse_w: Option<usize>, fuse_b: usize },
}

/// All learned weights plus the structural handles into the registry.
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub seed: u64,
    pub reg: ParamRegistry<T>,
    enc_q: LstmIds,
    enc_a: LstmIds,
    enc_mod: Vec<(Modality, LstmIds)>,
    arch: Arch,
    head_affine: AffineIds,
    head_two: (AffineIds, AffineIds),
}

const INIT_STREAM: u64 = 0xA110;

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters. Encoders and read units are registered for every
    /// modality regardless of the enabled subset, so ablations keep a
    /// structurally comparable registry; only the fusion width follows the
    /// enabled subset.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let mut rng = Rng::from_key(seed, INIT_STREAM);
        let d = config.d;

        let enc_q = encoders::init_lstm(&mut reg, &mut rng, "enc.q", config.widths.question, d)?;
        let enc_a = encoders::init_lstm(&mut reg, &mut rng, "enc.a", config.widths.answer, d)?;
        let mut enc_mod = Vec::new();
        for m in Modality::ALL {
            let ids = encoders::init_lstm(
                &mut reg,
                &mut rng,
                &format!("enc.{}", m.tag()),
                config.widths.of(m),
                d,
            )?;
            enc_mod.push((m, ids));
        }

        let enabled = config.canonical_modalities();
        let arch = match config.fusion {
            Fusion::Mid => Arch::Mid {
                cell: cell::init_cell(
                    &mut reg,
                    &mut rng,
                    "cell",
                    d,
                    config.p,
                    &Modality::ALL,
                    enabled.len(),
                    config.share_q_transform,
                )?,
            },
            Fusion::Late => {
                let mut cells = Vec::new();
                for m in Modality::ALL {
                    let ids = cell::init_cell(
                        &mut reg,
                        &mut rng,
                        &format!("late.{}", m.tag()),
                        d,
                        config.p,
                        &[m],
                        1,
                        config.share_q_transform,
                    )?;
                    cells.push((m, ids));
                }
                let fuse_w = if enabled.is_empty() {
                    None
                } else {
                    let limit = (6.0 / (enabled.len() * d + d) as f64).sqrt();
                    Some(reg.insert(
                        "late.fuse.w",
                        Tensor::from_fn(vec![enabled.len() * d, d], |_| {
                            T::from_f64(rng.range(-limit, limit))
                        }),
                    )?)
                };
                let fuse_b = reg.insert("late.fuse.b", Tensor::zeros(vec![d]))?;
                Arch::Late { cells, fuse_w, fuse_b }
            }
        };

        let glorot = |rng: &mut Rng, rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_fn(vec![rows, cols], |_| T::from_f64(rng.range(-limit, limit)))
        };
        let head_affine = AffineIds {
            w: reg.insert("head.affine.w", glorot(&mut rng, 3 * d, 1))?,
            b: reg.insert("head.affine.b", Tensor::zeros(vec![1]))?,
        };
        let head_two = (
            AffineIds {
                w: reg.insert("head.l1.w", glorot(&mut rng, 3 * d, d))?,
                b: reg.insert("head.l1.b", Tensor::zeros(vec![d]))?,
            },
            AffineIds {
                w: reg.insert("head.l2.w", glorot(&mut rng, d, 1))?,
                b: reg.insert("head.l2.b", Tensor::zeros(vec![1]))?,
            },
        );

        Ok(ModelParams {
            config: config.clone(),
            seed,
            reg,
            enc_q,
            enc_a,
            enc_mod,
            arch,
            head_affine,
            head_two,
        })
    }

    fn enc_for(&self, m: Modality) -> &LstmIds {
        &self.enc_mod.iter().find(|(tag, _)| *tag == m).unwrap().1
    }

    pub fn mid_cell(&self) -> Option<&CellIds> {
        match &self.arch {
            Arch::Mid { cell } => Some(cell),
            Arch::Late { .. } => None,
        }
    }

    // ── checkpoint serialization ────────────────────────────────────────

    pub fn to_bundle(&self) -> Result<crate::bundle::FeatureBundle> {
        let mut b = crate::bundle::FeatureBundle::new();
        let c = &self.config;
        let mods_mask = c
            .canonical_modalities()
            .iter()
            .map(|m| match m {
                Modality::Visual => 1.0,
                Modality::Transcript => 2.0,
                Modality::Acoustic => 4.0,
            })
            .sum::<f64>();
        let meta = vec![
            1.0,
            c.p as f64,
            c.d as f64,
            mods_mask,
            matches!(c.fusion, Fusion::Late) as u8 as f64,
            matches!(c.head, Head::TwoLayer) as u8 as f64,
            matches!(c.precision, Precision::F64) as u8 as f64,
            (self.seed >> 32) as f64,
            (self.seed & 0xffff_ffff) as f64,
            c.widths.question as f64,
            c.widths.answer as f64,
            c.widths.visual as f64,
            c.widths.transcript as f64,
            c.widths.acoustic as f64,
            c.share_q_transform as u8 as f64,
        ];
        b.insert_f64("meta", vec![meta.len()], meta)?;
        for (name, tensor) in self.reg.iter() {
            let shape = tensor.shape().to_vec();
            match T::DTYPE {
                Dtype::F32 => b.insert_f32(
                    name.to_string(),
                    shape,
                    tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
                )?,
                Dtype::F64 => b.insert_f64(
                    name.to_string(),
                    shape,
                    tensor.data().iter().map(|v| v.as_f64()).collect(),
                )?,
            }
        }
        Ok(b)
    }

    pub fn from_bundle(b: &crate::bundle::FeatureBundle) -> Result<Self> {
        let (config, seed) = decode_meta(b)?;
        if config.precision
            != match T::DTYPE {
                Dtype::F32 => Precision::F32,
                Dtype::F64 => Precision::F64,
            }
        {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint precision is {}, loader expects {}",
                config.precision.tag(),
                match T::DTYPE {
                    Dtype::F32 => "f32",
                    Dtype::F64 => "f64",
                }
            )));
        }
        let mut params = ModelParams::<T>::init(&config, seed)?;
        if b.len() != params.reg.len() + 1 {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} arrays, bundle has {}",
                params.reg.len() + 1,
                b.len()
            )));
        }
        for idx in 0..params.reg.len() {
            let name = params.reg.name(idx).to_string();
            let arr = b
                .get(&name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing array `{name}`")))?;
            if arr.shape != params.reg.value(idx).shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "array `{name}` has shape {:?}, expected {:?}",
                    arr.shape,
                    params.reg.value(idx).shape()
                )));
            }
            let data: Vec<T> = match &arr.data {
                crate::bundle::ArrayData::F32(v) => v.iter().map(|&x| T::from_f32(x)).collect(),
                crate::bundle::ArrayData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            };
            *params.reg.value_mut(idx) = Tensor::new(arr.shape.clone(), data)?.with_grad();
        }
        Ok(params)
    }
}

/// Reads just the config/seed out of a checkpoint bundle (for dispatching
/// on precision before choosing the scalar type).
pub fn decode_meta(b: &crate::bundle::FeatureBundle) -> Result<(ModelConfig, u64)> {
    let meta = b
        .get("meta")
        .ok_or_else(|| Error::CheckpointMismatch("missing `meta` array".into()))?
        .data
        .to_f64();
    if meta.len() != 15 || meta[0] != 1.0 {
        return Err(Error::CheckpointMismatch("unrecognized meta layout".into()));
    }
    let mask = meta[3] as u32;
    let mut modalities = Vec::new();
    if mask & 1 != 0 {
        modalities.push(Modality::Visual);
    }
    if mask & 2 != 0 {
        modalities.push(Modality::Transcript);
    }
    if mask & 4 != 0 {
        modalities.push(Modality::Acoustic);
    }
    let config = ModelConfig {
        p: meta[1] as usize,
        d: meta[2] as usize,
        modalities,
        fusion: if meta[4] != 0.0 { Fusion::Late } else { Fusion::Mid },
        head: if meta[5] != 0.0 { Head::TwoLayer } else { Head::Affine },
        precision: if meta[6] != 0.0 { Precision::F64 } else { Precision::F32 },
        widths: InputWidths {
            question: meta[9] as usize,
            answer: meta[10] as usize,
            visual: meta[11] as usize,
            transcript: meta[12] as usize,
            acoustic: meta[13] as usize,
        },
        share_q_transform: meta[14] != 0.0,
    };
    let seed = ((meta[7] as u64) << 32) | (meta[8] as u64);
    Ok((config, seed))
}

// ── forward ─────────────────────────────────────────────────────────────

/// Attention maps of one rollout step, copied out of the tape.
#[derive(Clone, Debug)]
pub struct StepTraceValues {
    pub control: Vec<f64>,
    pub reads: Vec<(Modality, Vec<f64>)>,
}

/// One rollout's trace; mid fusion has a single rollout covering all
/// enabled modalities, late fusion has one per modality.
#[derive(Clone, Debug)]
pub struct RolloutTrace {
    /// `None` for the shared mid-fusion rollout.
    pub modality: Option<Modality>,
    pub steps: Vec<StepTraceValues>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// One score per candidate, as f64 regardless of model precision.
    pub scores: Vec<f64>,
    pub rollouts: Vec<RolloutTrace>,
}

/// Prediction plus the live score nodes, for building a training loss on
/// the same tape. `attn_nodes` exposes every emitted attention
/// distribution (control and read, in rollout order) for probes that need
/// gradients through the attention maps themselves.
pub struct ForwardPass {
    pub prediction: Prediction,
    pub score_nodes: Vec<NodeId>,
    pub attn_nodes: Vec<NodeId>,
    /// Gathered pre-attention matrices, one per read unit per step.
    pub gather_nodes: Vec<NodeId>,
}

fn collect_attn_nodes(trace: &cell::StepTrace, into: &mut Vec<NodeId>, gathers: &mut Vec<NodeId>) {
    into.push(trace.control);
    into.extend(trace.reads.iter().map(|(_, id)| *id));
    gathers.extend(trace.gathers.iter().map(|(_, id)| *id));
}

fn trace_step<T: Scalar>(g: &Graph<T>, trace: &cell::StepTrace) -> StepTraceValues {
    StepTraceValues {
        control: g.value(trace.control).data().iter().map(|v| v.as_f64()).collect(),
        reads: trace
            .reads
            .iter()
            .map(|(m, id)| (*m, g.value(*id).data().iter().map(|v| v.as_f64()).collect()))
            .collect(),
    }
}

fn check_coverage<T: Scalar>(params: &ModelParams<T>, instance: &QAInstance) -> Result<()> {
    for m in params.config.canonical_modalities() {
        if instance.modality(m).is_none() {
            return Err(Error::MissingModality(m.tag()));
        }
    }
    Ok(())
}

/// Builds the full forward computation on the given tape and returns the
/// candidate scores (finite-checked) plus attention traces.
pub fn forward_on<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    instance: &QAInstance,
) -> Result<ForwardPass> {
    check_coverage(params, instance)?;
    let reg = &params.reg;
    let cfg = &params.config;
    let enabled = cfg.canonical_modalities();

    let qn = encoders::encode_question(g, reg, &params.enc_q, &instance.question)?;

    let mut kbs: Vec<(Modality, KbNodes)> = Vec::with_capacity(enabled.len());
    for &m in &enabled {
        let seq = instance.modality(m).expect("coverage checked");
        kbs.push((m, encoders::encode_bidirectional(g, reg, params.enc_for(m), seq)?));
    }

    let mut attn_nodes = Vec::new();
    let mut gather_nodes = Vec::new();
    let (m_final, rollouts) = match &params.arch {
        Arch::Mid { cell: cell_ids } => {
            let mut state = CellState::initial(g, reg, cell_ids)?;
            let kb_refs: Vec<(Modality, &KbNodes)> = kbs.iter().map(|(m, kb)| (*m, kb)).collect();
            let mut steps = Vec::with_capacity(cfg.p);
            for _ in 0..cfg.p {
                let (next, trace) = cell::cell_step(g, reg, cell_ids, state, qn.q, &qn, &kb_refs)?;
                collect_attn_nodes(&trace, &mut attn_nodes, &mut gather_nodes);
                steps.push(trace_step(g, &trace));
                state = next;
            }
            (state.m, vec![RolloutTrace { modality: None, steps }])
        }
        Arch::Late { cells, fuse_w, fuse_b } => {
            let mut memories = Vec::with_capacity(enabled.len());
            let mut rollouts = Vec::with_capacity(enabled.len());
            for (m, kb) in &kbs {
                let cell_ids = &cells.iter().find(|(tag, _)| tag == m).unwrap().1;
                let mut state = CellState::initial(g, reg, cell_ids)?;
                let kb_refs = [(*m, kb)];
                let mut steps = Vec::with_capacity(cfg.p);
                for _ in 0..cfg.p {
                    let (next, trace) =
                        cell::cell_step(g, reg, cell_ids, state, qn.q, &qn, &kb_refs)?;
                    collect_attn_nodes(&trace, &mut attn_nodes, &mut gather_nodes);
                    steps.push(trace_step(g, &trace));
                    state = next;
                }
                memories.push(state.m);
                rollouts.push(RolloutTrace { modality: Some(*m), steps });
            }
            let b = g.param(reg, *fuse_b);
            let fused = if memories.is_empty() {
                g.reshape(b, vec![1, cfg.d])?
            } else {
                let w = g.param(reg, fuse_w.expect("fusion weight exists when streams do"));
                let cat = g.concat(&memories, 1)?;
                let y = g.matmul(cat, w)?;
                g.add_rows(y, b)?
            };
            (fused, rollouts)
        }
    };

    let mut scores = Vec::with_capacity(instance.candidates.len());
    let mut score_nodes = Vec::with_capacity(instance.candidates.len());
    for (seq, _) in &instance.candidates {
        let a = encoders::encode_answer(g, reg, &params.enc_a, seq)?;
        let x = g.concat(&[qn.q, m_final, a], 1)?;
        let y = match cfg.head {
            Head::Affine => cell::affine(g, reg, params.head_affine, x)?,
            Head::TwoLayer => {
                let h_lin = cell::affine(g, reg, params.head_two.0, x)?;
                let h = g.elu(h_lin);
                cell::affine(g, reg, params.head_two.1, h)?
            }
        };
        let v = g.value(y).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "candidate score".into() });
        }
        scores.push(v.as_f64());
        score_nodes.push(y);
    }

    Ok(ForwardPass { prediction: Prediction { scores, rollouts }, score_nodes, attn_nodes, gather_nodes })
}

/// Forward pass on a fresh tape; the tape is dropped, so this is
/// evaluation-only.
pub fn forward<T: Scalar>(params: &ModelParams<T>, instance: &QAInstance) -> Result<Prediction> {
    let mut g = Graph::new();
    Ok(forward_on(&mut g, params, instance)?.prediction)
}

/// Evaluation forward over a set, processed in `batch_size` chunks.
/// Chunking never changes any result; it only bounds peak tape memory.
pub fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    instances: &[QAInstance],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        for inst in chunk {
            out.push(forward(params, inst)?);
        }
    }
    Ok(out)
}

// ── loss and metrics ────────────────────────────────────────────────────

/// Composite loss on batch means: (mean(y1) - 1)^2 + mean(y2)^2.
pub fn composite_loss(y1: &[f64], y2: &[f64]) -> Result<f64> {
    if y1.is_empty() || y2.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if y1.len() != y2.len() {
        return Err(Error::ShapeMismatch { op: "composite_loss", lhs: vec![y1.len()], rhs: vec![y2.len()] });
    }
    let m1 = y1.iter().sum::<f64>() / y1.len() as f64;
    let m2 = y2.iter().sum::<f64>() / y2.len() as f64;
    Ok((m1 - 1.0) * (m1 - 1.0) + m2 * m2)
}

/// The same loss as tape nodes, for training.
pub fn composite_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    y1: &[NodeId],
    y2: &[NodeId],
) -> Result<NodeId> {
    if y1.is_empty() || y2.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if y1.len() != y2.len() {
        return Err(Error::ShapeMismatch { op: "composite_loss", lhs: vec![y1.len()], rhs: vec![y2.len()] });
    }
    let inv = T::from_f64(1.0 / y1.len() as f64);
    let cat1 = g.concat(y1, 1)?;
    let s1 = g.sum(cat1);
    let m1 = g.scale(s1, inv);
    let d1 = g.add_scalar(m1, -T::one());
    let t1 = g.mul(d1, d1)?;
    let cat2 = g.concat(y2, 1)?;
    let s2 = g.sum(cat2);
    let m2 = g.scale(s2, inv);
    let t2 = g.mul(m2, m2)?;
    g.add(t1, t2)
}

/// All (correct, incorrect) index pairs in deterministic order: correct
/// index major, incorrect minor.
pub fn enumerate_a2_pairs(labels: &[bool]) -> Result<Vec<(usize, usize)>> {
    let correct: Vec<usize> = labels.iter().enumerate().filter_map(|(i, &c)| c.then_some(i)).collect();
    let incorrect: Vec<usize> =
        labels.iter().enumerate().filter_map(|(i, &c)| (!c).then_some(i)).collect();
    if correct.is_empty() {
        return Err(Error::NoCandidates("correct"));
    }
    if incorrect.is_empty() {
        return Err(Error::NoCandidates("incorrect"));
    }
    let mut pairs = Vec::with_capacity(correct.len() * incorrect.len());
    for &c in &correct {
        for &i in &incorrect {
            pairs.push((c, i));
        }
    }
    Ok(pairs)
}

/// Binary accuracy over scored pairs: strict inequality, ties score zero.
pub fn accuracy_a2(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let wins = pairs.iter().filter(|(y1, y2)| y1 > y2).count();
    Ok(wins as f64 / pairs.len() as f64)
}

/// Four-way accuracy: for each question, every correct candidate forms one
/// combination with the (exactly three) incorrect candidates; the
/// combination scores iff the correct candidate is the unique strict
/// argmax. Returns (accuracy, combination count).
pub fn accuracy_a4(questions: &[(Vec<f64>, Vec<bool>)]) -> Result<(f64, usize)> {
    if questions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (scores, labels) in questions {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "accuracy_a4",
                lhs: vec![scores.len()],
                rhs: vec![labels.len()],
            });
        }
        let incorrect: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter_map(|(&s, &c)| (!c).then_some(s))
            .collect();
        if incorrect.len() != 3 {
            return Err(Error::MalformedCombination(incorrect.len()));
        }
        let corrects: Vec<f64> =
            scores.iter().zip(labels).filter_map(|(&s, &c)| c.then_some(s)).collect();
        if corrects.is_empty() {
            return Err(Error::NoCandidates("correct"));
        }
        for &c in &corrects {
            total += 1;
            if incorrect.iter().all(|&i| c > i) {
                hits += 1;
            }
        }
    }
    Ok((hits as f64 / total as f64, total))
}

/// Evaluation metrics over a set of instances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub a2: f64,
    /// Present only when every question has exactly three incorrect
    /// candidates (the four-way protocol's shape).
    pub a4: Option<f64>,
    pub m_a2: usize,
    pub m_a4: usize,
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    instances: &[QAInstance],
    batch_size: usize,
) -> Result<MetricsReport> {
    if instances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let predictions = forward_batch(params, instances, batch_size)?;
    let mut pair_scores = Vec::new();
    let mut questions = Vec::new();
    for (inst, pred) in instances.iter().zip(&predictions) {
        let labels: Vec<bool> = inst.candidates.iter().map(|(_, c)| *c).collect();
        for (c, i) in enumerate_a2_pairs(&labels)? {
            pair_scores.push((pred.scores[c], pred.scores[i]));
        }
        questions.push((pred.scores.clone(), labels));
    }
    let a2 = accuracy_a2(&pair_scores)?;
    let four_way_shape = questions.iter().all(|(_, labels)| {
        labels.iter().filter(|&&c| !c).count() == 3 && labels.iter().any(|&c| c)
    });
    let (a4, m_a4) = if four_way_shape {
        let (acc, m) = accuracy_a4(&questions)?;
        (Some(acc), m)
    } else {
        (None, 0)
    };
    Ok(MetricsReport { a2, a4, m_a2: pair_scores.len(), m_a4 })
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { batch_size: 32, lr: 1e-3, epochs: 10, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_a2: f64,
    pub val_a4: f64,
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters at the best-validation-A2 epoch.
    pub params: ModelParams<T>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

const SHUFFLE_STREAM: u64 = 0x5481;

/// Mini-batch training over the enumerated (correct, incorrect) pairs with
/// the composite loss. Each epoch shuffles the question order and each
/// question's pair list, keeping a question's pairs adjacent so its rollout
/// is built once per batch instead of once per pair. Deterministic given
/// (config, data, seed); returns the best-validation checkpoint and the
/// full history.
pub fn train<T: Scalar>(
    config: &ModelConfig,
    opts: &TrainOptions,
    train_set: &[QAInstance],
    val_set: &[QAInstance],
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut params = ModelParams::<T>::init(config, opts.seed)?;
    let mut adam = AdamState::<T>::new(opts.lr);
    let mut shuffle_rng = Rng::from_key(opts.seed, SHUFFLE_STREAM);

    let pair_lists: Vec<Vec<(usize, usize)>> = train_set
        .iter()
        .map(|inst| {
            let labels: Vec<bool> = inst.candidates.iter().map(|(_, c)| *c).collect();
            enumerate_a2_pairs(&labels)
        })
        .collect::<Result<_>>()?;

    let mut history = Vec::with_capacity(opts.epochs);
    let mut best_epoch = 0usize;
    let mut best_a2 = f64::NEG_INFINITY;
    let mut best_reg = params.reg.clone();

    for epoch in 1..=opts.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut schedule: Vec<(usize, usize, usize)> = Vec::new();
        for &qi in &order {
            let mut pairs = pair_lists[qi].clone();
            shuffle_rng.shuffle(&mut pairs);
            schedule.extend(pairs.into_iter().map(|(c, i)| (qi, c, i)));
        }

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in schedule.chunks(opts.batch_size.max(1)).enumerate() {
            let mut g = Graph::new();
            let mut passes: Vec<(usize, ForwardPass)> = Vec::new();
            let mut y1 = Vec::with_capacity(chunk.len());
            let mut y2 = Vec::with_capacity(chunk.len());
            for &(qi, c, i) in chunk {
                let pass = match passes.iter().find(|(q, _)| *q == qi) {
                    Some((_, p)) => p,
                    None => {
                        let p = forward_on(&mut g, &params, &train_set[qi])?;
                        passes.push((qi, p));
                        &passes.last().unwrap().1
                    }
                };
                y1.push(pass.score_nodes[c]);
                y2.push(pass.score_nodes[i]);
            }
            let loss = composite_loss_node(&mut g, &y1, &y2)?;
            let loss_val = g.value(loss).data()[0].as_f64();
            if !loss_val.is_finite() {
                return Err(Error::TrainDiverged { epoch, batch: batch_idx });
            }
            loss_sum += loss_val;
            batches += 1;

            params.reg.zero_grads();
            g.backward(loss)?;
            g.export_param_grads(&mut params.reg);
            adam_step(&mut params.reg, &mut adam)?;
        }

        let report = evaluate(&params, val_set, opts.batch_size)?;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            val_a2: report.a2,
            val_a4: report.a4.unwrap_or(f64::NAN),
        };
        history.push(stats);
        if report.a2 > best_a2 {
            best_a2 = report.a2;
            best_epoch = epoch;
            best_reg = params.reg.clone();
        }
    }

    params.reg = best_reg;
    Ok(TrainOutcome { params, history, best_epoch })
}

/// Convenience: build a model config whose widths match a dataset.
pub fn widths_from_instance(inst: &QAInstance) -> InputWidths {
    let w = |m: Modality, fallback: usize| {
        inst.modality(m).map(|s| s.width()).unwrap_or(fallback)
    };
    InputWidths {
        question: inst.question.width(),
        answer: inst.candidates.first().map(|(s, _)| s.width()).unwrap_or(1),
        visual: w(Modality::Visual, 1),
        transcript: w(Modality::Transcript, 1),
        acoustic: w(Modality::Acoustic, 1),
    }
}

/// Deterministic synthetic fixtures used by gradient checking and tests.
pub fn synthetic_config(spec: &synth::SyntheticSpec, d: usize, p: usize) -> ModelConfig {
    ModelConfig {
        p,
        d,
        modalities: Modality::ALL.to_vec(),
        fusion: Fusion::Mid,
        head: Head::TwoLayer,
        widths: InputWidths {
            question: spec.width_question,
            answer: spec.width_answer,
            visual: spec.width_modality,
            transcript: spec.width_modality,
            acoustic: spec.width_modality,
        },
        precision: Precision::F32,
        share_q_transform: false,
    }
}
