//! Deterministic synthetic multimodal QA tasks.
//!
//! Each instance hides one bit per modality at a random timestep of that
//! modality's sequence; candidate answers assert a claim about those bits.
//! * `xor3`: the claim is the parity of all three bits, so no single
//!   modality (or pair) carries any information about it.
//! * `conj2`: visual AND transcript; the acoustic stream is a distractor.
//! * `copy`: the visual bit alone; a unimodal control task.
//! * `biased`: like `xor3`, but candidate answers additionally leak their
//!   own correctness through a marker pattern, mimicking language bias.
//!
//! Instance content is a pure function of (spec, index): generation draws
//! from a counter-based stream keyed by the instance index, so a dataset
//! can be produced in any order or in parallel.

use crate::bundle::{ArrayData, FeatureBundle};
use crate::data::{FeatureSequence, LatentRecord, Modality, QAInstance, StreamTag};
use crate::error::{Error, Result};
use crate::rng::Rng;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Xor3,
    Conj2,
    Copy,
    Biased,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Xor3 => "xor3",
            Task::Conj2 => "conj2",
            Task::Copy => "copy",
            Task::Biased => "biased",
        }
    }

    pub fn from_tag(s: &str) -> Option<Task> {
        match s {
            "xor3" => Some(Task::Xor3),
            "conj2" => Some(Task::Conj2),
            "copy" => Some(Task::Copy),
            "biased" => Some(Task::Biased),
            _ => None,
        }
    }
}

/// The claim encoded by correct candidates, given the hidden bits
/// (V, T, Ac order).
pub fn claim_bit(task: Task, bits: [bool; 3]) -> bool {
    match task {
        Task::Xor3 | Task::Biased => bits[0] ^ bits[1] ^ bits[2],
        Task::Conj2 => bits[0] && bits[1],
        Task::Copy => bits[0],
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub task: Task,
    pub instances: usize,
    pub seed: u64,
    /// Instances per split-atomic group.
    pub questions_per_group: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub sigma_noise: f64,
    /// Sequence lengths (allocated; up to `length_jitter` trailing steps are
    /// masked off per instance).
    pub len_modality: usize,
    pub len_question: usize,
    pub len_answer: usize,
    pub width_modality: usize,
    pub width_question: usize,
    pub width_answer: usize,
    pub length_jitter: usize,
    /// Scale applied to every embedded pattern. Parity-style tasks need the
    /// hidden bits to survive the encoders at high amplitude; weak patterns
    /// make the multimodal interaction unlearnable at desk scale.
    pub pattern_amp: f64,
    /// Probability that a candidate's bias marker reveals its correctness
    /// (`biased` task only).
    pub bias_leak: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: Task::Xor3,
            instances: 100,
            seed: 0,
            questions_per_group: 1,
            n_correct: 4,
            n_incorrect: 3,
            sigma_noise: 0.05,
            len_modality: 4,
            len_question: 3,
            len_answer: 3,
            width_modality: 8,
            width_question: 8,
            width_answer: 8,
            length_jitter: 1,
            pattern_amp: 3.0,
            bias_leak: 0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.instances,
            self.questions_per_group,
            self.n_correct,
            self.n_incorrect,
            self.len_modality,
            self.len_question,
            self.len_answer,
            self.width_modality,
            self.width_question,
            self.width_answer,
        ];
        if positive.iter().any(|&v| v == 0) || self.sigma_noise < 0.0 || self.pattern_amp <= 0.0 {
            return Err(Error::Config {
                key: "synthetic-spec".into(),
                reason: "counts and lengths must be positive, noise nonnegative".into(),
            });
        }
        if self.width_answer < 2 {
            return Err(Error::Config {
                key: "width_answer".into(),
                reason: "needs at least 2 feature lanes for the pattern vectors".into(),
            });
        }
        Ok(())
    }

    /// Canonical key=value line used for hashing and the manifest.
    pub fn canonical_string(&self) -> String {
        format!(
            "task={} instances={} seed={} group={} correct={} incorrect={} sigma={} \
             len_m={} len_q={} len_a={} w_m={} w_q={} w_a={} jitter={} amp={} leak={}",
            self.task.tag(),
            self.instances,
            self.seed,
            self.questions_per_group,
            self.n_correct,
            self.n_incorrect,
            self.sigma_noise,
            self.len_modality,
            self.len_question,
            self.len_answer,
            self.width_modality,
            self.width_question,
            self.width_answer,
            self.length_jitter,
            self.pattern_amp,
            self.bias_leak,
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Pattern lanes drawn once per (spec, seed). Each hidden bit lives on one
/// canonical basis lane of its stream and is embedded with its sign
/// (+1 for true, -1 for false), so every pattern is unit-norm and the
/// lanes of different bits within a stream are exactly orthogonal. The
/// signed encoding matters: it exposes parity-style interactions to the
/// cell's multiplicative pathways as plain products.
struct Patterns {
    /// per-modality basis lane
    modality: [usize; 3],
    /// claim-bit lane in the answer space
    claim: usize,
    /// bias-marker lane in the answer space (biased task)
    bias: usize,
    /// fixed question content, [len_question * width_question]
    question: Vec<f64>,
}

fn signed(bit: bool, amp: f64) -> f32 {
    if bit {
        amp as f32
    } else {
        -amp as f32
    }
}

const PATTERN_STREAM: u64 = u64::MAX - 1;
const SPLIT_STREAM: u64 = u64::MAX - 2;

fn patterns(spec: &SyntheticSpec) -> Patterns {
    let mut rng = Rng::from_key(spec.seed, PATTERN_STREAM);
    let mut modality = [0usize; 3];
    for slot in &mut modality {
        *slot = rng.below(spec.width_modality);
    }
    let ids = rng.distinct(spec.width_answer, 2);
    let question: Vec<f64> =
        (0..spec.len_question * spec.width_question).map(|_| 0.5 * rng.normal()).collect();
    Patterns { modality, claim: ids[0], bias: ids[1], question }
}

fn noise_rows(rng: &mut Rng, valid: usize, total: usize, width: usize, sigma: f64) -> Vec<f32> {
    let mut data = vec![0.0f32; total * width];
    for row in data.chunks_exact_mut(width).take(valid) {
        for v in row.iter_mut() {
            *v = (sigma * rng.normal()) as f32;
        }
    }
    data
}

fn jittered_len(rng: &mut Rng, len: usize, jitter: usize) -> usize {
    (len - rng.below(jitter.min(len - 1) + 1)).max(1)
}

fn mask_for(valid: usize, total: usize) -> Vec<bool> {
    (0..total).map(|t| t < valid).collect()
}

/// Generates instance `index` of the dataset described by `spec`.
pub fn generate_instance(spec: &SyntheticSpec, index: usize) -> Result<QAInstance> {
    spec.validate()?;
    if index >= spec.instances {
        return Err(Error::IndexOutOfRange { index, count: spec.instances });
    }
    let pats = patterns(spec);
    let mut rng = Rng::from_key(spec.seed, index as u64);

    let bits = [rng.bernoulli(0.5), rng.bernoulli(0.5), rng.bernoulli(0.5)];
    let claim = claim_bit(spec.task, bits);

    // modality streams: noise everywhere, the bit pattern added at one step
    let mut modalities = Vec::with_capacity(3);
    let mut positions = [0usize; 3];
    for (mi, &m) in Modality::ALL.iter().enumerate() {
        let valid = jittered_len(&mut rng, spec.len_modality, spec.length_jitter);
        let pos = rng.below(valid);
        positions[mi] = pos;
        let mut data =
            noise_rows(&mut rng, valid, spec.len_modality, spec.width_modality, spec.sigma_noise);
        data[pos * spec.width_modality + pats.modality[mi]] += signed(bits[mi], spec.pattern_amp);
        let seq = FeatureSequence::new(
            StreamTag::Modality(m),
            spec.len_modality,
            spec.width_modality,
            data,
            mask_for(valid, spec.len_modality),
        )?;
        modalities.push((m, seq));
    }

    // question: fixed content plus noise
    let q_valid = jittered_len(&mut rng, spec.len_question, spec.length_jitter);
    let mut q_data =
        noise_rows(&mut rng, q_valid, spec.len_question, spec.width_question, spec.sigma_noise);
    for (i, v) in q_data.iter_mut().enumerate().take(q_valid * spec.width_question) {
        *v += pats.question[i] as f32;
    }
    let question = FeatureSequence::new(
        StreamTag::Question,
        spec.len_question,
        spec.width_question,
        q_data,
        mask_for(q_valid, spec.len_question),
    )?;

    // candidates: claim patterns (and, for `biased`, a leak marker)
    let n_cand = spec.n_correct + spec.n_incorrect;
    let mut order: Vec<bool> = (0..n_cand).map(|k| k < spec.n_correct).collect();
    rng.shuffle(&mut order);
    let mut candidates = Vec::with_capacity(n_cand);
    let mut bias_markers = Vec::with_capacity(n_cand);
    for &correct in &order {
        let valid = jittered_len(&mut rng, spec.len_answer, spec.length_jitter);
        let mut data =
            noise_rows(&mut rng, valid, spec.len_answer, spec.width_answer, spec.sigma_noise);
        let asserted = if correct { claim } else { !claim };
        let pos = rng.below(valid);
        data[pos * spec.width_answer + pats.claim] += signed(asserted, spec.pattern_amp);
        if spec.task == Task::Biased {
            let marker = if rng.bernoulli(spec.bias_leak) { correct } else { !correct };
            bias_markers.push(marker);
            let bpos = rng.below(valid);
            data[bpos * spec.width_answer + pats.bias] += signed(marker, spec.pattern_amp);
        }
        let seq = FeatureSequence::new(
            StreamTag::Answer,
            spec.len_answer,
            spec.width_answer,
            data,
            mask_for(valid, spec.len_answer),
        )?;
        candidates.push((seq, correct));
    }

    Ok(QAInstance {
        group: index / spec.questions_per_group,
        question,
        candidates,
        modalities,
        latent: Some(LatentRecord {
            bits,
            claim,
            positions,
            bias_markers: (spec.task == Task::Biased).then_some(bias_markers),
        }),
    })
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Vec<QAInstance>> {
    (0..spec.instances).map(|i| generate_instance(spec, i)).collect()
}

/// Seeded shuffle of the question groups followed by a prefix split; a
/// group's instances never straddle the boundary. The train side takes
/// floor(fraction * groups).
pub fn split(
    dataset: Vec<QAInstance>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<QAInstance>, Vec<QAInstance>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::InvalidFraction(train_fraction));
    }
    let mut groups: Vec<usize> = Vec::new();
    for inst in &dataset {
        if !groups.contains(&inst.group) {
            groups.push(inst.group);
        }
    }
    let mut rng = Rng::from_key(seed, SPLIT_STREAM);
    rng.shuffle(&mut groups);
    let n_train = (train_fraction * groups.len() as f64).floor() as usize;
    if n_train == 0 || (n_train == groups.len() && train_fraction < 1.0) {
        return Err(Error::InvalidFraction(train_fraction));
    }
    let train_groups: std::collections::HashSet<usize> =
        groups[..n_train].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for inst in dataset {
        if train_groups.contains(&inst.group) {
            train.push(inst);
        } else {
            val.push(inst);
        }
    }
    Ok((train, val))
}

// ── serialization ───────────────────────────────────────────────────────

fn push_sequence(b: &mut FeatureBundle, name: &str, seq: &FeatureSequence) -> Result<()> {
    b.insert_f32(name.to_string(), vec![seq.len(), seq.width()], seq.data().to_vec())?;
    b.insert_f32(format!("{name}.len"), vec![1], vec![seq.valid_len() as f32])
}

fn read_sequence(b: &FeatureBundle, name: &str, tag: StreamTag) -> Result<FeatureSequence> {
    let arr = b
        .get(name)
        .ok_or_else(|| Error::CorruptBundle(format!("missing array `{name}`")))?;
    let [len, width] = arr.shape[..] else {
        return Err(Error::CorruptBundle(format!("array `{name}` is not 2-D")));
    };
    let valid = b
        .get(&format!("{name}.len"))
        .ok_or_else(|| Error::CorruptBundle(format!("missing array `{name}.len`")))?;
    let valid = valid.data.to_f64()[0] as usize;
    let data = match &arr.data {
        ArrayData::F32(v) => v.clone(),
        ArrayData::F64(v) => v.iter().map(|&x| x as f32).collect(),
    };
    FeatureSequence::new(tag, len, width, data, mask_for(valid, len))
}

/// Features-only bundle (what training and evaluation consume).
pub fn instances_to_bundle(instances: &[QAInstance]) -> Result<FeatureBundle> {
    let mut b = FeatureBundle::new();
    b.insert_f32("count", vec![1], vec![instances.len() as f32])?;
    for (i, inst) in instances.iter().enumerate() {
        b.insert_f32(format!("i{i}.group"), vec![1], vec![inst.group as f32])?;
        push_sequence(&mut b, &format!("i{i}.q"), &inst.question)?;
        let labels: Vec<f32> =
            inst.candidates.iter().map(|(_, c)| if *c { 1.0 } else { 0.0 }).collect();
        b.insert_f32(format!("i{i}.labels"), vec![labels.len()], labels)?;
        for (k, (seq, _)) in inst.candidates.iter().enumerate() {
            push_sequence(&mut b, &format!("i{i}.cand{k}"), seq)?;
        }
        for (m, seq) in &inst.modalities {
            push_sequence(&mut b, &format!("i{i}.{}", m.tag()), seq)?;
        }
    }
    Ok(b)
}

/// Latent construction records, kept out of the feature bundle entirely.
pub fn latents_to_bundle(instances: &[QAInstance]) -> Result<FeatureBundle> {
    let mut b = FeatureBundle::new();
    b.insert_f32("count", vec![1], vec![instances.len() as f32])?;
    for (i, inst) in instances.iter().enumerate() {
        let Some(latent) = &inst.latent else { continue };
        let bits: Vec<f32> = latent.bits.iter().map(|&x| x as u8 as f32).collect();
        b.insert_f32(format!("i{i}.bits"), vec![3], bits)?;
        b.insert_f32(format!("i{i}.claim"), vec![1], vec![latent.claim as u8 as f32])?;
        let pos: Vec<f32> = latent.positions.iter().map(|&p| p as f32).collect();
        b.insert_f32(format!("i{i}.pos"), vec![3], pos)?;
        if let Some(markers) = &latent.bias_markers {
            let m: Vec<f32> = markers.iter().map(|&x| x as u8 as f32).collect();
            b.insert_f32(format!("i{i}.bias"), vec![m.len()], m)?;
        }
    }
    Ok(b)
}

pub fn bundle_to_instances(
    features: &FeatureBundle,
    latents: Option<&FeatureBundle>,
) -> Result<Vec<QAInstance>> {
    let count = features
        .get("count")
        .ok_or_else(|| Error::CorruptBundle("missing `count`".into()))?
        .data
        .to_f64()[0] as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let group = features
            .get(&format!("i{i}.group"))
            .ok_or_else(|| Error::CorruptBundle(format!("missing `i{i}.group`")))?
            .data
            .to_f64()[0] as usize;
        let question = read_sequence(features, &format!("i{i}.q"), StreamTag::Question)?;
        let labels = features
            .get(&format!("i{i}.labels"))
            .ok_or_else(|| Error::CorruptBundle(format!("missing `i{i}.labels`")))?
            .data
            .to_f64();
        let mut candidates = Vec::with_capacity(labels.len());
        for (k, &flag) in labels.iter().enumerate() {
            let seq = read_sequence(features, &format!("i{i}.cand{k}"), StreamTag::Answer)?;
            candidates.push((seq, flag != 0.0));
        }
        let mut modalities = Vec::with_capacity(3);
        for m in Modality::ALL {
            let name = format!("i{i}.{}", m.tag());
            if features.get(&name).is_some() {
                modalities.push((m, read_sequence(features, &name, StreamTag::Modality(m))?));
            }
        }
        let latent = latents.and_then(|lb| {
            let bits = lb.get(&format!("i{i}.bits"))?.data.to_f64();
            let claim = lb.get(&format!("i{i}.claim"))?.data.to_f64()[0] != 0.0;
            let pos = lb.get(&format!("i{i}.pos"))?.data.to_f64();
            let bias_markers = lb
                .get(&format!("i{i}.bias"))
                .map(|a| a.data.to_f64().iter().map(|&x| x != 0.0).collect());
            Some(LatentRecord {
                bits: [bits[0] != 0.0, bits[1] != 0.0, bits[2] != 0.0],
                claim,
                positions: [pos[0] as usize, pos[1] as usize, pos[2] as usize],
                bias_markers,
            })
        });
        out.push(QAInstance { group, question, candidates, modalities, latent });
    }
    Ok(out)
}

// ── dataset directory ───────────────────────────────────────────────────

/// Writes train/val feature bundles, latent sidecars, and the manifest.
pub fn write_dataset_dir(
    dir: &Path,
    spec: &SyntheticSpec,
    train: &[QAInstance],
    val: &[QAInstance],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::bundle::write_bundle(&instances_to_bundle(train)?, &dir.join("train.macx"))?;
    crate::bundle::write_bundle(&latents_to_bundle(train)?, &dir.join("train.latents.macx"))?;
    if !val.is_empty() {
        crate::bundle::write_bundle(&instances_to_bundle(val)?, &dir.join("val.macx"))?;
        crate::bundle::write_bundle(&latents_to_bundle(val)?, &dir.join("val.latents.macx"))?;
    }
    let manifest = format!(
        "task={}\ninstances={}\ntrain={}\nval={}\nseed={}\nquestions_per_group={}\nspec_hash={:016x}\n",
        spec.task.tag(),
        spec.instances,
        train.len(),
        val.len(),
        spec.seed,
        spec.questions_per_group,
        spec.hash(),
    );
    crate::bundle::write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Loads one split; latents come along only when `with_latents` is set.
pub fn load_split(dir: &Path, name: &str, with_latents: bool) -> Result<Vec<QAInstance>> {
    let features = crate::bundle::read_bundle(&dir.join(format!("{name}.macx")))?;
    let latents = if with_latents {
        Some(crate::bundle::read_bundle(&dir.join(format!("{name}.latents.macx")))?)
    } else {
        None
    };
    bundle_to_instances(&features, latents.as_ref())
}
