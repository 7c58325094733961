//! Experiment harness: run configuration, training/evaluation commands,
//! the ablation grid, finite-difference gradient checking, and attention
//! trace emission. The CLI is a thin wrapper over these functions.

use crate::bundle;
use crate::data::{Modality, QAInstance};
use crate::error::{Error, Result};
use crate::model::{
    self, Fusion, Head, InputWidths, MetricsReport, ModelConfig, ModelParams, Precision,
    TrainOptions,
};
use crate::synth::{self, SyntheticSpec};
use crate::tensor::Scalar;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ── run configuration ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub runs: usize,
    pub seeds: Vec<u64>,
    /// Dataset directory; may come from the CLI instead of the file.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Worker threads for grid runs; 0 uses all cores.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            // width 0 means "infer from the dataset at load time"
            model: ModelConfig { widths: InputWidths::uniform(0), ..Default::default() },
            batch_size: 32,
            lr: 1e-3,
            epochs: 10,
            runs: 5,
            seeds: (1..=5).collect(),
            data: None,
            out: None,
            workers: 0,
        }
    }
}

fn bad_key(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.into(), reason: reason.into() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad_key(key, format!("cannot parse `{value}`")))
}

fn parse_modalities(value: &str) -> Result<Vec<Modality>> {
    if value == "none" || value.is_empty() {
        return Ok(vec![]);
    }
    let mut out = Vec::new();
    for part in value.split([',', '+']) {
        let m = Modality::from_tag(part.trim())
            .ok_or_else(|| bad_key("modalities", format!("unknown modality `{part}`")))?;
        if out.contains(&m) {
            return Err(bad_key("modalities", format!("duplicate modality `{part}`")));
        }
        out.push(m);
    }
    Ok(out)
}

pub fn modalities_label(mods: &[Modality]) -> String {
    if mods.is_empty() {
        "none".to_string()
    } else {
        mods.iter().map(|m| m.tag()).collect::<Vec<_>>().join("+")
    }
}

/// Parses a line-oriented key=value run configuration. Absent keys take the
/// defaults; unknown keys are rejected by name. Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut runs_set = false;
    let mut seeds_set = false;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad_key(line, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "p" => cfg.model.p = parse_num(key, value)?,
            "d" => cfg.model.d = parse_num(key, value)?,
            "modalities" => cfg.model.modalities = parse_modalities(value)?,
            "fusion" => {
                cfg.model.fusion = Fusion::from_tag(value)
                    .ok_or_else(|| bad_key(key, format!("unknown fusion `{value}`")))?
            }
            "head" => {
                cfg.model.head = Head::from_tag(value)
                    .ok_or_else(|| bad_key(key, format!("unknown head `{value}`")))?
            }
            "precision" => {
                cfg.model.precision = Precision::from_tag(value)
                    .ok_or_else(|| bad_key(key, format!("unknown precision `{value}`")))?
            }
            "share_q_transform" => {
                cfg.model.share_q_transform = parse_num::<u8>(key, value)
                    .map(|v| v != 0)
                    .or_else(|_| match value {
                        "true" => Ok(true),
                        "false" => Ok(false),
                        _ => Err(bad_key(key, format!("cannot parse `{value}`"))),
                    })?
            }
            "width_question" => cfg.model.widths.question = parse_num(key, value)?,
            "width_answer" => cfg.model.widths.answer = parse_num(key, value)?,
            "width_visual" => cfg.model.widths.visual = parse_num(key, value)?,
            "width_transcript" => cfg.model.widths.transcript = parse_num(key, value)?,
            "width_acoustic" => cfg.model.widths.acoustic = parse_num(key, value)?,
            "batch_size" => cfg.batch_size = parse_num(key, value)?,
            "lr" => cfg.lr = parse_num(key, value)?,
            "epochs" => cfg.epochs = parse_num(key, value)?,
            "runs" => {
                cfg.runs = parse_num(key, value)?;
                runs_set = true;
            }
            "seeds" => {
                cfg.seeds = value
                    .split(',')
                    .map(|s| parse_num::<u64>(key, s.trim()))
                    .collect::<Result<_>>()?;
                seeds_set = true;
            }
            "data" => cfg.data = Some(PathBuf::from(value)),
            "out" => cfg.out = Some(PathBuf::from(value)),
            "workers" => cfg.workers = parse_num(key, value)?,
            _ => return Err(bad_key(key, "unknown key")),
        }
    }
    if seeds_set && runs_set && cfg.seeds.len() != cfg.runs {
        return Err(bad_key("seeds", format!("{} seeds but runs={}", cfg.seeds.len(), cfg.runs)));
    }
    if seeds_set {
        cfg.runs = cfg.seeds.len();
    } else if runs_set {
        cfg.seeds = (1..=cfg.runs as u64).collect();
    }
    if cfg.runs < 1 {
        return Err(bad_key("runs", "must be at least 1"));
    }
    if cfg.batch_size < 1 {
        return Err(bad_key("batch_size", "must be at least 1"));
    }
    if cfg.epochs < 1 {
        return Err(bad_key("epochs", "must be at least 1"));
    }
    if cfg.model.p < 1 {
        return Err(bad_key("p", "must be at least 1"));
    }
    if cfg.model.d < 2 || cfg.model.d % 2 != 0 {
        return Err(bad_key("d", "must be even and at least 2"));
    }
    cfg.model.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Every key, explicitly, in a form `parse_config` accepts.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let m = &cfg.model;
    let _ = writeln!(s, "p={}", m.p);
    let _ = writeln!(s, "d={}", m.d);
    let _ = writeln!(s, "modalities={}", modalities_label(&m.modalities));
    let _ = writeln!(s, "fusion={}", m.fusion.tag());
    let _ = writeln!(s, "head={}", m.head.tag());
    let _ = writeln!(s, "precision={}", m.precision.tag());
    let _ = writeln!(s, "share_q_transform={}", m.share_q_transform);
    let _ = writeln!(s, "width_question={}", m.widths.question);
    let _ = writeln!(s, "width_answer={}", m.widths.answer);
    let _ = writeln!(s, "width_visual={}", m.widths.visual);
    let _ = writeln!(s, "width_transcript={}", m.widths.transcript);
    let _ = writeln!(s, "width_acoustic={}", m.widths.acoustic);
    let _ = writeln!(s, "batch_size={}", cfg.batch_size);
    let _ = writeln!(s, "lr={}", cfg.lr);
    let _ = writeln!(s, "epochs={}", cfg.epochs);
    let _ = writeln!(s, "runs={}", cfg.runs);
    let _ = writeln!(
        s,
        "seeds={}",
        cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    );
    if let Some(d) = &cfg.data {
        let _ = writeln!(s, "data={}", d.display());
    }
    if let Some(o) = &cfg.out {
        let _ = writeln!(s, "out={}", o.display());
    }
    let _ = writeln!(s, "workers={}", cfg.workers);
    s
}

/// Fills width fields left at 0 from the first instance of the dataset.
pub fn resolve_widths(model: &mut ModelConfig, sample: &QAInstance) {
    let inferred = model::widths_from_instance(sample);
    let fill = |slot: &mut usize, v: usize| {
        if *slot == 0 {
            *slot = v;
        }
    };
    fill(&mut model.widths.question, inferred.question);
    fill(&mut model.widths.answer, inferred.answer);
    fill(&mut model.widths.visual, inferred.visual);
    fill(&mut model.widths.transcript, inferred.transcript);
    fill(&mut model.widths.acoustic, inferred.acoustic);
}

// ── gen-data ────────────────────────────────────────────────────────────

/// Generates a dataset, splits it by groups, and writes the dataset
/// directory. Returns (train, val) sizes.
pub fn cmd_gen_data(
    spec: &SyntheticSpec,
    train_fraction: f64,
    split_seed: u64,
    out_dir: &Path,
) -> Result<(usize, usize)> {
    let data = synth::generate_dataset(spec)?;
    let (train, val) = synth::split(data, train_fraction, split_seed)?;
    synth::write_dataset_dir(out_dir, spec, &train, &val)?;
    Ok((train.len(), val.len()))
}

// ── train / eval ────────────────────────────────────────────────────────

pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_a2: f64,
    pub best_a4: f64,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

fn history_csv(history: &[model::EpochStats]) -> String {
    let mut s = String::from("epoch,loss,val_a2,val_a4\n");
    for h in history {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", h.epoch, h.mean_loss, h.val_a2, h.val_a4);
    }
    s
}

fn train_run_generic<T: Scalar>(
    cfg: &RunConfig,
    seed: u64,
    train_set: &[QAInstance],
    val_set: &[QAInstance],
) -> Result<(model::TrainOutcome<T>, MetricsReport)> {
    let opts = TrainOptions { batch_size: cfg.batch_size, lr: cfg.lr, epochs: cfg.epochs, seed };
    let out = model::train::<T>(&cfg.model, &opts, train_set, val_set)?;
    let report = model::evaluate(&out.params, val_set, cfg.batch_size)?;
    Ok((out, report))
}

/// Trains one model and writes checkpoint, history, and the resolved
/// configuration into `out_dir`.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, seed: u64) -> Result<TrainSummary> {
    let train_set = synth::load_split(data_dir, "train", false)?;
    let val_set = synth::load_split(data_dir, "val", false)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut cfg = cfg.clone();
    resolve_widths(&mut cfg.model, &train_set[0]);
    std::fs::create_dir_all(out_dir)?;
    bundle::write_atomic(&out_dir.join("config.resolved.txt"), render_config(&cfg).as_bytes())?;

    let (bundle_bytes, history, best_epoch, report) = match cfg.model.precision {
        Precision::F32 => {
            let (out, report) = train_run_generic::<f32>(&cfg, seed, &train_set, &val_set)?;
            (out.params.to_bundle()?.to_bytes(), out.history, out.best_epoch, report)
        }
        Precision::F64 => {
            let (out, report) = train_run_generic::<f64>(&cfg, seed, &train_set, &val_set)?;
            (out.params.to_bundle()?.to_bytes(), out.history, out.best_epoch, report)
        }
    };

    let checkpoint = out_dir.join("checkpoint.macx");
    bundle::write_atomic(&checkpoint, &bundle_bytes)?;
    let history_path = out_dir.join("history.csv");
    bundle::write_atomic(&history_path, history_csv(&history).as_bytes())?;
    Ok(TrainSummary {
        best_epoch,
        best_a2: report.a2,
        best_a4: report.a4.unwrap_or(f64::NAN),
        checkpoint,
        history: history_path,
    })
}

/// Loads a checkpoint and evaluates it on one split of a dataset.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    split_name: &str,
    batch_size: usize,
) -> Result<MetricsReport> {
    let b = bundle::read_bundle(checkpoint)?;
    let (config, _) = model::decode_meta(&b)?;
    let set = synth::load_split(data_dir, split_name, false)?;
    match config.precision {
        Precision::F32 => {
            let params = ModelParams::<f32>::from_bundle(&b)?;
            model::evaluate(&params, &set, batch_size)
        }
        Precision::F64 => {
            let params = ModelParams::<f64>::from_bundle(&b)?;
            model::evaluate(&params, &set, batch_size)
        }
    }
}

// ── ablation grid ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub modalities: Vec<Modality>,
    pub fusion: Fusion,
    pub seed: u64,
    pub best_epoch: usize,
    pub a2: f64,
    pub a4: f64,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub modalities: Vec<Modality>,
    pub fusion: Fusion,
    pub runs: usize,
    pub a2_mean: f64,
    pub a2_std: f64,
    pub a4_mean: f64,
    pub a4_std: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub records: Vec<RunRecord>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The grid: each modality subset {V}, {T}, {Ac}, {V,T,Ac} under mid
/// fusion, plus the full subset under late fusion; every cell runs once
/// per seed. Cells execute in a worker pool; each run is internally
/// deterministic, so the table is too.
pub fn run_ablation(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<AblationTable> {
    let train_set = synth::load_split(data_dir, "train", false)?;
    let val_set = synth::load_split(data_dir, "val", false)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut cfg = cfg.clone();
    resolve_widths(&mut cfg.model, &train_set[0]);
    std::fs::create_dir_all(out_dir)?;
    bundle::write_atomic(&out_dir.join("config.resolved.txt"), render_config(&cfg).as_bytes())?;

    let full: Vec<Modality> = Modality::ALL.to_vec();
    let mut cells: Vec<(Vec<Modality>, Fusion)> = vec![
        (vec![Modality::Visual], Fusion::Mid),
        (vec![Modality::Transcript], Fusion::Mid),
        (vec![Modality::Acoustic], Fusion::Mid),
        (full.clone(), Fusion::Mid),
        (full, Fusion::Late),
    ];
    let mut jobs = Vec::new();
    for (mods, fusion) in cells.drain(..) {
        for &seed in &cfg.seeds {
            jobs.push((mods.clone(), fusion, seed));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config { key: "workers".into(), reason: e.to_string() })?;
    let records: Result<Vec<RunRecord>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|(mods, fusion, seed)| {
                let mut run_cfg = cfg.clone();
                run_cfg.model.modalities = mods.clone();
                run_cfg.model.fusion = *fusion;
                let (best_epoch, a2, a4) = match run_cfg.model.precision {
                    Precision::F32 => {
                        let (out, report) =
                            train_run_generic::<f32>(&run_cfg, *seed, &train_set, &val_set)?;
                        (out.best_epoch, report.a2, report.a4.unwrap_or(f64::NAN))
                    }
                    Precision::F64 => {
                        let (out, report) =
                            train_run_generic::<f64>(&run_cfg, *seed, &train_set, &val_set)?;
                        (out.best_epoch, report.a2, report.a4.unwrap_or(f64::NAN))
                    }
                };
                Ok(RunRecord {
                    modalities: mods.clone(),
                    fusion: *fusion,
                    seed: *seed,
                    best_epoch,
                    a2,
                    a4,
                })
            })
            .collect()
    });
    let records = records?;

    let mut rows = Vec::new();
    let mut seen: Vec<(Vec<Modality>, Fusion)> = Vec::new();
    for r in &records {
        let key = (r.modalities.clone(), r.fusion);
        if !seen.contains(&key) {
            seen.push(key);
        }
    }
    for (mods, fusion) in seen {
        let a2s: Vec<f64> = records
            .iter()
            .filter(|r| r.modalities == mods && r.fusion == fusion)
            .map(|r| r.a2)
            .collect();
        let a4s: Vec<f64> = records
            .iter()
            .filter(|r| r.modalities == mods && r.fusion == fusion)
            .map(|r| r.a4)
            .collect();
        let (a2_mean, a2_std) = mean_std(&a2s);
        let (a4_mean, a4_std) = mean_std(&a4s);
        rows.push(AblationRow {
            modalities: mods,
            fusion,
            runs: a2s.len(),
            a2_mean,
            a2_std,
            a4_mean,
            a4_std,
        });
    }
    let table = AblationTable { rows, records };
    write_ablation_outputs(&table, out_dir)?;
    Ok(table)
}

fn write_ablation_outputs(table: &AblationTable, out_dir: &Path) -> Result<()> {
    let mut raw = String::from("modalities,fusion,seed,best_epoch,a2,a4\n");
    for r in &table.records {
        let _ = writeln!(
            raw,
            "{},{},{},{},{:.6},{:.6}",
            modalities_label(&r.modalities),
            r.fusion.tag(),
            r.seed,
            r.best_epoch,
            r.a2,
            r.a4
        );
    }
    bundle::write_atomic(&out_dir.join("raw.csv"), raw.as_bytes())?;

    let row_line = |r: &AblationRow| {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            modalities_label(&r.modalities),
            r.fusion.tag(),
            r.runs,
            r.a2_mean,
            r.a2_std,
            r.a4_mean,
            r.a4_std
        )
    };
    let mut all = String::from("modalities,fusion,runs,a2_mean,a2_std,a4_mean,a4_std\n");
    for r in &table.rows {
        all.push_str(&row_line(r));
    }
    bundle::write_atomic(&out_dir.join("ablation.csv"), all.as_bytes())?;

    let mut t1 = String::from("modalities,fusion,runs,a2_mean,a2_std,a4_mean,a4_std\n");
    for r in table.rows.iter().filter(|r| r.fusion == Fusion::Mid) {
        t1.push_str(&row_line(r));
    }
    bundle::write_atomic(&out_dir.join("table_modalities.csv"), t1.as_bytes())?;

    let mut t2 = String::from("modalities,fusion,runs,a2_mean,a2_std,a4_mean,a4_std\n");
    for r in table.rows.iter().filter(|r| r.modalities.len() == Modality::ALL.len()) {
        t2.push_str(&row_line(r));
    }
    bundle::write_atomic(&out_dir.join("table_fusion.csv"), t2.as_bytes())?;
    Ok(())
}

// ── gradient check ──────────────────────────────────────────────────────

pub struct GradcheckCase {
    pub label: String,
    pub max_rel_err: f64,
    pub params: usize,
    /// (parameter name, flat entry, analytic, finite-difference) of the
    /// worst entry, for diagnosing near-misses.
    pub worst: (String, usize, f64, f64),
}

pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_err: f64,
    pub elapsed_secs: f64,
}

/// Central finite differences (h = 1e-5) against the analytic gradients,
/// always in f64, on a small model across both fusion and both head modes.
/// Relative error uses denominator max(|a|, |fd|, 1e-8).
pub fn gradcheck_suite(d: usize, p: usize, len_seq: usize, len_question: usize) -> Result<GradcheckReport> {
    gradcheck_suite_seeded(d, p, len_seq, len_question, 200, 11, 31)
}

/// Seeded variant for fixture exploration.
pub fn gradcheck_suite_seeded(
    d: usize,
    p: usize,
    len_seq: usize,
    len_question: usize,
    data_seed: u64,
    param_seed: u64,
    jitter_seed: u64,
) -> Result<GradcheckReport> {
    let start = Instant::now();
    // The relative-error criterion has an absolute floor of 1e-8 in its
    // denominator, so every parameter must receive a gradient well above
    // the finite-difference noise floor (~1e-10). Rich inputs (several
    // instances, long questions, unit-scale noise) keep even the deepest
    // multiplicative paths -- per-step question transforms behind two
    // softmaxes -- at healthy magnitudes.
    let spec = SyntheticSpec {
        task: synth::Task::Xor3,
        instances: 4,
        seed: data_seed,
        len_modality: len_seq,
        len_question,
        len_answer: 3,
        width_modality: 5,
        width_question: 4,
        width_answer: 4,
        length_jitter: 1,
        sigma_noise: 1.0,
        pattern_amp: 2.0,
        ..Default::default()
    };
    let instances = synth::generate_dataset(&spec)?;
    let h = 1e-5;
    let mut cases = Vec::new();
    let mut overall: f64 = 0.0;

    for fusion in [Fusion::Mid, Fusion::Late] {
        for head in [Head::Affine, Head::TwoLayer] {
            let config = ModelConfig {
                p,
                d,
                modalities: Modality::ALL.to_vec(),
                fusion,
                head,
                widths: InputWidths {
                    question: spec.width_question,
                    answer: spec.width_answer,
                    visual: spec.width_modality,
                    transcript: spec.width_modality,
                    acoustic: spec.width_modality,
                },
                precision: Precision::F64,
                share_q_transform: false,
            };
            let mut params = ModelParams::<f64>::init(&config, param_seed)?;
            // Check at a generic parameter point: zero-initialized vectors
            // (c0/m0, biases) would otherwise null out entire input lanes
            // and leave some weights with degenerately tiny gradients.
            let mut jitter = crate::rng::Rng::from_key(jitter_seed, 7);
            for idx in 0..params.reg.len() {
                for v in params.reg.value_mut(idx).data_mut() {
                    *v += jitter.range(-0.6, 0.6);
                }
            }

            // analytic gradients of the probe loss
            let mut g = crate::tape::Graph::new();
            let loss = probe_loss_node(&mut g, &params, &instances)?;
            params.reg.zero_grads();
            g.backward(loss)?;
            g.export_param_grads(&mut params.reg);
            let analytic: Vec<Vec<f64>> =
                (0..params.reg.len()).map(|i| params.reg.value(i).grad.clone().unwrap()).collect();

            let mut worst: f64 = 0.0;
            let mut worst_at = (String::new(), 0usize, 0.0, 0.0);
            let n_params = params.reg.len();
            for idx in 0..n_params {
                for e in 0..params.reg.value(idx).numel() {
                    let orig = params.reg.value(idx).data()[e];
                    params.reg.value_mut(idx).data_mut()[e] = orig + h;
                    let up = probe_loss_value(&params, &instances)?;
                    params.reg.value_mut(idx).data_mut()[e] = orig - h;
                    let down = probe_loss_value(&params, &instances)?;
                    params.reg.value_mut(idx).data_mut()[e] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let a = analytic[idx][e];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                    if rel > worst {
                        worst = rel;
                        worst_at = (params.reg.name(idx).to_string(), e, a, fd);
                    }
                }
            }
            overall = overall.max(worst);
            cases.push(GradcheckCase {
                label: format!("{}/{}", fusion.tag(), head.tag()),
                max_rel_err: worst,
                params: params.reg.scalar_count(),
                worst: worst_at,
            });
        }
    }
    Ok(GradcheckReport { cases, max_rel_err: overall, elapsed_secs: start.elapsed().as_secs_f64() })
}

/// Probe loss for gradient checking: squared error of every candidate
/// score against fixed alternating targets, plus position-weighted sums of
/// every attention distribution. The attention terms matter: they drive
/// well-scaled gradients through the score maps and gathering layers whose
/// only influence is on attention logits, paths a score-only loss excites
/// too weakly for the relative-error criterion.
fn probe_loss_node<T: Scalar>(
    g: &mut crate::tape::Graph<T>,
    params: &ModelParams<T>,
    instances: &[QAInstance],
) -> Result<crate::tape::NodeId> {
    let mut total: Option<crate::tape::NodeId> = None;
    for (ii, inst) in instances.iter().enumerate() {
        let pass = model::forward_on(g, params, inst)?;
        // per-instance subtotal keeps the rounding chains short
        let mut sub: Option<crate::tape::NodeId> = None;
        let mut add_term = |g: &mut crate::tape::Graph<T>, term| {
            sub = Some(match sub {
                Some(t) => g.add(t, term).expect("scalar shapes"),
                None => term,
            });
        };
        for (k, &y) in pass.score_nodes.iter().enumerate() {
            let target = if k % 2 == 0 { 0.7 } else { -0.4 };
            let diff = g.add_scalar(y, T::from_f64(-target));
            let sq2 = g.mul(diff, diff)?;
            let sq = g.reshape(sq2, vec![1])?;
            add_term(g, sq);
        }
        for (j, &attn) in pass.attn_nodes.iter().enumerate() {
            let n = g.value(attn).numel();
            let weights = crate::tensor::Tensor::from_fn(vec![n], |t| {
                T::from_f64(4.0 * ((1.3 * (t + 1) as f64 + 0.7 * (j + ii) as f64).sin()))
            });
            let w = g.input(weights);
            let prod = g.mul(attn, w)?;
            let term = g.sum(prod);
            add_term(g, term);
        }
        for (j, &gathered) in pass.gather_nodes.iter().enumerate() {
            let shape = g.value(gathered).shape().to_vec();
            let weights = crate::tensor::Tensor::from_fn(shape, |t| {
                T::from_f64(0.5 * ((0.9 * (t + 2) as f64 + 1.1 * (j + ii) as f64).cos()))
            });
            let w = g.input(weights);
            let prod = g.mul(gathered, w)?;
            let term = g.sum(prod);
            add_term(g, term);
        }
        let sub = sub.expect("instance has candidates");
        total = Some(match total {
            Some(t) => g.add(t, sub)?,
            None => sub,
        });
    }
    let t = total.expect("at least one instance");
    g.reshape(t, vec![1])
}

fn probe_loss_value(params: &ModelParams<f64>, instances: &[QAInstance]) -> Result<f64> {
    let mut g = crate::tape::Graph::new();
    let loss = probe_loss_node(&mut g, params, instances)?;
    Ok(g.value(loss).data()[0])
}

// ── attention traces ────────────────────────────────────────────────────

/// Writes a structured text trace: per-candidate scores, then one line per
/// attention distribution per reasoning step.
pub fn emit_trace(checkpoint: &Path, data_dir: &Path, split_name: &str, index: usize, out: &Path) -> Result<()> {
    let b = bundle::read_bundle(checkpoint)?;
    let (config, _) = model::decode_meta(&b)?;
    let set = synth::load_split(data_dir, split_name, false)?;
    if index >= set.len() {
        return Err(Error::IndexOutOfRange { index, count: set.len() });
    }
    let prediction = match config.precision {
        Precision::F32 => {
            let params = ModelParams::<f32>::from_bundle(&b)?;
            model::forward(&params, &set[index])?
        }
        Precision::F64 => {
            let params = ModelParams::<f64>::from_bundle(&b)?;
            model::forward(&params, &set[index])?
        }
    };
    bundle::write_atomic(out, render_trace(&set[index], &prediction).as_bytes())?;
    Ok(())
}

pub fn render_trace(instance: &QAInstance, prediction: &model::Prediction) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "macx-trace v1");
    let _ = writeln!(s, "candidates {}", prediction.scores.len());
    for (k, (score, (_, correct))) in
        prediction.scores.iter().zip(&instance.candidates).enumerate()
    {
        let flag = if *correct { "correct" } else { "incorrect" };
        let _ = writeln!(s, "score {k} {flag} {score:.9e}");
    }
    for rollout in &prediction.rollouts {
        let scope = rollout
            .modality
            .map(|m| format!(":{}", m.tag()))
            .unwrap_or_default();
        for (si, step) in rollout.steps.iter().enumerate() {
            let fmt = |xs: &[f64]| {
                xs.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(" ")
            };
            let _ = writeln!(s, "step {} control{} {}", si + 1, scope, fmt(&step.control));
            for (m, attn) in &step.reads {
                let _ = writeln!(s, "step {} read {} {}", si + 1, m.tag(), fmt(attn));
            }
        }
    }
    s
}
