//! Command-line front end.
//!
//! Every flag may also come from a `--config FILE` of `key = value` lines
//! (keys are the long flag names); flags given on the command line win.

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use super::config::ConfigFile;
use super::data::{
    generate_synthetic, generate_utterances, read_frames_csv, read_utterances, stay_probability, write_frames_csv,
    write_utterances, DatasetSpec,
};
use super::decode::viterbi_sticky;
use super::manifest::RunManifest;
use super::model_file::{load_model, save_model};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::linalg::Matrix;
use crate::network::{forward, init_params, param_count, GateConfig, ModelConfig, ParamMask, Parameters};
use crate::training::{
    adapt, evaluate, train, write_metrics_csv, AdaptConfig, AdaptData, EpochMetrics, LabelSource, LabeledFrames,
    Objective, Teacher, TrainConfig, TrainData,
};

#[derive(Parser, Debug)]
#[command(name = "hdnn", version, about = "Highway deep neural network acoustic-model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic Gaussian frame task (and optional sMBR utterances).
    GenData(GenDataArgs),
    /// Train a model with cross-entropy on labelled frames.
    Train(TrainArgs),
    /// Train a student from a teacher model (KL or hybrid loss).
    Distill(DistillArgs),
    /// Sequence-train a model with the lattice sMBR objective.
    Smbr(SmbrArgs),
    /// Fine-tune selected parameter groups on adaptation data.
    Adapt(AdaptArgs),
    /// Report frame error rate and cross-entropy of a model on labelled frames.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print the exact parameter count of an architecture.
    CountParams(ArchArgs),
}

#[derive(Args, Debug, Serialize)]
struct CommonArgs {
    /// Seed for every random choice of the run.
    #[arg(long, env = "HDNN_SEED", default_value_t = 0)]
    seed: u64,
    /// `key = value` file supplying defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ArchKind {
    Plain,
    Highway,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GateKind {
    Both,
    Transform,
    Carry,
    Constrained,
}

#[derive(Args, Debug, Serialize)]
struct ArchArgs {
    #[arg(long, value_enum, default_value = "highway")]
    arch: ArchKind,
    #[arg(long, value_enum, default_value = "both")]
    gates: GateKind,
    #[arg(long)]
    input: usize,
    #[arg(long)]
    hidden: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    output: usize,
    #[command(flatten)]
    #[serde(skip)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    frames_per_class: usize,
    /// Distance between class means in noise standard deviations.
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    /// Offset added to every feature of every frame.
    #[arg(long)]
    shift: Option<f64>,
    /// Sample split; splits of one seed share class means.
    #[arg(long, default_value_t = 0)]
    split: u64,
    /// Number of sMBR utterances to write under `OUT/utterances`.
    #[arg(long, default_value_t = 0)]
    utterances: usize,
    #[arg(long, default_value_t = 20)]
    utterance_frames: usize,
    /// Lattice confusion-set size per frame.
    #[arg(long, default_value_t = 3)]
    confusion: usize,
    #[command(flatten)]
    #[serde(skip)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct ModelShapeArgs {
    #[arg(long, value_enum, default_value = "highway")]
    arch: ArchKind,
    #[arg(long, value_enum, default_value = "both")]
    gates: GateKind,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
    /// Start from this model instead of a fresh initialisation (its
    /// architecture overrides the shape flags).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Per-sample learning rate.
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    /// Parameter groups to update: any of h (hidden), g (gates), c (output).
    #[arg(long, default_value = "hgc")]
    update: String,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Labelled frames CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    shape: ModelShapeArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    #[serde(skip)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    /// Weight of the hard-label term; 0 trains on teacher posteriors only.
    #[arg(long, default_value_t = 0.0)]
    q: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[command(flatten)]
    shape: ModelShapeArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    #[serde(skip)]
    common: CommonArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SmoothingKind {
    Ce,
    Kl,
}

#[derive(Args, Debug, Serialize)]
struct SmbrArgs {
    /// Directory of `.lat` / `.csv` utterance pairs.
    #[arg(long)]
    data: PathBuf,
    /// Starting model.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Frame-level smoothing term.
    #[arg(long, value_enum, default_value = "ce")]
    mode: SmoothingKind,
    /// Teacher model for KL smoothing.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    p: f64,
    /// Acoustic scale.
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value = "hgc")]
    update: String,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    common: CommonArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LabelKind {
    Pseudo,
    Oracle,
    Teacher,
}

#[derive(Args, Debug, Serialize)]
struct AdaptArgs {
    /// Adaptation frames CSV (the label column is read only for `--labels oracle`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "pseudo")]
    labels: LabelKind,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// With pseudo labels: decode consecutive runs of this many frames with a
    /// state-persistence prior instead of taking per-frame decisions.
    #[arg(long)]
    sequence_length: Option<usize>,
    #[arg(long, default_value_t = 2e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value = "g")]
    update: String,
    #[command(flatten)]
    #[serde(skip)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: CommonArgs,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Distill(_) => "distill",
            Command::Smbr(_) => "smbr",
            Command::Adapt(_) => "adapt",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::CountParams(_) => "count-params",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenData(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Distill(a) => &a.common,
            Command::Smbr(a) => &a.common,
            Command::Adapt(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Gradcheck(a) => &a.common,
            Command::CountParams(a) => &a.common,
        }
    }

    /// Default manifest location: next to the main output when there is
    /// one, otherwise in the working directory.
    fn default_manifest(&self) -> PathBuf {
        let beside = |p: &Path| {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        };
        match self {
            Command::GenData(a) => a.out.join("manifest.json"),
            Command::Train(a) => beside(&a.model),
            Command::Distill(a) => beside(&a.model),
            Command::Smbr(a) => beside(&a.model),
            Command::Adapt(a) => beside(&a.model),
            _ => PathBuf::from(format!("hdnn-{}.manifest.json", self.name())),
        }
    }
}

/// Outcome of a successful subcommand: lines for stdout, files written and
/// headline metrics for the manifest.
struct Report {
    lines: Vec<String>,
    outputs: Vec<PathBuf>,
    metrics_files: Vec<PathBuf>,
    final_metrics: Value,
    /// Run finished but its check failed (gradcheck).
    failed: bool,
}

impl Report {
    fn new() -> Self {
        Report {
            lines: Vec::new(),
            outputs: Vec::new(),
            metrics_files: Vec::new(),
            final_metrics: Value::Null,
            failed: false,
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on a runtime failure or failed check,
/// 2 on a usage error.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config_file(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let command = cli.command;
    let common = command.common();
    let settings = serde_json::to_value(&command).unwrap_or(Value::Null);
    let mut manifest = RunManifest::start(command.name(), settings, Some(common.seed));
    let manifest_path = common.manifest.clone().unwrap_or_else(|| command.default_manifest());

    let result = execute(&command);
    let code = match &result {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            let display = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect();
            manifest.outputs = display(&report.outputs);
            manifest.metrics_files = display(&report.metrics_files);
            manifest.final_metrics = report.final_metrics.clone();
            manifest.finish(if report.failed { "failed" } else { "ok" });
            i32::from(report.failed)
        }
        Err(e) => {
            eprintln!("error: {e}");
            manifest.final_metrics = json!({ "error": e.to_string() });
            manifest.finish("error");
            1
        }
    };
    if let Err(e) = manifest.write(&manifest_path) {
        eprintln!("error: could not write manifest {}: {e}", manifest_path.display());
        return 1;
    }
    code
}

/// Appends `--key value` for every config-file entry whose flag is absent
/// from `argv`, so command-line flags take precedence.
fn merge_config_file(mut argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(pos) = strs.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = match strs[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => strs.get(pos + 1).cloned().ok_or("--config needs a file path")?,
    };
    let Some(sub_name) = strs.get(1) else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(sub_name)
        .ok_or_else(|| format!("unknown subcommand `{sub_name}`"))?;
    let file = ConfigFile::load(Path::new(&path)).map_err(|e| format!("config file {path}: {e}"))?;
    for (key, value) in &file.entries {
        if key == "config" {
            return Err("a config file cannot name another config file".into());
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("config file {path}: unknown key `{key}` for {sub_name}"))?;
        let flag = format!("--{key}");
        if strs.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}="))) {
            continue;
        }
        if arg.get_action().takes_values() {
            argv.push(flag.into());
            argv.push(value.into());
        } else {
            match value.as_str() {
                "true" | "yes" | "1" => argv.push(flag.into()),
                "false" | "no" | "0" => {}
                v => return Err(format!("config file {path}: `{key}` expects true or false, got `{v}`")),
            }
        }
    }
    Ok(argv)
}

fn execute(command: &Command) -> Result<Report> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Smbr(a) => smbr_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::CountParams(a) => count_params_cmd(a),
    }
}

fn gate_config(kind: GateKind) -> GateConfig {
    match kind {
        GateKind::Both => GateConfig::BOTH,
        GateKind::Transform => GateConfig::TRANSFORM_ONLY,
        GateKind::Carry => GateConfig::CARRY_ONLY,
        GateKind::Constrained => GateConfig::CONSTRAINED,
    }
}

fn model_config(
    arch: ArchKind,
    gates: GateKind,
    input: usize,
    hidden: usize,
    layers: usize,
    output: usize,
) -> ModelConfig {
    match arch {
        ArchKind::Plain => ModelConfig::plain(input, hidden, layers, output),
        ArchKind::Highway => ModelConfig::highway(input, hidden, layers, output, gate_config(gates)),
    }
}

/// Parses a mask such as `hgc`, `g` or `hc`.
pub fn parse_mask(spec: &str) -> Result<ParamMask> {
    let mut mask = ParamMask {
        update_theta_h: false,
        update_theta_g: false,
        update_theta_c: false,
    };
    for ch in spec.chars() {
        match ch {
            'h' => mask.update_theta_h = true,
            'g' => mask.update_theta_g = true,
            'c' => mask.update_theta_c = true,
            other => return Err(Error::Config(format!("unknown parameter group `{other}` in `{spec}`"))),
        }
    }
    mask.validate()?;
    Ok(mask)
}

fn count_params_cmd(a: &ArchArgs) -> Result<Report> {
    let config = model_config(a.arch, a.gates, a.input, a.hidden, a.layers, a.output);
    config.validate()?;
    let n = param_count(&config);
    let mut r = Report::new();
    r.lines.push(n.to_string());
    r.final_metrics = json!({ "param_count": n });
    Ok(r)
}

fn gen_data(a: &GenDataArgs) -> Result<Report> {
    let spec = DatasetSpec {
        num_classes: a.classes,
        feature_dim: a.dim,
        frames_per_class: a.frames_per_class,
        separation: a.separation,
        noise_std: a.noise_std,
        shift: a.shift.map(|s| vec![s; a.dim]),
        split: a.split,
        seed: a.common.seed,
    };
    std::fs::create_dir_all(&a.out)?;
    let frames = generate_synthetic(&spec)?;
    let frames_path = a.out.join("frames.csv");
    write_frames_csv(&frames_path, &frames)?;
    let mut r = Report::new();
    r.outputs.push(frames_path.clone());
    r.lines
        .push(format!("wrote {} frames to {}", frames.len(), frames_path.display()));
    if a.utterances > 0 {
        let dir = a.out.join("utterances");
        let utts = generate_utterances(&spec, a.utterances, a.utterance_frames, a.confusion)?;
        write_utterances(&dir, &utts)?;
        r.lines
            .push(format!("wrote {} utterances to {}", utts.len(), dir.display()));
        r.outputs.push(dir);
    }
    r.final_metrics = json!({ "frames": frames.len(), "utterances": a.utterances });
    Ok(r)
}

fn num_classes(frames: &LabeledFrames<f64>, explicit: Option<usize>) -> Result<usize> {
    let implied = frames.labels.iter().max().map_or(0, |m| m + 1);
    match explicit {
        Some(j) if j < implied => Err(Error::Config(format!("--classes {j} but labels reach {}", implied - 1))),
        Some(j) => Ok(j),
        None => Ok(implied),
    }
}

fn starting_model(
    shape: &ModelShapeArgs,
    frames: &LabeledFrames<f64>,
    seed: u64,
) -> Result<(Parameters<f64>, ModelConfig)> {
    if let Some(path) = &shape.init {
        let (params, config) = load_model(path)?;
        if config.input_dim != frames.features.cols() {
            return Err(Error::Consistency(format!(
                "model expects {} features, data has {}",
                config.input_dim,
                frames.features.cols()
            )));
        }
        return Ok((params, config));
    }
    let config = model_config(
        shape.arch,
        shape.gates,
        frames.features.cols(),
        shape.hidden,
        shape.layers,
        num_classes(frames, shape.classes)?,
    );
    config.validate()?;
    Ok((init_params(&config, seed)?, config))
}

fn write_metrics(path: &Option<PathBuf>, metrics: &[EpochMetrics], r: &mut Report) -> Result<()> {
    if let Some(p) = path {
        write_metrics_csv(File::create(p)?, metrics, true)?;
        r.metrics_files.push(p.clone());
    }
    Ok(())
}

fn epoch_lines(metrics: &[EpochMetrics], r: &mut Report) {
    for m in metrics {
        let mut line = format!("epoch {} {} loss {:.6} fer {:.4}", m.epoch, m.objective, m.loss, m.fer);
        if let Some(e) = m.expected_accuracy {
            line.push_str(&format!(" expected_accuracy {e:.6}"));
        }
        r.lines.push(line);
    }
}

fn finish_training(
    model: &Path,
    params: &Parameters<f64>,
    config: &ModelConfig,
    metrics: &[EpochMetrics],
    metrics_path: &Option<PathBuf>,
) -> Result<Report> {
    save_model(model, params, config)?;
    let mut r = Report::new();
    r.outputs.push(model.to_path_buf());
    write_metrics(metrics_path, metrics, &mut r)?;
    epoch_lines(metrics, &mut r);
    r.final_metrics = serde_json::to_value(metrics.last()).unwrap_or(Value::Null);
    Ok(r)
}

fn frame_train_config(objective: Objective, o: &OptimArgs, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        objective,
        learning_rate: o.learning_rate,
        epochs: o.epochs,
        batch_size: o.batch_size,
        mask: parse_mask(&o.update)?,
        seed,
        ..TrainConfig::default()
    })
}

fn train_cmd(a: &TrainArgs) -> Result<Report> {
    let frames = read_frames_csv(&a.data)?;
    let (params, config) = starting_model(&a.shape, &frames, a.common.seed)?;
    let tcfg = frame_train_config(Objective::Ce, &a.optim, a.common.seed)?;
    let out = train(params, &config, TrainData::Frames(&frames), &tcfg, None)?;
    finish_training(&a.model, &out.params, &config, &out.metrics, &a.optim.metrics)
}

fn distill_cmd(a: &DistillArgs) -> Result<Report> {
    let frames = read_frames_csv(&a.data)?;
    let (teacher, teacher_cfg) = load_model(&a.teacher)?;
    let (params, config) = starting_model(&a.shape, &frames, a.common.seed)?;
    if teacher_cfg.input_dim != config.input_dim || teacher_cfg.output_dim != config.output_dim {
        return Err(Error::Consistency(
            "teacher and student disagree on input or output size".into(),
        ));
    }
    let objective = if a.q > 0.0 { Objective::Hybrid } else { Objective::Kd };
    let tcfg = TrainConfig {
        q: a.q,
        temperature: a.temperature,
        ..frame_train_config(objective, &a.optim, a.common.seed)?
    };
    let t = Teacher {
        params: &teacher,
        config: &teacher_cfg,
    };
    let out = train(params, &config, TrainData::Frames(&frames), &tcfg, Some(t))?;
    finish_training(&a.model, &out.params, &config, &out.metrics, &a.optim.metrics)
}

fn smbr_cmd(a: &SmbrArgs) -> Result<Report> {
    let utts = read_utterances(&a.data)?;
    let (params, config) = load_model(&a.init)?;
    let teacher = a.teacher.as_deref().map(load_model).transpose()?;
    let objective = match (a.mode, &teacher) {
        (SmoothingKind::Ce, None) => Objective::SmbrCe,
        (SmoothingKind::Kl, Some(_)) => Objective::SmbrKl,
        (SmoothingKind::Ce, Some(_)) => return Err(Error::Config("--teacher is only used with --mode kl".into())),
        (SmoothingKind::Kl, None) => return Err(Error::Config("--mode kl needs --teacher".into())),
    };
    let tcfg = TrainConfig {
        objective,
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        p: a.p,
        k: a.k,
        temperature: a.temperature,
        mask: parse_mask(&a.update)?,
        seed: a.common.seed,
        ..TrainConfig::default()
    };
    let t = teacher.as_ref().map(|(p, c)| Teacher { params: p, config: c });
    let out = train(params, &config, TrainData::Sequences(&utts), &tcfg, t)?;
    finish_training(&a.model, &out.params, &config, &out.metrics, &a.metrics)
}

fn adapt_cmd(a: &AdaptArgs) -> Result<Report> {
    let frames = read_frames_csv(&a.data)?;
    let (params, config) = load_model(&a.init)?;
    let mut data = AdaptData::unlabeled(frames.features.clone());
    let label_source = match a.labels {
        LabelKind::Pseudo => {
            if let Some(len) = a.sequence_length {
                data.pseudo_labels = Some(decode_pseudo_labels(&params, &config, &frames.features, len)?);
            }
            LabelSource::HardPseudo
        }
        LabelKind::Oracle => {
            data.oracle_labels = Some(frames.labels.clone());
            LabelSource::OracleHard
        }
        LabelKind::Teacher => {
            let path = a
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Config("--labels teacher needs --teacher".into()))?;
            let (tp, tc) = load_model(path)?;
            data.teacher_posteriors = Some(forward(&tp, &tc, &frames.features, 1.0)?.posteriors);
            LabelSource::SoftTeacher
        }
    };
    let acfg = AdaptConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        label_source,
        mask: parse_mask(&a.update)?,
        batch_size: a.batch_size,
        seed: a.common.seed,
        ..AdaptConfig::default()
    };
    let out = adapt(&params, &config, &data, &acfg)?;
    save_model(&a.model, &out.params, &config)?;
    let mut r = Report::new();
    r.outputs.push(a.model.clone());
    for (epoch, loss) in out.loss_trajectory.iter().enumerate() {
        r.lines.push(format!("epoch {epoch} adaptation loss {loss:.6}"));
    }
    r.final_metrics = json!({ "loss_trajectory": out.loss_trajectory });
    Ok(r)
}

/// Viterbi pseudo-labels for consecutive runs of `len` frames.
fn decode_pseudo_labels(
    params: &Parameters<f64>,
    config: &ModelConfig,
    x: &Matrix<f64>,
    len: usize,
) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Config("--sequence-length must be positive".into()));
    }
    let post = forward(params, config, x, 1.0)?.posteriors;
    let stay = stay_probability(config.output_dim);
    let rows: Vec<usize> = (0..post.rows()).collect();
    let mut labels = Vec::with_capacity(post.rows());
    for chunk in rows.chunks(len) {
        labels.extend(viterbi_sticky(&post.select_rows(chunk), stay)?);
    }
    Ok(labels)
}

fn eval_cmd(a: &EvalArgs) -> Result<Report> {
    let frames = read_frames_csv(&a.data)?;
    let (params, config) = load_model(&a.model)?;
    let e = evaluate(&params, &config, &frames)?;
    let mut r = Report::new();
    r.lines.push(format!("fer {:.6} mean_ce {:.6}", e.fer, e.mean_ce));
    r.final_metrics = serde_json::to_value(e).unwrap_or(Value::Null);
    Ok(r)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Report> {
    let reports = run_suite(a.common.seed)?;
    let mut r = Report::new();
    for c in &reports {
        r.lines.push(format!(
            "{} {:<24} entries {:>4} max_rel_err {:.3e} tol {:.0e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.entries,
            c.max_relative_error,
            c.tolerance
        ));
    }
    r.failed = reports.iter().any(|c| !c.passed);
    r.final_metrics = serde_json::to_value(&reports).unwrap_or(Value::Null);
    Ok(r)
}
