//! Command-line front end.
//!
//! Settings resolve as flags over the TOML config file over command
//! defaults. The config file comes from `--config` or `QUATMOTION_CONFIG`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | the computation ran but failed (divergence, failed check, replay mismatch) |
//! | 2 | usage error |
//! | 3 | input missing or unreadable, output unwritable |
//! | 4 | malformed input, schema or version mismatch, invalid settings |
//! | 5 | output exists and `--force` was not given |
//!
//! Errors are printed to stderr as one JSON object.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dsi::{compare_interpolators, dsi, InterpolationParams};
use crate::io::{
    apply_res, emit_aad_report, export_bvh, five_segment_sequence, load_keypoints, read_qseq, res_indices,
    synth_dataset, to_pose_sequence, write_qseq, IoError, KeypointFile, QseqFile, SynthOptions,
};
use crate::qgcn::{
    gradient_check, load_checkpoint, train, write_checkpoint, GradCheckOptions, QgcnConfig, QgcnError, TrainingSample,
};
use crate::quat::{mAAD, QuatError};
use crate::skeleton::{compute_2d_rotations, load_skeleton, Skeleton, SkeletonError};

pub const MANIFEST_FORMAT: &str = "quatmotion-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const LOSS_CSV_HEADER: &str = "# quatmotion-loss 1";

#[derive(Debug, Parser)]
#[command(name = "quatmotion", version, about = "Quaternion motion lifting and dynamic skeletal interpolation")]
pub struct Cli {
    /// TOML settings file (sections: qgcn, interp, synth, train, lift).
    #[arg(long, global = true, env = "QUATMOTION_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Manifest path; defaults to `<first output>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Skip writing the run manifest.
    #[arg(long, global = true)]
    pub no_manifest: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lift 2D keypoints to a quaternion sequence with a trained checkpoint.
    Lift(LiftArgs),
    /// Train a small network on synthetic data.
    TrainToy(TrainToyArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Dynamic skeletal interpolation of a quaternion sequence.
    Interp(InterpArgs),
    /// Per-frame AAD curves of DSI and the polynomial baselines.
    CompareInterp(CompareArgs),
    /// Export a quaternion sequence as BVH.
    ExportBvh(ExportBvhArgs),
    /// Random extracting strategy: keep about 10% of the frames.
    Res(ResArgs),
    /// mAAD per body-part subset, scaled by 1000.
    Eval(EvalArgs),
    /// Re-run the command recorded in a manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub keypoints: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Built-in skeleton (whole-body, major-part, toy5) or a skeleton TOML file.
    #[arg(long, default_value = "whole-body")]
    pub skeleton: String,
    #[arg(long)]
    pub confidence_floor: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, default_value = "toy5")]
    pub skeleton: String,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "toy5")]
    pub skeleton: String,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    /// Scalars to compare.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct InterpFlags {
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Directory receiving `variant_NNN.qseq` and `segments.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub variants: Option<usize>,
    #[command(flatten)]
    pub params: InterpFlags,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Sequence to compare on; without it the five-segment construction is used.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Seed of the five-segment construction.
    #[arg(long, default_value_t = 0)]
    pub construction_seed: u64,
    /// Bones of the five-segment construction.
    #[arg(long, default_value_t = 8)]
    pub bones: usize,
    /// Smallest mean bone rotation (radians) at a junction of the construction.
    #[arg(long, default_value_t = 0.6)]
    pub min_jump: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub params: InterpFlags,
}

#[derive(Debug, Args)]
pub struct ExportBvhArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "whole-body")]
    pub skeleton: String,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ResArgs {
    /// A `.qseq` sequence or a keypoint `.json` file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    WholeBody,
    MajorPart,
    UpperBody,
    LowerBody,
    Hands,
}

impl Subset {
    const ALL: [Subset; 5] = [Subset::WholeBody, Subset::MajorPart, Subset::UpperBody, Subset::LowerBody, Subset::Hands];

    pub fn bones(self, skel: &Skeleton) -> Vec<usize> {
        match self {
            Subset::WholeBody => (0..skel.bone_count()).collect(),
            Subset::MajorPart => skel.bones_tagged(&["major"]),
            Subset::UpperBody => skel.bones_tagged(&["upper", "torso", "head"]),
            Subset::LowerBody => skel.bones_tagged(&["lower"]),
            Subset::Hands => skel.bones_tagged(&["hand"]),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Subset::WholeBody => "whole-body",
            Subset::MajorPart => "major-part",
            Subset::UpperBody => "upper-body",
            Subset::LowerBody => "lower-body",
            Subset::Hands => "hands",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "whole-body")]
    pub skeleton: String,
    /// Subsets to report; all non-empty subsets when omitted.
    #[arg(long, value_enum)]
    pub subset: Vec<Subset>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long = "from")]
    pub from: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Failed,
    Usage,
    Io,
    Format,
    Exists,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Failed => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::Format => 4,
            ErrorKind::Exists => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub path: Option<PathBuf>,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), path: None }
    }

    fn at(mut self, path: &Path) -> Self {
        self.path = Some(path.to_path_buf());
        self
    }

    pub fn to_json(&self) -> Value {
        json!({
            "error": {
                "kind": self.kind,
                "message": self.message,
                "path": self.path.as_ref().map(|p| p.display().to_string()),
            },
            "exit_code": self.kind.exit_code(),
        })
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::new(ErrorKind::Format, e.to_string())
    }
}

impl From<SkeletonError> for CliError {
    fn from(e: SkeletonError) -> Self {
        CliError::new(ErrorKind::Format, e.to_string())
    }
}

impl From<QuatError> for CliError {
    fn from(e: QuatError) -> Self {
        CliError::new(ErrorKind::Format, e.to_string())
    }
}

impl From<crate::dsi::DsiError> for CliError {
    fn from(e: crate::dsi::DsiError) -> Self {
        CliError::new(ErrorKind::Format, e.to_string())
    }
}

impl From<QgcnError> for CliError {
    fn from(e: QgcnError) -> Self {
        let kind = match e {
            QgcnError::Diverged { .. } | QgcnError::NonFinite { .. } => ErrorKind::Failed,
            QgcnError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Format,
        };
        CliError::new(kind, e.to_string())
    }
}

/// Settings file. Missing sections and fields keep the command defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    qgcn: Option<toml::Value>,
    interp: Option<toml::Value>,
    synth: Option<toml::Value>,
    train: Option<toml::Value>,
    lift: Option<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub samples: usize,
    pub data_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { samples: 64, data_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftSettings {
    pub confidence_floor: f64,
}

impl Default for LiftSettings {
    fn default() -> Self {
        Self { confidence_floor: 0.3 }
    }
}

/// Overlays the tables of `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn section<T: Serialize + for<'de> Deserialize<'de>>(defaults: T, overlay: &Option<toml::Value>, name: &str) -> Result<T, CliError> {
    let Some(top) = overlay else { return Ok(defaults) };
    let mut base = toml::Value::try_from(&defaults).map_err(|e| CliError::new(ErrorKind::Format, e.to_string()))?;
    merge(&mut base, top.clone());
    base.try_into().map_err(|e: toml::de::Error| CliError::new(ErrorKind::Format, format!("[{name}]: {e}")))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::new(ErrorKind::Io, format!("cannot read {}: {e}", path.display())).at(path))
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => toml::from_str(&read_text(p)?)
            .map_err(|e| CliError::new(ErrorKind::Format, format!("config: {e}")).at(p)),
    }
}

pub fn resolve_skeleton(spec: &str) -> Result<Skeleton, CliError> {
    match spec {
        "whole-body" => Ok(Skeleton::whole_body()),
        "major-part" => Ok(Skeleton::major_part()),
        "toy5" => Ok(Skeleton::toy5()),
        path => {
            let p = Path::new(path);
            load_skeleton(&read_text(p)?).map_err(|e| CliError::from(e).at(p))
        }
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::new(ErrorKind::Io, e.to_string()).at(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Tracks inputs and outputs of one run; outputs are written atomically.
struct Run {
    force: bool,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<String, CliError> {
        let text = read_text(path)?;
        self.inputs.push(path.to_path_buf());
        Ok(text)
    }

    fn input_path(&mut self, path: &Path) -> Result<(), CliError> {
        if !path.exists() {
            return Err(CliError::new(ErrorKind::Io, format!("no such file: {}", path.display())).at(path));
        }
        self.inputs.push(path.to_path_buf());
        Ok(())
    }

    /// Checks an output path before any work is done.
    fn claim(&mut self, path: &Path) -> Result<(), CliError> {
        let same_as_input = self.inputs.iter().any(|i| {
            i == path || matches!((fs::canonicalize(i), fs::canonicalize(path)), (Ok(a), Ok(b)) if a == b)
        });
        if same_as_input {
            return Err(CliError::new(ErrorKind::Exists, "output would overwrite an input").at(path));
        }
        if path.exists() && !self.force {
            return Err(CliError::new(ErrorKind::Exists, "output exists; pass --force to overwrite").at(path));
        }
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes)
    }
}

/// Writes through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::new(ErrorKind::Io, format!("cannot write {}: {e}", path.display())).at(path);
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| CliError::new(ErrorKind::Io, "output path has no file name").at(path))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(e)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the relative paths in `argv` refer to.
    pub cwd: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub crate_version: String,
    pub wall_time_seconds: f64,
}

/// What a command reports back for the manifest and stdout.
struct Outcome {
    config: Value,
    seed: Option<u64>,
    stdout: Option<String>,
    failure: Option<String>,
}

impl Outcome {
    fn new(config: Value, seed: Option<u64>) -> Self {
        Self { config, seed, stdout: None, failure: None }
    }
}

fn params_with_flags(base: InterpolationParams, flags: &InterpFlags, variants: Option<usize>) -> Result<InterpolationParams, CliError> {
    let p = InterpolationParams {
        threshold: flags.threshold.unwrap_or(base.threshold),
        delta: flags.delta.unwrap_or(base.delta),
        eta: flags.eta.unwrap_or(base.eta),
        sigma: flags.sigma.unwrap_or(base.sigma),
        seed: flags.seed.unwrap_or(base.seed),
        variants: variants.unwrap_or(base.variants),
        ..base
    };
    p.validate()?;
    Ok(p)
}

fn cmd_lift(a: &LiftArgs, cfg: &FileConfig, run: &mut Run) -> Result<Outcome, CliError> {
    let skel = resolve_skeleton(&a.skeleton)?;
    let mut lift = section(LiftSettings::default(), &cfg.lift, "lift")?;
    if let Some(f) = a.confidence_floor {
        lift.confidence_floor = f;
    }
    let text = run.input(&a.keypoints)?;
    run.input_path(&a.checkpoint)?;
    run.claim(&a.out)?;
    let (file, report) = load_keypoints(&text, &skel, lift.confidence_floor).map_err(|e| CliError::from(e).at(&a.keypoints))?;
    let (pose, frames) = to_pose_sequence(&file, &skel, lift.confidence_floor)?;
    let rots = compute_2d_rotations(&pose, &skel)?;
    let model = load_checkpoint(&a.checkpoint, &skel).map_err(|e| CliError::from(e).at(&a.checkpoint))?;
    let seq = model.forward(&pose, &rots)?;
    let out = QseqFile { sequence: seq, abscissae: frames.iter().map(|&f| f as f64).collect(), skeleton: Some(skel.hash()) };
    run.write(&a.out, write_qseq(&out).as_bytes())?;
    let mut o = Outcome::new(json!({ "lift": lift, "skeleton": a.skeleton }), None);
    o.stdout = Some(
        json!({
            "frames_lifted": pose.frames(),
            "frames_present": report.frames_present,
            "frame_gaps": report.frame_gaps,
            "frames_dropped_incomplete": report.frames_present - pose.frames(),
        })
        .to_string(),
    );
    Ok(o)
}

fn cmd_train_toy(a: &TrainToyArgs, cfg: &FileConfig, run: &mut Run) -> Result<Outcome, CliError> {
    let skel = resolve_skeleton(&a.skeleton)?;
    let mut qgcn = section(QgcnConfig::toy(), &cfg.qgcn, "qgcn")?;
    let mut synth = section(SynthOptions::default(), &cfg.synth, "synth")?;
    let mut settings = section(TrainSettings::default(), &cfg.train, "train")?;
    if let Some(v) = a.epochs {
        qgcn.optimizer.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        qgcn.optimizer.learning_rate = v;
    }
    if let Some(v) = a.seed {
        qgcn.seed = v;
        settings.data_seed = v;
    }
    if let Some(v) = a.samples {
        settings.samples = v;
    }
    if let Some(v) = a.frames {
        synth.frames = v;
    }
    qgcn.validate()?;
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    run.claim(&a.out)?;
    run.claim(&loss_csv)?;

    let data: Vec<TrainingSample> =
        synth_dataset(settings.samples, &skel, settings.data_seed, &synth)?.iter().map(|s| s.to_training()).collect();
    let (model, report) = train(&skel, &data, qgcn.clone())?;
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes)?;
    run.write(&a.out, &bytes)?;
    let mut csv = format!("{LOSS_CSV_HEADER}\nepoch,train_loss\n");
    for (e, l) in report.history.iter().enumerate() {
        csv.push_str(&format!("{e},{l:.9}\n"));
    }
    run.write(&loss_csv, csv.as_bytes())?;
    let mut o = Outcome::new(json!({ "qgcn": qgcn, "synth": synth, "train": settings, "skeleton": a.skeleton }), Some(qgcn.seed));
    o.stdout = Some(
        json!({
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "final_eval_loss": report.final_eval_loss,
            "ratio": report.final_loss / report.initial_loss,
            "steps": report.steps,
        })
        .to_string(),
    );
    Ok(o)
}

fn cmd_gradcheck(a: &GradcheckArgs, cfg: &FileConfig, run: &mut Run) -> Result<Outcome, CliError> {
    let skel = resolve_skeleton(&a.skeleton)?;
    let mut qgcn = section(QgcnConfig::toy(), &cfg.qgcn, "qgcn")?;
    let seed = a.seed.unwrap_or(qgcn.seed);
    qgcn.seed = seed;
    qgcn.validate()?;
    if let Some(out) = &a.out {
        run.claim(out)?;
    }
    let synth = SynthOptions { frames: a.frames, ..section(SynthOptions::default(), &cfg.synth, "synth")? };
    let sample = synth_dataset(1, &skel, seed, &synth)?.remove(0).to_training();
    let model = crate::qgcn::QgcnModel::new(&skel, qgcn.clone())?;
    let opts = GradCheckOptions { samples: a.samples, seed, ..Default::default() };
    let report = gradient_check(&model, &sample, a.tolerance, &opts)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(out) = &a.out {
        run.write(out, text.as_bytes())?;
    }
    let mut o = Outcome::new(json!({ "qgcn": qgcn, "frames": a.frames, "samples": a.samples, "tolerance": a.tolerance }), Some(seed));
    o.stdout = Some(text.trim_end().to_string());
    if !report.passed {
        o.failure = Some(format!("gradient check failed: max relative error {:e}", report.max_rel_error));
    }
    Ok(o)
}

fn read_sequence(run: &mut Run, path: &Path) -> Result<QseqFile, CliError> {
    let text = run.input(path)?;
    read_qseq(&text, None).map_err(|e| CliError::from(e).at(path))
}

fn cmd_interp(a: &InterpArgs, cfg: &FileConfig, run: &mut Run) -> Result<Outcome, CliError> {
    let params = params_with_flags(section(InterpolationParams::default(), &cfg.interp, "interp")?, &a.params, a.variants)?;
    let input = read_sequence(run, &a.input)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::new(ErrorKind::Io, e.to_string()).at(&a.out_dir))?;
    let names: Vec<PathBuf> = (0..params.variants).map(|v| a.out_dir.join(format!("variant_{v:03}.qseq"))).collect();
    let segments = a.out_dir.join("segments.json");
    for p in names.iter().chain([&segments]) {
        run.claim(p)?;
    }
    let set = dsi(&input.sequence, &params)?;
    // abscissae of the output grid in the input's own time units
    let src = &input.abscissae;
    let to_input_time = |x: f64| {
        let f = (x.floor() as usize).min(src.len().saturating_sub(2));
        if src.len() < 2 {
            return src[0];
        }
        src[f] + (x - f as f64) * (src[f + 1] - src[f])
    };
    let times: Vec<f64> = set.abscissae.iter().map(|&x| to_input_time(x)).collect();
    for (v, path) in set.variants.iter().zip(&names) {
        let file = QseqFile { sequence: v.clone(), abscissae: times.clone(), skeleton: input.skeleton.clone() };
        run.write(path, write_qseq(&file).as_bytes())?;
    }
    let summary = json!({
        "frames_in": input.sequence.frames(),
        "frames_out": set.frames(),
        "variants": set.variants.len(),
        "boundaries": set.boundaries,
        "keyframe_error": set.keyframe_error,
        "keyframes_preserved": set.keyframes_preserved,
    });
    run.write(&segments, (serde_json::to_string_pretty(&summary).expect("json") + "\n").as_bytes())?;
    let mut o = Outcome::new(json!({ "interp": params }), Some(params.seed));
    o.stdout = Some(summary.to_string());
    Ok(o)
}

fn cmd_compare(a: &CompareArgs, cfg: &FileConfig, run: &mut Run) -> Result<Outcome, CliError> {
    let params = params_with_flags(section(InterpolationParams::default(), &cfg.interp, "interp")?, &a.params, Some(1))?;
    let (seq, planted) = match &a.input {
        Some(p) => (read_sequence(run, p)?.sequence, None),
        None => {
            let f = five_segment_sequence(a.bones, a.construction_seed, a.min_jump)?;
            (f.sequence, Some(f.planted))
        }
    };
    run.claim(&a.out)?;
    let c = compare_interpolators(&seq, &params)?;
    let csv = emit_aad_report(
        &c.abscissae,
        &[("original", &c.original), ("pi", &c.pi), ("pwpi", &c.pwpi), ("dsi", &c.dsi)],
        params.weights.as_deref(),
    )?;
    run.write(&a.out, csv.as_bytes())?;
    let mut o = Outcome::new(
        json!({ "interp": params, "construction_seed": a.construction_seed, "bones": a.bones, "min_jump": a.min_jump }),
        Some(params.seed),
    );
    o.stdout = Some(
        json!({
            "frames_in": seq.frames(),
            "frames_out": c.abscissae.len(),
            "planted_boundaries": planted,
            "dsi_boundaries": c.dsi_boundaries,
            "pi_boundaries": c.pi_boundaries,
            "peak_preservation": c.peaks,
            "keyframe_error": c.keyframe_error,
        })
        .to_string(),
    );
    Ok(o)
}

fn cmd_export_bvh(a: &ExportBvhArgs, run: &mut Run) -> Result<Outcome, CliError> {
    let skel = resolve_skeleton(&a.skeleton)?;
    let text = run.input(&a.input)?;
    let file = read_qseq(&text, Some(&skel.hash())).map_err(|e| CliError::from(e).at(&a.input))?;
    run.claim(&a.out)?;
    let bvh = export_bvh(&file.sequence, &skel, a.fps)?;
    run.write(&a.out, bvh.as_bytes())?;
    Ok(Outcome::new(json!({ "skeleton": a.skeleton, "fps": a.fps }), None))
}

fn cmd_res(a: &ResArgs, run: &mut Run) -> Result<Outcome, CliError> {
    let text = run.input(&a.input)?;
    let is_json = a.input.extension().is_some_and(|e| e == "json");
    run.claim(&a.out)?;
    let (bytes, kept_count, total) = if is_json {
        let file: KeypointFile =
            serde_json::from_str(&text).map_err(|e| CliError::from(IoError::from(e)).at(&a.input))?;
        let kept = res_indices(file.frames.len(), a.seed)?;
        (file.select(&kept).to_json(), kept.len(), file.frames.len())
    } else {
        let input = read_qseq(&text, None).map_err(|e| CliError::from(e).at(&a.input))?;
        let (seq, kept) = apply_res(&input.sequence, a.seed)?;
        let out = QseqFile { sequence: seq, abscissae: kept.iter().map(|&i| input.abscissae[i]).collect(), skeleton: input.skeleton };
        (write_qseq(&out), kept.len(), input.sequence.frames())
    };
    run.write(&a.out, bytes.as_bytes())?;
    let mut o = Outcome::new(json!({ "seed": a.seed }), Some(a.seed));
    o.stdout = Some(json!({ "frames_in": total, "frames_kept": kept_count }).to_string());
    Ok(o)
}

fn cmd_eval(a: &EvalArgs, run: &mut Run) -> Result<Outcome, CliError> {
    let skel = resolve_skeleton(&a.skeleton)?;
    let hash = skel.hash();
    let pred_text = run.input(&a.pred)?;
    let gt_text = run.input(&a.gt)?;
    let pred = read_qseq(&pred_text, Some(&hash)).map_err(|e| CliError::from(e).at(&a.pred))?;
    let gt = read_qseq(&gt_text, Some(&hash)).map_err(|e| CliError::from(e).at(&a.gt))?;
    if let Some(out) = &a.out {
        run.claim(out)?;
    }
    let explicit = !a.subset.is_empty();
    let subsets: Vec<Subset> = if explicit { a.subset.clone() } else { Subset::ALL.to_vec() };
    let mut table = String::from("subset,bones,maad_x1e3\n");
    for s in &subsets {
        let bones = s.bones(&skel);
        if bones.is_empty() {
            if explicit {
                return Err(CliError::new(ErrorKind::Format, format!("skeleton has no {} bones", s.label())));
            }
            continue;
        }
        let v = mAAD(&pred.sequence, &gt.sequence, &bones)?;
        table.push_str(&format!("{},{},{:.3}\n", s.label(), bones.len(), v * 1e3));
    }
    let mut o = Outcome::new(json!({ "skeleton": a.skeleton, "subsets": subsets }), None);
    match &a.out {
        Some(out) => run.write(out, table.as_bytes())?,
        None => o.stdout = Some(table.trim_end().to_string()),
    }
    Ok(o)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Lift(_) => "lift",
        Command::TrainToy(_) => "train-toy",
        Command::Gradcheck(_) => "gradcheck",
        Command::Interp(_) => "interp",
        Command::CompareInterp(_) => "compare-interp",
        Command::ExportBvh(_) => "export-bvh",
        Command::Res(_) => "res",
        Command::Eval(_) => "eval",
        Command::Replay(_) => "replay",
    }
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
    paths
        .iter()
        .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? }))
        .collect()
}

fn cmd_replay(a: &ReplayArgs) -> Result<Outcome, CliError> {
    let text = read_text(&a.from)?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| CliError::new(ErrorKind::Format, format!("manifest: {e}")).at(&a.from))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(CliError::new(ErrorKind::Format, "unsupported manifest version").at(&a.from));
    }
    if manifest.command == "replay" {
        return Err(CliError::new(ErrorKind::Format, "cannot replay a replay").at(&a.from));
    }
    std::env::set_current_dir(&manifest.cwd)
        .map_err(|e| CliError::new(ErrorKind::Io, format!("cannot enter {}: {e}", manifest.cwd)))?;
    let mut argv: Vec<OsString> = vec!["quatmotion".into()];
    argv.extend(manifest.argv.iter().map(OsString::from));
    argv.push("--force".into());
    argv.push("--no-manifest".into());
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::new(ErrorKind::Format, e.to_string()).at(&a.from))?;
    execute(cli, manifest.argv.clone())?;
    let mut mismatched = Vec::new();
    for d in &manifest.outputs {
        let now = sha256_file(Path::new(&d.path))?;
        if now != d.sha256 {
            mismatched.push(d.path.clone());
        }
    }
    let mut o = Outcome::new(json!({ "manifest": a.from.display().to_string() }), manifest.seed);
    o.stdout = Some(json!({ "outputs": manifest.outputs.len(), "mismatched": mismatched }).to_string());
    if !mismatched.is_empty() {
        o.failure = Some(format!("{} output(s) differ from the manifest", mismatched.len()));
    }
    Ok(o)
}

/// Runs a parsed command line. `argv` is recorded in the manifest.
pub fn execute(cli: Cli, argv: Vec<String>) -> Result<Option<String>, CliError> {
    let started = Instant::now();
    let name = command_name(&cli.command);
    let cfg = load_file_config(cli.config.as_deref())?;
    let mut run = Run { force: cli.force, inputs: Vec::new(), outputs: Vec::new() };
    if let Some(c) = &cli.config {
        run.inputs.push(c.clone());
    }
    let outcome = match &cli.command {
        Command::Lift(a) => cmd_lift(a, &cfg, &mut run)?,
        Command::TrainToy(a) => cmd_train_toy(a, &cfg, &mut run)?,
        Command::Gradcheck(a) => cmd_gradcheck(a, &cfg, &mut run)?,
        Command::Interp(a) => cmd_interp(a, &cfg, &mut run)?,
        Command::CompareInterp(a) => cmd_compare(a, &cfg, &mut run)?,
        Command::ExportBvh(a) => cmd_export_bvh(a, &mut run)?,
        Command::Res(a) => cmd_res(a, &mut run)?,
        Command::Eval(a) => cmd_eval(a, &mut run)?,
        Command::Replay(a) => cmd_replay(a)?,
    };
    let writes_manifest = !cli.no_manifest && !matches!(cli.command, Command::Replay(_));
    let manifest_path = cli.manifest.clone().or_else(|| match &cli.command {
        Command::Interp(a) => Some(a.out_dir.join("manifest.json")),
        _ => run.outputs.first().map(|p| with_suffix(p, ".manifest.json")),
    });
    if let (true, Some(path)) = (writes_manifest, manifest_path) {
        if path.exists() && !cli.force {
            return Err(CliError::new(ErrorKind::Exists, "manifest exists; pass --force to overwrite").at(&path));
        }
        let cwd = std::env::current_dir().map_err(|e| CliError::new(ErrorKind::Io, e.to_string()))?;
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            command: name.into(),
            argv,
            cwd: cwd.display().to_string(),
            config: outcome.config,
            seed: outcome.seed,
            inputs: digests(&run.inputs)?,
            outputs: digests(&run.outputs)?,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        };
        write_atomic(&path, (serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").as_bytes())?;
    }
    if let Some(msg) = outcome.failure {
        if let Some(out) = &outcome.stdout {
            println!("{out}");
        }
        return Err(CliError::new(ErrorKind::Failed, msg));
    }
    Ok(outcome.stdout)
}

/// Parses `args` (program name first), runs the command, prints results and
/// errors, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let err = CliError::new(ErrorKind::Usage, e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return err.kind.exit_code();
        }
    };
    match execute(cli, argv) {
        Ok(out) => {
            if let Some(s) = out {
                println!("{s}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.kind.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_overlays_nested_tables() {
        let mut base = toml::Value::try_from(QgcnConfig::toy()).unwrap();
        let top: toml::Value = toml::from_str("temporal_kernel = 5\n[optimizer]\nepochs = 7\n").unwrap();
        merge(&mut base, top);
        let c: QgcnConfig = base.try_into().unwrap();
        assert_eq!(c.temporal_kernel, 5);
        assert_eq!(c.optimizer.epochs, 7);
        assert_eq!(c.channels, QgcnConfig::toy().channels);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let cfg: FileConfig = toml::from_str("[interp]\nthreshold = 0.5\nbogus = 1\n").unwrap();
        assert!(section(InterpolationParams::default(), &cfg.interp, "interp").is_err());
        assert!(toml::from_str::<FileConfig>("[nothing]\n").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let cfg: FileConfig = toml::from_str("[interp]\nthreshold = 0.5\ndelta = 0.25\n").unwrap();
        let base = section(InterpolationParams::default(), &cfg.interp, "interp").unwrap();
        let flags = InterpFlags { threshold: Some(0.7), delta: None, eta: None, sigma: None, seed: None };
        let p = params_with_flags(base, &flags, None).unwrap();
        assert_eq!((p.threshold, p.delta, p.eta), (0.7, 0.25, 25.0));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes: Vec<i32> = [ErrorKind::Failed, ErrorKind::Usage, ErrorKind::Io, ErrorKind::Format, ErrorKind::Exists]
            .iter()
            .map(|k| k.exit_code())
            .collect();
        assert_eq!(codes, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn subsets_on_whole_body() {
        let skel = Skeleton::whole_body();
        assert_eq!(Subset::WholeBody.bones(&skel).len(), 53);
        assert_eq!(Subset::Hands.bones(&skel).len(), 22);
        assert!(Subset::Hands.bones(&Skeleton::toy5()).is_empty());
    }
}
