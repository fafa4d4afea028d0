//! Command-line surface. Every subcommand accepts `--config <json>`; flags
//! given on the command line override keys from that file, which override
//! built-in defaults.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use polarnet::bench::bench;
use polarnet::dsp::{crop_fov, rda_log_magnitude, rda_to_ra, sca_to_rda, CartesianGrid, ComplexCube, RaMode, RadarCubeSca, RadarMeta};
use polarnet::gradsuite;
use polarnet::io::{self, Rten};
use polarnet::model::{predict_mask, standardize_frames, PolarNet};
use polarnet::render::{cartesian_gray, cartesian_rgb};
use polarnet::synth::{generate_dataset, SceneParams, Split};
use polarnet::tensor::Tensor;
use polarnet::train::{self, all_open_baseline, evaluate, load_checkpoint, Dataset, InputKind, TrainConfig, Trainer};

/// Problems with the invocation itself rather than the work; exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "polarnet", version, about = "Radar open-space segmentation in polar coordinates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: SCA cubes, RA maps, RAD tensors, masks.
    Synth(SynthArgs),
    /// Turn an SCA cube into a range-azimuth map or RAD tensor.
    Dsp(DspArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on one split; prints JSON.
    Eval(EvalArgs),
    /// Predict the open-space mask for one input tensor.
    Infer(InferArgs),
    /// Render a polar mask as a Cartesian colour image.
    Render(RenderArgs),
    /// Forward-pass throughput report; prints JSON.
    Bench(BenchArgs),
    /// Finite-difference gradient checks; prints JSON.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ra_mode: Option<RaMode>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    frames: usize,
    seed: u64,
    out: Option<PathBuf>,
    ra_mode: RaMode,
    scene: SceneParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            seed: 0,
            out: None,
            ra_mode: RaMode::SumLog,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Args, Debug)]
struct DspArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<RaMode>,
    /// Write the `[range, azimuth, doppler]` log-magnitude tensor instead.
    #[arg(long)]
    rad: bool,
    /// Keep only columns within +-this many degrees.
    #[arg(long)]
    fov: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DspConfig {
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    mode: RaMode,
    rad: bool,
    fov: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay_every: Option<u64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    loss: Option<polarnet::loss::LossKind>,
    #[arg(long)]
    input: Option<InputKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCliConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    train: TrainConfig,
    /// Overrides the model's dropout rate for a fresh model.
    dropout: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ckpt: None,
            data: None,
            split: Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Polar mask PGM.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a Cartesian PGM (128 outside the field of view).
    #[arg(long)]
    cartesian: Option<PathBuf>,
    /// Also write the open probabilities as an f32 RTEN.
    #[arg(long)]
    probs: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferConfig {
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    out: Option<PathBuf>,
    cartesian: Option<PathBuf>,
    probs: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Polar mask PGM.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output PPM.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RenderConfig {
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            input: None,
            out: None,
            size: 128,
        }
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to time; a freshly initialized model otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    input: Option<InputKind>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchConfig {
    ckpt: Option<PathBuf>,
    input: InputKind,
    iters: usize,
    warmup: usize,
    threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ckpt: None,
            input: InputKind::Ra,
            iters: 50,
            warmup: 5,
            threads: 1,
        }
    }
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckConfig {
    seeds: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seeds: 10 }
    }
}

/// Recursive object merge; non-object values in `top` replace `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (_, Value::Null) => {}
        (slot, v) => *slot = v,
    }
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .filter(|(_, v)| !matches!(v, Value::Object(m) if m.is_empty()))
                .collect::<Map<_, _>>(),
        ),
        other => other,
    }
}

/// defaults <- config file <- flags.
fn resolve<T: Serialize + DeserializeOwned + Default>(base: Option<Value>, config: Option<&Path>, flags: Value) -> Result<T> {
    let mut value = base.unwrap_or_else(|| serde_json::to_value(T::default()).expect("defaults serialize"));
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !file.is_object() {
            return usage(format!("config {} must hold a JSON object", path.display()));
        }
        merge(&mut value, file);
    }
    merge(&mut value, strip_nulls(flags));
    serde_json::from_value(value).map_err(|e| UsageError(format!("invalid configuration: {e}")).into())
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    match v {
        Some(p) => Ok(p),
        None => usage(format!("missing required --{flag} (flag or config key)")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    io::write_bytes(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn input_kind_of(model: &PolarNet<f32>) -> InputKind {
    if model.config().input_channels == 1 {
        InputKind::Ra
    } else {
        InputKind::Rad
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let flags = json!({ "frames": a.frames, "seed": a.seed, "out": a.out, "ra_mode": a.ra_mode });
    let cfg: SynthConfig = resolve(None, a.config.as_deref(), flags)?;
    let out = require(&cfg.out, "out")?;
    let manifest = generate_dataset(cfg.frames, cfg.seed, out, &cfg.scene, cfg.ra_mode)?;
    write_json(&out.join("resolved_config.json"), &cfg)?;
    eprintln!("wrote {} frames to {}", manifest.n_frames, out.display());
    Ok(())
}

fn dsp(a: DspArgs) -> Result<()> {
    let flags = json!({ "in": a.input, "out": a.out, "mode": a.mode, "rad": a.rad.then_some(true), "fov": a.fov });
    let cfg: DspConfig = resolve(None, a.config.as_deref(), flags)?;
    let (input, out) = (require(&cfg.input, "in")?, require(&cfg.out, "out")?);
    let (dims, data) = io::rten_read(input)?.into_complex(input)?;
    let [s, c, k] = <[usize; 3]>::try_from(dims.as_slice())
        .map_err(|_| anyhow::anyhow!("{}: expected a 3-D SCA cube, got dims {dims:?}", input.display()))?;
    let cube = ComplexCube::new([s, c, k], data)?;
    let rda = sca_to_rda(&RadarCubeSca {
        cube,
        meta: RadarMeta::default(),
    })?;
    let tensor = if cfg.rad {
        if cfg.fov.is_some() {
            return usage("--fov applies to range-azimuth maps only");
        }
        let [nr, nd, na] = rda.cube.dims();
        Rten::f32([nr, na, nd], rda_log_magnitude(&rda).into_iter().map(|v| v as f32).collect())
    } else {
        let mut ra = rda_to_ra(&rda, cfg.mode);
        if let Some(f) = cfg.fov {
            ra = crop_fov(&ra, -f, f)?;
        }
        Rten::f32([ra.rows, ra.cols], ra.data.iter().map(|&v| v as f32).collect())
    };
    io::rten_write(out, &tensor)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let flags = json!({
        "data": a.data, "out": a.out, "resume": a.resume, "dropout": a.dropout,
        "train": {
            "total_steps": a.steps, "batch_size": a.batch, "lr0": a.lr,
            "decay_every_steps": a.decay_every, "decay_factor": a.decay_factor,
            "loss": a.loss, "input": a.input, "seed": a.seed, "eval_every": a.eval_every,
        },
    });
    // a resumed run starts from the checkpoint's own training config
    let file_resume = match &a.config {
        Some(p) if a.resume.is_none() => {
            let probe: TrainCliConfig = resolve(None, Some(p), Value::Null)?;
            probe.resume
        }
        _ => a.resume.clone(),
    };
    let ckpt = file_resume.as_deref().map(load_checkpoint).transpose()?;
    let base = ckpt.as_ref().map(|c| {
        let mut v = serde_json::to_value(TrainCliConfig::default()).expect("defaults serialize");
        v["train"] = serde_json::to_value(&c.train_config).expect("config serializes");
        v
    });
    let cfg: TrainCliConfig = resolve(base, a.config.as_deref(), flags)?;
    let (data_dir, out) = (require(&cfg.data, "data")?, require(&cfg.out, "out")?);
    cfg.train.validate()?;

    let mut trainer = match ckpt {
        Some(c) => {
            if cfg.dropout.is_some() {
                return usage("--dropout cannot change a resumed model");
            }
            let mut t = Trainer::from_checkpoint(c)?;
            if input_kind_of(&t.model) != cfg.train.input {
                return usage("--input differs from the checkpoint's model");
            }
            t.config = cfg.train.clone();
            t
        }
        None => {
            let mut model_cfg = cfg.train.input.model_config();
            if let Some(d) = cfg.dropout {
                model_cfg.dropout_rate = d;
            }
            Trainer::new(model_cfg, cfg.train.clone())?
        }
    };
    let data = Dataset::load(data_dir, Split::Train, cfg.train.input)?;
    let held_out = Dataset::load(data_dir, Split::Test, cfg.train.input)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("resolved_config.json"), &cfg)?;
    let eval = (!held_out.is_empty()).then_some(&held_out);
    let outcome = train::train(&mut trainer, &data, eval, Some(out))?;
    print_json(&outcome)
}

#[derive(Serialize)]
struct EvalOutput {
    split: Split,
    model: train::EvalReport,
    all_open_baseline: train::EvalReport,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let flags = json!({ "ckpt": a.ckpt, "data": a.data, "split": a.split });
    let cfg: EvalConfig = resolve(None, a.config.as_deref(), flags)?;
    let (ckpt, data_dir) = (require(&cfg.ckpt, "ckpt")?, require(&cfg.data, "data")?);
    let model = load_checkpoint(ckpt)?.model;
    let data = Dataset::load(data_dir, cfg.split, input_kind_of(&model))?;
    if data.is_empty() {
        bail!("split {:?} of {} has no frames", cfg.split, data_dir.display());
    }
    print_json(&EvalOutput {
        split: cfg.split,
        model: evaluate(&model, &data)?,
        all_open_baseline: all_open_baseline(&data)?,
    })
}

fn infer(a: InferArgs) -> Result<()> {
    let flags = json!({ "in": a.input, "ckpt": a.ckpt, "out": a.out, "cartesian": a.cartesian, "probs": a.probs });
    let cfg: InferConfig = resolve(None, a.config.as_deref(), flags)?;
    let (input, ckpt, out) = (require(&cfg.input, "in")?, require(&cfg.ckpt, "ckpt")?, require(&cfg.out, "out")?);
    let model = load_checkpoint(ckpt)?.model;
    let [h, w, c] = model.config().input_shape();
    let dims: Vec<usize> = if c == 1 { vec![h, w] } else { vec![h, w, c] };
    let raw = io::rten_read_f32(input, &dims)?;
    let mut x = Tensor::new([1, h, w, c], raw)?;
    standardize_frames(&mut x)?;
    let probs = model.forward(&x)?;
    let mask = predict_mask(probs.data(), h, w)?;
    io::write_pgm(out, &mask)?;
    if let Some(p) = &cfg.probs {
        io::rten_write(p, &Rten::f32([h, w], probs.data().to_vec()))?;
    }
    if let Some(p) = &cfg.cartesian {
        let grid = CartesianGrid::default();
        io::write_gray_pgm(p, grid.cols, grid.rows, &cartesian_gray(&mask, &grid)?)?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let flags = json!({ "in": a.input, "out": a.out, "size": a.size });
    let cfg: RenderConfig = resolve(None, a.config.as_deref(), flags)?;
    let (input, out) = (require(&cfg.input, "in")?, require(&cfg.out, "out")?);
    if cfg.size == 0 {
        return usage("--size must be positive");
    }
    let mask = io::read_pgm(input)?;
    let grid = CartesianGrid {
        rows: cfg.size,
        cols: cfg.size,
        ..CartesianGrid::default()
    };
    io::write_ppm(out, grid.cols, grid.rows, &cartesian_rgb(&mask, &grid)?)?;
    Ok(())
}

#[derive(Serialize)]
struct BenchOutput {
    input: InputKind,
    #[serde(flatten)]
    report: polarnet::bench::BenchReport,
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let flags = json!({ "ckpt": a.ckpt, "input": a.input, "iters": a.iters, "warmup": a.warmup, "threads": a.threads });
    let cfg: BenchConfig = resolve(None, a.config.as_deref(), flags)?;
    let model = match &cfg.ckpt {
        Some(p) => load_checkpoint(p)?.model,
        None => Trainer::new(cfg.input.model_config(), TrainConfig::default())?.model,
    };
    let report = bench(&model, cfg.iters, cfg.warmup, cfg.threads)?;
    print_json(&BenchOutput {
        input: input_kind_of(&model),
        report,
    })
}

#[derive(Serialize)]
struct GradcheckOutput {
    seeds: u64,
    ops: Vec<gradsuite::GradCheck>,
    end_to_end: gradsuite::GradCheck,
    passed: bool,
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg: GradcheckConfig = resolve(None, a.config.as_deref(), json!({ "seeds": a.seeds }))?;
    let ops = gradsuite::op_checks(cfg.seeds);
    let end_to_end = gradsuite::end_to_end(cfg.seeds);
    let passed = ops.iter().all(|c| c.passed()) && end_to_end.passed();
    print_json(&GradcheckOutput {
        seeds: cfg.seeds,
        ops,
        end_to_end,
        passed,
    })?;
    if !passed {
        bail!("gradient check failed");
    }
    Ok(())
}

/// Error chain joined with ": ", skipping causes a parent already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Dsp(a) => dsp(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Render(a) => render(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            1
        }
    }
}
