//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dsp::{self, FK_FLOOR_DB};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{ModelSpec, Network};
use crate::picking::{self, PickMode};
use crate::synthetics::{self, SynthConfig};
use crate::tensor_core::{gradcheck_suite, AdamConfig};
use crate::training::{self, TrainConfig, DEFAULT_HI_HZ, DEFAULT_LO_HZ};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "vsdering",
    version,
    about = "Synthetic vibroseis deringing with a 9-layer CNN"
)]
struct Cli {
    /// Seed for every random choice (events, initialization, shuffling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a clean synthetic shot gather.
    Synth(SynthArgs),
    /// Ideal band-pass a gather (makes the ringing input).
    Bandpass(BandpassArgs),
    /// Train the network on clean gathers; ringing inputs are made internally.
    Train(TrainArgs),
    /// Apply trained weights to a gather.
    Dering(DeringArgs),
    /// f-K spectrum as CSV and PGM.
    Fk(FkArgs),
    /// STA/LTA first-break picks.
    Pick(PickArgs),
    /// Compare a candidate gather with the clean reference.
    Eval(EvalArgs),
    /// Finite-difference verification of every gradient.
    Gradcheck,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    nt: usize,
    #[arg(long, default_value_t = 1200)]
    nx: usize,
    /// Sample interval in seconds.
    #[arg(long, default_value_t = 0.002)]
    dt: f64,
    /// Trace spacing in meters.
    #[arg(long, default_value_t = 3.125)]
    dx: f64,
    #[arg(long, default_value_t = 1300.0)]
    vmin: f64,
    #[arg(long, default_value_t = 2300.0)]
    vmax: f64,
    /// Ricker dominant frequency in Hz.
    #[arg(long, default_value_t = 60.0)]
    f0: f64,
    #[arg(long, default_value_t = 12)]
    events: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct Band {
    #[arg(long, default_value_t = DEFAULT_LO_HZ)]
    lo: f64,
    #[arg(long, default_value_t = DEFAULT_HI_HZ)]
    hi: f64,
}

#[derive(Debug, Args)]
struct BandpassArgs {
    #[command(flatten)]
    band: Band,
    #[arg(short = 'i', long = "input")]
    input: PathBuf,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Clean training gathers.
    #[arg(long, num_args = 1.., required = true)]
    clean: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 32)]
    stride: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[command(flatten)]
    band: Band,
    /// Loss log path; defaults to the weights path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Write a checkpoint every this many epochs next to the weights.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Output weights file.
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct DeringArgs {
    #[arg(short = 'w', long = "weights")]
    weights: PathBuf,
    #[arg(short = 'i', long = "input")]
    input: PathBuf,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct FkArgs {
    #[arg(short = 'i', long = "input")]
    input: PathBuf,
    /// Output prefix; writes PREFIX.csv and PREFIX.pgm.
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Argmax,
    Threshold,
}

#[derive(Debug, Args)]
struct PickArgs {
    #[arg(short = 'i', long = "input")]
    input: PathBuf,
    /// Short window in seconds.
    #[arg(long, default_value_t = picking::DEFAULT_STA_S)]
    sta: f64,
    /// Long window in seconds.
    #[arg(long, default_value_t = picking::DEFAULT_LTA_S)]
    lta: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Argmax)]
    mode: ModeArg,
    /// Trigger level for threshold mode.
    #[arg(long, default_value_t = 4.0)]
    thr: f64,
    /// Picks CSV; the summary goes to stdout and to CSV-stem.summary.jsonl.
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    candidate: PathBuf,
    #[command(flatten)]
    band: Band,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(short = 'o', long = "output")]
    output: Option<PathBuf>,
    /// Difference gather (candidate - clean); defaults to the JSON path with
    /// `.diff.vsg` when `-o` is given.
    #[arg(long)]
    diff: Option<PathBuf>,
}

/// Process exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } | Error::EvenKernel { .. } => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

struct Ctx {
    quiet: bool,
    out_dir: Option<PathBuf>,
    seed: u64,
}

impl Ctx {
    fn out(&self, p: &Path) -> Result<PathBuf> {
        let path = match &self.out_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        };
        if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(path)
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_line(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads < 1 {
        eprintln!("error: invalid value for `threads`: must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_DATA;
        }
    };
    let ctx = Ctx {
        quiet: cli.quiet,
        out_dir: cli.out_dir,
        seed: cli.seed,
    };
    match pool.install(|| dispatch(&ctx, cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(ctx: &Ctx, command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(ctx, a),
        Command::Bandpass(a) => bandpass(ctx, a),
        Command::Train(a) => train(ctx, a),
        Command::Dering(a) => dering(ctx, a),
        Command::Fk(a) => fk(ctx, a),
        Command::Pick(a) => pick(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Gradcheck => gradcheck(ctx),
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<i32> {
    let cfg = SynthConfig {
        n_t: a.nt,
        n_x: a.nx,
        dt: a.dt,
        dx: a.dx,
        v_min: a.vmin,
        v_max: a.vmax,
        f0: a.f0,
        num_events: a.events,
        noise_std: a.noise,
        seed: ctx.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let g = synthetics::synth_gather(&cfg)?;
    let out = ctx.out(&a.output)?;
    io::write_gather(&g, &out)?;
    ctx.note(format!(
        "wrote {}x{} gather to {}",
        g.n_t(),
        g.n_x(),
        out.display()
    ));
    Ok(EXIT_OK)
}

fn check_band(g: &crate::synthetics::Gather, band: &Band) -> Result<()> {
    // validates lo/hi against this gather's Nyquist before any work
    dsp::BandPass::new(g.n_t().max(2), g.dt, band.lo, band.hi).map(|_| ())
}

fn bandpass(ctx: &Ctx, a: BandpassArgs) -> Result<i32> {
    let g = io::read_gather(&a.input)?;
    check_band(&g, &a.band)?;
    let r = synthetics::make_ringing(&g, a.band.lo, a.band.hi)?;
    let out = ctx.out(&a.output)?;
    io::write_gather(&r, &out)?;
    ctx.note(format!(
        "wrote {}-{} Hz band-passed gather to {}",
        a.band.lo,
        a.band.hi,
        out.display()
    ));
    Ok(EXIT_OK)
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<i32> {
    let out = ctx.out(&a.output)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        patch: a.patch,
        stride: a.stride,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed: ctx.seed,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: a
            .checkpoint_every
            .map(|_| out.parent().map(Path::to_path_buf).unwrap_or_default()),
    };
    cfg.validate()?;
    let clean = a
        .clean
        .iter()
        .map(io::read_gather)
        .collect::<Result<Vec<_>>>()?;
    for g in &clean {
        check_band(g, &a.band)?;
    }
    let dataset = training::build_dataset(&clean, a.band.lo, a.band.hi, a.patch, a.stride)?;
    ctx.note(format!(
        "{} training pairs from {} gathers",
        dataset.len(),
        clean.len()
    ));
    let mut net = crate::model::build_model(ctx.seed)?;
    let log = training::train_with_progress(&mut net, &dataset, &cfg, |e, m| {
        ctx.note(format!("epoch {e:>3}: mean loss {m:.6e}"))
    })?;
    io::write_weights(&net.params, &out)?;
    let loss_path = match &a.loss_csv {
        Some(p) => ctx.out(p)?,
        None => with_suffix(&out, ".loss.csv"),
    };
    io::write_loss_csv(&log, &loss_path)?;
    ctx.note(format!(
        "wrote weights to {} and loss log to {}",
        out.display(),
        loss_path.display()
    ));
    Ok(EXIT_OK)
}

fn dering(ctx: &Ctx, a: DeringArgs) -> Result<i32> {
    let spec = ModelSpec::deringing();
    let params = io::read_weights(&a.weights, &spec)?;
    let net = Network::new(spec, params)?;
    let g = io::read_gather(&a.input)?;
    let d = net.predict_gather(&g)?;
    let out = ctx.out(&a.output)?;
    io::write_gather(&d, &out)?;
    ctx.note(format!("wrote deringed gather to {}", out.display()));
    Ok(EXIT_OK)
}

fn fk(ctx: &Ctx, a: FkArgs) -> Result<i32> {
    let g = io::read_gather(&a.input)?;
    let spec = dsp::fk_spectrum(&g)?;
    let prefix = ctx.out(&a.output)?;
    let csv = with_suffix(&prefix, ".csv");
    let pgm = with_suffix(&prefix, ".pgm");
    io::write_fk_csv(&spec, &csv)?;
    io::write_pgm(&spec.magnitude_db, &pgm, FK_FLOOR_DB, 0.0)?;
    ctx.note(format!("wrote {} and {}", csv.display(), pgm.display()));
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct PickSummary {
    traces: usize,
    picked: usize,
    coverage: f64,
    mad_adjacent: Option<f64>,
    sta_len: usize,
    lta_len: usize,
    mode: PickMode,
    threshold: f64,
}

fn pick(ctx: &Ctx, a: PickArgs) -> Result<i32> {
    let g = io::read_gather(&a.input)?;
    let sta = picking::window_samples(a.sta, g.dt, "sta")?;
    let lta = picking::window_samples(a.lta, g.dt, "lta")?;
    if lta <= sta || lta > g.n_t() {
        return Err(Error::config(
            "lta",
            format!(
                "needs sta ({sta}) < lta ({lta}) <= samples per trace ({})",
                g.n_t()
            ),
        ));
    }
    let mode = match a.mode {
        ModeArg::Argmax => PickMode::Argmax,
        ModeArg::Threshold => PickMode::Threshold,
    };
    let picks = picking::pick_first_breaks(&g, a.sta, a.lta, mode, a.thr)?;
    let cons = picking::pick_consistency(&picks);
    let out = ctx.out(&a.output)?;
    io::write_picks_csv(&picks, &out)?;
    let summary = PickSummary {
        traces: picks.picks.len(),
        picked: picks.picks.iter().filter(|p| p.is_some()).count(),
        coverage: cons.coverage,
        mad_adjacent: cons.mad_adjacent,
        sta_len: picks.sta_len,
        lta_len: picks.lta_len,
        mode,
        threshold: a.thr,
    };
    let line = json_line(&summary);
    write_text(&with_suffix(&out, ".summary.jsonl"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(EXIT_OK)
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<i32> {
    let clean = io::read_gather(&a.clean)?;
    let cand = io::read_gather(&a.candidate)?;
    check_band(&clean, &a.band)?;
    let m = dsp::metrics(&cand, &clean, a.band.lo, a.band.hi)?;
    let line = json_line(&m);
    let diff_path = match (&a.diff, &a.output) {
        (Some(d), _) => Some(ctx.out(d)?),
        (None, Some(o)) => Some(with_suffix(&ctx.out(o)?, ".diff.vsg")),
        (None, None) => None,
    };
    if let Some(o) = &a.output {
        write_text(&ctx.out(o)?, &format!("{line}\n"))?;
    } else {
        println!("{line}");
    }
    if let Some(d) = diff_path {
        io::write_gather(&cand.difference(&clean)?, &d)?;
        ctx.note(format!("wrote difference gather to {}", d.display()));
    }
    Ok(EXIT_OK)
}

fn gradcheck(ctx: &Ctx) -> Result<i32> {
    let reports = gradcheck_suite(ctx.seed);
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        if !ctx.quiet || !r.passed() {
            println!("{r}");
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_NUMERICAL })
}
