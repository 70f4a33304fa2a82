//! `metatrack` command-line interface.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metatrack_core::data::{
    build_meta_dataset, gen_synthetic, load_sequences, write_sequence, Motion, Pattern, SizeRule, SynthSpec,
    SYNTH_SPEC_FILE,
};
use metatrack_core::eval::{emit_report, evaluate, load_results};
use metatrack_core::meta::meta_train_from;
use metatrack_core::tracker::{write_track_output, TrackResult};
use metatrack_core::{
    gradcheck, load_checkpoint, AlphaMode, CrestConfig, CrestModel, Error, InitParams, MetaConfig, MetaDataset,
    MetaLearnable, MetaState, ModelSpec, OnlineHead, Protocol, SdnetConfig, SdnetModel, Sequence, Strategy, Tracker,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "metatrack",
    version,
    about = "Meta-learned tracker initialization: training, tracking and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences.
    Synth(SynthArgs),
    /// Meta-train an initialization and per-parameter rates.
    MetaTrain(MetaTrainArgs),
    /// Track one sequence, or every sequence under a directory.
    Track(TrackArgs),
    /// Compute success/precision curves and reset-protocol scores.
    Eval(EvalArgs),
    /// Run the gradient oracle suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Blob,
    Checker,
    /// Alternate blob and checker across `--count` sequences.
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Cv,
    Rw,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistractorPatternArg {
    Same,
    Other,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Base spec as a `key=value` file; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum)]
    pattern: Option<PatternArg>,
    #[arg(long, value_enum)]
    motion: Option<MotionArg>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    distractor_gain: Option<f64>,
    #[arg(long, value_enum)]
    distractor_pattern: Option<DistractorPatternArg>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Write this many sequences to `OUT/seq_NNN` with seeds `seed..seed+count`.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Crest,
    Sdnet,
}

impl ModelArg {
    fn name(self) -> &'static str {
        match self {
            ModelArg::Crest => "crest",
            ModelArg::Sdnet => "sdnet",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaModeArg {
    PerParameter,
    Scalar,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeRuleArg {
    Area,
    Side,
}

#[derive(Args)]
struct MetaTrainArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Sequence directories; each becomes one sampling source.
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    /// Sampling weight per data directory.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long)]
    iters: u64,
    /// Inner steps.
    #[arg(long = "T", default_value_t = 1)]
    inner_steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    delta_max: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = MetaConfig::default().theta_lr)]
    theta_lr: f64,
    #[arg(long, default_value_t = MetaConfig::default().alpha_lr)]
    alpha_lr: f64,
    /// Initial rate; defaults to the model's own.
    #[arg(long)]
    alpha_init: Option<f64>,
    #[arg(long, value_enum, default_value = "per-parameter")]
    alpha_mode: AlphaModeArg,
    /// Largest target size fraction kept in training windows.
    #[arg(long, default_value_t = 0.6)]
    max_frac: f64,
    #[arg(long, value_enum, default_value = "area")]
    size_rule: SizeRuleArg,
    #[arg(long, default_value_t = MetaConfig::default().checkpoint_every)]
    checkpoint_every: u64,
    /// Continue from this checkpoint up to `--iters` total iterations.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Ope,
    Reset,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long)]
    ckpt: PathBuf,
    /// A sequence directory, or a directory of sequence directories.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, default_value_t = 1)]
    init_iters: usize,
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    #[arg(long)]
    dump_responses: bool,
    #[arg(long)]
    out: PathBuf,
    /// from_prev, from_theta0, combined:<beta> or plain_lr.
    #[arg(long, default_value = "plain_lr")]
    strategy: String,
    /// Subsequent-frame learning rate; defaults to the model's own.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    update_iters: Option<usize>,
    #[arg(long)]
    update_period: Option<usize>,
    #[arg(long, default_value_t = 5)]
    reset_gap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ignore the learned parameters: start from a random initialization
    /// drawn with this seed and initialize with the subsequent-frame rate.
    #[arg(long)]
    random_init: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum CliError {
    Usage(String),
    Core(Error),
    ChecksFailed(usize),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::ChecksFailed(n) => write!(f, "{n} gradient check(s) failed"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Core(Error::NonFinite(_) | Error::Domain { .. }) | CliError::ChecksFailed(_) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::MetaTrain(a) => meta_train_cmd(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            // Written spec files end with the seed they were generated with.
            let body: String = text
                .lines()
                .filter(|l| !l.starts_with("seed="))
                .map(|l| format!("{l}\n"))
                .collect();
            SynthSpec::parse(&body, p)?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = a.frames {
        spec.frames = v;
    }
    if let Some(m) = a.motion {
        spec.motion = match m {
            MotionArg::Cv => Motion::ConstantVelocity,
            MotionArg::Rw => Motion::RandomWalk,
        };
    }
    if let Some(v) = a.distractors {
        spec.distractors = v;
    }
    if let Some(v) = a.distractor_gain {
        spec.distractor_gain = v;
    }
    if let Some(v) = a.distractor_pattern {
        spec.distractor_other = matches!(v, DistractorPatternArg::Other);
    }
    if let Some(v) = a.width {
        spec.width = v;
    }
    if let Some(v) = a.height {
        spec.height = v;
    }
    if let Some(v) = a.noise {
        spec.noise_sigma = v;
    }
    let pattern_for = |i: usize| match a.pattern {
        Some(PatternArg::Blob) => Some(Pattern::Blob),
        Some(PatternArg::Checker) => Some(Pattern::Checker),
        Some(PatternArg::Mixed) => Some(if i.is_multiple_of(2) {
            Pattern::Blob
        } else {
            Pattern::Checker
        }),
        None => None,
    };
    let write = |spec: &SynthSpec, seed: u64, dir: &Path, name: &str| -> CliResult {
        let seq = gen_synthetic(spec, seed, name)?;
        write_sequence(&seq, dir)?;
        let p = dir.join(SYNTH_SPEC_FILE);
        fs::write(&p, format!("{}seed={seed}\n", spec.to_text())).map_err(|e| Error::Io { path: p, source: e })?;
        println!("{}: {} frames", dir.display(), seq.len());
        Ok(())
    };
    match a.count {
        None => {
            let mut s = spec.clone();
            if let Some(p) = pattern_for(0) {
                s.pattern = p;
            }
            let name = a
                .out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            write(&s, a.seed, &a.out, &name)
        }
        Some(0) => Err(CliError::Usage("--count must be at least 1".into())),
        Some(n) => {
            for i in 0..n {
                let mut s = spec.clone();
                if let Some(p) = pattern_for(i) {
                    s.pattern = p;
                }
                let name = format!("seq_{i:03}");
                write(&s, a.seed + i as u64, &a.out.join(&name), &name)?;
            }
            Ok(())
        }
    }
}

fn meta_train_cmd(a: MetaTrainArgs) -> CliResult {
    if !a.weights.is_empty() && a.weights.len() != a.data.len() {
        return Err(CliError::Usage(format!(
            "{} weights given for {} data directories",
            a.weights.len(),
            a.data.len()
        )));
    }
    let rule = match a.size_rule {
        SizeRuleArg::Area => SizeRule::Area,
        SizeRuleArg::Side => SizeRule::Side,
    };
    let mut parts = Vec::new();
    for (i, dir) in a.data.iter().enumerate() {
        let seqs = load_sequences(dir)?;
        let ds = build_meta_dataset(seqs, a.max_frac, rule)?;
        parts.push((ds, a.weights.get(i).copied().unwrap_or(1.0)));
    }
    let dataset = if parts.len() == 1 && a.weights.is_empty() {
        parts.pop().map(|(d, _)| d).unwrap_or_else(|| unreachable!())
    } else {
        MetaDataset::mixed(parts)?
    };
    let cfg = MetaConfig {
        iters: a.iters,
        inner_steps: a.inner_steps,
        batch: a.batch,
        delta_max: a.delta_max,
        theta_lr: a.theta_lr,
        alpha_lr: a.alpha_lr,
        alpha_init: a.alpha_init,
        alpha_mode: match a.alpha_mode {
            AlphaModeArg::PerParameter => AlphaMode::PerParameter,
            AlphaModeArg::Scalar => AlphaMode::Scalar,
        },
        checkpoint_every: a.checkpoint_every,
        seed: a.seed,
        ..MetaConfig::default()
    };
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let spec = match &resume {
        Some(state) => {
            check_kind(a.model, state)?;
            state.model.clone()
        }
        None => match a.model {
            ModelArg::Crest => ModelSpec::Crest(CrestConfig::default()),
            ModelArg::Sdnet => ModelSpec::Sdnet(SdnetConfig::default()),
        },
    };
    let start = Instant::now();
    let outcome = match spec {
        ModelSpec::Crest(c) => train_with(&CrestModel::new(c)?, resume, &dataset, &cfg, &a.out)?,
        ModelSpec::Sdnet(c) => train_with(&SdnetModel::new(c)?, resume, &dataset, &cfg, &a.out)?,
    };
    let last = outcome.curve.last().map(|p| p.mean_future_loss);
    println!(
        "trained {} for {} iterations in {:.1}s; last mean future loss {}; checkpoint {}",
        a.model.name(),
        outcome.state.iter,
        start.elapsed().as_secs_f64(),
        last.map_or_else(|| "n/a".into(), |v| format!("{v:.6}")),
        a.out.display()
    );
    Ok(())
}

fn train_with<M: MetaLearnable>(
    model: &M,
    resume: Option<MetaState>,
    dataset: &MetaDataset,
    cfg: &MetaConfig,
    out: &Path,
) -> CliResult<metatrack_core::meta::TrainOutcome> {
    let state = match resume {
        Some(s) => s,
        None => model.initial_state(cfg, cfg.seed),
    };
    Ok(meta_train_from(model, state, dataset, cfg, Some(out))?)
}

fn check_kind(model: ModelArg, state: &MetaState) -> CliResult {
    if state.model.kind() != model.name() {
        return Err(CliError::Core(Error::Data(format!(
            "checkpoint holds a {} model but --model is {}",
            state.model.kind(),
            model.name()
        ))));
    }
    Ok(())
}

fn track(a: TrackArgs) -> CliResult {
    let state = load_checkpoint(&a.ckpt)?;
    check_kind(a.model, &state)?;
    let strategy: Strategy = a.strategy.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let single = a.seq.join(metatrack_core::data::GROUNDTRUTH_FILE).is_file();
    let seqs = load_sequences(&a.seq)?;
    let results = match &state.model {
        ModelSpec::Crest(c) => track_with(&CrestModel::new(c.clone())?, &state, &a, strategy, &seqs)?,
        ModelSpec::Sdnet(c) => track_with(&SdnetModel::new(c.clone())?, &state, &a, strategy, &seqs)?,
    };
    for r in &results {
        let dir = if single { a.out.clone() } else { a.out.join(&r.name) };
        write_track_output(r, &dir)?;
        println!(
            "{}: mean IoU {:.4}, failures {}, gradient evaluations {}",
            r.name,
            r.mean_iou(),
            r.failures(),
            r.grad_evals
        );
    }
    Ok(())
}

fn track_with<H: OnlineHead + Sync>(
    head: &H,
    state: &MetaState,
    a: &TrackArgs,
    strategy: Strategy,
    seqs: &[Sequence],
) -> CliResult<Vec<TrackResult>> {
    let mut cfg = head.tracker_config();
    cfg.init_iters = a.init_iters;
    cfg.strategy = strategy;
    cfg.reset_gap = a.reset_gap;
    cfg.seed = a.seed;
    if let Some(v) = a.lr {
        cfg.subsequent_lr = v;
    }
    if let Some(v) = a.update_iters {
        cfg.update_iters = v;
    }
    if let Some(v) = a.update_period {
        if v == 0 {
            return Err(CliError::Usage("--update-period must be at least 1".into()));
        }
        cfg.update_period = v;
    }
    let init = match a.random_init {
        Some(seed) => InitParams::uniform(
            head.initial_state(&MetaConfig::default(), seed).theta0,
            cfg.subsequent_lr,
        ),
        None => InitParams::from_meta(state)?,
    };
    let protocol = match a.protocol {
        ProtocolArg::Ope => Protocol::Ope,
        ProtocolArg::Reset => Protocol::Reset,
    };
    let tracker = Tracker::new(head, &init, cfg);
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(seqs.len())
        .max(1);
    let chunk = seqs.len().div_ceil(workers);
    let results: Vec<Result<TrackResult, Error>> = std::thread::scope(|s| {
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|part| {
                let tracker = &tracker;
                s.spawn(move || {
                    part.iter()
                        .map(|q| tracker.run_sequence(q, protocol, a.dump_responses))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("tracking thread panicked"))
            .collect()
    });
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?)
}

fn eval(a: EvalArgs) -> CliResult {
    let mut results = Vec::new();
    for dir in &a.results {
        results.extend(load_results(dir)?);
    }
    let report = evaluate(&results)?;
    emit_report(&results, &report, &a.out)?;
    println!(
        "sequences {}; success AUC {:.4}; precision@20px {:.4}; accuracy {:.4}{}; failures {}",
        results.len(),
        report.success.auc,
        report.precision_headline(),
        report.vot.accuracy,
        if report.vot.accuracy_defined {
            ""
        } else {
            " (no ok frames)"
        },
        report.vot.robustness
    );
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    let start = Instant::now();
    let checks = gradcheck::run_all(a.seed)?;
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        if !c.passed() {
            failed += 1;
        }
        println!("{status} {:<44} error {:.3e} (tol {:.0e})", c.name, c.error, c.tol);
    }
    println!(
        "{} checks, {} failed, {:.2}s",
        checks.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}
