use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sifu_core::bench::token_latency;
use sifu_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sifu_core::corpus::{read_texts, windows, Vocabulary};
use sifu_core::generate::{generate, Decoding, GenerateOptions};
use sifu_core::model::all_pairs;
use sifu_core::sparsity::{select_edges, sparsity_report, BigramStats, EdgePolicy};
use sifu_core::train::{evaluate, train, AdamWConfig, LrSchedule, OptimizerState, TrainConfig};
use sifu_core::{Error, ModelConfig, PredictionMode, SiFuModel};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;

/// Largest vocabulary for which `init --dense` will allocate every edge.
const DENSE_LIMIT: usize = 1 << 11;

#[derive(Parser)]
#[command(name = "sifu", version, about = "Train and run signal-propagation graph language models")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a character vocabulary from text files.
    BuildVocab {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count adjacent token pairs.
    CountEdges {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Create a freshly initialised model checkpoint.
    Init(InitArgs),
    /// Train a checkpoint, resuming its optimizer state if present.
    Train(TrainArgs),
    /// Report token count, mean cross-entropy, perplexity and accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Continue a prompt.
    Generate(GenerateArgs),
    /// Print the parameter breakdown and sparsity ratio.
    Params {
        #[arg(long)]
        model: PathBuf,
    },
    /// Per-token generation latency at several context lengths.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        lengths: Vec<usize>,
        /// Tokens timed at the end of each context.
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Aggregate,
    Sum,
}

impl From<ModeArg> for PredictionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Aggregate => PredictionMode::AggregateThenNorm,
            ModeArg::Sum => PredictionMode::SumOfNorms,
        }
    }
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    /// Reset depth; defaults to the sequence length.
    #[arg(long)]
    reset: Option<usize>,
    /// Bigram table selecting dedicated edges. Without it every pair uses the shared edge.
    #[arg(long, conflicts_with = "dense")]
    edges: Option<PathBuf>,
    #[arg(long, conflicts_with = "top_k")]
    min_count: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Dedicate every ordered pair.
    #[arg(long)]
    dense: bool,
    #[arg(long, value_enum, default_value = "aggregate")]
    mode: ModeArg,
    /// Keep the shared edge at its initial value during training.
    #[arg(long)]
    freeze_shared: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Learning rate; defaults to the stored optimizer's, or 1e-3.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight decay; defaults to the stored optimizer's, or 0.01.
    #[arg(long)]
    wd: Option<f64>,
    /// Linear warmup steps followed by cosine decay to `--lr-floor`.
    #[arg(long)]
    warmup: Option<u64>,
    /// Step at which the cosine schedule bottoms out; defaults to the end of this run.
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    lr_floor: f64,
    /// Window stride over the token stream; defaults to the sequence length.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV (step,loss,ppl,wall_ms).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write 0 in the wall_ms column so repeated runs give byte-identical logs.
    #[arg(long)]
    no_timing: bool,
    /// Run on one thread. Results are identical either way.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    temperature: Option<f64>,
    /// Write one JSON object per generated token to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    trace_top_k: usize,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn data(err: impl std::fmt::Display) -> Self {
        Self { code: EXIT_DATA, message: err.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Config(_) | Error::Temperature(_) => EXIT_USAGE,
            Error::BadMagic(_)
            | Error::Version { .. }
            | Error::Checksum { .. }
            | Error::Truncated(_)
            | Error::Format(_) => EXIT_CHECKPOINT,
            _ => EXIT_DATA,
        };
        Self { code, message: err.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sifu: error: {}", f.message.lines().next().unwrap_or_default());
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let seed = cli.seed;
    match cli.command {
        Command::BuildVocab { input, size, out } => {
            let texts = read_inputs(&input)?;
            let vocab = Vocabulary::build(texts.iter().map(String::as_str), size)?;
            vocab.save(&out).map_err(|e| with_path(e, &out))?;
            println!("vocabulary: {} entries -> {}", vocab.len(), out.display());
        }
        Command::CountEdges { input, vocab, out } => {
            let vocab = load_vocab(&vocab)?;
            let encoded: Vec<Vec<u32>> = read_inputs(&input)?.iter().map(|t| vocab.encode(t)).collect();
            let stats = BigramStats::count(encoded.iter().map(Vec::as_slice));
            stats.save(&out, vocab.len()).map_err(|e| with_path(e, &out))?;
            println!("bigrams: {} distinct pairs, {} total -> {}", stats.len(), stats.total(), out.display());
        }
        Command::Init(args) => init(args, seed)?,
        Command::Train(args) => run_train(args, seed)?,
        Command::Eval { model, input, stride } => {
            let ck = load(&model)?;
            let data = training_windows(&ck, &input, stride)?;
            let report = evaluate(&ck.model, &data)?;
            println!("tokens {}", report.tokens);
            println!("mean_ce {:.6}", report.mean_ce);
            println!("ppl {:.6}", report.ppl);
            println!("accuracy {:.6}", report.accuracy);
        }
        Command::Generate(args) => run_generate(args, seed)?,
        Command::Params { model } => {
            let ck = load(&model)?;
            let count = ck.model.count_params();
            let dedicated = ck.model.edges().dedicated_count();
            let report = sparsity_report(ck.model.config(), dedicated);
            println!("dedicated_pairs {dedicated}");
            println!("edge_dedicated {}", count.edge_dedicated);
            println!("edge_shared {}", count.edge_shared);
            println!("node {}", count.node);
            println!("attention {}", count.attention);
            println!("total {}", count.total());
            println!("dense_total {}", report.dense_count);
            println!("sparsity_ratio {:.6e}", report.ratio);
        }
        Command::Bench { model, lengths, window, repeats } => {
            let ck = load(&model)?;
            let start = if ck.model.vocab_size() > 1 { 1 } else { 0 };
            let rows = token_latency(&ck.model, start, &lengths, window, repeats)?;
            let base = rows.first().map_or(1.0, |r| r.ms_per_token);
            println!("context,ms_per_token,ratio");
            for row in &rows {
                println!("{},{:.6},{:.3}", row.context, row.ms_per_token, row.ms_per_token / base);
            }
        }
    }
    Ok(())
}

fn init(args: InitArgs, seed: u64) -> CmdResult {
    let vocab = load_vocab(&args.vocab)?;
    let n = vocab.len();
    let config = ModelConfig::new(n, args.dim, args.seq_len)
        .with_reset_depth(args.reset.unwrap_or(args.seq_len))
        .with_mode(args.mode.into())
        .with_shared_edge_trainable(!args.freeze_shared)
        .with_seed(seed);
    let pairs: BTreeSet<(u32, u32)> = if args.dense {
        if n > DENSE_LIMIT {
            return Err(Failure::usage(format!("--dense needs a vocabulary of at most {DENSE_LIMIT}, got {n}")));
        }
        all_pairs(n)
    } else if let Some(path) = &args.edges {
        let (stats, size) = BigramStats::load(path).map_err(|e| Failure::data(with_path(e, path)))?;
        if size != n {
            return Err(Failure::data(format!("bigram table was counted for {size} tokens, vocabulary has {n}")));
        }
        let policy = match (args.min_count, args.top_k) {
            (_, Some(k)) => EdgePolicy::TopK(k),
            (Some(c), None) => EdgePolicy::MinCount(c),
            (None, None) => EdgePolicy::MinCount(1),
        };
        select_edges(&stats, policy)
    } else {
        if args.min_count.is_some() || args.top_k.is_some() {
            return Err(Failure::usage("--min-count/--top-k need --edges"));
        }
        BTreeSet::new()
    };
    let model = SiFuModel::<f32>::init(config, &pairs)?;
    save_checkpoint(&model, &vocab, None, &args.out).map_err(|e| with_path(e, &args.out))?;
    println!(
        "model: n={n} d={} L_max={} dedicated={} params={} -> {}",
        args.dim,
        args.seq_len,
        pairs.len(),
        model.count_params().total(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs, seed: u64) -> CmdResult {
    let ck = load(&args.model)?;
    let data = training_windows(&ck, &args.input, args.stride)?;
    let Checkpoint { mut model, vocab, optimizer } = ck;
    let mut state = optimizer.unwrap_or_else(|| OptimizerState::new(&model, AdamWConfig::default()));
    if let Some(lr) = args.lr {
        state.config.lr = lr;
    }
    if let Some(wd) = args.wd {
        state.config.weight_decay = wd;
    }
    let schedule = match args.warmup {
        Some(warmup) => LrSchedule::WarmupCosine {
            warmup,
            total: args.total_steps.unwrap_or(state.step + args.steps),
            floor: args.lr_floor,
        },
        None => LrSchedule::Constant,
    };
    let config = TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        schedule,
        seed,
        parallel: !args.serial,
        ..TrainConfig::default()
    };
    let mut log = match &args.log {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).map_err(|e| with_path(e.into(), path))?);
            writeln!(w, "step,loss,ppl,wall_ms").map_err(Failure::data)?;
            Some(w)
        }
        None => None,
    };
    let no_timing = args.no_timing;
    let curve = train(&mut model, &mut state, &data, &config, |entry, _, _| {
        if let Some(w) = log.as_mut() {
            let wall = if no_timing { 0.0 } else { entry.wall_ms };
            writeln!(w, "{},{},{},{:.3}", entry.step, entry.loss, entry.ppl, wall)?;
        }
        Ok(())
    })?;
    if let Some(mut w) = log {
        w.flush().map_err(Failure::data)?;
    }
    save_checkpoint(&model, &vocab, Some(&state), &args.out).map_err(|e| with_path(e, &args.out))?;
    if let Some(last) = curve.last() {
        println!("step {} loss {:.6} ppl {:.6} -> {}", last.step, last.loss, last.ppl, args.out.display());
    }
    Ok(())
}

fn run_generate(args: GenerateArgs, seed: u64) -> CmdResult {
    let Checkpoint { mut model, vocab, .. } = load(&args.model)?;
    if let Some(mode) = args.mode {
        model.set_prediction_mode(mode.into());
    }
    let prompt = vocab.encode(&args.prompt);
    let decoding = match args.temperature {
        Some(temperature) => Decoding::Sample { temperature, seed },
        None => Decoding::Greedy,
    };
    let options = GenerateOptions { decoding, top_k: args.trace_top_k, trace: args.trace.is_some() };
    let (tokens, mut trace) = generate(&model, &prompt, args.max_new, options)?;
    if let Some(path) = &args.trace {
        let mut w = BufWriter::new(File::create(path).map_err(|e| with_path(e.into(), path))?);
        for step in &mut trace.steps {
            step.token = Some(vocab.token(step.token_id)?.to_string());
            serde_json::to_writer(&mut w, step).map_err(Failure::data)?;
            writeln!(w).map_err(Failure::data)?;
        }
        w.flush().map_err(Failure::data)?;
    }
    // the prompt is echoed as typed, so unknown characters survive
    let continuation = vocab.decode(&tokens[prompt.len()..])?;
    println!("{}{continuation}", args.prompt);
    Ok(())
}

fn read_inputs(paths: &[PathBuf]) -> Result<Vec<String>, Failure> {
    for p in paths {
        if !p.exists() {
            return Err(Failure::data(format!("{}: no such file", p.display())));
        }
    }
    Ok(read_texts(paths)?)
}

fn load_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    Vocabulary::load(path).map_err(|e| Failure::data(with_path(e, path)))
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| {
        let mut f = Failure::from(with_path(e, path));
        f.code = EXIT_CHECKPOINT;
        f
    })
}

/// Encodes each input file and cuts it into windows of the model's sequence length.
fn training_windows(ck: &Checkpoint, input: &[PathBuf], stride: Option<usize>) -> Result<Vec<Vec<u32>>, Failure> {
    let max_len = ck.model.config().max_seq_len;
    let stride = stride.unwrap_or(max_len);
    if stride == 0 {
        return Err(Failure::usage("--stride must be positive"));
    }
    let mut data = Vec::new();
    for text in read_inputs(input)? {
        let ids = ck.vocab.encode(&text);
        data.extend(windows(&ids, max_len, stride).map(<[u32]>::to_vec));
    }
    if data.is_empty() {
        return Err(Error::EmptyCorpus("input holds no sequence of at least 2 tokens".into()).into());
    }
    Ok(data)
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
        other => other,
    }
}
