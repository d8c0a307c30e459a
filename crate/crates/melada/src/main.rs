//! Command-line front door: dataset generation, feature extraction,
//! training, adaptation, the LOSO harness and the invariant suite.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error. The env var
//! `MELADA_LOG={error|info|debug}` controls log verbosity on stderr.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use melada::adaptation::{
    self_adapt, write_adaptation_csv, write_loso_csv, AdaptConfig,
};
use melada::data::{
    gen_synthetic, read_dataset, write_dataset, write_dataset_csv, Domain, Provenance,
    SequenceSample, SynthSpec,
};
use melada::model::{load_checkpoint, save_checkpoint, ModelDims};
use melada::signal::{default_bands, extract_features, LdsParams};
use melada::training::{train_loop, write_history_csv, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "melada", version, about = "Meta-learning augmented domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-domain benchmark as a MELD file.
    GenSynth(GenSynthArgs),
    /// Convert raw recordings (CSV, one column per channel) to MELD
    /// features via the STFT/DE/LDS pipeline.
    Features(FeaturesArgs),
    /// Supervised pretraining of extractor and classifier only.
    Pretrain(TrainArgs),
    /// Full episodic training (pretrain, then meta/controller updates).
    Train(TrainArgs),
    /// Self-adapt a trained model to one target subject.
    Adapt(AdaptArgs),
    /// Leave-one-subject-out evaluation over every subject.
    Loso(LosoArgs),
    /// Run the invariant suite; nonzero exit if any check fails.
    Selfcheck,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key=value config file; command-line flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Output MELD path
    #[arg(long)]
    out: PathBuf,
    /// Optional human-readable CSV dump alongside the binary output
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Domain shift strength epsilon
    #[arg(long)]
    shift: Option<f64>,
    /// Frame noise sigma
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    /// Repeatable SUBJECT:LABEL:PATH triple; PATH is a CSV with one
    /// column per channel and one row per sample
    #[arg(long, required = true)]
    input: Vec<String>,
    /// Sampling rate in Hz
    #[arg(long)]
    fs: usize,
    /// Output MELD path
    #[arg(long)]
    out: PathBuf,
    /// Number of classes recorded in the output (default: max label + 1)
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Input MELD dataset
    #[arg(long)]
    data: PathBuf,
    /// Output model checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Optional per-iteration loss curve CSV (train only)
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Ablation: first-order inner step (no second-order meta gradient)
    #[arg(long)]
    first_order: bool,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Input MELD dataset containing the target subject
    #[arg(long)]
    data: PathBuf,
    /// Trained model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Target subject id
    #[arg(long)]
    target: u32,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    adapt_lr: Option<f64>,
    /// Output curve CSV
    #[arg(long, default_value = "adaptation_curve.csv")]
    out: PathBuf,
    /// Optionally save the adapted model
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LosoArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Input MELD dataset
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    adapt_lr: Option<f64>,
    /// Fold-level parallelism
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output per-subject CSV
    #[arg(long, default_value = "loso_results.csv")]
    out: PathBuf,
    #[arg(long)]
    first_order: bool,
}

/// Every key the config file may set; anything else is rejected.
const CONFIG_KEYS: &[&str] = &[
    "lr",
    "weight_decay",
    "lambda",
    "inner_alpha",
    "n_valid_domains",
    "freeze_threshold",
    "max_iterations",
    "batch_per_domain",
    "pretrain_acc_gate",
    "pretrain_max_iters",
    "seed",
    "first_order",
    "net_steps_per_controller_step",
    "n_domains",
    "n_classes",
    "feat_dim",
    "seq_len",
    "samples_per_class",
    "shift_strength",
    "noise_sigma",
    "adapt_steps",
    "adapt_lr",
];

#[derive(Debug, Default)]
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut map = HashMap::new();
        let Some(path) = path else { return Ok(FileConfig(map)) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), lineno + 1))?;
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                bail!("{}:{}: unknown config key '{key}'", path.display(), lineno + 1);
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("config key '{key}': {e}")),
        }
    }
}

fn resolve_train_config(file: &FileConfig, common: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    macro_rules! take {
        ($field:ident, $key:expr) => {
            if let Some(v) = file.get($key)? {
                cfg.$field = v;
            }
        };
    }
    take!(lr, "lr");
    take!(weight_decay, "weight_decay");
    take!(lambda, "lambda");
    take!(inner_alpha, "inner_alpha");
    take!(n_valid_domains, "n_valid_domains");
    take!(freeze_threshold, "freeze_threshold");
    take!(max_iterations, "max_iterations");
    take!(batch_per_domain, "batch_per_domain");
    take!(pretrain_acc_gate, "pretrain_acc_gate");
    take!(pretrain_max_iters, "pretrain_max_iters");
    take!(seed, "seed");
    take!(first_order, "first_order");
    take!(net_steps_per_controller_step, "net_steps_per_controller_step");
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn resolve_synth_spec(file: &FileConfig, args: &GenSynthArgs) -> anyhow::Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    macro_rules! take {
        ($field:ident, $key:expr) => {
            if let Some(v) = file.get($key)? {
                spec.$field = v;
            }
        };
    }
    take!(n_domains, "n_domains");
    take!(n_classes, "n_classes");
    take!(feat_dim, "feat_dim");
    take!(seq_len, "seq_len");
    take!(samples_per_class, "samples_per_class");
    take!(shift_strength, "shift_strength");
    take!(noise_sigma, "noise_sigma");
    take!(seed, "seed");
    if let Some(v) = args.common.seed {
        spec.seed = v;
    }
    if let Some(v) = args.domains {
        spec.n_domains = v;
    }
    if let Some(v) = args.classes {
        spec.n_classes = v;
    }
    if let Some(v) = args.feat_dim {
        spec.feat_dim = v;
    }
    if let Some(v) = args.seq_len {
        spec.seq_len = v;
    }
    if let Some(v) = args.samples_per_class {
        spec.samples_per_class = v;
    }
    if let Some(v) = args.shift {
        spec.shift_strength = v;
    }
    if let Some(v) = args.noise {
        spec.noise_sigma = v;
    }
    Ok(spec)
}

fn resolve_adapt_config(
    file: &FileConfig,
    steps: Option<usize>,
    adapt_lr: Option<f64>,
) -> anyhow::Result<AdaptConfig> {
    let mut cfg = AdaptConfig::default();
    if let Some(v) = file.get("adapt_steps")? {
        cfg.steps = v;
    }
    if let Some(v) = file.get("adapt_lr")? {
        cfg.adapt_lr = v;
    }
    if let Some(v) = steps {
        cfg.steps = v;
    }
    if let Some(v) = adapt_lr {
        cfg.adapt_lr = v;
    }
    Ok(cfg)
}

/// Paper-scale dims for 310-dim frames, compact dims otherwise.
fn dims_for(domains: &[Domain]) -> anyhow::Result<ModelDims> {
    let first = domains
        .first()
        .ok_or_else(|| anyhow!("dataset contains no domains"))?;
    Ok(if first.feat_dim == 310 {
        ModelDims { n_classes: first.n_classes, ..ModelDims::default() }
    } else {
        ModelDims::synthetic(first.feat_dim, first.n_classes)
    })
}

fn cmd_gen_synth(args: &GenSynthArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let spec = resolve_synth_spec(&file, args)?;
    log::info!("resolved synth spec: {spec:?}");
    let domains = gen_synthetic(&spec)?;
    write_dataset(&domains, &args.out)?;
    if let Some(csv) = &args.csv {
        write_dataset_csv(&domains, csv)?;
    }
    let total: usize = domains.iter().map(|d| d.samples.len()).sum();
    println!(
        "wrote {} ({} domains, {} sequences)",
        args.out.display(),
        domains.len(),
        total
    );
    Ok(())
}

fn cmd_features(args: &FeaturesArgs) -> anyhow::Result<()> {
    let mut by_subject: HashMap<u32, Vec<SequenceSample>> = HashMap::new();
    let mut max_label = 0u8;
    let mut feat_dim = None;
    for spec in &args.input {
        let mut parts = spec.splitn(3, ':');
        let (sub, label, path) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(l), Some(p)) => (s, l, p),
            _ => bail!("--input expects SUBJECT:LABEL:PATH, got '{spec}'"),
        };
        let subject: u32 = sub.parse().with_context(|| format!("subject in '{spec}'"))?;
        let label: u8 = label.parse().with_context(|| format!("label in '{spec}'"))?;
        let raw = read_raw_csv(Path::new(path))?;
        let windows = extract_features(
            &raw,
            args.fs,
            &default_bands(),
            &LdsParams::default(),
            15,
            14,
        )?;
        if windows.is_empty() {
            bail!("{path}: recording too short for a single 15-frame window");
        }
        let dim = raw.len() * default_bands().len();
        match feat_dim {
            None => feat_dim = Some(dim),
            Some(d) if d != dim => bail!("{path}: feature dim {dim} differs from earlier {d}"),
            _ => {}
        }
        max_label = max_label.max(label);
        by_subject
            .entry(subject)
            .or_default()
            .extend(windows.into_iter().map(|frames| SequenceSample { frames, label }));
    }
    let feat_dim = feat_dim.expect("at least one input");
    let n_classes = args.classes.unwrap_or(max_label as usize + 1);
    if max_label as usize >= n_classes {
        bail!("label {max_label} out of range for {n_classes} classes");
    }
    let mut subjects: Vec<u32> = by_subject.keys().copied().collect();
    subjects.sort_unstable();
    let domains: Vec<Domain> = subjects
        .into_iter()
        .map(|subject_id| Domain {
            subject_id,
            seq_len: 15,
            feat_dim,
            n_classes,
            samples: by_subject.remove(&subject_id).unwrap(),
            provenance: Provenance::Imported,
        })
        .collect();
    write_dataset(&domains, &args.out)?;
    let total: usize = domains.iter().map(|d| d.samples.len()).sum();
    println!(
        "wrote {} ({} subjects, {} sequences, dim {})",
        args.out.display(),
        domains.len(),
        total,
        feat_dim
    );
    Ok(())
}

fn read_raw_csv(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut channels: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        if channels.is_empty() {
            channels = vec![Vec::new(); row.len()];
        } else if row.len() != channels.len() {
            bail!(
                "{}:{}: expected {} columns, got {}",
                path.display(),
                lineno + 1,
                channels.len(),
                row.len()
            );
        }
        for (ch, v) in channels.iter_mut().zip(row) {
            ch.push(v);
        }
    }
    if channels.is_empty() {
        bail!("{}: no samples", path.display());
    }
    Ok(channels)
}

fn cmd_train(args: &TrainArgs, pretrain_only: bool) -> anyhow::Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut cfg = resolve_train_config(&file, &args.common)?;
    if let Some(v) = args.iterations {
        cfg.max_iterations = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_per_domain = v;
    }
    if args.first_order {
        cfg.first_order = true;
    }
    if pretrain_only {
        cfg.max_iterations = 0;
        cfg.freeze_threshold = 0;
    }
    log::info!("resolved train config: {cfg:?}");
    let domains = read_dataset(&args.data)?;
    let dims = dims_for(&domains)?;
    let (model, history, outcome) = train_loop(&domains, &cfg, dims)?;
    save_checkpoint(&model, &args.out)?;
    if let Some(path) = &args.history {
        write_history_csv(&history, path)?;
    }
    println!(
        "wrote {} (pretrain {:?} at accuracy {:.3}, {} episodes)",
        args.out.display(),
        outcome.status,
        outcome.final_accuracy,
        history.len()
    );
    Ok(())
}

fn cmd_adapt(args: &AdaptArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let cfg = resolve_adapt_config(&file, args.steps, args.adapt_lr)?;
    log::info!("resolved adapt config: {cfg:?}");
    let domains = read_dataset(&args.data)?;
    let target = domains
        .iter()
        .find(|d| d.subject_id == args.target)
        .ok_or_else(|| anyhow!("subject {} not present in {}", args.target, args.data.display()))?;
    let model = load_checkpoint(&args.model)?;
    let (adapted, report) = self_adapt(&model, target, &cfg, true)?;
    write_adaptation_csv(&report, &args.out)?;
    if let Some(path) = &args.save_model {
        save_checkpoint(&adapted, path)?;
    }
    let first = report.steps.first().expect("nonempty trace");
    let last = report.steps.last().expect("nonempty trace");
    println!(
        "wrote {} (L_C {:.6} -> {:.6}, accuracy {:.3} -> {:.3})",
        args.out.display(),
        first.l_c,
        last.l_c,
        first.accuracy.unwrap_or(f64::NAN),
        last.accuracy.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_loso(args: &LosoArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut cfg = resolve_train_config(&file, &args.common)?;
    if let Some(v) = args.iterations {
        cfg.max_iterations = v;
        cfg.freeze_threshold = cfg.freeze_threshold.min(v);
    }
    if let Some(v) = args.batch {
        cfg.batch_per_domain = v;
    }
    if args.first_order {
        cfg.first_order = true;
    }
    let adapt = resolve_adapt_config(&file, args.steps, args.adapt_lr)?;
    log::info!("resolved train config: {cfg:?}; adapt config: {adapt:?}");
    let domains = read_dataset(&args.data)?;
    let dims = dims_for(&domains)?;
    let report = melada::adaptation::loso_evaluate(&domains, &cfg, dims, &adapt, args.jobs)?;
    write_loso_csv(&report, &args.out)?;
    for fold in &report.per_subject {
        println!(
            "subject {}: accuracy {:.4} (frozen {:.4}), L_C {:.6} -> {:.6}",
            fold.subject_id, fold.accuracy, fold.accuracy_frozen, fold.l_c_start, fold.l_c_end
        );
    }
    println!(
        "mean accuracy {:.4} (std {:.4}, frozen {:.4}); wrote {}",
        report.mean_accuracy,
        report.std_deviation,
        report.mean_accuracy_frozen,
        args.out.display()
    );
    Ok(())
}

fn cmd_selfcheck() -> anyhow::Result<()> {
    let results = melada::selfcheck::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed}/{} checks failed", results.len());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn run(argv: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            // help/version go to stdout, usage errors to stderr
            e.print().expect("writing clap output");
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Features(a) => cmd_features(a),
        Command::Pretrain(a) => cmd_train(a, true),
        Command::Train(a) => cmd_train(a, false),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Loso(a) => cmd_loso(a),
        Command::Selfcheck => cmd_selfcheck(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MELADA_LOG", "error"))
        .format_timestamp(None)
        .init();
    ExitCode::from(run(std::env::args().collect()))
}
