use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use tcrgen::baseline::{ann_retrieve, RetrievalIndex};
use tcrgen::checkpoint;
use tcrgen::data::{self, GeneratedRow, Triple};
use tcrgen::generate::{self, GenerateConfig, Pool, Selection};
use tcrgen::metrics::{self, EvalPair, Grouping, SubstitutionMatrix};
use tcrgen::model::{EncodedPair, ModelConfig};
use tcrgen::params::Parameters;
use tcrgen::physchem::{sha256_hex, DescriptorTable};
use tcrgen::train::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "tcrgen", version, about = "Conditional CDR3 receptor generation and evaluation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with [model], [train], [generate] and [evaluate] tables.
    /// Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Context-disjoint train/valid/test split of a triple file.
    Split(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Generate ranked receptors for each context.
    Generate(Box<GenerateArgs>),
    /// String metrics between actual and generated receptors.
    Evaluate(EvaluateArgs),
    /// Reference methods.
    #[command(subcommand)]
    Baseline(BaselineCommand),
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// Nearest training context by alignment similarity.
    Ann(AnnArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Train, valid and test shares.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [7, 1, 2])]
    ratios: Vec<usize>,
    /// Keep every MHC and every peptide inside a single split.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.tsv and valid.tsv.
    #[arg(long, conflicts_with_all = ["train", "valid"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "valid")]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    valid: Option<PathBuf>,
    /// Checkpoint path; the report and manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Drop the physicochemical channel.
    #[arg(long)]
    no_phys: bool,
    #[arg(long)]
    d_tok: Option<usize>,
    #[arg(long)]
    d_phys: Option<usize>,
    #[arg(long)]
    d_pos: Option<usize>,
    #[arg(long)]
    n_head: Option<usize>,
    #[arg(long)]
    n_enc: Option<usize>,
    #[arg(long)]
    n_dec: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Stop once an epoch's mean training loss is below this value.
    #[arg(long)]
    target_loss: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Unique,
    Mmr,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Map,
    Wide,
}

#[derive(Args)]
struct MatrixArgs {
    /// Substitution matrix in NCBI layout (default: built-in BLOSUM62).
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    gap_open: Option<i32>,
    #[arg(long)]
    gap_extend: Option<i32>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// TSV with mhc and peptide columns; duplicate contexts are generated once.
    #[arg(long)]
    contexts: PathBuf,
    /// Training triples whose receptors are excluded from the output.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n_starts: Option<usize>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    beam_min: Option<usize>,
    #[arg(long)]
    beam_max: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    #[arg(long)]
    mmr_lambda: Option<f64>,
    #[arg(long, value_enum)]
    pool: Option<PoolArg>,
    #[arg(long)]
    candidate_cap: Option<usize>,
    #[command(flatten)]
    matrix: MatrixArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MatchArg {
    /// Every generated receptor against every actual receptor of its context.
    All,
    /// Each generated receptor against the closest actual one by edit distance.
    Nearest,
}

#[derive(Args)]
struct EvaluateArgs {
    /// TSV with mhc, peptide, actual and generated columns.
    #[arg(long, conflicts_with_all = ["truth", "generated"], required_unless_present = "truth")]
    pairs: Option<PathBuf>,
    /// Reference triples (mhc, peptide, tcr).
    #[arg(long, requires = "generated")]
    truth: Option<PathBuf>,
    /// Output of `generate` or `baseline ann`.
    #[arg(long, requires = "truth")]
    generated: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    r#match: MatchArg,
    /// Only use generated rows with rank <= N.
    #[arg(long)]
    top: Option<usize>,
    /// Structured JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Flat per-pair TSV.
    #[arg(long)]
    per_pair: Option<PathBuf>,
    #[arg(long)]
    by_mhc: bool,
    #[arg(long)]
    by_peptide: bool,
    #[command(flatten)]
    matrix: MatrixArgs,
}

#[derive(Args)]
struct AnnArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    contexts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    matrix: MatrixArgs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    generate: GenerateConfig,
    evaluate: EvalFileConfig,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFileConfig {
    gap_open: Option<i32>,
    gap_extend: Option<i32>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

macro_rules! set {
    ($target:expr, $($field:ident),+ from $args:expr) => {
        $( if let Some(v) = $args.$field { $target.$field = v; } )+
    };
}

/// One per run, written next to the outputs.
#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    code_version: String,
    descriptor_sha256: String,
    wall_clock: WallClock,
}

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct WallClock {
    started_unix: u64,
    elapsed_secs: f64,
}

impl FileRecord {
    fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(FileRecord { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }
}

struct Run {
    subcommand: &'static str,
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn start(subcommand: &'static str) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Run { subcommand, started: Instant::now(), started_unix }
    }

    fn finish(
        self,
        manifest_path: &Path,
        config: serde_json::Value,
        seeds: &[(&str, u64)],
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<()> {
        let m = RunManifest {
            subcommand: self.subcommand.to_string(),
            config,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            inputs: inputs.iter().map(|p| FileRecord::of(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<_>>()?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            descriptor_sha256: DescriptorTable::standard().checksum().to_string(),
            wall_clock: WallClock { started_unix: self.started_unix, elapsed_secs: self.started.elapsed().as_secs_f64() },
        };
        write(manifest_path, &(serde_json::to_string_pretty(&m)? + "\n"))
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// `dir/stem.suffix` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_matrix(args: &MatrixArgs, file: &EvalFileConfig) -> Result<SubstitutionMatrix> {
    let m = match &args.matrix {
        None => SubstitutionMatrix::blosum62(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading matrix {}", p.display()))?;
            SubstitutionMatrix::parse(&text).with_context(|| format!("parsing matrix {}", p.display()))?
        }
    };
    let open = args.gap_open.or(file.gap_open).unwrap_or(m.gap_open);
    let extend = args.gap_extend.or(file.gap_extend).unwrap_or(m.gap_extend);
    Ok(m.with_gaps(open, extend))
}

fn matrix_config(args: &MatrixArgs, m: &SubstitutionMatrix) -> serde_json::Value {
    json!({
        "matrix": args.matrix.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "BLOSUM62 (built-in)".into()),
        "gap_open": m.gap_open,
        "gap_extend": m.gap_extend,
    })
}

fn read_triples(path: &Path) -> Result<Vec<Triple>> {
    data::load_tsv(path).with_context(|| format!("loading {}", path.display()))
}

fn encode_all(triples: &[Triple], what: &str) -> Result<Vec<EncodedPair>> {
    triples.iter().map(Triple::encode).collect::<tcrgen::Result<_>>().with_context(|| format!("encoding {what}"))
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let run = Run::start("split");
    let triples = read_triples(&args.input)?;
    let ratios: [usize; 3] = args.ratios.as_slice().try_into().context("--ratios takes three values")?;
    let split = data::split_contexts(&triples, ratios, args.seed, args.strict).context("splitting")?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut outputs = Vec::new();
    for s in data::Split::ALL {
        let path = args.out_dir.join(format!("{}.tsv", s.name()));
        data::write_tsv(&path, split.get(s))?;
        outputs.push(path);
    }
    let counts = split.context_counts();
    eprintln!(
        "contexts train {} valid {} test {}; triples train {} valid {} test {}",
        counts[0],
        counts[1],
        counts[2],
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    let config = json!({ "ratios": ratios, "strict": args.strict, "context_counts": counts });
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    run.finish(&args.out_dir.join("manifest.json"), config, &[("split", args.seed)], &[&args.input], &outs)
}

fn cmd_train(args: TrainArgs, file: FileConfig) -> Result<()> {
    let run = Run::start("train");
    let mut model = file.model;
    set!(model, d_tok, d_phys, d_pos, n_head, n_enc, n_dec from args);
    if args.d_ff.is_some() {
        model.d_ff = args.d_ff;
    }
    if args.no_phys {
        model.phys_enabled = false;
    }
    model.seed = args.seed;
    let mut cfg = file.train;
    set!(cfg, lr, beta1, beta2, adam_eps, weight_decay, batch_size, max_epochs, clip_norm, patience, label_smoothing from args);
    if args.warmup_steps.is_some() {
        cfg.warmup_steps = args.warmup_steps;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    if args.target_loss.is_some() {
        cfg.target_loss = args.target_loss;
    }
    cfg.seed = args.seed;
    model.validate()?;
    cfg.validate()?;

    let (train_path, valid_path) = match (&args.data, &args.train, &args.valid) {
        (Some(dir), _, _) => (dir.join("train.tsv"), dir.join("valid.tsv")),
        (None, Some(t), Some(v)) => (t.clone(), v.clone()),
        _ => bail!("pass --data DIR or both --train and --valid"),
    };
    let train_set = encode_all(&read_triples(&train_path)?, "training set")?;
    let valid_set = encode_all(&read_triples(&valid_path)?, "validation set")?;
    let table = DescriptorTable::standard();

    let outcome = train::train_with(&train_set, &valid_set, &model, &cfg, &table, |r| {
        eprintln!(
            "epoch {} steps {} train_loss {:.6} valid_ppl {:.6} lr {:.3e}",
            r.epoch, r.steps, r.train_loss, r.valid_ppl, r.lr
        );
    })
    .context("training")?;
    eprintln!(
        "stopped: {:?} after {} steps; best epoch {} valid_ppl {:.6}; {} parameters",
        outcome.report.stop_reason,
        outcome.report.total_steps,
        outcome.report.best_epoch,
        outcome.report.best_valid_ppl,
        outcome.best.num_params()
    );

    checkpoint::save(&args.out, &outcome.best, Some(&outcome.optimizer), table.checksum())
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    let report_path = sibling(&args.out, "report.json");
    let summary = json!({
        "num_params": outcome.best.num_params(),
        "train_triples": train_set.len(),
        "valid_triples": valid_set.len(),
        "report": outcome.report,
    });
    write(&report_path, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    let config = json!({ "model": model, "train": cfg });
    run.finish(
        &sibling(&args.out, "manifest.json"),
        config,
        &[("model_init", model.seed), ("batch_order", cfg.seed)],
        &[&train_path, &valid_path],
        &[&args.out, &report_path],
    )
}

fn dedup_contexts(contexts: Vec<(String, String)>) -> Vec<(String, String)> {
    let mut seen = HashSet::new();
    contexts.into_iter().filter(|c| seen.insert(c.clone())).collect()
}

fn cmd_generate(args: GenerateArgs, file: FileConfig) -> Result<()> {
    let run = Run::start("generate");
    let mut cfg = file.generate;
    set!(cfg, n_starts, t_min, t_max, beam_min, beam_max, len_min, len_max, k, mmr_lambda, candidate_cap from args);
    if let Some(s) = args.selection {
        cfg.selection = match s {
            SelectionArg::Unique => Selection::Unique,
            SelectionArg::Mmr => Selection::Mmr,
        };
    }
    if let Some(p) = args.pool {
        cfg.pool = match p {
            PoolArg::Map => Pool::Map,
            PoolArg::Wide => Pool::Wide,
        };
    }
    cfg.seed = args.seed;
    cfg.validate()?;
    let matrix = load_matrix(&args.matrix, &file.evaluate)?;

    let ckpt = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let table = DescriptorTable::standard();
    if ckpt.params.config.phys_enabled && ckpt.header.descriptor_sha256 != table.checksum() {
        bail!("checkpoint was trained with a different descriptor table ({})", ckpt.header.descriptor_sha256);
    }
    let contexts = dedup_contexts(
        data::load_contexts(&args.contexts).with_context(|| format!("loading {}", args.contexts.display()))?,
    );
    let training = match &args.train {
        Some(p) => generate::training_receptors(read_triples(p)?.iter().map(|t| t.tcr.as_str())),
        None => {
            eprintln!("warning: no --train file; training receptors are not excluded");
            HashSet::new()
        }
    };
    let sets = generate::generate_many(&ckpt.params, &table, &contexts, &cfg, &training, &matrix)
        .context("generating")?;
    let mut rows = Vec::new();
    for set in &sets {
        eprintln!(
            "{} {}: raw {} legal {} unique {} selected {}",
            set.mhc,
            set.peptide,
            set.raw,
            set.legal,
            set.ranked.len(),
            set.selected.len()
        );
        for (i, c) in set.selected.iter().enumerate() {
            rows.push(GeneratedRow {
                mhc: set.mhc.clone(),
                peptide: set.peptide.clone(),
                rank: i + 1,
                generated: c.sequence.clone(),
                e_llh: Some(c.e_llh),
                logprob: Some(c.logprob),
                start: Some(c.start.index),
                temperature: Some(c.start.temperature),
                beam: Some(c.start.beam),
            });
        }
    }
    write(&args.out, &data::format_generated(&rows))?;

    let mut inputs: Vec<&Path> = vec![&args.checkpoint, &args.contexts];
    if let Some(p) = &args.train {
        inputs.push(p);
    }
    let config = json!({ "generate": cfg, "alignment": matrix_config(&args.matrix, &matrix) });
    run.finish(&sibling(&args.out, "manifest.json"), config, &[("starts", cfg.seed)], &inputs, &[&args.out])
}

fn join_pairs(truth: &[Triple], generated: &[GeneratedRow], mode: MatchArg, top: Option<usize>) -> Vec<EvalPair> {
    let mut actual: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for t in truth {
        actual.entry((&t.mhc, &t.peptide)).or_default().push(&t.tcr);
    }
    for v in actual.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    let mut pairs = Vec::new();
    for g in generated.iter().filter(|g| top.is_none_or(|n| g.rank <= n)) {
        let Some(refs) = actual.get(&(g.mhc.as_str(), g.peptide.as_str())) else { continue };
        let chosen: Vec<&str> = match mode {
            MatchArg::All => refs.clone(),
            MatchArg::Nearest => {
                refs.iter().min_by_key(|r| metrics::levenshtein(r, &g.generated)).into_iter().copied().collect()
            }
        };
        for r in chosen {
            pairs.push(EvalPair {
                mhc: g.mhc.clone(),
                peptide: g.peptide.clone(),
                actual: r.to_string(),
                generated: g.generated.clone(),
            });
        }
    }
    pairs
}

fn cmd_evaluate(args: EvaluateArgs, file: FileConfig) -> Result<()> {
    let run = Run::start("evaluate");
    let matrix = load_matrix(&args.matrix, &file.evaluate)?;
    let (pairs, inputs): (Vec<EvalPair>, Vec<&Path>) = match (&args.pairs, &args.truth, &args.generated) {
        (Some(p), _, _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            (data::parse_pairs(&text).with_context(|| format!("parsing {}", p.display()))?, vec![p])
        }
        (None, Some(t), Some(g)) => {
            let truth = read_triples(t)?;
            let text = std::fs::read_to_string(g).with_context(|| format!("reading {}", g.display()))?;
            let generated = data::parse_generated(&text).with_context(|| format!("parsing {}", g.display()))?;
            (join_pairs(&truth, &generated, args.r#match, args.top), vec![t, g])
        }
        _ => bail!("pass --pairs, or --truth with --generated"),
    };
    let grouping = Grouping { by_mhc: args.by_mhc, by_peptide: args.by_peptide };
    let report = metrics::evaluate(&pairs, grouping, &matrix).context("evaluating")?;
    let o = &report.overall;
    println!(
        "n {}  levenshtein {:.4} ± {:.4}  similarity {:.4} ± {:.4}  lcs {:.4} ± {:.4}",
        o.n, o.levenshtein.mean, o.levenshtein.std, o.similarity.mean, o.similarity.std, o.lcs.mean, o.lcs.std
    );
    write(&args.out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let mut outputs: Vec<&Path> = vec![&args.out];
    if let Some(p) = &args.per_pair {
        let mut s = String::from("mhc\tpeptide\tactual\tgenerated\tlevenshtein\tsimilarity\tlcs\n");
        for r in &report.pairs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\n",
                r.mhc, r.peptide, r.actual, r.generated, r.levenshtein, r.similarity, r.lcs
            ));
        }
        write(p, &s)?;
        outputs.push(p);
    }
    let config = json!({
        "match": args.r#match,
        "top": args.top,
        "grouping": grouping,
        "alignment": matrix_config(&args.matrix, &matrix),
    });
    run.finish(&sibling(&args.out, "manifest.json"), config, &[], &inputs, &outputs)
}

fn cmd_ann(args: AnnArgs, file: FileConfig) -> Result<()> {
    let run = Run::start("baseline ann");
    let matrix = load_matrix(&args.matrix, &file.evaluate)?;
    let train = read_triples(&args.train)?;
    let index = RetrievalIndex::build(&train, &matrix).context("indexing training contexts")?;
    let contexts = dedup_contexts(
        data::load_contexts(&args.contexts).with_context(|| format!("loading {}", args.contexts.display()))?,
    );
    let mut rows = Vec::new();
    for (mhc, peptide) in &contexts {
        let hit = ann_retrieve(mhc, peptide, &index).with_context(|| format!("retrieving for {mhc} {peptide}"))?;
        rows.push(GeneratedRow {
            mhc: mhc.clone(),
            peptide: peptide.clone(),
            rank: 1,
            generated: hit.tcr,
            e_llh: None,
            logprob: None,
            start: None,
            temperature: None,
            beam: None,
        });
    }
    write(&args.out, &data::format_generated(&rows))?;
    let config = json!({ "alignment": matrix_config(&args.matrix, &matrix), "indexed_contexts": index.len() });
    run.finish(&sibling(&args.out, "manifest.json"), config, &[], &[&args.train, &args.contexts], &[&args.out])
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
    }
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(*a, file),
        Command::Generate(a) => cmd_generate(*a, file),
        Command::Evaluate(a) => cmd_evaluate(a, file),
        Command::Baseline(BaselineCommand::Ann(a)) => cmd_ann(a, file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
