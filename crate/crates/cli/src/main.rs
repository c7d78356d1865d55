use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use casematch::config::{Paths, RunConfig};
use casematch::corpus::{
    build_vocab, gen_ljp_dataset, gen_match_dataset, load_dataset, save_dataset, split_811, tokenize_ljp,
    tokenize_match, LjpRecord, MatchExample, MatchRecord, Vocab,
};
use casematch::params::Checkpoint;
use casematch::pipeline::{
    disentanglement_report, evaluate, export_factor_embeddings, export_fusion_weights, save_stage1,
    select_analysis_pairs, train_stage2, Ablation, MatchModel,
};
use casematch::pretrain::{judgment_accuracy, run_pretraining};
use casematch::Metrics;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Criminal case matching: synthetic data, judgment pre-training, matching
/// with de-redundant legal factors, evaluation and analysis exports.
#[derive(Parser, Debug)]
#[command(name = "casematch", version)]
struct Cli {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed applied to every component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing generated data.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Stage 1: pre-train the factor extractor on judgment prediction.
    Pretrain {
        /// Overrides pretrain.epochs from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage 2: train the matching model.
    Train {
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Overrides stage2.epochs from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Report Acc/MP/MR/MF1 of a trained matching model.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Export factor vectors or fusion weights for inspection.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        what: AnalyzeArgs,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct GenArgs {
    /// Judgment-prediction cases.
    #[arg(long)]
    ljp: bool,
    /// Case pairs with relevance labels.
    #[arg(long = "match")]
    pairs: bool,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = true)]
struct AnalyzeArgs {
    /// Factor vectors of fully matched and unrelated pairs, as TSV.
    #[arg(long)]
    embeddings: bool,
    /// Per-pair fusion weights on the test split, with per-head summaries.
    #[arg(long)]
    weights: bool,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Which trained variant to load from the checkpoint directory.
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// Explicit stage-2 checkpoint; overrides --ablation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AblationArg {
    #[value(name = "none")]
    None,
    #[value(name = "no_ex")]
    NoEx,
    #[value(name = "no_sh")]
    NoSh,
    #[value(name = "no_fusion")]
    NoFusion,
    #[value(name = "no_pretrain")]
    NoPretrain,
}

impl AblationArg {
    fn to_ablation(self) -> Ablation {
        let name = self.to_possible_value().expect("no skipped variants").get_name().to_string();
        Ablation::from_name(&name).expect("value names match ablation names")
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Split {
    Train,
    Valid,
    Test,
}

/// Errors that exit with status 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.downcast_ref::<Usage>().is_some()
        || matches!(err.downcast_ref::<casematch::Error>(), Some(casematch::Error::Config(_)));
    if usage {
        1
    } else {
        2
    }
}

struct Ctx {
    cfg: RunConfig,
    paths: Paths,
    force: bool,
    command_line: String,
}

impl Ctx {
    fn ljp_path(&self) -> PathBuf {
        self.paths.data_dir.join("ljp.jsonl")
    }

    fn match_path(&self) -> PathBuf {
        self.paths.data_dir.join("match.jsonl")
    }

    fn stage1_path(&self) -> PathBuf {
        self.paths.checkpoint_dir.join("stage1.ckpt")
    }

    fn stage1_vocab(&self) -> PathBuf {
        self.paths.checkpoint_dir.join("vocab.txt")
    }

    fn stage2_path(&self, tag: &str) -> PathBuf {
        self.paths.checkpoint_dir.join(format!("stage2-{tag}.ckpt"))
    }

    /// Effective config with absolute paths, preceded by the command line.
    fn write_manifest(&self, dir: &Path, name: &str) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.paths = self.paths.clone();
        let text = format!("# {}\n{}", self.command_line, cfg.to_toml_string());
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let cwd = std::env::current_dir().context("resolving the working directory")?;
    let paths = cfg.paths.resolve(&cwd);
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    let ctx = Ctx { cfg, paths, force: cli.force, command_line };
    match cli.command {
        Command::Gen(args) => cmd_gen(&ctx, args.ljp),
        Command::Pretrain { epochs } => cmd_pretrain(ctx, epochs),
        Command::Train { ablation, epochs } => cmd_train(ctx, ablation, epochs),
        Command::Eval { model, split } => cmd_eval(&ctx, &model, split),
        Command::Analyze { model, what } => cmd_analyze(&ctx, &model, &what),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_gen(ctx: &Ctx, ljp: bool) -> Result<()> {
    let (path, manifest) = if ljp {
        (ctx.ljp_path(), "ljp.manifest.toml")
    } else {
        (ctx.match_path(), "match.manifest.toml")
    };
    if path.exists() && !ctx.force {
        return Err(Usage(format!("{} already exists; pass --force to overwrite", path.display())).into());
    }
    create_dir(&ctx.paths.data_dir)?;
    let n = if ljp {
        let records = gen_ljp_dataset(&ctx.cfg.corpus)?;
        save_dataset(&path, &records)?;
        records.len()
    } else {
        let records = gen_match_dataset(&ctx.cfg.corpus, ctx.cfg.match_data.n_pairs)?;
        save_dataset(&path, &records)?;
        records.len()
    };
    ctx.write_manifest(&ctx.paths.data_dir, manifest)?;
    println!("wrote {n} records to {}", path.display());
    Ok(())
}

fn read_ljp(ctx: &Ctx) -> Result<Vec<LjpRecord>> {
    let path = ctx.ljp_path();
    load_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

fn read_match(ctx: &Ctx) -> Result<Vec<MatchRecord>> {
    let path = ctx.match_path();
    load_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

fn texts_of_pairs(records: &[MatchRecord]) -> Vec<&str> {
    records.iter().flat_map(|r| [r.source_text.as_str(), r.target_text.as_str()]).collect()
}

fn cmd_pretrain(mut ctx: Ctx, epochs: Option<usize>) -> Result<()> {
    if let Some(e) = epochs {
        ctx.cfg.pretrain.epochs = e;
    }
    ctx.cfg.pretrain.validate()?;
    let records = read_ljp(&ctx)?;
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let vocab = build_vocab(&texts, ctx.cfg.corpus.vocab_size)?;
    let classes = ctx.cfg.corpus.classes();
    let data = tokenize_ljp(&records, &vocab, ctx.cfg.encoder.max_len, &classes)
        .with_context(|| format!("reading {}", ctx.ljp_path().display()))?;
    let (train, _, test) = split_811(&data);
    let enc = casematch::EncoderConfig { vocab_size: vocab.len(), ..ctx.cfg.encoder.clone() };

    let out = run_pretraining(&train, classes, &enc, &ctx.cfg.pretrain)?;
    for m in &out.history {
        println!(
            "epoch {:>3}  loss {:.4}  acc article {:.4}  charge {:.4}  term {:.4}",
            m.epoch, m.loss, m.acc_article, m.acc_charge, m.acc_term
        );
    }
    let dir = &ctx.paths.checkpoint_dir;
    create_dir(dir)?;
    create_dir(&ctx.paths.export_dir)?;
    save_stage1(&out, &ctx.stage1_path())?;
    vocab.save(&ctx.stage1_vocab())?;
    save_dataset(&ctx.paths.export_dir.join("pretrain_history.jsonl"), &out.history)?;
    if !test.is_empty() {
        let acc = judgment_accuracy(&out.model, &out.store, &test)?;
        println!("test acc article {:.4}  charge {:.4}  term {:.4}", acc[0], acc[1], acc[2]);
    }
    ctx.write_manifest(dir, "pretrain.manifest.toml")?;
    println!("saved {}", ctx.stage1_path().display());
    Ok(())
}

fn ablation_tag(a: &Ablation) -> String {
    let flags = [(a.no_ex, "no_ex"), (a.no_sh, "no_sh"), (a.no_fusion, "no_fusion"), (a.no_pretrain, "no_pretrain")];
    let on: Vec<&str> = flags.iter().filter(|f| f.0).map(|f| f.1).collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join("+")
    }
}

fn vocab_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab.txt")
}

fn cmd_train(mut ctx: Ctx, ablation: Option<AblationArg>, epochs: Option<usize>) -> Result<()> {
    if let Some(a) = ablation {
        ctx.cfg.stage2.ablation = a.to_ablation();
    }
    if let Some(e) = epochs {
        ctx.cfg.stage2.epochs = e;
    }
    ctx.cfg.stage2.validate()?;
    let abl = ctx.cfg.stage2.ablation;
    let tag = ablation_tag(&abl);
    let records = read_match(&ctx)?;

    let (vocab, stage1) = if abl.no_pretrain {
        let (train, _, _) = split_811(&records);
        (build_vocab(&texts_of_pairs(&train), ctx.cfg.corpus.vocab_size)?, None)
    } else {
        let path = ctx.stage1_path();
        if !path.exists() {
            anyhow::bail!("stage-1 checkpoint {} not found; run `casematch pretrain` first or use --ablation no_pretrain", path.display());
        }
        let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let vocab = Vocab::load(&ctx.stage1_vocab())?;
        (vocab, Some(ckpt))
    };
    let data = tokenize_match(&records, &vocab, ctx.cfg.encoder.max_len)?;
    let (train, _, _) = split_811(&data);
    let enc = casematch::EncoderConfig { vocab_size: vocab.len(), ..ctx.cfg.encoder.clone() };
    let mut model = MatchModel::new(&enc, abl.fusion_mode(), ctx.cfg.stage2.seed)?;
    if let Some(ckpt) = &stage1 {
        model
            .load_extractor(ckpt)
            .with_context(|| format!("loading {}", ctx.stage1_path().display()))?;
    }

    let history = train_stage2(&mut model, &train, &ctx.cfg.stage2)?;
    for e in &history.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  mat {:.4}  ex {:.4}  sh {:.4}  disc {:.4}  w {:.3?}",
            e.epoch, e.loss, e.mat_loss, e.ex_loss, e.sh_loss, e.disc_loss, e.weight_mean
        );
    }
    create_dir(&ctx.paths.checkpoint_dir)?;
    create_dir(&ctx.paths.export_dir)?;
    let ckpt_path = ctx.stage2_path(&tag);
    model.save(&ckpt_path)?;
    vocab.save(&vocab_path_for(&ckpt_path))?;
    let hist_path = ctx.paths.export_dir.join(format!("train_history-{tag}.json"));
    fs::write(&hist_path, serde_json::to_string_pretty(&history)?)?;
    ctx.write_manifest(&ctx.paths.checkpoint_dir, &format!("train-{tag}.manifest.toml"))?;
    println!("saved {}", ckpt_path.display());
    Ok(())
}

fn load_model(ctx: &Ctx, args: &ModelArgs) -> Result<(MatchModel, Vocab, String)> {
    let (path, tag) = match (&args.checkpoint, args.ablation) {
        (Some(p), _) => {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (p.clone(), stem.trim_start_matches("stage2-").to_string())
        }
        (None, a) => {
            let tag = ablation_tag(&a.map(AblationArg::to_ablation).unwrap_or_default());
            (ctx.stage2_path(&tag), tag)
        }
    };
    let model = MatchModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let vocab_path = vocab_path_for(&path);
    let vocab = Vocab::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    if vocab.len() != model.encoder.config().vocab_size {
        anyhow::bail!(
            "{}: vocabulary has {} entries but the model expects {}",
            vocab_path.display(),
            vocab.len(),
            model.encoder.config().vocab_size
        );
    }
    Ok((model, vocab, tag))
}

fn split_pairs(ctx: &Ctx, vocab: &Vocab, split: Split) -> Result<Vec<MatchExample>> {
    let data = tokenize_match(&read_match(ctx)?, vocab, ctx.cfg.encoder.max_len)?;
    let (train, valid, test) = split_811(&data);
    Ok(match split {
        Split::Train => train,
        Split::Valid => valid,
        Split::Test => test,
    })
}

fn percent(m: &Metrics) -> String {
    format!(
        "Acc {:.2}  MP {:.2}  MR {:.2}  MF1 {:.2}",
        100.0 * m.accuracy,
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.f1
    )
}

fn cmd_eval(ctx: &Ctx, args: &ModelArgs, split: Split) -> Result<()> {
    let (model, vocab, tag) = load_model(ctx, args)?;
    let pairs = split_pairs(ctx, &vocab, split)?;
    let metrics = evaluate(&model, &pairs)?;
    let disent = disentanglement_report(&model, &pairs)?;
    let split_name = format!("{split:?}").to_lowercase();
    println!("{tag} {split_name} ({} pairs): {}", pairs.len(), percent(&metrics));
    println!("discriminator accuracy {:.4}  shared entropy {:.4}", disent.disc_accuracy, disent.shared_entropy);
    create_dir(&ctx.paths.export_dir)?;
    let out = ctx.paths.export_dir.join(format!("metrics-{tag}-{split_name}.json"));
    let record = serde_json::json!({ "variant": tag, "split": split_name, "pairs": pairs.len(), "metrics": metrics, "disentanglement": disent });
    fs::write(&out, serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn cmd_analyze(ctx: &Ctx, args: &ModelArgs, what: &AnalyzeArgs) -> Result<()> {
    let (model, vocab, tag) = load_model(ctx, args)?;
    create_dir(&ctx.paths.export_dir)?;
    if what.embeddings {
        let all = split_pairs(ctx, &vocab, Split::Train)?
            .into_iter()
            .chain(split_pairs(ctx, &vocab, Split::Valid)?)
            .chain(split_pairs(ctx, &vocab, Split::Test)?)
            .collect::<Vec<_>>();
        let pairs = select_analysis_pairs(&all, 200);
        let path = ctx.paths.export_dir.join(format!("embeddings-{tag}.tsv"));
        let rows = export_factor_embeddings(&model, &pairs, &path)?;
        println!("wrote {rows} rows for {} cases to {}", 2 * pairs.len(), path.display());
    }
    if what.weights {
        let pairs = split_pairs(ctx, &vocab, Split::Test)?;
        let path = ctx.paths.export_dir.join(format!("weights-{tag}.jsonl"));
        let (records, summary) = export_fusion_weights(&model, &pairs, &path)?;
        let summary_path = ctx.paths.export_dir.join(format!("weights-{tag}-summary.json"));
        fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
        println!("wrote {} records to {}", records.len(), path.display());
        println!("head        min      q1  median      q3     max");
        for (name, f) in ["shared", "article", "charge", "term"].iter().zip(&summary.heads) {
            println!("{name:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", f.min, f.q1, f.median, f.q3, f.max);
        }
    }
    Ok(())
}
