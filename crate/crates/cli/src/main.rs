//! `artlink` command line: synthetic data, vocabulary, pretraining,
//! fine-tuning, cross-validation, baselines, prediction and graph diffs.

mod config;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use artlink::baselines::{
    calibrate_threshold, contextual_similarities, evaluate_predictions, random_guess, static_predictions,
    train_static_embeddings, ThemeLexicon,
};
use artlink::data_io::{kfold_split, load_corpus, load_pairs, write_jsonl};
use artlink::evaluation::{
    cross_validate, format_table, model_name, predict_label, score, CVReport, PredictionRecord, ReportRow,
};
use artlink::gradcheck::{run_suite, GradcheckOptions};
use artlink::graph::{build_graph, diff_graphs, export_diff_dot, graph_edit_distance, ArtistGraph};
use artlink::synth::{self, World};
use artlink::train::{finetune_pairs, format_epoch_log, pretrain_mlm, predict_pairs};
use artlink::{
    load_checkpoint, save_checkpoint, BiographyPair, Checkpoint, EncoderModel, Error, ErrorKind, Result, Stage,
    Vocabulary,
};
use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "artlink", version, about = "Artist-link prediction from biographies")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted and ./config.toml is absent.
    #[arg(long, global = true, env = "ARTLINK_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Vocabulary file; defaults to <output_dir>/vocab.txt.
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Base,
    Art,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Random,
    Static,
    Contextual,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, pair set and theme lexicon.
    Synth {
        /// Output directory; defaults to the directory of the configured pair file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the vocabulary over the generic corpus, art corpus and pair biographies.
    BuildVocab {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-LM pretraining: `base` from scratch on the generic corpus, `art` continued on the art corpus.
    Pretrain {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on the pair set (fold 0 held out for validation).
    Finetune {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-fold cross-validation of one or more pretrained checkpoints.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        from: Vec<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a baseline on the pair set and write its predictions.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        /// Pretrained checkpoint for the contextual baseline.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict pair labels with a fine-tuned checkpoint.
    Predict {
        #[arg(long)]
        from: PathBuf,
        /// Pairs to score; defaults to the configured pair file.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare predicted and true artist graphs; writes a coloured DOT diff.
    Graph {
        /// Prediction records (JSONL) from `predict` or `baseline`.
        #[arg(long)]
        pred: PathBuf,
        /// Labeled pairs; defaults to the configured pair file.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in f32 and f64.
    Gradcheck,
}

struct Ctx {
    config: RunConfig,
    vocab_path: PathBuf,
    overwrite: bool,
}

impl Ctx {
    /// Refuses to replace an existing file unless `--overwrite` was given.
    fn output(&self, given: Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let path = given.unwrap_or_else(|| self.config.out(default));
        if path.exists() && !self.overwrite {
            return Err(Error::InvalidArgument(format!(
                "{} exists; pass --overwrite to replace it",
                path.display()
            )));
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        Ok(path)
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.vocab_path)
    }

    fn pairs(&self) -> Result<Vec<BiographyPair>> {
        load_pairs(&self.config.data.pairs)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None if Path::new("config.toml").exists() => RunConfig::load(Path::new("config.toml"))?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(config.seed);
    Ok(config.with_seed(seed))
}

fn checkpoint_for(path: &Path, vocab: &Vocabulary, allowed: &[Stage]) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if !allowed.contains(&ck.stage) {
        let names: Vec<&str> = allowed.iter().map(|s| s.as_str()).collect();
        return Err(Error::InvalidArgument(format!(
            "{} is a {} checkpoint; expected {}",
            path.display(),
            ck.stage,
            names.join(" or ")
        )));
    }
    if ck.model.config.vocab_size != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "{} was trained with {} tokens but the vocabulary has {}",
            path.display(),
            ck.model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(ck)
}

fn pair_documents(pairs: &[BiographyPair]) -> Vec<artlink::Document> {
    pairs
        .iter()
        .flat_map(|p| {
            [(p.artist_a.as_str(), &p.bio_a), (p.artist_b.as_str(), &p.bio_b)]
                .map(|(id, text)| artlink::Document {
                    doc_id: id.to_string(),
                    text: text.clone(),
                })
        })
        .collect()
}

fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, records)?;
    println!("wrote {} predictions to {}", records.len(), path.display());
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: PredictionRecord = serde_json::from_str(l).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if r.prediction > 1 {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("prediction {} is not 0 or 1", r.prediction),
                });
            }
            Ok(r)
        })
        .collect()
}

fn synth_cmd(ctx: &Ctx, out: Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let dir = out.unwrap_or_else(|| c.data.pairs.parent().map(Path::to_path_buf).unwrap_or_default());
    let s = &c.synth;
    let target = |name: &str| ctx.output(Some(dir.join(name)), name);
    let paths = [target("generic.jsonl")?, target("art.jsonl")?, target("pairs.jsonl")?, target("themes.jsonl")?];
    write_jsonl(&paths[0], &synth::generic_corpus(&s.world, s.generic_docs, c.seed * 10 + 1))?;
    write_jsonl(&paths[1], &synth::art_corpus(&s.world, s.art_docs, c.seed * 10 + 2))?;
    write_jsonl(&paths[2], &synth::affiliation_pairs(&s.world, s.pairs, c.seed * 10 + 3))?;
    write_jsonl(&paths[3], World::new(&s.world).lexicon().entries())?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn build_vocab_cmd(ctx: &Ctx, out: Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let path = ctx.output(out.or_else(|| Some(ctx.vocab_path.clone())), "vocab.txt")?;
    let mut docs = load_corpus(&c.data.generic)?;
    docs.extend(load_corpus(&c.data.art)?);
    docs.extend(pair_documents(&ctx.pairs()?));
    let vocab = Vocabulary::build(&docs, c.vocab.max_size, c.vocab.min_freq)?;
    vocab.save(&path)?;
    println!("wrote {} tokens to {}", vocab.len(), path.display());
    Ok(())
}

fn pretrain_cmd(ctx: &Ctx, stage: StageArg, from: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let vocab = ctx.vocab()?;
    let (model, corpus, train, stage, default) = match (stage, from) {
        (StageArg::Base, None) => (
            EncoderModel::init(&c.model.model_config(vocab.len(), c.seed))?,
            load_corpus(&c.data.generic)?,
            &c.pretrain_base,
            Stage::Base,
            "base.ckpt",
        ),
        (StageArg::Base, Some(_)) => {
            return Err(Error::InvalidArgument("--stage base trains from scratch; drop --from".into()));
        }
        (StageArg::Art, Some(path)) => (
            checkpoint_for(&path, &vocab, &[Stage::Base])?.model,
            load_corpus(&c.data.art)?,
            &c.pretrain_art,
            Stage::ArtPretrained,
            "art.ckpt",
        ),
        (StageArg::Art, None) => {
            return Err(Error::InvalidArgument("--stage art continues a base checkpoint; pass --from".into()));
        }
    };
    let path = ctx.output(out, default)?;
    let outcome = pretrain_mlm(&model, &vocab, &corpus, train, stage)?;
    print!("{}", format_epoch_log(&outcome.log));
    save_checkpoint(&path, &outcome.checkpoint)?;
    println!("wrote {stage} checkpoint to {}", path.display());
    Ok(())
}

fn finetune_cmd(ctx: &Ctx, from: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let vocab = ctx.vocab()?;
    let base = checkpoint_for(&from, &vocab, &[Stage::Base, Stage::ArtPretrained])?;
    let path = ctx.output(out, "finetuned.ckpt")?;
    let pairs = ctx.pairs()?;
    let folds = kfold_split(&pairs, c.k, c.seed)?;
    let val_idx: HashSet<usize> = folds.fold(0).into_iter().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, p) in pairs.iter().enumerate() {
        if val_idx.contains(&i) {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    let outcome = finetune_pairs(&base.model, &vocab, &train, &val, &c.finetune)?;
    print!("{}", format_epoch_log(&outcome.log));
    println!("best epoch {}", outcome.best_epoch);
    save_checkpoint(&path, &outcome.checkpoint)?;
    println!("wrote fine-tuned checkpoint to {}", path.display());
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, from: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let vocab = ctx.vocab()?;
    let path = ctx.output(out, "report.json")?;
    let pairs = ctx.pairs()?;
    let mut reports = Vec::new();
    for ck_path in &from {
        let ck = checkpoint_for(ck_path, &vocab, &[Stage::Base, Stage::ArtPretrained])?;
        let folds = cross_validate(&pairs, c.k, &ck, &vocab, &c.finetune, c.seed)?;
        reports.push(CVReport::from_folds(model_name(ck.stage, &c.model.name), folds)?);
    }
    let rows: Vec<ReportRow> = reports.iter().map(CVReport::row).collect();
    print!("{}", format_table(&rows));
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!("wrote report to {}", path.display());
    Ok(())
}

fn baseline_cmd(ctx: &Ctx, kind: BaselineKind, from: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    if from.is_some() && !matches!(kind, BaselineKind::Contextual) {
        return Err(Error::InvalidArgument("--from only applies to --kind contextual".into()));
    }
    let pairs = ctx.pairs()?;
    let (name, default, predictions, probabilities) = match kind {
        BaselineKind::Random => {
            let p0 = c.baseline.random_p0;
            (format!("Random Guess-{p0}"), "random.jsonl", random_guess(&pairs, p0, c.seed)?, None)
        }
        BaselineKind::Static => {
            let lexicon = ThemeLexicon::load(&c.data.themes)?;
            let (emb, _) = train_static_embeddings(&load_corpus(&c.data.generic)?, &c.baseline.static_embeddings)?;
            let preds = static_predictions(&emb, &lexicon, &pairs, c.baseline.static_threshold)?;
            ("Static embeddings".to_string(), "static.jsonl", preds, None)
        }
        BaselineKind::Contextual => {
            let from = from.ok_or_else(|| Error::InvalidArgument("--kind contextual needs --from".into()))?;
            let vocab = ctx.vocab()?;
            let ck = checkpoint_for(&from, &vocab, &[Stage::Base, Stage::ArtPretrained])?;
            let sims = contextual_similarities(&ck.model, &vocab, &pairs)?;
            let calib = kfold_split(&pairs, c.k, c.seed)?.fold(0);
            let threshold = calibrate_threshold(
                &calib.iter().map(|&i| sims[i]).collect::<Vec<_>>(),
                &calib.iter().map(|&i| pairs[i].label).collect::<Vec<_>>(),
            )?;
            println!("calibrated threshold {threshold:.2} on fold 0");
            let preds = sims.iter().map(|&s| u8::from(s >= threshold)).collect();
            ("Contextual embeddings".to_string(), "contextual.jsonl", preds, Some(sims))
        }
    };
    let path = ctx.output(out, default)?;
    let (acc, f1) = evaluate_predictions(&predictions, &pairs)?;
    print!("{}", format_table(&[ReportRow::single(name, acc, f1)]));
    let records: Vec<PredictionRecord> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PredictionRecord::new(p, predictions[i], probabilities.as_ref().map(|s| s[i])))
        .collect();
    write_predictions(&path, &records)
}

fn predict_cmd(ctx: &Ctx, from: PathBuf, pairs: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let vocab = ctx.vocab()?;
    let ck = checkpoint_for(&from, &vocab, &[Stage::FineTuned])?;
    let path = ctx.output(out, "predictions.jsonl")?;
    let pairs = load_pairs(pairs.as_deref().unwrap_or(&c.data.pairs))?;
    let probs = predict_pairs(&ck.model, &vocab, &pairs, c.finetune.max_len)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let (_, acc, f1) = score(&probs, &labels)?;
    println!("accuracy {acc:.3}  F1 {f1:.3}");
    let records = pairs
        .iter()
        .zip(&probs)
        .map(|(p, &prob)| Ok(PredictionRecord::new(p, predict_label(prob)?, Some(prob))))
        .collect::<Result<Vec<_>>>()?;
    write_predictions(&path, &records)
}

fn graph_cmd(ctx: &Ctx, pred: PathBuf, truth: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let pairs = load_pairs(truth.as_deref().unwrap_or(&ctx.config.data.pairs))?;
    let truth = build_graph(pairs.iter().map(|p| (p.artist_a.as_str(), p.artist_b.as_str(), p.label)))?;
    let records = read_predictions(&pred)?;
    let predicted = build_graph(records.iter().map(|r| (r.artist_a.as_str(), r.artist_b.as_str(), r.prediction)))?;
    let predicted = ArtistGraph::new(truth.nodes.iter().cloned(), predicted.edges)?;
    let path = ctx.output(out, "graph.dot")?;
    let diff = diff_graphs(&truth, &predicted)?;
    fs::write(&path, export_diff_dot(&diff)).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!(
        "nodes {}  correct {}  missed {}  spurious {}",
        diff.nodes.len(),
        diff.correct.len(),
        diff.missed.len(),
        diff.spurious.len()
    );
    println!("graph edit distance {}", graph_edit_distance(&truth, &predicted)?);
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck_cmd(ctx: &Ctx) -> Result<()> {
    let report = run_suite(&GradcheckOptions {
        seed: ctx.config.seed,
        corrupt: None,
    })?;
    for r in &report.results {
        println!(
            "{:<40} {:?}  rel {:.2e}  tol {:.0e}  {}",
            r.name,
            r.precision,
            r.relative_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} gradient checks failed", report.failures().count())))
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let ctx = Ctx {
        vocab_path: cli.vocab.clone().unwrap_or_else(|| config.out("vocab.txt")),
        config,
        overwrite: cli.overwrite,
    };
    match cli.command {
        Command::Synth { out } => synth_cmd(&ctx, out),
        Command::BuildVocab { out } => build_vocab_cmd(&ctx, out),
        Command::Pretrain { stage, from, out } => pretrain_cmd(&ctx, stage, from, out),
        Command::Finetune { from, out } => finetune_cmd(&ctx, from, out),
        Command::Evaluate { from, out } => evaluate_cmd(&ctx, from, out),
        Command::Baseline { kind, from, out } => baseline_cmd(&ctx, kind, from, out),
        Command::Predict { from, pairs, out } => predict_cmd(&ctx, from, pairs, out),
        Command::Graph { pred, truth, out } => graph_cmd(&ctx, pred, truth, out),
        Command::Gradcheck => gradcheck_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Input => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
