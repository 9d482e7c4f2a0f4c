use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use autoad_core::ad_generator::AdGenerator;
use autoad_core::char_recognizer::CharRecognizer;
use autoad_core::config::{ConfigError, RunConfig, Segments};
use autoad_core::evaluation::stats::{corpus_stats, NerTag, StatsOptions};
use autoad_core::feature_store::{read_timeline, TextKind, TimedText};
use autoad_core::pipeline::{self, PipelineError};
use autoad_core::synth::{write_fixture_corpus, FixtureSpec};
use autoad_core::temporal_proposer::{proposals_to_csv, ProposerModel};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Debug, Parser)]
#[command(name = "autoad", version, about = "Movie audio-description pipeline")]
struct Cli {
    /// Run configuration (JSON). Defaults to `<out>/config.json` when present,
    /// otherwise the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Data root holding `movies/` and `imdb/`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Time intervals described at inference: gt or proposals.
    #[arg(long, global = true)]
    segments: Option<Segments>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the corpus and print a per-movie summary.
    Ingest,
    /// Calibrate character banks from cast portraits.
    BuildCharbank,
    TrainRecognizer,
    /// Active characters for each ground-truth AD interval of the eval movies.
    Recognize,
    TrainProposer,
    /// Score every speech gap of the eval movies.
    Propose,
    TrainGenerator,
    /// Generate AD for the configured segments.
    Infer,
    /// Metrics over the run's artifacts, or over `--pred` against `--ref`.
    Evaluate {
        #[arg(long, requires = "reference")]
        pred: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "rouge,cider,rkn")]
        metrics: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Person-tag and pronoun frequencies of a timeline.
    Stats {
        #[arg(long)]
        ad: PathBuf,
        #[arg(long)]
        ner: Option<PathBuf>,
        /// Use the subtitle pronoun set and subtitle rows.
        #[arg(long)]
        subtitles: bool,
        #[arg(long)]
        intro_end: Option<f64>,
        #[arg(long)]
        outro_start: Option<f64>,
    },
    /// Every stage in order.
    Run,
    /// Write a synthetic fixture corpus to `--data`.
    Synth {
        #[arg(long, default_value_t = 6)]
        movies: usize,
        #[arg(long, default_value_t = 300.0)]
        duration: f64,
    },
    /// Print the resolved configuration.
    Config,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let data = cli.data.clone().unwrap_or_else(|| PathBuf::from("data"));
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let saved = out.join(pipeline::CONFIG_FILE);
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(Preset::Full)) => RunConfig::full(&data, &out),
        (None, Some(Preset::Desk)) => RunConfig::desk(&data, &out),
        (None, None) if saved.is_file() => RunConfig::load(&saved)?,
        (None, None) => RunConfig::desk(&data, &out),
    };
    if let Some(d) = &cli.data {
        cfg.paths.data_root = d.clone();
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.segments {
        cfg.segments = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.out_dir).with_context(|| format!("creating {}", cfg.paths.out_dir.display()))?;
    cfg.save(&cfg.paths.out_dir.join(pipeline::CONFIG_FILE))?;
    Ok(())
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.out_dir.join(name)
}

fn load_recognizer(cfg: &RunConfig) -> Result<CharRecognizer> {
    let p = out(cfg, pipeline::RECOGNIZER_CKPT);
    CharRecognizer::load(&p).with_context(|| format!("loading {} (run train-recognizer first)", p.display()))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn read_ad(path: &Path, kind: TextKind) -> Result<Vec<TimedText>> {
    let mut rows: Vec<TimedText> = read_timeline(path)?.into_iter().filter(|t| t.kind == kind).collect();
    rows.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(rows)
}

fn evaluate_files(cfg: &RunConfig, pred: &Path, reference: &Path, metrics: &[String], k: usize, n: usize) -> Result<serde_json::Value> {
    for m in metrics {
        if !["rouge", "cider", "rkn"].contains(&m.as_str()) {
            return Err(ConfigError::Invalid(format!("unknown metric {m:?}")).into());
        }
    }
    let bytes = std::fs::read(pred).with_context(|| format!("reading {}", pred.display()))?;
    let mut gen: Vec<TimedText> = pipeline::parse_generated(&bytes)?
        .into_iter()
        .map(|g| TimedText::new(g.start_s, g.end_s, TextKind::Ad, g.text))
        .collect::<Result<_, _>>()?;
    gen.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let refs = read_ad(reference, TextKind::Ad)?;
    let sim = pipeline::similarity(cfg)?;
    let m = pipeline::text_metrics(&[(gen, refs)], k, n, sim.as_ref(), cfg.evaluation.pairing)?;
    let mut report = serde_json::Map::new();
    report.insert("config_hash".into(), artifact_hash_value(&bytes));
    report.insert("items".into(), m.items.into());
    if metrics.iter().any(|x| x == "rouge") {
        report.insert("rouge_l".into(), m.rouge_l.into());
    }
    if metrics.iter().any(|x| x == "cider") {
        report.insert("cider".into(), m.cider.into());
    }
    if metrics.iter().any(|x| x == "rkn") {
        report.insert(format!("r@{k}/{n}"), m.recall.into());
        report.insert("similarity".into(), m.similarity.into());
        report.insert("pairing".into(), m.pairing.into());
    }
    Ok(serde_json::Value::Object(report))
}

fn artifact_hash_value(bytes: &[u8]) -> serde_json::Value {
    pipeline::artifact_hash(bytes).map_or(serde_json::Value::Null, serde_json::Value::from)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Stats {
        ad,
        ner,
        subtitles,
        intro_end,
        outro_start,
    } = &cli.command
    {
        let (kind, mut opts) = if *subtitles {
            (TextKind::Subtitle, StatsOptions::for_subtitles())
        } else {
            (TextKind::Ad, StatsOptions::for_ad())
        };
        opts.intro_end_s = *intro_end;
        opts.outro_start_s = *outro_start;
        let rows = read_ad(ad, kind)?;
        let tags: Vec<NerTag> = match ner {
            Some(p) => csv::Reader::from_path(p)?.deserialize().collect::<Result<_, _>>()?,
            None => vec![],
        };
        let s = corpus_stats(&rows, &tags, &opts);
        return print_json(&serde_json::json!({
            "sentences": s.sentences,
            "person": 100.0 * s.person_fraction(),
            "pronoun": 100.0 * s.pronoun_fraction(),
            "either": 100.0 * s.either_fraction(),
        }));
    }
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Config => print_json(&cfg)?,
        Command::Synth { movies, duration } => {
            if movies == 0 || !(duration > 30.0) {
                return Err(ConfigError::Invalid("need at least one movie longer than 30 s".into()).into());
            }
            let spec = FixtureSpec {
                movies,
                duration_s: duration,
                ..FixtureSpec::default()
            };
            let ids = write_fixture_corpus(&cfg.paths.data_root, &spec, cfg.seed)?;
            info!("wrote {} movies to {}", ids.len(), cfg.paths.data_root.display());
            print_json(&ids)?;
        }
        Command::Ingest => {
            let data = pipeline::ingest(&cfg)?;
            print_json(&pipeline::summarize(&data))?;
        }
        Command::BuildCharbank => {
            prepare_out(&cfg)?;
            let data = pipeline::ingest(&cfg)?;
            let banks = pipeline::build_charbanks(&cfg, &data)?;
            for (id, b) in &banks {
                println!("{id}: {} characters", b.len());
            }
        }
        Command::TrainRecognizer => {
            prepare_out(&cfg)?;
            let data = pipeline::ingest(&cfg)?;
            let banks = pipeline::load_or_build_charbanks(&cfg, &data)?;
            pipeline::train_recognizer(&cfg, &data, &banks)?;
            println!("{}", out(&cfg, pipeline::RECOGNIZER_CKPT).display());
        }
        Command::Recognize => {
            prepare_out(&cfg)?;
            let data = pipeline::ingest(&cfg)?;
            let banks = pipeline::load_or_build_charbanks(&cfg, &data)?;
            let rows = pipeline::recognize_eval(&cfg, &data, &banks, &load_recognizer(&cfg)?)?;
            let p = out(&cfg, pipeline::RECOGNIZED_FILE);
            pipeline::write_artifact(&p, &pipeline::recognized_to_csv(&rows, &cfg.hash())?)?;
            println!("{}", p.display());
        }
        Command::TrainProposer => {
            prepare_out(&cfg)?;
            let data = pipeline::ingest(&cfg)?;
            pipeline::train_proposer(&cfg, &data)?;
            println!("{}", out(&cfg, pipeline::PROPOSER_CKPT).display());
        }
        Command::Propose => {
            prepare_out(&cfg)?;
            let data = pipeline::ingest(&cfg)?;
            let ck = out(&cfg, pipeline::PROPOSER_CKPT);
            let model = ProposerModel::load(&ck).with_context(|| format!("loading {} (run train-proposer first)", ck.display()))?;
            let props = pipeline::propose(&cfg, &data, &model)?;
            let p = out(&cfg, pipeline::PROPOSALS_FILE);
            pipeline::write_artifact(&p, &proposals_to_csv(&props, Some(&cfg.hash()))?)?;
            println!("{}", p.display());
        }
        Command::TrainGenerator => {
            prepare_out(&cfg)?;
            let data = pipeline::ingest(&cfg)?;
            let banks = pipeline::load_or_build_charbanks(&cfg, &data)?;
            let recognizer = load_recognizer(&cfg).ok();
            let (gen, report) = pipeline::train_generator(&cfg, &data, &banks, recognizer.as_ref())?;
            let log = pipeline::gate_trace_log(&gen, Some(&report), &cfg.hash())?;
            pipeline::write_artifact(&out(&cfg, pipeline::GATE_TRACE_FILE), log.as_bytes())?;
            println!("{}", out(&cfg, pipeline::GENERATOR_CKPT).display());
        }
        Command::Infer => {
            prepare_out(&cfg)?;
            let data = pipeline::ingest(&cfg)?;
            let banks = pipeline::load_or_build_charbanks(&cfg, &data)?;
            let recognizer = load_recognizer(&cfg)?;
            let ck = out(&cfg, pipeline::GENERATOR_CKPT);
            let gen = AdGenerator::load(&ck).with_context(|| format!("loading {} (run train-generator first)", ck.display()))?;
            let proposals = match cfg.segments {
                Segments::Proposals => Some(pipeline::load_proposals(&cfg)?),
                Segments::Gt => None,
            };
            let rows = pipeline::infer(&cfg, &data, &banks, &recognizer, &gen, proposals.as_deref())?;
            let p = out(&cfg, pipeline::GENERATED_FILE);
            pipeline::write_artifact(&p, &pipeline::generated_to_csv(&rows, &cfg.hash(), cfg.segments)?)?;
            println!("{}", p.display());
        }
        Command::Evaluate {
            pred,
            reference,
            metrics,
            k,
            n,
        } => {
            let k = k.unwrap_or(cfg.evaluation.k);
            let n = n.unwrap_or(cfg.evaluation.n);
            match (pred, reference) {
                (Some(p), Some(r)) => print_json(&evaluate_files(&cfg, &p, &r, &metrics, k, n)?)?,
                (None, None) => print_json(&pipeline::evaluate_artifacts(&cfg)?)?,
                _ => bail!(ConfigError::Invalid("--pred and --ref go together".into())),
            }
        }
        Command::Run => {
            let report = pipeline::run_pipeline(&cfg)?;
            print_json(&report)?;
        }
        Command::Stats { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// 1 for bad inputs or configuration, 2 for failures during computation.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return if p.is_validation() { 1 } else { 2 };
        }
        if cause.is::<ConfigError>()
            || cause.is::<autoad_core::feature_store::StoreError>()
            || cause.is::<clap::Error>()
            || cause.is::<csv::Error>()
        {
            return 1;
        }
    }
    2
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|p| p.contains(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
