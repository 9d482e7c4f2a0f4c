//! End-to-end orchestration: ingest, character banks, recognizer, proposer,
//! generator, inference and evaluation. Every artifact carries the config hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use log::{info, warn};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad_generator::lm::{pretrain_lm, CausalLm};
use crate::ad_generator::prompt::render_prompt;
use crate::ad_generator::{AdGenerator, GenerationRequest, GeneratorError, GeneratorReport, GeneratorSample};
use crate::char_recognizer::{CharRecognizer, RecognitionSample, RecognizerError};
use crate::character_bank::{build_bank, BankError, CharacterBank, CharacterEntry, FixtureMovieDb};
use crate::config::{ConfigError, RunConfig, Segments};
use crate::evaluation::cider::CiderScorer;
use crate::evaluation::recall::{corresponding_references, recall_at_k_within_n};
use crate::evaluation::{average_precision, roc_auc, rouge_l, EvalError, TextSimilarity, WordEmbeddings};
use crate::feature_store::{list_movies, load_movie, FrameFeatureTrack, MovieRecord, StoreError, TextKind, TimedText};
use crate::synth::{read_char_tags, CharTag, CHAR_TAGS_FILE};
use crate::temporal_proposer::{
    build_vocab, label_gap, movie_windows, propose_movie, proposals_to_csv, ContextWindow, GapLabel, Proposal,
    ProposerError, ProposerModel,
};
use crate::vocab::Vocab;

pub const PROPOSALS_FILE: &str = "proposals.csv";
pub const GENERATED_FILE: &str = "generated.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const GATE_TRACE_FILE: &str = "gate_trace.log";
pub const CONFIG_FILE: &str = "config.json";
pub const RECOGNIZED_FILE: &str = "recognized.csv";
pub const RECOGNIZER_CKPT: &str = "recognizer.ckpt";
pub const PROPOSER_CKPT: &str = "proposer.ckpt";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const BANK_DIR: &str = "charbanks";

const HASH_PREFIX: &str = "# config_hash=";

// Per-stage offsets so stages draw independent streams from one seed.
const SEED_RECOGNIZER: u64 = 0x100;
const SEED_PROPOSER: u64 = 0x200;
const SEED_LM: u64 = 0x300;
const SEED_GENERATOR: u64 = 0x400;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("feature store: {0}")]
    Store(#[from] StoreError),
    #[error("character bank: {0}")]
    Bank(#[from] BankError),
    #[error("recognizer: {0}")]
    Recognizer(#[from] RecognizerError),
    #[error("proposer: {0}")]
    Proposer(#[from] ProposerError),
    #[error("generator: {0}")]
    Generator(#[from] GeneratorError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{artifact} was produced with config {found}, expected {expected}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("no data: {0}")]
    NoData(String),
}

impl PipelineError {
    /// Whether the failure lies in the inputs rather than the computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_) | PipelineError::Store(_) | PipelineError::HashMismatch { .. } | PipelineError::NoData(_)
        ) || matches!(
            self,
            PipelineError::Bank(
                BankError::DimMismatch { .. }
                    | BankError::ZeroK
                    | BankError::KTooLarge { .. }
                    | BankError::MalformedFixture { .. }
                    | BankError::DuplicateCharacter(_)
            )
        )
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// The hash on the first line of an artifact, if any.
pub fn artifact_hash(bytes: &[u8]) -> Option<String> {
    let line = bytes.split(|&b| b == b'\n').next()?;
    let line = std::str::from_utf8(line).ok()?;
    line.strip_prefix(HASH_PREFIX).map(|h| h.trim().to_string())
}

pub fn check_hash(artifact: &str, bytes: &[u8], expected: &str) -> Result<()> {
    let found = artifact_hash(bytes).unwrap_or_else(|| "none".into());
    if found != expected {
        return Err(PipelineError::HashMismatch {
            artifact: artifact.into(),
            expected: expected.into(),
            found,
        });
    }
    Ok(())
}

/// Movies plus their optional on-screen character annotations.
pub struct Dataset {
    pub records: Vec<MovieRecord>,
    pub tags: BTreeMap<String, Vec<CharTag>>,
}

impl Dataset {
    /// `(train, eval)`: the last `eval_movies` in id order are held out; a
    /// single movie is used for both.
    pub fn split(&self, eval_movies: usize) -> (Vec<&MovieRecord>, Vec<&MovieRecord>) {
        let n = self.records.len();
        let e = eval_movies.clamp(1, n.max(1)).min(n);
        let cut = n - e;
        let eval: Vec<&MovieRecord> = self.records[cut..].iter().collect();
        let train: Vec<&MovieRecord> = if cut == 0 {
            eval.clone()
        } else {
            self.records[..cut].iter().collect()
        };
        (train, eval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub movie_id: String,
    pub frames: usize,
    pub dim: usize,
    pub ad: usize,
    pub subtitles: usize,
    pub speech: usize,
    pub char_tags: usize,
}

pub fn ingest(cfg: &RunConfig) -> Result<Dataset> {
    let root = cfg.paths.movies();
    let ids = list_movies(&root)?;
    if ids.is_empty() {
        return Err(PipelineError::NoData(format!("no movies under {}", root.display())));
    }
    let mut records = Vec::with_capacity(ids.len());
    let mut tags = BTreeMap::new();
    for id in &ids {
        let rec = load_movie(&root, id)?;
        let tag_path = root.join(id).join(CHAR_TAGS_FILE);
        if tag_path.is_file() {
            tags.insert(id.clone(), read_char_tags(&tag_path)?);
        }
        records.push(rec);
    }
    let dim = records[0].track.dim();
    if let Some(r) = records.iter().find(|r| r.track.dim() != dim) {
        return Err(PipelineError::Store(StoreError::DimMismatch {
            expected: dim,
            got: r.track.dim(),
        }));
    }
    Ok(Dataset { records, tags })
}

pub fn summarize(data: &Dataset) -> Vec<IngestSummary> {
    data.records
        .iter()
        .map(|r| IngestSummary {
            movie_id: r.movie_id.clone(),
            frames: r.track.len(),
            dim: r.track.dim(),
            ad: r.ad.len(),
            subtitles: r.subtitles.len(),
            speech: r.speech.len(),
            char_tags: data.tags.get(&r.movie_id).map_or(0, Vec::len),
        })
        .collect()
}

fn bank_path(cfg: &RunConfig, movie_id: &str) -> PathBuf {
    cfg.paths.out_dir.join(BANK_DIR).join(format!("{movie_id}.json"))
}

/// Calibrated banks for every movie, written under `charbanks/`. Movies the
/// cast database does not know get an empty bank.
pub fn build_charbanks(cfg: &RunConfig, data: &Dataset) -> Result<BTreeMap<String, CharacterBank>> {
    let db = FixtureMovieDb::new(cfg.paths.cast_db());
    let mut banks = BTreeMap::new();
    for r in &data.records {
        let bank = match build_bank(&db, &r.imdb_id, &r.track, cfg.charbank.k.min(r.track.len()), cfg.charbank.max_cast) {
            Ok(b) => b,
            Err(BankError::UnknownMovie(id)) => {
                warn!("no cast for {id}; using an empty character bank");
                CharacterBank::new(r.movie_id.clone(), vec![])?
            }
            Err(e) => return Err(e.into()),
        };
        let path = bank_path(cfg, &r.movie_id);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        bank.save(&path)?;
        banks.insert(r.movie_id.clone(), bank);
    }
    Ok(banks)
}

/// Banks from `charbanks/` when all are present, built otherwise.
pub fn load_or_build_charbanks(cfg: &RunConfig, data: &Dataset) -> Result<BTreeMap<String, CharacterBank>> {
    let mut banks = BTreeMap::new();
    for r in &data.records {
        let p = bank_path(cfg, &r.movie_id);
        if !p.is_file() {
            return build_charbanks(cfg, data);
        }
        banks.insert(r.movie_id.clone(), CharacterBank::load(&p)?);
    }
    Ok(banks)
}

/// Frames in `[t1, t2)`, or the frame nearest the midpoint when the
/// interval holds none.
pub fn clip_rows(track: &FrameFeatureTrack, t1: f64, t2: f64) -> Result<Array2<f32>> {
    let r = track.index_range(t1, t2)?;
    if !r.is_empty() {
        return Ok(track.features().slice(s![r, ..]).to_owned());
    }
    let mid = 0.5 * (t1 + t2);
    let ts = track.timestamps();
    let i = ts.partition_point(|&t| t < mid).min(ts.len() - 1);
    let j = if i > 0 && (ts[i - 1] - mid).abs() <= (ts[i] - mid).abs() { i - 1 } else { i };
    Ok(track.features().slice(s![j..j + 1, ..]).to_owned())
}

fn tagged_names(tags: &[CharTag], t1: f64, t2: f64) -> Vec<String> {
    tags.iter()
        .filter(|t| t.start_s < t2 && t.end_s > t1)
        .flat_map(CharTag::names)
        .collect()
}

/// One sample per annotated interval of each movie with a nonempty bank.
pub fn recognition_samples(
    records: &[&MovieRecord],
    data: &Dataset,
    banks: &BTreeMap<String, CharacterBank>,
) -> Result<Vec<RecognitionSample>> {
    let mut out = Vec::new();
    for r in records {
        let (Some(bank), Some(tags)) = (banks.get(&r.movie_id), data.tags.get(&r.movie_id)) else { continue };
        if bank.is_empty() {
            continue;
        }
        let exemplars = bank.exemplar_matrix();
        for t in tags {
            let names = t.names();
            out.push(RecognitionSample {
                exemplars: exemplars.clone(),
                clip: clip_rows(&r.track, t.start_s, t.end_s)?,
                labels: bank.entries.iter().map(|e| names.contains(&e.char_name)).collect(),
            });
        }
    }
    Ok(out)
}

pub fn train_recognizer(cfg: &RunConfig, data: &Dataset, banks: &BTreeMap<String, CharacterBank>) -> Result<CharRecognizer> {
    let (train, _) = data.split(cfg.split.eval_movies);
    let samples = recognition_samples(&train, data, banks)?;
    if samples.is_empty() {
        return Err(PipelineError::NoData("no character annotations for recognizer training".into()));
    }
    let mut model = CharRecognizer::new(cfg.recognizer.model.clone(), cfg.seed.wrapping_add(SEED_RECOGNIZER))?;
    let report = model.train(&samples, &cfg.recognizer.train, cfg.seed.wrapping_add(SEED_RECOGNIZER))?;
    info!(
        "recognizer: {} samples, loss {:.4} -> {:.4}",
        samples.len(),
        report.initial_loss,
        report.final_loss
    );
    model.save(&cfg.paths.out_dir.join(RECOGNIZER_CKPT))?;
    Ok(model)
}

/// Bank entries the recognizer marks active in `clip`, in bank order.
pub fn active_characters(model: &CharRecognizer, bank: Option<&CharacterBank>, clip: &Array2<f32>) -> Result<Vec<CharacterEntry>> {
    let Some(bank) = bank.filter(|b| !b.is_empty()) else { return Ok(vec![]) };
    let res = model.recognize(bank.exemplar_matrix().view(), clip.view())?;
    Ok(res.active.iter().map(|&i| bank.entries[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizedRow {
    pub movie_id: String,
    pub start_s: f64,
    pub end_s: f64,
    /// Character names separated by `;`.
    pub characters: String,
}

/// Active characters for each ground-truth AD interval of the eval movies.
pub fn recognize_eval(
    cfg: &RunConfig,
    data: &Dataset,
    banks: &BTreeMap<String, CharacterBank>,
    model: &CharRecognizer,
) -> Result<Vec<RecognizedRow>> {
    let (_, eval) = data.split(cfg.split.eval_movies);
    let mut rows = Vec::new();
    for r in eval {
        for ad in &r.ad {
            let clip = clip_rows(&r.track, ad.start_s, ad.end_s)?;
            let chars = active_characters(model, banks.get(&r.movie_id), &clip)?;
            rows.push(RecognizedRow {
                movie_id: r.movie_id.clone(),
                start_s: ad.start_s,
                end_s: ad.end_s,
                characters: chars.iter().map(|c| c.char_name.as_str()).collect::<Vec<_>>().join(";"),
            });
        }
    }
    Ok(rows)
}

pub fn train_proposer(cfg: &RunConfig, data: &Dataset) -> Result<ProposerModel> {
    let (train, _) = data.split(cfg.split.eval_movies);
    let mut windows: Vec<ContextWindow> = Vec::new();
    for r in train {
        windows.extend(movie_windows(r, cfg.proposer.stride_s)?);
    }
    let seed = cfg.seed.wrapping_add(SEED_PROPOSER);
    let mut model = ProposerModel::new(cfg.proposer.model.clone(), build_vocab(&windows), seed)?;
    let report = model.train(&windows, &cfg.proposer.train, seed)?;
    info!(
        "proposer: {} windows, loss {:.4} -> {:.4}",
        windows.len(),
        report.initial_loss,
        report.final_loss
    );
    model.save(&cfg.paths.out_dir.join(PROPOSER_CKPT))?;
    Ok(model)
}

/// Proposals for the eval movies.
pub fn propose(cfg: &RunConfig, data: &Dataset, model: &ProposerModel) -> Result<Vec<Proposal>> {
    let (_, eval) = data.split(cfg.split.eval_movies);
    let mut out = Vec::new();
    for r in eval {
        out.extend(propose_movie(model, r, cfg.proposer.stride_s)?);
    }
    Ok(out)
}

/// Training samples: one per AD sentence, characters from the annotations
/// when present and from the recognizer otherwise, previous ground-truth AD
/// as context.
pub fn generator_samples(
    records: &[&MovieRecord],
    data: &Dataset,
    banks: &BTreeMap<String, CharacterBank>,
    recognizer: Option<&CharRecognizer>,
) -> Result<Vec<GeneratorSample>> {
    let mut out = Vec::new();
    for r in records {
        let bank = banks.get(&r.movie_id);
        let tags = data.tags.get(&r.movie_id);
        for (i, ad) in r.ad.iter().enumerate() {
            let clip = clip_rows(&r.track, ad.start_s, ad.end_s)?;
            let characters = match (tags, bank, recognizer) {
                (Some(tags), Some(bank), _) => {
                    let names = tagged_names(tags, ad.start_s, ad.end_s);
                    bank.entries.iter().filter(|e| names.contains(&e.char_name)).cloned().collect()
                }
                (_, _, Some(m)) => active_characters(m, bank, &clip)?,
                _ => vec![],
            };
            out.push(GeneratorSample {
                clip_features: clip,
                characters,
                context_ad: r.ad[..i].iter().map(|a| a.text.clone()).collect(),
                target: ad.text.clone(),
            });
        }
    }
    Ok(out)
}

/// Texts for the optional LM adaptation: each target after its rendered
/// prompt, with and without the character line.
pub fn lm_texts(cfg: &RunConfig, samples: &[GeneratorSample]) -> Result<Vec<String>> {
    let g = &cfg.generator;
    let mut texts = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let ctx: &[String] = if g.recurrent { &s.context_ad } else { &[] };
        for template in [g.train.template, None] {
            let p = render_prompt(template, &s.characters, ctx, g.model.max_exemplars, &g.model.budget)?;
            texts.push(format!("{} {}", p.text, s.target));
        }
    }
    texts.dedup();
    Ok(texts)
}

pub fn train_generator(
    cfg: &RunConfig,
    data: &Dataset,
    banks: &BTreeMap<String, CharacterBank>,
    recognizer: Option<&CharRecognizer>,
) -> Result<(AdGenerator, GeneratorReport)> {
    let (train, _) = data.split(cfg.split.eval_movies);
    let samples = generator_samples(&train, data, banks, recognizer)?;
    if samples.is_empty() {
        return Err(PipelineError::NoData("no AD sentences for generator training".into()));
    }
    let texts = lm_texts(cfg, &samples)?;
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let mut lm_cfg = cfg.generator.model.lm.clone();
    lm_cfg.vocab_size = vocab.len();
    let lm_seed = cfg.seed.wrapping_add(SEED_LM);
    let lm = match &cfg.generator.lm_pretrain {
        Some(t) => {
            let (lm, losses) = pretrain_lm(lm_cfg, &vocab, &texts, t, lm_seed, DType::F32).map_err(GeneratorError::from)?;
            info!(
                "lm adaptation: {} texts, loss {:.4} -> {:.4}",
                texts.len(),
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            lm
        }
        None => CausalLm::frozen(lm_cfg, lm_seed, DType::F32).map_err(GeneratorError::from)?,
    };
    let seed = cfg.seed.wrapping_add(SEED_GENERATOR);
    let mut gen = AdGenerator::new(cfg.generator.model.clone(), vocab, lm, seed)?;
    let report = gen.train(&samples, &cfg.generator.train, seed, cfg.generator.recurrent)?;
    info!(
        "generator: {} samples, loss {:.4} -> {:.4}",
        samples.len(),
        report.initial_loss,
        report.final_loss
    );
    gen.save(&cfg.paths.out_dir.join(GENERATOR_CKPT))?;
    Ok((gen, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRow {
    pub movie_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

/// Intervals to describe in each eval movie, in time order.
pub fn segments(cfg: &RunConfig, data: &Dataset, proposals: Option<&[Proposal]>) -> Result<Vec<(String, f64, f64)>> {
    let (_, eval) = data.split(cfg.split.eval_movies);
    let mut out = Vec::new();
    match cfg.segments {
        Segments::Gt => {
            for r in eval {
                out.extend(r.ad.iter().map(|a| (r.movie_id.clone(), a.start_s, a.end_s)));
            }
        }
        Segments::Proposals => {
            let props = proposals.ok_or_else(|| PipelineError::NoData("proposal segments need proposals".into()))?;
            for r in eval {
                let mut mine: Vec<&Proposal> = props.iter().filter(|p| p.movie_id == r.movie_id && p.decision).collect();
                mine.sort_by(|a, b| a.gap_start_s.total_cmp(&b.gap_start_s));
                out.extend(mine.into_iter().map(|p| (r.movie_id.clone(), p.gap_start_s, p.gap_end_s)));
            }
        }
    }
    Ok(out)
}

/// Generates one sentence per segment, feeding earlier outputs of the same
/// movie back as context when recurrent.
pub fn infer(
    cfg: &RunConfig,
    data: &Dataset,
    banks: &BTreeMap<String, CharacterBank>,
    recognizer: &CharRecognizer,
    generator: &AdGenerator,
    proposals: Option<&[Proposal]>,
) -> Result<Vec<GeneratedRow>> {
    let segs = segments(cfg, data, proposals)?;
    let mut rows: Vec<GeneratedRow> = Vec::with_capacity(segs.len());
    for (movie_id, t1, t2) in segs {
        let rec = data
            .records
            .iter()
            .find(|r| r.movie_id == movie_id)
            .expect("segments come from loaded movies");
        let clip = clip_rows(&rec.track, t1, t2)?;
        let characters = active_characters(recognizer, banks.get(&movie_id), &clip)?;
        let context_ad = if cfg.generator.recurrent {
            rows.iter().filter(|r| r.movie_id == movie_id).map(|r| r.text.clone()).collect()
        } else {
            vec![]
        };
        let req = GenerationRequest {
            clip_features: clip,
            characters,
            template: cfg.generator.train.template,
            context_ad,
            decode: cfg.generator.decode,
        };
        let out = generator.generate(&req)?;
        rows.push(GeneratedRow {
            movie_id,
            start_s: t1,
            end_s: t2,
            text: out.text,
        });
    }
    Ok(rows)
}

fn csv_with_hash<T: Serialize>(rows: &[T], hash: &str) -> Result<Vec<u8>> {
    let mut buf = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| PipelineError::Csv(e.into()))?;
    }
    Ok(buf)
}

fn parse_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

const SEGMENTS_PREFIX: &str = "# segments=";

/// Hash line, a `# segments=` line, then `movie_id,start_s,end_s,text`.
pub fn generated_to_csv(rows: &[GeneratedRow], hash: &str, segments: Segments) -> Result<Vec<u8>> {
    let mut buf = csv_with_hash(rows, hash)?;
    let first = buf.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1);
    let name = match segments {
        Segments::Gt => "gt",
        Segments::Proposals => "proposals",
    };
    let line = format!("{SEGMENTS_PREFIX}{name}\n");
    buf.splice(first..first, line.bytes());
    Ok(buf)
}

/// The segment source recorded in a generated CSV.
pub fn generated_segments(bytes: &[u8]) -> Option<Segments> {
    bytes
        .split(|&b| b == b'\n')
        .take(2)
        .filter_map(|l| std::str::from_utf8(l).ok())
        .find_map(|l| l.strip_prefix(SEGMENTS_PREFIX))
        .and_then(|s| s.trim().parse().ok())
}

pub fn parse_generated(bytes: &[u8]) -> Result<Vec<GeneratedRow>> {
    parse_csv(bytes)
}

pub fn recognized_to_csv(rows: &[RecognizedRow], hash: &str) -> Result<Vec<u8>> {
    csv_with_hash(rows, hash)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub items: usize,
    /// ROUGE-L F, x100.
    pub rouge_l: f64,
    /// CIDEr-D, x100.
    pub cider: f64,
    /// R@k/N, x100.
    pub recall: f64,
    pub k: usize,
    pub n: usize,
    pub similarity: String,
    pub pairing: String,
}

/// Metrics over per-movie `(generated, reference)` sequences; CIDEr document
/// frequencies come from all references.
pub fn text_metrics(
    movies: &[(Vec<TimedText>, Vec<TimedText>)],
    k: usize,
    n: usize,
    sim: &dyn TextSimilarity,
    pairing: crate::evaluation::Pairing,
) -> Result<TextMetrics> {
    let mut cands = Vec::new();
    let mut refs: Vec<Vec<String>> = Vec::new();
    let mut rouge = 0.0;
    let mut hits = 0.0;
    for (gen, reference) in movies {
        if gen.is_empty() {
            continue;
        }
        let corr = corresponding_references(gen, reference, pairing)?;
        for (g, &c) in gen.iter().zip(&corr) {
            rouge += rouge_l(&g.text, &[&reference[c].text])?;
            cands.push(g.text.clone());
            refs.push(vec![reference[c].text.clone()]);
        }
        hits += recall_at_k_within_n(gen, reference, k, n, sim, pairing)? * gen.len() as f64;
    }
    if cands.is_empty() {
        return Err(PipelineError::NoData("nothing generated to evaluate".into()));
    }
    let m = cands.len() as f64;
    let all_refs: Vec<Vec<String>> = movies
        .iter()
        .flat_map(|(_, r)| r.iter().map(|t| vec![t.text.clone()]))
        .collect();
    let scorer = CiderScorer::new(&all_refs)?;
    let mut cider = 0.0;
    for (c, r) in cands.iter().zip(&refs) {
        cider += scorer.score(c, r)?;
    }
    Ok(TextMetrics {
        items: cands.len(),
        rouge_l: 100.0 * rouge / m,
        cider: 100.0 * cider / m,
        recall: 100.0 * hits / m,
        k,
        n,
        similarity: sim.name().to_string(),
        pairing: format!("{pairing:?}"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalMetrics {
    /// In-band gaps with both classes present.
    pub gaps: usize,
    pub auc: f64,
    pub ap: f64,
    pub duration_auc: f64,
    pub duration_ap: f64,
}

/// Model and duration-baseline ranking quality on the in-band gaps.
pub fn proposal_metrics(cfg: &RunConfig, data: &Dataset, proposals: &[Proposal]) -> Option<ProposalMetrics> {
    let mut scores = Vec::new();
    let mut durations = Vec::new();
    let mut labels = Vec::new();
    for p in proposals {
        let d = p.gap_end_s - p.gap_start_s;
        if !cfg.proposer.model.in_band(d) {
            continue;
        }
        let rec = data.records.iter().find(|r| r.movie_id == p.movie_id)?;
        if let Some(y) = label_gap(p.gap_start_s, p.gap_end_s, &rec.ad).as_bool() {
            scores.push(p.probability);
            durations.push(d);
            labels.push(y);
        }
    }
    Some(ProposalMetrics {
        gaps: labels.len(),
        auc: roc_auc(&scores, &labels).ok()?,
        ap: average_precision(&scores, &labels).ok()?,
        duration_auc: roc_auc(&durations, &labels).ok()?,
        duration_ap: average_precision(&durations, &labels).ok()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_hash: String,
    pub segments: Segments,
    pub text: TextMetrics,
    pub proposals: Option<ProposalMetrics>,
    /// Share of generated sentences naming a character from the bank.
    pub naming_fraction: f64,
}

pub fn similarity(cfg: &RunConfig) -> Result<Box<dyn TextSimilarity + Send + Sync>> {
    let table = match &cfg.evaluation.embeddings {
        Some(p) => WordEmbeddings::load(p)?,
        None => WordEmbeddings::empty(cfg.evaluation.embedding_dim),
    };
    Ok(cfg.evaluation.similarity.build(table))
}

pub fn evaluate(
    cfg: &RunConfig,
    data: &Dataset,
    banks: &BTreeMap<String, CharacterBank>,
    generated: &[GeneratedRow],
    proposals: Option<&[Proposal]>,
) -> Result<Metrics> {
    let (_, eval) = data.split(cfg.split.eval_movies);
    let mut movies = Vec::new();
    let mut named = 0usize;
    for r in eval {
        let gen: Vec<TimedText> = generated
            .iter()
            .filter(|g| g.movie_id == r.movie_id)
            .map(|g| TimedText::new(g.start_s, g.end_s, TextKind::Ad, g.text.clone()))
            .collect::<std::result::Result<_, _>>()?;
        if let Some(bank) = banks.get(&r.movie_id) {
            named += gen
                .iter()
                .filter(|g| crate::synth::names_any(&g.text, &bank.entries))
                .count();
        }
        if r.ad.is_empty() {
            continue;
        }
        movies.push((gen, r.ad.clone()));
    }
    let sim = similarity(cfg)?;
    let text = text_metrics(&movies, cfg.evaluation.k, cfg.evaluation.n, sim.as_ref(), cfg.evaluation.pairing)?;
    Ok(Metrics {
        config_hash: cfg.hash(),
        segments: cfg.segments,
        naming_fraction: named as f64 / generated.len().max(1) as f64,
        text,
        proposals: proposals.and_then(|p| proposal_metrics(cfg, data, p)),
    })
}

/// Gate log: hash line, then final `|tanh g|` per block and the mean gate
/// after each training step.
pub fn gate_trace_log(gen: &AdGenerator, report: Option<&GeneratorReport>, hash: &str) -> Result<String> {
    let mut s = format!("{HASH_PREFIX}{hash}\n");
    for (i, g) in gen.gate_trace()?.iter().enumerate() {
        s.push_str(&format!("block {i} attn {:.6} ff {:.6}\n", g.attn, g.ff));
    }
    if let Some(r) = report {
        for (step, m) in r.gate_history.iter().enumerate() {
            s.push_str(&format!("step {step} mean {m:.6}\n"));
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub proposals: usize,
    pub generated: usize,
    pub metrics: Metrics,
}

/// All stages in order; writes every artifact into `out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let hash = cfg.hash();
    cfg.save(&out.join(CONFIG_FILE))?;

    let data = ingest(cfg)?;
    let banks = build_charbanks(cfg, &data)?;
    let recognizer = train_recognizer(cfg, &data, &banks)?;
    let recognized = recognize_eval(cfg, &data, &banks, &recognizer)?;
    write_file(&out.join(RECOGNIZED_FILE), &recognized_to_csv(&recognized, &hash)?)?;

    let proposer = train_proposer(cfg, &data)?;
    let proposals = propose(cfg, &data, &proposer)?;
    write_file(&out.join(PROPOSALS_FILE), &proposals_to_csv(&proposals, Some(&hash))?)?;

    let (generator, report) = train_generator(cfg, &data, &banks, Some(&recognizer))?;
    write_file(&out.join(GATE_TRACE_FILE), gate_trace_log(&generator, Some(&report), &hash)?.as_bytes())?;
    let generated = infer(cfg, &data, &banks, &recognizer, &generator, Some(&proposals))?;
    write_file(&out.join(GENERATED_FILE), &generated_to_csv(&generated, &hash, cfg.segments)?)?;

    let metrics = evaluate(cfg, &data, &banks, &generated, Some(&proposals))?;
    write_file(&out.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    Ok(RunReport {
        config_hash: hash,
        out_dir: out.clone(),
        proposals: proposals.len(),
        generated: generated.len(),
        metrics,
    })
}

/// Re-reads the CSV artifacts in `out_dir`, refusing any whose hash differs
/// from the config, and recomputes the metrics.
pub fn evaluate_artifacts(cfg: &RunConfig) -> Result<Metrics> {
    let out = &cfg.paths.out_dir;
    let hash = cfg.hash();
    let gen_bytes = read_file(&out.join(GENERATED_FILE))?;
    check_hash(GENERATED_FILE, &gen_bytes, &hash)?;
    let generated = parse_generated(&gen_bytes)?;
    let mut cfg = cfg.clone();
    if let Some(s) = generated_segments(&gen_bytes) {
        cfg.segments = s;
    }
    let cfg = &cfg;
    let prop_path = out.join(PROPOSALS_FILE);
    let proposals = if prop_path.is_file() {
        let bytes = read_file(&prop_path)?;
        check_hash(PROPOSALS_FILE, &bytes, &hash)?;
        Some(crate::temporal_proposer::parse_proposals(&bytes)?)
    } else {
        None
    };
    let data = ingest(cfg)?;
    let banks = load_or_build_charbanks(cfg, &data)?;
    let metrics = evaluate(cfg, &data, &banks, &generated, proposals.as_deref())?;
    write_file(&out.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    Ok(metrics)
}

/// Proposals from `proposals.csv` after a hash check.
pub fn load_proposals(cfg: &RunConfig) -> Result<Vec<Proposal>> {
    let bytes = read_file(&cfg.paths.out_dir.join(PROPOSALS_FILE))?;
    check_hash(PROPOSALS_FILE, &bytes, &cfg.hash())?;
    Ok(crate::temporal_proposer::parse_proposals(&bytes)?)
}

pub fn write_artifact(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)
}

/// Labeled gaps of the eval movies, for reports.
pub fn eval_gap_labels(cfg: &RunConfig, data: &Dataset, proposals: &[Proposal]) -> Vec<(Proposal, GapLabel)> {
    let (_, eval) = data.split(cfg.split.eval_movies);
    proposals
        .iter()
        .filter_map(|p| {
            let r = eval.iter().find(|r| r.movie_id == p.movie_id)?;
            Some((p.clone(), label_gap(p.gap_start_s, p.gap_end_s, &r.ad)))
        })
        .collect()
}
