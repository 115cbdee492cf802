use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use log::info;
use rarrg::decoder::{forward, load_checkpoint, save_checkpoint, DecoderConfig, DecoderParams};
use rarrg::embedding::{EmbeddingProvider, FileProvider, HashProvider, RemoteProvider};
use rarrg::index::{build_index, load_index, retrieve, save_index, RetrievalResult, VectorIndex};
use rarrg::metrics::{evaluate_records, read_eval_records, CHEXBERT_5, CHEXBERT_CLASSES};
use rarrg::phrase_graph::{extract_radgraph_phrases, read_annotation_lines, KeyPhrase};
use rarrg::rag::{
    build_rag_prompt, generate_reports, GenerationClient, Prompt, PromptTemplate, Provenance, RagTemplates, Report, TemplateId,
};
use rarrg::trainer::{generate_corpus, read_studies, train, write_history_csv, write_studies, Study, ViewPosition};
use rarrg::Error;
use serde::Serialize;
use serde_json::Value;

use crate::config::PipelineConfig;

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json_line<W: Write + ?Sized, T: Serialize>(w: &mut W, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct PhraseLine<'a> {
    id: String,
    radgraph_phrases: Vec<&'a str>,
}

pub fn extract_phrases(input: &Path, out: &Path) -> anyhow::Result<usize> {
    let docs = read_annotation_lines(open(input)?)?;
    let mut w = create(out)?;
    for (line, doc) in &docs {
        let phrases = extract_radgraph_phrases(doc).map_err(|e| Error::Format {
            line: *line,
            message: e.to_string(),
        })?;
        let record = PhraseLine {
            id: doc.id.clone().unwrap_or_else(|| line.to_string()),
            radgraph_phrases: phrases.iter().map(KeyPhrase::as_str).collect(),
        };
        write_json_line(&mut w, &record)?;
    }
    w.flush()?;
    Ok(docs.len())
}

/// Reads phrases from JSON lines holding a string, `{"phrase": ..}`, or an
/// array under `phrases`, `key_phrases` or `radgraph_phrases`.
pub fn read_phrases(path: &Path) -> anyhow::Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Format { line: i + 1, message: m };
        let value: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        match &value {
            Value::String(s) => out.push(s.clone()),
            Value::Object(m) => {
                let mut found = false;
                if let Some(p) = m.get("phrase") {
                    out.push(p.as_str().ok_or_else(|| bad("\"phrase\" must be a string".into()))?.to_owned());
                    found = true;
                }
                for key in ["phrases", "key_phrases", "radgraph_phrases"] {
                    if let Some(list) = m.get(key) {
                        let list = list.as_array().ok_or_else(|| bad(format!("{key:?} must be an array")))?;
                        for p in list {
                            out.push(p.as_str().ok_or_else(|| bad(format!("{key:?} must hold strings")))?.to_owned());
                        }
                        found = true;
                    }
                }
                if !found {
                    return Err(bad("no phrase field".into()).into());
                }
            }
            _ => return Err(bad("expected a string or an object".into()).into()),
        }
    }
    Ok(out.into_iter().map(|p| p.trim().to_owned()).filter(|p| !p.is_empty()).collect())
}

pub fn make_provider(cfg: &PipelineConfig) -> anyhow::Result<Box<dyn EmbeddingProvider>> {
    let dim = cfg.embed_dim();
    Ok(match cfg.index.provider.as_str() {
        "hash" => Box::new(HashProvider::new(dim)?),
        "file" => {
            let path = cfg
                .index
                .path
                .as_ref()
                .ok_or_else(|| Error::validation("the file provider needs index.path"))?;
            Box::new(FileProvider::open(path)?)
        }
        "remote" => {
            let endpoint = cfg
                .index
                .endpoint
                .clone()
                .ok_or_else(|| Error::validation("the remote provider needs index.endpoint"))?;
            Box::new(RemoteProvider::new(endpoint, dim, Duration::from_millis(cfg.index.timeout_ms)))
        }
        other => return Err(Error::validation(format!("unknown provider {other:?}; use hash, file or remote")).into()),
    })
}

pub fn build_index_cmd(phrases: &Path, out: &Path, cfg: &PipelineConfig) -> anyhow::Result<VectorIndex> {
    let phrases = read_phrases(phrases)?;
    let provider = make_provider(cfg)?;
    let index = build_index(&phrases, provider.as_ref())?;
    save_index(&index, out)?;
    Ok(index)
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    history: PathBuf,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
    epochs: usize,
}

/// Returns `(train, val)` studies from a directory or the synthetic generator.
fn load_corpus(corpus: &str, cfg: &PipelineConfig) -> anyhow::Result<(Vec<Study>, Vec<Study>)> {
    if corpus == "synthetic" {
        let c = generate_corpus(&cfg.corpus)?;
        return Ok((c.train, c.val));
    }
    let dir = Path::new(corpus);
    let train = read_studies(open(&dir.join("train.jsonl"))?)?;
    let val = read_studies(open(&dir.join("val.jsonl"))?)?;
    Ok((train, val))
}

pub fn train_cmd(corpus: &str, out: &Path, history: Option<&Path>, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let (train_set, val_set) = load_corpus(corpus, cfg)?;
    info!("training on {} studies, validating on {}", train_set.len(), val_set.len());
    let provider = make_provider(cfg)?;
    let outcome = train(&train_set, &val_set, &cfg.decoder, &cfg.loss, &cfg.train, provider.as_ref())?;
    save_checkpoint(&outcome.params, &cfg.decoder, out)?;
    let history_path = history.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    let mut w = create(&history_path)?;
    write_history_csv(&outcome.history, &mut w)?;
    w.flush()?;
    let summary = TrainSummary {
        checkpoint: out.to_path_buf(),
        history: history_path,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_epoch.map(|e| outcome.history[e - 1].val_loss),
        epochs: outcome.history.len(),
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn synth_cmd(out: &Path, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, studies) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let mut w = create(&out.join(format!("{name}.jsonl")))?;
        write_studies(studies, &mut w)?;
        w.flush()?;
    }
    let mut w = create(&out.join("vocabulary.jsonl"))?;
    for p in corpus.vocabulary() {
        write_json_line(&mut w, &p)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads either a single JSON study or JSON lines of studies.
pub fn read_study_file(path: &Path) -> anyhow::Result<Vec<Study>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
    if let Ok(study) = serde_json::from_str::<Study>(&text) {
        study.validate()?;
        return Ok(vec![study]);
    }
    let studies = read_studies(text.as_bytes())?;
    if studies.is_empty() {
        return Err(Error::validation(format!("{} holds no studies", path.display())).into());
    }
    Ok(studies)
}

struct Model {
    params: DecoderParams,
    cfg: DecoderConfig,
    index: VectorIndex,
}

impl Model {
    fn load(ckpt: &Path, index: &Path) -> anyhow::Result<Self> {
        let (params, cfg) = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        let index = load_index(index).with_context(|| format!("loading index {}", index.display()))?;
        if index.dim() != cfg.d_embed {
            return Err(Error::DimensionMismatch {
                expected: cfg.d_embed,
                got: index.dim(),
            }
            .into());
        }
        Ok(Self { params, cfg, index })
    }

    fn retrieve(&self, study: &Study, threshold: f64) -> anyhow::Result<Vec<(ViewPosition, RetrievalResult)>> {
        study
            .views
            .iter()
            .map(|v| {
                let preds = forward(&v.tokens, &self.params, &self.cfg)?;
                Ok((v.position, retrieve(&preds, &self.index, threshold)?))
            })
            .collect()
    }
}

#[derive(Serialize)]
struct ViewRetrieval<'a> {
    position: ViewPosition,
    #[serde(flatten)]
    result: &'a RetrievalResult,
}

#[derive(Serialize)]
struct StudyRetrieval<'a> {
    id: &'a str,
    views: Vec<ViewRetrieval<'a>>,
}

pub fn retrieve_cmd(ckpt: &Path, index: &Path, study: &Path, threshold: f64, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = Model::load(ckpt, index)?;
    for s in read_study_file(study)? {
        let results = model.retrieve(&s, threshold)?;
        let line = StudyRetrieval {
            id: &s.id,
            views: results.iter().map(|(p, r)| ViewRetrieval { position: *p, result: r }).collect(),
        };
        write_json_line(out, &line)?;
    }
    Ok(())
}

pub fn rag_templates(cfg: &PipelineConfig) -> anyhow::Result<RagTemplates> {
    let load = |id: TemplateId, path: &Option<PathBuf>| -> anyhow::Result<PromptTemplate> {
        let t = match path {
            Some(p) => PromptTemplate::load(id, p)?,
            None => PromptTemplate::builtin(id),
        };
        Ok(t.with_examples(cfg.templates.examples)?)
    };
    Ok(RagTemplates {
        single_view: load(TemplateId::SingleView, &cfg.templates.single_view)?,
        multi_view: load(TemplateId::MultiView, &cfg.templates.multi_view)?,
    })
}

pub fn make_client(cfg: &PipelineConfig) -> anyhow::Result<GenerationClient> {
    match cfg.client.backend.as_str() {
        "mock" => Ok(GenerationClient::mock()),
        "remote" => {
            let endpoint = cfg
                .client
                .endpoint
                .clone()
                .ok_or_else(|| Error::validation("the remote backend needs client.endpoint"))?;
            Ok(GenerationClient::remote(
                endpoint,
                cfg.client.model.clone(),
                Duration::from_millis(cfg.client.timeout_ms),
                cfg.client.temperature,
            ))
        }
        other => Err(Error::validation(format!("unknown backend {other:?}; use mock or remote")).into()),
    }
}

#[derive(Serialize)]
struct StudyReport<'a> {
    id: &'a str,
    report: &'a Report,
}

fn phrases_of(result: &RetrievalResult) -> anyhow::Result<Vec<KeyPhrase>> {
    Ok(result.phrases().into_iter().map(KeyPhrase::new).collect::<Result<Vec<_>, _>>()?)
}

pub fn generate_cmd(ckpt: &Path, index: &Path, study: &Path, cfg: &PipelineConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = Model::load(ckpt, index)?;
    let templates = rag_templates(cfg)?;
    let client = make_client(cfg)?;
    let studies = read_study_file(study)?;
    let mut prompts = Vec::with_capacity(studies.len());
    for s in &studies {
        let results = model.retrieve(s, cfg.index.threshold)?;
        let find = |pos| results.iter().find(|(p, _)| *p == pos).map(|(_, r)| r);
        let prompt = match (find(ViewPosition::Frontal), find(ViewPosition::Lateral)) {
            (Some(f), Some(l)) => build_rag_prompt(&phrases_of(f)?, Some(&phrases_of(l)?), &templates),
            (Some(one), None) | (None, Some(one)) => build_rag_prompt(&phrases_of(one)?, None, &templates),
            (None, None) => unreachable!("studies are validated to hold a view"),
        };
        prompts.push(prompt);
    }
    // Studies with no retrieved phrase get an empty report without a backend call.
    let (ready, slots): (Vec<Prompt>, Vec<Option<usize>>) = {
        let mut ready = Vec::new();
        let mut slots = Vec::new();
        for p in prompts {
            match p {
                Ok(p) => {
                    slots.push(Some(ready.len()));
                    ready.push(p);
                }
                Err(Error::Validation(_)) => slots.push(None),
                Err(e) => return Err(e.into()),
            }
        }
        (ready, slots)
    };
    let mut generated: Vec<Option<rarrg::Result<Report>>> =
        generate_reports(&ready, &client, cfg.client.max_in_flight).into_iter().map(Some).collect();
    let reports = slots.into_iter().map(|slot| match slot {
        Some(i) => generated[i].take().expect("each report is taken once"),
        None => Ok(Report {
            text: String::new(),
            provenance: Provenance {
                template: TemplateId::SingleView,
                phrases: Vec::new(),
                lateral_phrases: None,
            },
            warning: Some("no key phrase was retrieved".into()),
        }),
    });
    for (s, r) in studies.iter().zip(reports) {
        let report = r?;
        if let Some(w) = &report.warning {
            log::warn!("study {}: {w}", s.id);
        }
        write_json_line(out, &StudyReport { id: &s.id, report: &report })?;
    }
    Ok(())
}

pub fn evaluate_cmd(pairs: &Path, out: Option<&Path>, csv: Option<&Path>, five: bool, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let records = read_eval_records(open(pairs)?)?;
    let subset: Option<&[&str]> = if five { Some(&CHEXBERT_5) } else { None };
    let report = evaluate_records(&records, &CHEXBERT_CLASSES, subset)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}")?;
            w.flush()?;
        }
        None => writeln!(stdout, "{json}")?,
    }
    if let Some(path) = csv {
        let mut w = create(path)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}
