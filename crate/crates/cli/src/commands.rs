//! Implementations of the CLI subcommands; thin orchestration over the
//! library crate, with file formats and exit-code mapping.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wlab_core::corpus::{
    self, clean_text, extract_features, gate_with_threshold, gbt_train, gbt_validate, load_gbt,
    save_gbt, synthetic_benchmark, Decision, FeatureRegistry, GbtConfig, GbtModel, InputDoc,
    QualityRecord,
};
use wlab_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, TinyModel};
use wlab_core::quant::{
    accumulate_imatrix, fidelity, quantize_model, FidelityReport, ImportanceMatrix, QuantScheme,
};
use wlab_core::tokenizer::{self, bpe_train, load_vocab, merge_vocabs, save_vocab, BpeVocab};
use wlab_core::train::{
    derive_seed, load_jsonl, train, AdamWConfig, ChatTemplate, ScheduleConfig, TrainConfig,
    TrainError,
};

use crate::config::{config_err, write_atomic, CliError, Settings};

fn map_model_err(e: ModelError) -> CliError {
    match &e {
        ModelError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Config(e.to_string())
        }
        ModelError::Checkpoint(_) | ModelError::Io(_) => CliError::Artifact(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

fn load_ckpt(path: &Path) -> Result<TinyModel<f32>, CliError> {
    load_checkpoint(path).map_err(map_model_err)
}

fn open_reader(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| config_err(format!("cannot open {}: {e}", path.display())))
}

/// Whitespace-separated token ids.
fn read_tokens(path: &Path, vocab_size: usize) -> Result<Vec<u32>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for t in text.split_whitespace() {
        let id: u32 = t
            .parse()
            .map_err(|e| config_err(format!("{}: bad token {t:?}: {e}", path.display())))?;
        if id as usize >= vocab_size {
            return Err(config_err(format!(
                "{}: token {id} outside vocab of {vocab_size}",
                path.display()
            )));
        }
        out.push(id);
    }
    if out.is_empty() {
        return Err(config_err(format!("{}: no tokens", path.display())));
    }
    Ok(out)
}

fn configure_jobs(jobs: usize) -> Result<(), CliError> {
    if jobs == 0 {
        return Ok(()); // rayon default
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .ok(); // already-initialized pools keep their size
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Byte-level fallback tokenizer: token id = byte value. Ids 256..258 are
/// reserved for the chat template when the vocabulary is large enough.
fn byte_tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    text.bytes().map(|b| (b as u32).min(vocab_size as u32 - 1)).collect()
}

fn chat_template(vocab_size: usize) -> ChatTemplate {
    if vocab_size > 258 {
        ChatTemplate {
            user_token: Some(256),
            assistant_token: Some(257),
            end_token: Some(258),
        }
    } else {
        ChatTemplate {
            user_token: None,
            assistant_token: None,
            end_token: None,
        }
    }
}

pub struct TrainFlags {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub iters: Option<u64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub alr: Option<String>,
    pub vocab: Option<PathBuf>,
}

fn train_settings(flags: &TrainFlags) -> Result<Settings, CliError> {
    let mut s = Settings::new(&[
        ("preset", "desk"),
        ("data", ""),
        ("out", "runs/train"),
        ("iters", ""),
        ("batch_size", ""),
        ("seed", "0"),
        ("alr", ""),
        ("vocab", ""),
        ("base_lr", ""),
        ("min_lr", ""),
        ("warmup_iters", ""),
        ("weight_decay", ""),
        ("baseline_batch_tokens", ""),
    ]);
    if let Some(path) = &flags.config {
        s.load_file(path)?;
    }
    s.override_with("preset", &flags.preset);
    s.override_with("data", &flags.data.as_ref().map(|p| p.display()));
    s.override_with("out", &flags.out.as_ref().map(|p| p.display()));
    s.override_with("iters", &flags.iters);
    s.override_with("batch_size", &flags.batch_size);
    s.override_with("seed", &flags.seed);
    s.override_with("alr", &flags.alr);
    s.override_with("vocab", &flags.vocab.as_ref().map(|p| p.display()));
    Ok(s)
}

struct Preset {
    schedule: ScheduleConfig,
    weight_decay: f64,
    batch_size: usize,
}

/// Named hyperparameter presets. The 7B presets carry the large-scale
/// schedule shapes; the model trained is always the desk-scale one (the
/// full-scale architecture exists as config validation only).
fn preset(name: &str) -> Result<Preset, CliError> {
    let p = match name {
        "desk" => Preset {
            schedule: ScheduleConfig {
                base_lr: 3e-3,
                min_lr: 3e-4,
                warmup_iters: 20,
                total_iters: 500,
                baseline_batch_tokens: 24,
                alr_enabled: true,
            },
            weight_decay: 0.05,
            batch_size: 4,
        },
        "pretrain-7b" => Preset {
            schedule: ScheduleConfig {
                base_lr: 3e-5,
                min_lr: 2e-5,
                warmup_iters: 2000,
                total_iters: 17350,
                baseline_batch_tokens: 4096,
                alr_enabled: false,
            },
            weight_decay: 0.1,
            batch_size: 128,
        },
        "sft-7b" => Preset {
            schedule: ScheduleConfig {
                base_lr: 7e-6,
                min_lr: 6e-7,
                warmup_iters: 50,
                total_iters: 3000,
                baseline_batch_tokens: 4096,
                alr_enabled: true,
            },
            weight_decay: 0.05,
            batch_size: 128,
        },
        other => return Err(config_err(format!("unknown preset {other:?}"))),
    };
    Ok(p)
}

pub fn cmd_train(flags: TrainFlags) -> Result<(), CliError> {
    let mut s = train_settings(&flags)?;
    let model_cfg = ModelConfig::desk();
    let p = preset(s.get("preset"))?;
    // fill preset-derived defaults for any key not set by file or flag
    let fill = |s: &mut Settings, key: &'static str, value: String| {
        if s.get(key).is_empty() {
            s.set(key, &value).expect("known key");
        }
    };
    fill(&mut s, "iters", p.schedule.total_iters.to_string());
    fill(&mut s, "batch_size", p.batch_size.to_string());
    fill(&mut s, "alr", if p.schedule.alr_enabled { "on" } else { "off" }.to_string());
    fill(&mut s, "base_lr", p.schedule.base_lr.to_string());
    fill(&mut s, "min_lr", p.schedule.min_lr.to_string());
    fill(&mut s, "warmup_iters", p.schedule.warmup_iters.to_string());
    fill(&mut s, "weight_decay", p.weight_decay.to_string());
    fill(
        &mut s,
        "baseline_batch_tokens",
        p.schedule.baseline_batch_tokens.to_string(),
    );

    let data_path = s.get_path("data")?;
    let seed = s.get_u64("seed")?;
    let vocab_size = model_cfg.vocab_size;
    let vocab: Option<BpeVocab> = match s.get_opt_path("vocab") {
        Some(vp) => Some(load_vocab(open_reader(&vp)?).map_err(|e| config_err(e))?),
        None => None,
    };
    let tokenize = |text: &str| -> Vec<u32> {
        match &vocab {
            Some(v) => {
                let toks = tokenizer::tokenize(v, text);
                tokenizer::token_ids(v, &toks, vocab_size)
            }
            None => byte_tokenize(text, vocab_size),
        }
    };
    let template = chat_template(vocab_size);
    let dataset = load_jsonl(open_reader(&data_path)?, tokenize, &template)
        .map_err(|e| config_err(format!("{}: {e}", data_path.display())))?;

    let train_cfg = TrainConfig {
        schedule: ScheduleConfig {
            base_lr: s.get_f64("base_lr")?,
            min_lr: s.get_f64("min_lr")?,
            warmup_iters: s.get_u64("warmup_iters")?,
            total_iters: s.get_u64("iters")?,
            baseline_batch_tokens: s.get_u64("baseline_batch_tokens")?,
            alr_enabled: s.get_bool("alr")?,
        },
        optimizer: AdamWConfig {
            weight_decay: s.get_f64("weight_decay")?,
            ..AdamWConfig::default()
        },
        batch_size: s.get_usize("batch_size")?,
        seed: derive_seed(seed, "train"),
    };

    let out_dir = s.get_path("out")?;
    fs::create_dir_all(&out_dir)
        .map_err(|e| config_err(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut model = TinyModel::<f32>::init(&model_cfg, derive_seed(seed, "init"))
        .map_err(map_model_err)?;
    let report = train(&mut model, &dataset, &train_cfg).map_err(|e| match e {
        TrainError::NonFiniteGrad { .. } => CliError::Training(e.to_string()),
        TrainError::EmptyDataset | TrainError::NoMaskedTokens | TrainError::InvalidSample(_) => {
            config_err(e)
        }
        other => CliError::Training(other.to_string()),
    })?;

    let mut csv = Vec::new();
    report
        .write_csv(&mut csv)
        .map_err(|e| config_err(format!("csv: {e}")))?;
    write_atomic(&out_dir.join("train.csv"), &csv)?;
    save_checkpoint(&model, &out_dir.join("checkpoint.bin")).map_err(map_model_err)?;
    s.write_resolved(&out_dir.join("resolved.cfg"))?;
    println!(
        "trained {} iterations, final loss {:.6}, outputs in {}",
        report.records.len(),
        report.final_loss().unwrap_or(f64::NAN),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// corpus pipeline
// ---------------------------------------------------------------------------

fn read_jsonl_lines<T: for<'a> Deserialize<'a>>(
    path: &Path,
    strict: bool,
) -> Result<(Vec<T>, usize), CliError> {
    let reader = open_reader(path)?;
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(v) => out.push(v),
            Err(e) => {
                if strict {
                    return Err(CliError::Data(format!(
                        "{}:{}: {e}",
                        path.display(),
                        i + 1
                    )));
                }
                eprintln!("warning: {}:{}: skipped malformed line: {e}", path.display(), i + 1);
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

fn write_jsonl<T: Serialize>(path: Option<&Path>, items: &[T]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| config_err(e))?;
        buf.push(b'\n');
    }
    match path {
        Some(p) => write_atomic(p, &buf),
        None => {
            std::io::stdout()
                .write_all(&buf)
                .map_err(|e| config_err(e))?;
            Ok(())
        }
    }
}

pub fn cmd_clean(
    input: &Path,
    output: Option<&Path>,
    strict: bool,
    jobs: usize,
) -> Result<(), CliError> {
    configure_jobs(jobs)?;
    let (docs, skipped): (Vec<InputDoc>, usize) = read_jsonl_lines(input, strict)?;
    use rayon::prelude::*;
    let cleaned: Vec<InputDoc> = docs
        .par_iter()
        .map(|d| InputDoc {
            id: d.id.clone(),
            text: clean_text(&d.text).0,
        })
        .collect();
    write_jsonl(output, &cleaned)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} malformed lines");
    }
    Ok(())
}

fn load_quality_model(path: &Path) -> Result<GbtModel, CliError> {
    let reader = open_reader(path)?;
    load_gbt(reader).map_err(|e| match e {
        corpus::CorpusError::ModelFile(_) => CliError::Artifact(e.to_string()),
        other => config_err(other),
    })
}

pub fn cmd_classify(
    input: &Path,
    model_path: &Path,
    output: Option<&Path>,
    threshold: f64,
    strict: bool,
    jobs: usize,
) -> Result<(), CliError> {
    configure_jobs(jobs)?;
    let model = load_quality_model(model_path)?;
    let registry = FeatureRegistry::default_set();
    let (docs, skipped): (Vec<InputDoc>, usize) = read_jsonl_lines(input, strict)?;
    let results = corpus::process_documents(&docs, &registry, &model, threshold);
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e @ corpus::CorpusError::RegistryMismatch { .. }) => {
                return Err(CliError::Artifact(e.to_string()))
            }
            Err(e) => {
                if strict {
                    return Err(CliError::Data(e.to_string()));
                }
                eprintln!("warning: skipped document: {e}");
            }
        }
    }
    write_jsonl(output, &records)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} malformed lines");
    }
    Ok(())
}

pub fn cmd_gate(
    input: &Path,
    output: Option<&Path>,
    threshold: f64,
    strict: bool,
) -> Result<(), CliError> {
    let (records, skipped): (Vec<QualityRecord>, usize) = read_jsonl_lines(input, strict)?;
    let kept: Vec<QualityRecord> = records
        .into_iter()
        .map(|mut r| {
            r.decision = gate_with_threshold(&r.probs, threshold);
            r
        })
        .filter(|r| r.decision == Decision::Kept)
        .collect();
    write_jsonl(output, &kept)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} malformed lines");
    }
    Ok(())
}

pub fn cmd_pipeline(
    input: &Path,
    model_path: &Path,
    output: Option<&Path>,
    threshold: f64,
    strict: bool,
    jobs: usize,
) -> Result<(), CliError> {
    configure_jobs(jobs)?;
    let model = load_quality_model(model_path)?;
    let registry = FeatureRegistry::default_set();
    let (docs, skipped): (Vec<InputDoc>, usize) = read_jsonl_lines(input, strict)?;
    let results = corpus::process_documents(&docs, &registry, &model, threshold);
    let mut kept = Vec::new();
    for r in results {
        match r {
            Ok(rec) if rec.decision == Decision::Kept => kept.push(rec),
            Ok(_) => {}
            Err(e @ corpus::CorpusError::RegistryMismatch { .. }) => {
                return Err(CliError::Artifact(e.to_string()))
            }
            Err(e) => {
                if strict {
                    return Err(CliError::Data(e.to_string()));
                }
                eprintln!("warning: skipped document: {e}");
            }
        }
    }
    write_jsonl(output, &kept)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} malformed lines");
    }
    Ok(())
}

#[derive(Deserialize)]
struct LabeledDoc {
    #[allow(dead_code)]
    #[serde(default)]
    id: String,
    text: String,
    label: String,
}

pub fn cmd_quality_train(
    data: Option<&Path>,
    output: &Path,
    rounds: usize,
    depth: usize,
    seed: u64,
    strict: bool,
) -> Result<(), CliError> {
    let registry = FeatureRegistry::default_set();
    let cfg = GbtConfig {
        rounds,
        max_depth: depth,
        seed: derive_seed(seed, "quality-train"),
        ..GbtConfig::default()
    };
    let (train_set, holdout) = match data {
        Some(path) => {
            let (docs, _): (Vec<LabeledDoc>, usize) = read_jsonl_lines(path, strict)?;
            let mut samples = Vec::new();
            for d in docs {
                let class = match d.label.as_str() {
                    "high" => corpus::HIGH_CLASS,
                    "medium" => corpus::MEDIUM_CLASS,
                    "low" => corpus::LOW_CLASS,
                    other => {
                        return Err(CliError::Data(format!("unknown label {other:?}")));
                    }
                };
                let (clean, _) = clean_text(&d.text);
                let features = extract_features(&clean, &registry).map_err(|e| {
                    CliError::Data(format!("document unusable after cleaning: {e}"))
                })?;
                samples.push((features, class));
            }
            (samples, Vec::new())
        }
        None => synthetic_benchmark(
            9000,
            1000,
            registry.len(),
            3.0,
            derive_seed(seed, "synthetic-benchmark"),
        ),
    };
    let model = gbt_train(&train_set, &registry.names(), &cfg).map_err(|e| config_err(e))?;
    if !holdout.is_empty() {
        let report = gbt_validate(&model, &holdout).map_err(|e| config_err(e))?;
        println!(
            "holdout macro precision {:.4} recall {:.4} f1 {:.4}",
            report.macro_precision, report.macro_recall, report.macro_f1
        );
    }
    let mut buf = Vec::new();
    save_gbt(&model, &mut buf).map_err(|e| config_err(e))?;
    write_atomic(output, &buf)?;
    println!("model written to {}", output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// tokenizer
// ---------------------------------------------------------------------------

pub fn cmd_bpe_train(input: &Path, vocab_size: usize, output: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input)
        .map_err(|e| config_err(format!("cannot read {}: {e}", input.display())))?;
    let docs: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    let vocab = bpe_train(&docs, vocab_size).map_err(|e| config_err(e))?;
    let mut buf = Vec::new();
    save_vocab(&vocab, &mut buf).map_err(|e| config_err(e))?;
    write_atomic(output, &buf)?;
    println!(
        "trained {} merges over alphabet of {}",
        vocab.merges.len(),
        vocab.alphabet.len()
    );
    Ok(())
}

pub fn cmd_tokenize(
    vocab_path: &Path,
    input: &Path,
    tokens_out: Option<&Path>,
    metrics_out: Option<&Path>,
) -> Result<(), CliError> {
    let vocab = load_vocab(open_reader(vocab_path)?).map_err(|e| config_err(e))?;
    let text = fs::read_to_string(input)
        .map_err(|e| config_err(format!("cannot read {}: {e}", input.display())))?;
    let tokens = tokenizer::tokenize(&vocab, &text);
    if let Some(p) = tokens_out {
        let body = tokens.join("\n") + "\n";
        write_atomic(p, body.as_bytes())?;
    }
    let m = tokenizer::metrics(&vocab, &text).map_err(|e| config_err(e))?;
    let csv = format!(
        "token_count,chars_per_token,tokens_per_word\n{},{},{}\n",
        m.token_count, m.chars_per_token, m.tokens_per_word
    );
    match metrics_out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn cmd_merge_vocabs(
    a: &Path,
    b: &Path,
    output: &Path,
    report_out: Option<&Path>,
    max_len: usize,
) -> Result<(), CliError> {
    let va = load_vocab(open_reader(a)?).map_err(|e| config_err(e))?;
    let vb = load_vocab(open_reader(b)?).map_err(|e| config_err(e))?;
    let (merged, report) = merge_vocabs(&va, &vb, max_len).map_err(|e| match e {
        tokenizer::TokenizerError::IncompatibleAlphabets(_) => CliError::Artifact(e.to_string()),
        other => config_err(other),
    })?;
    let mut buf = Vec::new();
    save_vocab(&merged, &mut buf).map_err(|e| config_err(e))?;
    write_atomic(output, &buf)?;
    println!(
        "{} overlapping tokens, {} ambiguous strings up to length {max_len}",
        report.overlapping_tokens.len(),
        report.ambiguous.len()
    );
    if let Some(p) = report_out {
        #[derive(Serialize)]
        struct ReportOut<'a> {
            overlapping_tokens: &'a [String],
            ambiguous: Vec<serde_json::Value>,
        }
        let out = ReportOut {
            overlapping_tokens: &report.overlapping_tokens,
            ambiguous: report
                .ambiguous
                .iter()
                .map(|a| {
                    serde_json::json!({
                        "text": a.text,
                        "under_a": a.under_a,
                        "under_b": a.under_b,
                        "under_merged": a.under_merged,
                    })
                })
                .collect(),
        };
        let body = serde_json::to_vec_pretty(&out).map_err(|e| config_err(e))?;
        write_atomic(p, &body)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// quantization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct QuantMeta {
    scheme: String,
    bits: u8,
    imatrix: bool,
    size_bytes: f64,
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

pub fn cmd_imatrix(ckpt: &Path, data: &Path, output: &Path) -> Result<(), CliError> {
    let model = load_ckpt(ckpt)?;
    let stream = read_tokens(data, model.config.vocab_size)?;
    let im = accumulate_imatrix(&model, &stream).map_err(|e| config_err(e))?;
    let body = serde_json::to_vec(&im).map_err(|e| config_err(e))?;
    write_atomic(output, &body)?;
    println!("importance matrix over {} parameters", im.rows.len());
    Ok(())
}

pub fn cmd_quantize(
    ckpt: &Path,
    bits: u8,
    imatrix_path: Option<&Path>,
    output: &Path,
) -> Result<(), CliError> {
    let model = load_ckpt(ckpt)?;
    let scheme = QuantScheme::new(bits, imatrix_path.is_some()).map_err(|e| config_err(e))?;
    let imatrix: Option<ImportanceMatrix> = match imatrix_path {
        Some(p) => {
            let text = fs::read(p)
                .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            Some(serde_json::from_slice(&text).map_err(|e| {
                CliError::Artifact(format!("{} is not an importance matrix: {e}", p.display()))
            })?)
        }
        None => None,
    };
    let (quantized, size_bytes) = quantize_model(&model, &scheme, imatrix.as_ref())
        .map_err(|e| CliError::Artifact(e.to_string()))?;
    save_checkpoint(&quantized, output).map_err(map_model_err)?;
    let meta = QuantMeta {
        scheme: scheme.label(),
        bits,
        imatrix: imatrix.is_some(),
        size_bytes,
    };
    let body = serde_json::to_vec_pretty(&meta).map_err(|e| config_err(e))?;
    write_atomic(&meta_path(output), &body)?;
    println!(
        "{} checkpoint written to {} (estimated {:.3} MiB quantized)",
        meta.scheme,
        output.display(),
        size_bytes / (1 << 20) as f64
    );
    Ok(())
}

pub fn cmd_fidelity(
    reference: &Path,
    quantized: &Path,
    eval: &Path,
    output: Option<&Path>,
    scheme_flag: Option<&str>,
) -> Result<(), CliError> {
    let ref_model = load_ckpt(reference)?;
    let q_model = load_ckpt(quantized)?;
    let meta: Option<QuantMeta> = fs::read(meta_path(quantized))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let scheme = scheme_flag
        .map(|s| s.to_string())
        .or_else(|| meta.as_ref().map(|m| m.scheme.clone()))
        .unwrap_or_else(|| "?".to_string());
    let imatrix = meta.as_ref().map(|m| m.imatrix).unwrap_or(false);
    let size_bytes = meta.as_ref().map(|m| m.size_bytes).unwrap_or(0.0);
    let stream = read_tokens(eval, ref_model.config.vocab_size)?;
    let report = fidelity(&ref_model, &q_model, &stream, &scheme, imatrix, size_bytes)
        .map_err(|e| CliError::Artifact(e.to_string()))?;
    let csv = format!("{}\n{}\n", FidelityReport::csv_header(), report.csv_row());
    match output {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Aggregate fidelity CSVs from a run directory into one Markdown table,
/// rows sorted by bits descending (non-imatrix before imatrix at equal bits).
pub fn cmd_report(dir: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| config_err(format!("cannot read {}: {e}", dir.display())))?;
    let mut rows: Vec<(u8, bool, Vec<String>)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| config_err(e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut lines = text.lines();
        if lines.next() != Some(FidelityReport::csv_header()) {
            continue; // unrelated CSV (e.g. a training log)
        }
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split(',').map(|f| f.to_string()).collect();
            if fields.len() != 9 {
                return Err(CliError::Artifact(format!(
                    "{}: malformed fidelity row {line:?}",
                    path.display()
                )));
            }
            let bits: u8 = fields[0]
                .trim_start_matches('Q')
                .parse()
                .map_err(|_| CliError::Artifact(format!("bad scheme label {:?}", fields[0])))?;
            let imatrix = fields[1] == "Y";
            rows.push((bits, imatrix, fields));
        }
    }
    if rows.is_empty() {
        return Err(config_err(format!(
            "no fidelity CSVs found in {}",
            dir.display()
        )));
    }
    rows.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut md = String::new();
    md.push_str("| Scheme | Imatrix | Size (GiB) | PPL | ΔPPL | KLD | Mean Δp | RMS Δp | Same top % |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for (_, _, fields) in &rows {
        md.push_str("| ");
        md.push_str(&fields.join(" | "));
        md.push_str(" |\n");
    }
    match output {
        Some(p) => write_atomic(p, md.as_bytes())?,
        None => print!("{md}"),
    }
    Ok(())
}
