//! Command-line entry point for every pipeline stage.
//!
//! Settings resolve as: command-line flag, then the subcommand's table in the
//! `--config` TOML file, then the built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use neurodesc::analyze::{run_analysis, save_curve_csv, Criterion, Providers, DEFAULT_STEP_FRACTION};
use neurodesc::audit::{audit_model, write_audit};
use neurodesc::captioner::{train_captioner, CaptionExample, Captioner, DecoderConfig};
use neurodesc::cnn::SmallCnn;
use neurodesc::corpus::{corpus_stats, inter_annotator_agreement, load_corpus, make_splits, SplitKind, TokenF1};
use neurodesc::describe::{
    describe_bundle, read_description_table, write_description_table, DescribeConfig, DescriptionRow, DEFAULT_BEAM,
    DEFAULT_LAMBDA, DEFAULT_MAX_STEPS,
};
use neurodesc::dissect::{
    extract_exemplars, record_activations, save_exemplars, DirectoryProbe, ProbeDataset, Retention, DEFAULT_K,
    DEFAULT_QUANTILE,
};
use neurodesc::edit::{load_split, run_edit_experiment, EditExperimentConfig, Split};
use neurodesc::featpool::{encode_set, read_bundle_cache, write_bundle_cache, FilterBankBackbone};
use neurodesc::keywords::KeywordSet;
use neurodesc::language::{HashedWordVectors, HeadRuleParser, LexiconTagger};
use neurodesc::lm::{train_lm, LanguageModel, LmConfig};
use neurodesc::synth::{probe_scenes, synth_corpus};
use neurodesc::text::Vocabulary;
use neurodesc::world::SceneParams;
use neurodesc::{ActivationSource, NeuronRef};

#[derive(Debug, Parser)]
#[command(name = "neurodesc", version, about = "Natural-language descriptions of vision-model neurons")]
pub struct Cli {
    /// Random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML file with top-level `seed`/`out` and one table per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved settings as JSON and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Redo stages whose outputs already exist.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record a classifier's activations on probe images and save top-k exemplars.
    Dissect(DissectArgs),
    /// Train the exemplar captioner on an annotation corpus.
    TrainCaptioner(TrainCaptionerArgs),
    /// Train the description language model on an annotation corpus.
    TrainLm(TrainLmArgs),
    /// Describe every neuron in a feature-bundle cache.
    Describe(DescribeArgs),
    /// Per-layer caption statistics and annotator agreement.
    Stats(StatsArgs),
    /// Generalization splits of an annotation corpus.
    Splits(SplitsArgs),
    /// Ablation curves ordered by description criteria.
    Analyze(AnalyzeArgs),
    /// The spurious-text editing experiment.
    Edit(EditArgs),
    /// Keyword audit of a description table.
    Audit(AuditArgs),
    /// Serve editing-run artifacts over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic annotated corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DissectArgs {
    /// Classifier checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of PNG probe images; synthetic scenes are used when absent.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Number of synthetic probe scenes.
    #[arg(long)]
    pub probe_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub quantile: Option<f64>,
    /// Layers to dissect (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusInput {
    /// Annotation corpus (JSONL).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Feature-bundle cache for the corpus neurons.
    #[arg(long)]
    pub bundles: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCaptionerArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: CorpusInput,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescribeArgs {
    #[arg(long)]
    pub captioner: Option<PathBuf>,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub bundles: Option<PathBuf>,
    /// Weight of the language-model term.
    #[arg(long)]
    pub lam: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Runner-up candidates kept per row.
    #[arg(long)]
    pub runner_ups: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// within-network, across-arch, across-dataset, across-task or leave-one-network-out.
    #[arg(long)]
    pub kind: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    /// Dataset directory with a manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub criteria: Option<Vec<String>>,
    #[arg(long)]
    pub step_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditArgs {
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lam: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub quantile: Option<f64>,
    #[arg(long)]
    pub probe_size: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub conv1_channels: Option<usize>,
    #[arg(long)]
    pub conv2_channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub keywords: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditArgs {
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub keywords: Option<Vec<String>>,
    /// Prefix for exemplar thumbnails in the HTML report.
    #[arg(long)]
    pub exemplar_base: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeArgs {
    /// Output directory of an `edit` run.
    #[arg(long)]
    pub edit_dir: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    pub neurons: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct ConfigFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    dissect: Option<Value>,
    train_captioner: Option<Value>,
    train_lm: Option<Value>,
    describe: Option<Value>,
    stats: Option<Value>,
    splits: Option<Value>,
    analyze: Option<Value>,
    edit: Option<Value>,
    audit: Option<Value>,
    serve: Option<Value>,
    synth: Option<Value>,
}

/// Overlay non-null `flags` fields on `file`.
fn overlay<T: Serialize + DeserializeOwned>(flags: &T, file: Option<&Value>) -> Result<T> {
    let mut merged = file.cloned().unwrap_or_else(|| Value::Object(Default::default()));
    if !merged.is_object() {
        bail!("config section must be a table");
    }
    fn merge(dst: &mut Value, src: Value) {
        match (dst, src) {
            (Value::Object(d), Value::Object(s)) => {
                for (k, v) in s {
                    match d.get_mut(&k) {
                        Some(slot) if v.is_object() => merge(slot, v),
                        _ if v.is_null() => {}
                        _ => {
                            d.insert(k, v);
                        }
                    }
                }
            }
            (d, s) => *d = s,
        }
    }
    merge(&mut merged, serde_json::to_value(flags)?);
    serde_json::from_value(merged).context("invalid config section")
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Resolved {
    Dissect {
        seed: u64,
        out: PathBuf,
        model: PathBuf,
        probe: Option<PathBuf>,
        probe_size: usize,
        k: usize,
        quantile: f64,
        layers: Option<Vec<String>>,
    },
    TrainCaptioner {
        seed: u64,
        out: PathBuf,
        corpus: PathBuf,
        bundles: PathBuf,
        decoder: DecoderConfig,
    },
    TrainLm {
        seed: u64,
        out: PathBuf,
        corpus: PathBuf,
        lm: LmConfig,
    },
    Describe {
        out: PathBuf,
        captioner: PathBuf,
        lm: PathBuf,
        bundles: PathBuf,
        describe: DescribeConfig,
        runner_ups: usize,
    },
    Stats {
        out: PathBuf,
        corpus: PathBuf,
    },
    Splits {
        seed: u64,
        out: PathBuf,
        corpus: PathBuf,
        kind: String,
    },
    Analyze {
        seed: u64,
        out: PathBuf,
        model: PathBuf,
        descriptions: PathBuf,
        dataset: PathBuf,
        split: String,
        criteria: Vec<Criterion>,
        step_fraction: f64,
    },
    Edit {
        out: PathBuf,
        experiment: EditExperimentConfig,
    },
    Audit {
        out: PathBuf,
        descriptions: PathBuf,
        keywords: Vec<String>,
        exemplar_base: String,
    },
    Serve {
        edit_dir: PathBuf,
        addr: String,
    },
    Synth {
        seed: u64,
        out: PathBuf,
        neurons: usize,
    },
}

fn need<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.with_context(|| format!("--{flag} is required (flag or config file)"))
}

/// Merge flags, config file and defaults, and validate, before any compute.
pub fn resolve(cli: &Cli) -> Result<Resolved> {
    let file: ConfigFile = match &cli.config {
        Some(p) => {
            let raw = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: toml::Value = toml::from_str(&raw).with_context(|| format!("parsing {}", p.display()))?;
            serde_json::from_value(serde_json::to_value(v)?).with_context(|| format!("unknown keys in {}", p.display()))?
        }
        None => ConfigFile::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out = cli.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let r = match &cli.command {
        Command::Dissect(a) => {
            let a = overlay(a, file.dissect.as_ref())?;
            Resolved::Dissect {
                seed,
                out,
                model: need(a.model, "model")?,
                probe: a.probe,
                probe_size: a.probe_size.unwrap_or(1000),
                k: a.k.unwrap_or(DEFAULT_K),
                quantile: a.quantile.unwrap_or(DEFAULT_QUANTILE),
                layers: a.layers,
            }
        }
        Command::TrainCaptioner(a) => {
            let a = overlay(a, file.train_captioner.as_ref())?;
            let d = DecoderConfig::default();
            let decoder = DecoderConfig {
                embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
                hidden_dim: a.hidden_dim.unwrap_or(d.hidden_dim),
                attention_dim: a.attention_dim.unwrap_or(d.attention_dim),
                dropout: a.dropout.unwrap_or(d.dropout),
                batch_size: a.batch_size.unwrap_or(d.batch_size),
                learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
                patience: a.patience.unwrap_or(d.patience),
                max_epochs: a.max_epochs.unwrap_or(d.max_epochs),
                max_steps: a.max_steps.unwrap_or(d.max_steps),
                seed,
                ..d
            };
            decoder.validate()?;
            Resolved::TrainCaptioner {
                seed,
                out,
                corpus: need(a.input.corpus, "corpus")?,
                bundles: need(a.input.bundles, "bundles")?,
                decoder,
            }
        }
        Command::TrainLm(a) => {
            let a = overlay(a, file.train_lm.as_ref())?;
            let d = LmConfig::default();
            let lm = LmConfig {
                embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
                hidden_dim: a.hidden_dim.unwrap_or(d.hidden_dim),
                layers: a.layers.unwrap_or(d.layers),
                dropout: a.dropout.unwrap_or(d.dropout),
                batch_size: a.batch_size.unwrap_or(d.batch_size),
                patience: a.patience.unwrap_or(d.patience),
                max_epochs: a.max_epochs.unwrap_or(d.max_epochs),
                seed,
                ..d
            };
            lm.validate()?;
            Resolved::TrainLm {
                seed,
                out,
                corpus: need(a.corpus, "corpus")?,
                lm,
            }
        }
        Command::Describe(a) => {
            let a = overlay(a, file.describe.as_ref())?;
            let describe = DescribeConfig {
                lambda_pmi: a.lam.unwrap_or(DEFAULT_LAMBDA),
                beam_size: a.beam.unwrap_or(DEFAULT_BEAM),
                max_steps: a.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
            };
            describe.validate()?;
            Resolved::Describe {
                out,
                captioner: need(a.captioner, "captioner")?,
                lm: need(a.lm, "lm")?,
                bundles: need(a.bundles, "bundles")?,
                describe,
                runner_ups: a.runner_ups.unwrap_or(4),
            }
        }
        Command::Stats(a) => {
            let a = overlay(a, file.stats.as_ref())?;
            Resolved::Stats {
                out,
                corpus: need(a.corpus, "corpus")?,
            }
        }
        Command::Splits(a) => {
            let a = overlay(a, file.splits.as_ref())?;
            let kind = a.kind.unwrap_or_else(|| "within-network".into());
            kind.parse::<SplitKind>()?;
            Resolved::Splits {
                seed,
                out,
                corpus: need(a.corpus, "corpus")?,
                kind,
            }
        }
        Command::Analyze(a) => {
            let a = overlay(a, file.analyze.as_ref())?;
            let criteria = match a.criteria {
                Some(c) => c.iter().map(|s| s.parse()).collect::<neurodesc::Result<Vec<Criterion>>>()?,
                None => Criterion::ALL.to_vec(),
            };
            let split = a.split.unwrap_or_else(|| "val".into());
            parse_split(&split)?;
            let step_fraction = a.step_fraction.unwrap_or(DEFAULT_STEP_FRACTION);
            neurodesc::analyze::step_size(1, step_fraction)?;
            Resolved::Analyze {
                seed,
                out,
                model: need(a.model, "model")?,
                descriptions: need(a.descriptions, "descriptions")?,
                dataset: need(a.dataset, "dataset")?,
                split,
                criteria,
                step_fraction,
            }
        }
        Command::Edit(a) => {
            let a = overlay(a, file.edit.as_ref())?;
            let mut x = EditExperimentConfig::desk();
            x.seeds = a.seeds.unwrap_or(vec![seed, seed + 1, seed + 2]);
            x.tau = a.tau.unwrap_or(x.tau);
            x.lambda_pmi = a.lam.unwrap_or(x.lambda_pmi);
            x.k = a.k.unwrap_or(x.k);
            x.quantile = a.quantile.unwrap_or(x.quantile);
            x.probe_size = a.probe_size.unwrap_or(x.probe_size);
            x.dataset.train_per_class = a.train_per_class.unwrap_or(x.dataset.train_per_class);
            x.dataset.test_per_class = a.test_per_class.unwrap_or(x.dataset.test_per_class);
            x.dataset.labeled_fraction = a.labeled_fraction.unwrap_or(x.dataset.labeled_fraction);
            x.train.max_epochs = a.max_epochs.unwrap_or(x.train.max_epochs);
            x.cnn.conv1_channels = a.conv1_channels.unwrap_or(x.cnn.conv1_channels);
            x.cnn.conv2_channels = a.conv2_channels.unwrap_or(x.cnn.conv2_channels);
            if let Some(k) = a.keywords {
                x.keywords = k;
            }
            x.dataset.validate()?;
            x.cnn.validate()?;
            if x.seeds.is_empty() || x.tau < 0.0 {
                bail!("edit needs at least one seed and tau ≥ 0");
            }
            Resolved::Edit { out, experiment: x }
        }
        Command::Audit(a) => {
            let a = overlay(a, file.audit.as_ref())?;
            Resolved::Audit {
                out,
                descriptions: need(a.descriptions, "descriptions")?,
                keywords: a
                    .keywords
                    .unwrap_or_else(|| neurodesc::keywords::FACE_KEYWORDS.iter().map(|s| s.to_string()).collect()),
                exemplar_base: a.exemplar_base.unwrap_or_else(|| "../exemplars".into()),
            }
        }
        Command::Serve(a) => {
            let a = overlay(a, file.serve.as_ref())?;
            Resolved::Serve {
                edit_dir: a.edit_dir.unwrap_or(out),
                addr: a.addr.unwrap_or_else(|| "127.0.0.1:8080".into()),
            }
        }
        Command::Synth(a) => {
            let a = overlay(a, file.synth.as_ref())?;
            let neurons = a.neurons.unwrap_or(220);
            if neurons == 0 {
                bail!("--neurons must be positive");
            }
            Resolved::Synth { seed, out, neurons }
        }
    };
    Ok(r)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" | "validation" => Split::Val,
        "test" | "adversarial-test" => Split::Test,
        other => bail!("unknown split {other:?}"),
    })
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// Whether `artifact` already exists and the stage can be skipped.
fn done(artifact: &Path, force: bool) -> bool {
    let skip = !force && artifact.exists();
    if skip {
        eprintln!("{} exists; skipping (use --force to redo)", artifact.display());
    }
    skip
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let resolved = resolve(&cli)?;
    if cli.dry_run {
        println!("{}", serde_json::to_string_pretty(&resolved)?);
        return Ok(());
    }
    execute(&resolved, cli.force)
}

pub fn execute(r: &Resolved, force: bool) -> Result<()> {
    match r {
        Resolved::Dissect {
            seed,
            out,
            model,
            probe,
            probe_size,
            k,
            quantile,
            layers,
        } => {
            let bundles_path = out.join("bundles.bin");
            if done(&bundles_path, force) {
                return Ok(());
            }
            let cnn = SmallCnn::load(model)?;
            let probe: Box<dyn ProbeDataset> = match probe {
                Some(dir) => Box::new(DirectoryProbe::open(dir)?),
                None => Box::new(probe_scenes(*probe_size, *seed, &SceneParams::default())),
            };
            let root = out.join("exemplars");
            mkdir(&root)?;
            let backbone = FilterBankBackbone::new(cnn.input_size());
            let mut bundles = Vec::new();
            for layer in cnn.layers() {
                if layers.as_ref().is_some_and(|l| !l.contains(&layer.id)) {
                    continue;
                }
                let store = record_activations(&cnn, &layer.id, probe.as_ref(), Retention::FullMaps)?;
                for unit in 0..layer.channels {
                    let neuron = NeuronRef::new(&cnn.model_id, &layer.id, unit);
                    let set = extract_exemplars(&cnn, &store, probe.as_ref(), &neuron, *k, *quantile)?;
                    save_exemplars(&set, &root)?;
                    bundles.push(encode_set(&backbone, &set)?);
                }
            }
            write_bundle_cache(&bundles_path, &bundles)?;
            println!("dissected {} units into {}", bundles.len(), root.display());
        }
        Resolved::TrainCaptioner {
            out,
            corpus,
            bundles,
            decoder,
            ..
        } => {
            let path = out.join("captioner.json");
            if done(&path, force) {
                return Ok(());
            }
            mkdir(out)?;
            let records = load_corpus(corpus)?;
            let cache = read_bundle_cache(bundles)?;
            let mut examples = Vec::new();
            for r in &records {
                let b = cache
                    .iter()
                    .find(|b| b.neuron.model_id == r.model && b.neuron.layer_id == r.layer && b.neuron.unit == r.unit)
                    .with_context(|| format!("no feature bundle for {}/{}/{}", r.model, r.layer, r.unit))?;
                examples.push(CaptionExample {
                    bundle: b.clone(),
                    captions: r.annotations.clone(),
                });
            }
            let vocab = Vocabulary::build(records.iter().flat_map(|r| r.annotations.iter().map(String::as_str)), 1);
            let (cap, report) = train_captioner(&examples, vocab, decoder.clone())?;
            cap.save(&path)?;
            write_json(&out.join("captioner_report.json"), &report)?;
            println!("captioner: best epoch {} -> {}", report.best_epoch, path.display());
        }
        Resolved::TrainLm { out, corpus, lm, .. } => {
            let path = out.join("lm.json");
            if done(&path, force) {
                return Ok(());
            }
            mkdir(out)?;
            let records = load_corpus(corpus)?;
            let texts: Vec<String> = records.iter().flat_map(|r| r.annotations.clone()).collect();
            let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1);
            let (model, report) = train_lm(&texts, vocab, lm.clone())?;
            model.save(&path)?;
            write_json(&out.join("lm_report.json"), &report)?;
            println!("language model: best epoch {} -> {}", report.best_epoch, path.display());
        }
        Resolved::Describe {
            out,
            captioner,
            lm,
            bundles,
            describe,
            runner_ups,
        } => {
            let path = out.join("descriptions.jsonl");
            if done(&path, force) {
                return Ok(());
            }
            mkdir(out)?;
            let cache = read_bundle_cache(bundles)?;
            let backbone_id = cache.first().map(|b| b.backbone_id.clone()).unwrap_or_default();
            let cap = Captioner::load(captioner, (!backbone_id.is_empty()).then_some(backbone_id.as_str()))?;
            let lm = LanguageModel::load(lm)?;
            let rows = cache
                .iter()
                .map(|b| {
                    let ranked = describe_bundle(b, &cap, &lm, describe)?;
                    DescriptionRow::from_ranked(&b.neuron, &ranked, *runner_ups)
                })
                .collect::<neurodesc::Result<Vec<_>>>()?;
            write_description_table(&path, &rows)?;
            println!("described {} neurons -> {}", rows.len(), path.display());
        }
        Resolved::Stats { out, corpus } => {
            mkdir(out)?;
            let records = load_corpus(corpus)?;
            let rows = corpus_stats(&records, &LexiconTagger);
            let agreement = inter_annotator_agreement(&records, &TokenF1);
            write_json(&out.join("stats.json"), &serde_json::json!({ "rows": rows, "agreement": agreement }))?;
            println!("model\tlayer\tunits\twords\tlen\tnoun%\tadj%\tprep%");
            for r in &rows {
                println!(
                    "{}\t{}\t{}\t{}\t{:.2}\t{:.1}\t{:.1}\t{:.1}",
                    r.model, r.layer, r.units, r.unique_words, r.mean_length, r.pct_noun, r.pct_adjective, r.pct_preposition
                );
            }
        }
        Resolved::Splits { seed, out, corpus, kind } => {
            let dir = out.join("splits");
            mkdir(&dir)?;
            let records = load_corpus(corpus)?;
            let splits = make_splits(&records, kind.parse()?, *seed)?;
            for s in &splits {
                write_json(&dir.join(format!("{}.json", s.name)), s)?;
                println!("{}\ttrain {}\ttest {}", s.name, s.train.len(), s.test.len());
            }
        }
        Resolved::Analyze {
            seed,
            out,
            model,
            descriptions,
            dataset,
            split,
            criteria,
            step_fraction,
        } => {
            let path = out.join("curves.csv");
            if done(&path, force) {
                return Ok(());
            }
            mkdir(out)?;
            let cnn = SmallCnn::load(model)?;
            let rows = read_description_table(descriptions)?;
            let eval = load_split(dataset, parse_split(split)?)?;
            let (t, p, v) = (LexiconTagger, HeadRuleParser, HashedWordVectors::default());
            let providers = Providers {
                tagger: Some(&t),
                parser: Some(&p),
                vectors: Some(&v),
            };
            let curves = run_analysis(&cnn, &rows, criteria, &providers, *step_fraction, &eval, *seed)?;
            save_curve_csv(&path, &curves)?;
            println!("{} curve points -> {}", curves.len(), path.display());
        }
        Resolved::Edit { out, experiment } => {
            let path = out.join("edit_report.json");
            if done(&path, force) {
                return Ok(());
            }
            mkdir(out)?;
            let report = run_edit_experiment(experiment, Some(out))?;
            for s in &report.seeds {
                println!(
                    "seed {}: {} keyword units, stop {} -> adversarial {:+.4}; control stop {} -> {:+.4}",
                    s.seed,
                    s.keyword_units.len(),
                    s.keyword.curve.stop_index,
                    s.keyword.curve.improvement(),
                    s.control.curve.stop_index,
                    s.control.curve.improvement()
                );
            }
            println!(
                "improved {}/{} seeds; mean keyword {:+.4}, mean control {:+.4}",
                report.seeds_improved,
                report.seeds.len(),
                report.mean_keyword_improvement,
                report.mean_control_improvement
            );
        }
        Resolved::Audit {
            out,
            descriptions,
            keywords,
            exemplar_base,
        } => {
            let rows = read_description_table(descriptions)?;
            let report = audit_model(&rows, &KeywordSet::new(keywords));
            let dir = out.join("audit");
            write_audit(&report, &dir, exemplar_base)?;
            println!("{} of {} units matched -> {}", report.total, report.units_examined, dir.display());
        }
        Resolved::Serve { edit_dir, addr } => {
            let mut state = neurodesc_server::AppState::new();
            let n = neurodesc_server::load_edit_output(&mut state, edit_dir)?;
            if n == 0 {
                bail!("no seed_* model directories under {}", edit_dir.display());
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(neurodesc_server::serve(state, addr))?;
        }
        Resolved::Synth { seed, out, neurons } => {
            if done(&out.join("corpus.jsonl"), force) {
                return Ok(());
            }
            mkdir(out)?;
            let corpus = synth_corpus(*neurons, *seed)?;
            corpus.write_to(out)?;
            println!("wrote {} synthetic neurons to {}", neurons, out.display());
        }
    }
    Ok(())
}
