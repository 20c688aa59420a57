//! `mare <synth|train|eval|ablate|inspect>`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mare_core::data::{self, synth_generate, EncodedDataset};
use mare_core::eval::Aggregation;
use mare_core::mac::DeletionRule;
use mare_core::model::{mask_spans, InitStrategy, Mare};
use mare_core::numerics::{RngState, Stream};
use mare_core::training::{self, TrainError, TrainMode};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SynthConfig};
use crate::error::CliError;
use crate::jsonl;
use crate::pipeline::{self, Corpus};
use crate::report::{Format, ReportDocument};
use crate::run::{ensure_dir, write_json, write_text, MetricsLog, RunManifest, StdClock};

#[derive(Debug, Parser)]
#[command(name = "mare", version = crate::run::VERSION, about = "Multi-aspect rationale extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted rationales.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Train every deletion/mode/initialisation combination and compare.
    Ablate(AblateArgs),
    /// Print selected rationales for a few examples.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Master seed; falls back to MARE_SEED, then to the config file, then 0.
    #[arg(long, env = "MARE_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with `examples`, split fractions, `num_aspects` and an optional `[grammar]`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub examples: Option<usize>,
    #[arg(long)]
    pub num_aspects: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
}

/// Flags that override the run configuration file.
#[derive(Debug, Args, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// Special-token initialisation: random, cls or share.
    #[arg(long)]
    pub init: Option<InitStrategy>,
    /// Deletion rule: hard or amd.
    #[arg(long)]
    pub deletion: Option<DeletionRule>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// First layer (1-based) at which masks apply.
    #[arg(long)]
    pub cliff: Option<usize>,
    /// Sparsity targets, one per aspect or a single shared value.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<f64>>,
    #[arg(long)]
    pub recompute_masks: Option<bool>,
    #[arg(long)]
    pub keep_bias: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if let Some(v) = src {
                *dst = Some(v.clone());
            }
        }
        set(&mut cfg.data.train, &self.train);
        set(&mut cfg.data.val, &self.val);
        set(&mut cfg.train.mode, &self.mode);
        set(&mut cfg.model.init_strategy, &self.init);
        set(&mut cfg.model.deletion, &self.deletion);
        set(&mut cfg.model.gumbel_temperature, &self.temperature);
        set(&mut cfg.model.cliff_layer, &self.cliff);
        set(&mut cfg.model.sparsity_targets, &self.targets);
        set(&mut cfg.model.recompute_masks, &self.recompute_masks);
        set(&mut cfg.model.keep_bias_init, &self.keep_bias);
        set(&mut cfg.train.beta, &self.beta);
        set(&mut cfg.train.gamma, &self.gamma);
        set(&mut cfg.train.max_epochs, &self.epochs);
        set(&mut cfg.train.learning_rate, &self.lr);
        set(&mut cfg.train.batch_size, &self.batch_size);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL dataset with labels and gold rationales.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Report formats to write.
    #[arg(long, value_delimiter = ',', default_value = "json,csv,md")]
    pub format: Vec<Format>,
    #[arg(long, default_value = "micro")]
    pub aggregation: AggregationArg,
    /// Also run the deletion-completeness probe on this many examples.
    #[arg(long, num_args = 0..=1, default_missing_value = "100")]
    pub probe: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum AggregationArg {
    Micro,
    Macro,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Micro => Aggregation::Micro,
            AggregationArg::Macro => Aggregation::Macro,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "hard,amd")]
    pub deletions: Vec<DeletionRule>,
    #[arg(long, value_delimiter = ',', default_value = "multitask,collaborative")]
    pub modes: Vec<TrainMode>,
    #[arg(long, value_delimiter = ',', default_value = "random,cls,share")]
    pub inits: Vec<InitStrategy>,
    /// Additionally train the base configuration once per listed seed and
    /// report per-aspect F1 mean and standard deviation.
    #[arg(long, value_delimiter = ',')]
    pub stability: Option<Vec<u64>>,
    /// Additionally compare one epoch of multitask and collaborative training.
    #[arg(long)]
    pub resources: bool,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of examples to show.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Picks the examples at random with this seed (first `n` when absent).
    #[command(flatten)]
    pub seed: SeedArg,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn to_value(v: &impl serde::Serialize) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn resolve_seed(flag: &SeedArg, config: Option<u64>) -> u64 {
    flag.seed.or(config).unwrap_or(0)
}

fn load_run_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

pub fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.examples {
        cfg.examples = n;
    }
    if let Some(k) = a.num_aspects {
        cfg.num_aspects = k;
        cfg.grammar = None;
    }
    cfg.validate()?;
    let seed = resolve_seed(&a.seed, cfg.grammar.as_ref().map(|g| g.seed));
    let grammar = cfg.grammar(seed);
    grammar.validate()?;
    ensure_dir(&a.out)?;
    RunManifest::new("synth", seed, a.config.as_deref(), to_value(&(&cfg, &grammar))).write(&a.out)?;
    let ds = synth_generate(&grammar, cfg.examples)?;
    let (train, val, test) = ds.split(cfg.train_fraction, cfg.val_fraction);
    let mut stats = Vec::new();
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        if part.is_empty() {
            continue;
        }
        jsonl::save_jsonl(part, &a.out.join(format!("{name}.jsonl"))).map_err(|e| CliError::Runtime(e.to_string()))?;
        stats.push((name, data::stats(part)?));
    }
    let names: Vec<&str> = grammar.aspects.iter().map(|g| g.name.as_str()).collect();
    write_json(
        &a.out.join("stats.json"),
        &serde_json::json!({ "aspect_names": names, "splits": stats.into_iter().collect::<std::collections::BTreeMap<_, _>>() }),
    )?;
    println!(
        "wrote {} train / {} val / {} test examples to {}",
        train.len(),
        val.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = load_run_config(a.config.as_deref(), &a.overrides)?;
    let seed = resolve_seed(&a.seed, cfg.seed);
    ensure_dir(&a.out)?;
    let mut manifest = RunManifest::new("train", seed, a.config.as_deref(), to_value(&cfg));
    manifest.write(&a.out)?;
    let corpus = Corpus::load(&cfg)?;
    let p = pipeline::prepare(&cfg, seed, &corpus.train, corpus.val.as_ref())?;
    manifest.config = to_value(&serde_json::json!({ "run": &cfg, "model": &p.model, "train": &p.training }));
    manifest.write(&a.out)?;
    let mut log = MetricsLog::create(&a.out.join("metrics.jsonl"))?;
    let mut log_err = None;
    let clock = StdClock::new();
    let mut model = Mare::new(p.model.clone(), seed)?;
    let result = training::train(&mut model, &p.train, p.val.as_ref(), &p.training, &clock, &mut |m| {
        eprintln!(
            "epoch {} loss {:.4} (ce {:.4} sparse {:.4} cont {:.4}) val acc {} [{:.0} ms]",
            m.epoch,
            m.loss,
            m.ce,
            m.sparse,
            m.cont,
            m.val_acc
                .iter()
                .map(|x| x.map(|v| format!("{:.3}", v)).unwrap_or_else(|| "-".into()))
                .collect::<Vec<_>>()
                .join("/"),
            m.wall_ms
        );
        if let Err(e) = log.append(m) {
            log_err.get_or_insert(e);
        }
    });
    if let Some(e) = log_err {
        return Err(e);
    }
    // A diverged run has its parameters restored to the last good epoch;
    // keep that checkpoint before reporting the failure.
    Checkpoint::from_model(&model, &p.vocab, &p.aspect_names).save(&a.out.join("checkpoint.json"))?;
    if let Err(e) = result {
        return Err(match e {
            TrainError::Diverged { .. } => CliError::Runtime(format!("{e}; checkpoint holds the last good epoch")),
            other => other.into(),
        });
    }
    if let Some(val) = &p.val {
        if val.examples.iter().any(|e| e.gold.iter().any(Option::is_some)) {
            let report = pipeline::evaluate(
                &model,
                val,
                p.training.eval_batch_size,
                Aggregation::Micro,
                pipeline::metadata(seed, &cfg, p.training.mode),
            )?;
            let doc = ReportDocument::new(report, &p.aspect_names);
            write_text(&a.out.join("val_report.json"), &doc.render(Format::Json)?)?;
            print!("{}", doc.render(Format::Markdown)?);
        }
    }
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let seed = resolve_seed(&a.seed, None);
    ensure_dir(&a.out)?;
    RunManifest::new(
        "eval",
        seed,
        None,
        serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "aggregation": format!("{:?}", a.aggregation).to_lowercase(),
            "probe": a.probe,
            "batch_size": a.batch_size,
        }),
    )
    .write(&a.out)?;
    let (model, vocab, names) = Checkpoint::load(&a.checkpoint)?.into_model()?;
    let k = model.config().num_aspects;
    let ds = jsonl::load_jsonl(&a.data, Some(k)).map_err(|e| CliError::Invalid(e.to_string()))?;
    if !ds.has_gold() {
        return Err(CliError::Invalid(format!(
            "{} has no gold rationales; rationale metrics cannot be computed",
            a.data.display()
        )));
    }
    if ds.max_len() > model.config().max_text_len() {
        return Err(CliError::Invalid(format!(
            "longest text has {} tokens but the model accepts at most {}",
            ds.max_len(),
            model.config().max_text_len()
        )));
    }
    let data = EncodedDataset::encode(&vocab, &ds);
    let meta = pipeline::metadata(seed, model.config(), TrainMode::Multitask);
    let mut report = pipeline::evaluate(&model, &data, a.batch_size, a.aggregation.into(), meta)?;
    report.metadata.mode = String::new();
    if let Some(n) = a.probe {
        let (diag, summary) = pipeline::probe(&model, &data, n, seed)?;
        write_json(&a.out.join("probe_summary.json"), &summary)?;
        report.diagnostics = Some(diag);
    }
    let doc = ReportDocument::new(report, &names);
    for f in &a.format {
        write_text(&a.out.join(format!("report.{}", f.extension())), &doc.render(*f)?)?;
    }
    print!("{}", doc.render(Format::Markdown)?);
    Ok(())
}

pub fn cmd_ablate(a: AblateArgs) -> Result<(), CliError> {
    let cfg = load_run_config(a.config.as_deref(), &a.overrides)?;
    let seed = resolve_seed(&a.seed, cfg.seed);
    ensure_dir(&a.out)?;
    RunManifest::new(
        "ablate",
        seed,
        a.config.as_deref(),
        serde_json::json!({
            "run": &cfg,
            "deletions": &a.deletions,
            "modes": &a.modes,
            "inits": &a.inits,
            "stability": &a.stability,
            "resources": a.resources,
        }),
    )
    .write(&a.out)?;
    let corpus = Corpus::load(&cfg)?;
    let eval_data = corpus
        .val
        .as_ref()
        .or(corpus.test.as_ref())
        .ok_or_else(|| CliError::Invalid("ablation needs validation or test data with gold rationales".into()))?;
    if !eval_data.has_gold() {
        return Err(CliError::Invalid("evaluation data has no gold rationales".into()));
    }
    let clock = StdClock::new();
    let mut cells = Vec::new();
    for &deletion in &a.deletions {
        for &mode in &a.modes {
            for &init in &a.inits {
                let cell = pipeline::ablation_cell(&cfg, seed, &corpus.train, eval_data, deletion, mode, init, &clock);
                eprintln!(
                    "{deletion:?}/{mode:?}/{init:?}: {}",
                    match (&cell.error, cell.avg_f1) {
                        (Some(e), _) => format!("failed: {e}"),
                        (None, Some(f)) => format!("avg F1 {:.1}", f * 100.0),
                        (None, None) => "no F1".into(),
                    }
                );
                cells.push(cell);
                write_json(&a.out.join("ablation.json"), &cells)?;
            }
        }
    }
    let md = pipeline::ablation_markdown(&cells);
    write_text(&a.out.join("ablation.md"), &md)?;
    print!("{md}");
    if a.resources {
        let p = pipeline::prepare(&cfg, seed, &corpus.train, Some(eval_data))?;
        let model = Mare::new(p.model.clone(), seed)?;
        let table = mare_core::eval::resource_compare(&model, &p.train, p.val.as_ref(), &p.training, &clock)?;
        let (time, mem) = table.savings();
        write_json(
            &a.out.join("resources.json"),
            &serde_json::json!({
                "table": &table,
                "mask_ratio": table.mask_ratio(),
                "wall_time_saving": time,
                "memory_saving": mem,
            }),
        )?;
        println!(
            "resources: mask ratio {:.3}, multitask saves {:.1}% time and {:.1}% peak memory",
            table.mask_ratio(),
            time * 100.0,
            mem * 100.0
        );
    }
    if let Some(seeds) = &a.stability {
        let p = pipeline::prepare(&cfg, seed, &corpus.train, None)?;
        let data = EncodedDataset::encode(&p.vocab, eval_data);
        let report = mare_core::eval::multi_seed_stability(seeds, corpus.train.num_aspects, |s| {
            let mut p = pipeline::prepare(&cfg, s, &corpus.train, None)?;
            p.training.seed = s;
            let (model, _) = pipeline::train_model(&p, s, &clock, &mut |_| {})?;
            let r = pipeline::evaluate(
                &model,
                &data,
                p.training.eval_batch_size,
                Aggregation::Micro,
                pipeline::metadata(s, &cfg, p.training.mode),
            )?;
            Ok::<_, CliError>(r.f1s())
        })?;
        write_json(&a.out.join("stability.json"), &report)?;
        for (j, (m, s)) in report.mean.iter().zip(&report.std).enumerate() {
            println!(
                "{}: F1 mean {} std {}",
                p.aspect_names[j],
                m.map(|v| format!("{:.1}", v * 100.0)).unwrap_or_else(|| "-".into()),
                s.map(|v| format!("{:.1}", v * 100.0)).unwrap_or_else(|| "-".into())
            );
        }
    }
    Ok(())
}

/// One example with each aspect's selected spans wrapped in `[a: ...]`.
pub fn render_example(tokens: &[String], masks: &[Vec<u8>], names: &[String]) -> Vec<String> {
    masks
        .iter()
        .enumerate()
        .map(|(a, m)| {
            let spans = mask_spans(m);
            let mut out = Vec::with_capacity(tokens.len());
            let mut t = 0;
            for (s, e) in spans {
                out.extend(tokens[t..s].iter().cloned());
                out.push(format!("[{}", tokens[s..=e].join(" ")));
                let last = out.len() - 1;
                out[last].push(']');
                t = e + 1;
            }
            out.extend(tokens[t..].iter().cloned());
            let name = names.get(a).map(String::as_str).unwrap_or("?");
            if m.iter().all(|&b| b == 0) {
                format!("{name}: (none)")
            } else {
                format!("{name}: {}", out.join(" "))
            }
        })
        .collect()
}

pub fn cmd_inspect(a: InspectArgs) -> Result<(), CliError> {
    let (model, vocab, names) = Checkpoint::load(&a.checkpoint)?.into_model()?;
    let k = model.config().num_aspects;
    let ds = jsonl::load_jsonl(&a.data, Some(k)).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut picked: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = a.seed.seed {
        RngState::stream(seed, Stream::Shuffle).shuffle(&mut picked);
    }
    picked.truncate(a.n);
    let slice = data::Dataset {
        num_aspects: k,
        examples: picked.iter().map(|&i| ds.examples[i].clone()).collect(),
    };
    let enc = EncodedDataset::encode(&vocab, &slice);
    let preds = mare_core::eval::predict(&model, &enc, 64)?;
    for (i, ex) in slice.examples.iter().enumerate() {
        let labels: Vec<String> = (0..k)
            .map(|j| {
                let gold = ex.labels[j].map(|l| l.to_string()).unwrap_or_else(|| "-".into());
                format!("{}={} (gold {gold})", names[j], preds.labels[i][j])
            })
            .collect();
        println!("#{} {}", picked[i], labels.join(", "));
        for line in render_example(&ex.tokens, &preds.masks[i], &names) {
            println!("  {line}");
        }
    }
    Ok(())
}
