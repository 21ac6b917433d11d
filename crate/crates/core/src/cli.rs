//! Command-line front end. `run` returns the process exit code so the
//! binary stays a one-liner and the dispatch is testable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;
use serde_json::json;

use crate::corpus::{generate_synthetic_corpus, Corpus, GeneratorConfig};
use crate::episode::{sample_episode, Episode, SamplingStrategy, TaskSetting};
use crate::error::{Error, Result};
use crate::eval::{evaluate_plans, Aggregation, Metric};
use crate::gradcheck;
use crate::model::{plan_episode, prepare_corpus, prototype_vectors, EpisodePlan};
use crate::rng::{self, streams};
use crate::trainer::{
    field_names, fit, load_checkpoint, load_corpus, load_dataset, save_checkpoint, set_field, CheckpointMeta, JsonLines,
    TrainConfig,
};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").help(help)
}

fn episode_flags(cmd: Command) -> Command {
    cmd.arg(opt("setting", "1doc or 3doc"))
        .arg(opt("strategy", "single or hard"))
        .arg(opt("seed", "random seed"))
        .arg(opt("count", "number of episodes"))
        .arg(opt("output", "output file (default stdout)"))
}

pub fn command() -> Command {
    let mut train = Command::new("train")
        .about("Train a model; writes manifest, log and checkpoint to out_dir")
        .arg(opt("config", "key = value config file"));
    for key in TrainConfig::keys() {
        let name: &'static str = Box::leak(key.into_boxed_str());
        train = train.arg(Arg::new(name).long(name).value_name("VALUE"));
    }

    let mut gen = Command::new("gen-corpus")
        .about("Write a synthetic corpus in the DocRED layout")
        .arg(opt("output", "corpus file").required(true))
        .arg(opt("inventory_output", "relation inventory file"))
        .arg(opt("seed", "random seed"));
    for key in field_names(&GeneratorConfig::default()) {
        let name: &'static str = Box::leak(key.into_boxed_str());
        gen = gen.arg(Arg::new(name).long(name).value_name("VALUE"));
    }

    Command::new("tpn")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Few-shot document-level relation extraction with transferable NOTA prototypes")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(train)
        .subcommand(
            episode_flags(Command::new("eval").about("Score a checkpoint on sampled or given episodes"))
                .arg(opt("checkpoint", "checkpoint file").required(true))
                .arg(opt("episodes", "JSON episode list (as written by `sample`)"))
                .arg(opt("corpus", "corpus to evaluate on (default: the run's split corpus)"))
                .arg(opt("split", "train, dev or test (default test)"))
                .arg(opt("metric", "macro, micro or both"))
                .arg(opt("aggregation", "pooled or per_episode"))
                .arg(opt("jobs", "worker threads")),
        )
        .subcommand(
            episode_flags(Command::new("sample").about("Print sampled episodes as JSON"))
                .arg(opt("corpus", "corpus file").required(true))
                .arg(opt("inventory", "relation inventory file")),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Compare analytic and finite-difference gradients on a tiny model")
                .arg(opt("seed", "random seed"))
                .arg(opt("step", "finite-difference step"))
                .arg(opt("threshold", "largest accepted relative error"))
                .arg(Arg::new("json").long("json").action(ArgAction::SetTrue).help("print the report as JSON")),
        )
        .subcommand(gen)
        .subcommand(
            episode_flags(Command::new("export-embeddings").about("Write prototype vectors as JSON lines"))
                .arg(opt("checkpoint", "checkpoint file").required(true))
                .arg(opt("episodes", "JSON episode list (as written by `sample`)"))
                .arg(opt("corpus", "corpus file (default: the run's split corpus)"))
                .arg(opt("split", "train, dev or test (default test)")),
        )
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("sample", m)) => cmd_sample(m),
        Some(("gradcheck", m)) => cmd_gradcheck(m),
        Some(("gen-corpus", m)) => cmd_gen_corpus(m),
        Some(("export-embeddings", m)) => cmd_export(m),
        _ => Err(Error::Internal("unhandled subcommand".into())),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let cat = e.category();
            eprintln!("tpn: {} error: {e}", cat.as_str());
            cat.exit_code()
        }
    }
}

fn parsed<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<Option<T>> {
    m.get_one::<String>(name)
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value `{s}` for --{name}")))
        })
        .transpose()
}

fn str_arg<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a str> {
    m.get_one::<String>(name).map(String::as_str)
}

fn write_output(path: Option<&str>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::Internal(format!("stdout: {e}")))
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Written once before training starts. Together with the corpora it names,
/// it is enough to rerun the experiment.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub rng_streams: serde_json::Value,
    pub started_at_unix: u64,
    pub outputs: ManifestOutputs,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestOutputs {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
}

/// Config from `--config` (if any) with every given `--key` applied on top.
pub fn train_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = match str_arg(m, "config") {
        Some(p) => TrainConfig::from_file(Path::new(p))?,
        None => TrainConfig::default(),
    };
    for key in TrainConfig::keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set(&key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(m: &ArgMatches) -> Result<i32> {
    let cfg = train_config(m)?;
    let data = load_dataset(&cfg)?;
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let outputs = ManifestOutputs {
        log: dir.join("train.jsonl"),
        checkpoint: dir.join("model.ckpt"),
        summary: dir.join("summary.json"),
    };
    let manifest = RunManifest {
        version: VERSION.to_string(),
        config: cfg.clone(),
        seed: cfg.seed,
        rng_streams: json!({
            "init": streams::INIT,
            "train_episodes": streams::TRAIN_EPISODES,
            "dev_episodes": streams::DEV_EPISODES,
            "eval_episodes": streams::EVAL_EPISODES,
            "selection": streams::SELECTION,
            "perturbation": streams::PERTURBATION,
            "split": streams::SPLIT,
        }),
        started_at_unix: unix_now(),
        outputs: outputs.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(dir.join("config.conf"), cfg.to_file_contents()).map_err(|e| Error::io(dir.join("config.conf"), e))?;

    let file = fs::File::create(&outputs.log).map_err(|e| Error::io(&outputs.log, e))?;
    let mut log = JsonLines(std::io::BufWriter::new(file));
    let fitted = fit(&cfg, &data, &mut |r| log.write(r))?;
    log.0.flush().map_err(|e| Error::io(&outputs.log, e))?;
    save_checkpoint(&outputs.checkpoint, &fitted.outcome.params, &fitted.meta)?;

    let summary = json!({
        "steps": fitted.outcome.state.step,
        "skipped_episodes": fitted.outcome.state.skipped,
        "failed_episodes": fitted.outcome.state.errors,
        "stopped_early": fitted.outcome.stopped_early,
        "best_dev_macro_f1": fitted.outcome.state.best_dev_macro_f1,
        "finished_at_unix": unix_now(),
    });
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(&outputs.summary, &text).map_err(|e| Error::io(&outputs.summary, e))?;
    println!("{text}");
    Ok(0)
}

/// The corpus and relations of a split of a trained run.
fn split_source(meta: &CheckpointMeta, m: &ArgMatches) -> Result<(Corpus, Vec<String>)> {
    if let Some(p) = str_arg(m, "corpus") {
        let c = load_corpus(p, None)?;
        let rels = c.relation_inventory.clone();
        return Ok((c, rels));
    }
    let cfg = &meta.config;
    let train = || -> Result<Corpus> {
        let p = cfg
            .train_corpus
            .as_deref()
            .ok_or_else(|| Error::Config("checkpoint config names no train_corpus; pass --corpus".into()))?;
        load_corpus(p, cfg.inventory.as_deref())
    };
    let (corpus, rels) = match str_arg(m, "split").unwrap_or("test") {
        "train" => (train()?, &meta.train_relations),
        "dev" => (
            match &cfg.dev_corpus {
                Some(p) => load_corpus(p, None)?,
                None => train()?,
            },
            &meta.dev_relations,
        ),
        "test" => (
            match &cfg.test_corpus {
                Some(p) => load_corpus(p, None)?,
                None => train()?,
            },
            &meta.test_relations,
        ),
        other => return Err(Error::Config(format!("unknown split `{other}` (train, dev or test)"))),
    };
    if rels.is_empty() {
        return Err(Error::Config("the selected split has no relations; pass --corpus".into()));
    }
    Ok((corpus, rels.clone()))
}

fn sampling_args(m: &ArgMatches, cfg: &TrainConfig, default_count: usize) -> Result<(TaskSetting, SamplingStrategy, u64, usize)> {
    Ok((
        parsed(m, "setting")?.unwrap_or(cfg.setting),
        parsed(m, "strategy")?.unwrap_or(cfg.eval_strategy),
        parsed(m, "seed")?.unwrap_or(cfg.seed),
        parsed(m, "count")?.unwrap_or(default_count),
    ))
}

fn sample_many(
    corpus: &Corpus,
    relations: &[String],
    setting: TaskSetting,
    strategy: SamplingStrategy,
    count: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|_| sample_episode(corpus, relations, setting, strategy, rng))
        .collect()
}

fn eval_plans(m: &ArgMatches, meta: &CheckpointMeta, corpus: &Corpus, rels: &[String]) -> Result<Vec<EpisodePlan>> {
    let (setting, strategy, seed, count) = sampling_args(m, &meta.config, meta.config.test_episodes)?;
    let mut r = rng::stream(seed, streams::EVAL_EPISODES);
    let episodes = match str_arg(m, "episodes") {
        Some(p) => {
            let raw = fs::read(p).map_err(|e| Error::io(p, e))?;
            let eps: Vec<Episode> = serde_json::from_slice(&raw)?;
            eps.into_iter().map(|e| e.resolve(corpus)).collect::<Result<Vec<_>>>()?
        }
        None => sample_many(corpus, rels, setting, strategy, count, &mut r)?,
    };
    episodes.iter().map(|e| plan_episode(e, corpus, &meta.model, &mut r)).collect()
}

fn cmd_eval(m: &ArgMatches) -> Result<i32> {
    let (params, meta) = load_checkpoint(Path::new(str_arg(m, "checkpoint").expect("required")))?;
    let (corpus, rels) = split_source(&meta, m)?;
    let docs = prepare_corpus(&corpus, &meta.vocab, meta.model.encoder.max_len)?;
    let plans = eval_plans(m, &meta, &corpus, &rels)?;
    let metric: Metric = parsed(m, "metric")?.unwrap_or(Metric::Both);
    let aggregation: Aggregation = parsed(m, "aggregation")?.unwrap_or(meta.config.aggregation);
    let jobs: usize = parsed(m, "jobs")?.unwrap_or(meta.config.jobs).max(1);
    let report = evaluate_plans(&meta.model, &params, &docs, &plans, aggregation, jobs)?;
    let text = serde_json::to_string_pretty(&report.to_json(metric))? + "\n";
    write_output(str_arg(m, "output"), &text)?;
    Ok(0)
}

fn cmd_sample(m: &ArgMatches) -> Result<i32> {
    let corpus = load_corpus(str_arg(m, "corpus").expect("required"), str_arg(m, "inventory"))?;
    let setting = parsed(m, "setting")?.unwrap_or(TaskSetting::OneDoc);
    let strategy = parsed(m, "strategy")?.unwrap_or(SamplingStrategy::Single);
    let seed = parsed(m, "seed")?.unwrap_or(1);
    let count = parsed(m, "count")?.unwrap_or(1);
    let mut r = rng::stream(seed, streams::TRAIN_EPISODES);
    let episodes = sample_many(&corpus, &corpus.relation_inventory, setting, strategy, count, &mut r)?;
    write_output(str_arg(m, "output"), &(serde_json::to_string_pretty(&episodes)? + "\n"))?;
    Ok(0)
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<i32> {
    let seed = parsed(m, "seed")?.unwrap_or(1);
    let step = parsed(m, "step")?.unwrap_or(gradcheck::DEFAULT_STEP);
    let threshold = parsed(m, "threshold")?.unwrap_or(gradcheck::DEFAULT_THRESHOLD);
    let fixture = gradcheck::tiny_fixture(seed)?;
    let report = gradcheck::run(&fixture, step, threshold)?;
    if m.get_flag("json") {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    if report.passed() {
        return Ok(0);
    }
    eprintln!("tpn: numeric error: worst relative gradient error {:.3e}", report.worst());
    Ok(crate::ErrorCategory::Numeric.exit_code())
}

fn cmd_gen_corpus(m: &ArgMatches) -> Result<i32> {
    let mut gen = GeneratorConfig::default();
    for key in field_names(&gen) {
        if let Some(v) = m.get_one::<String>(&key) {
            set_field(&mut gen, &key, v)?;
        }
    }
    let seed = parsed(m, "seed")?.unwrap_or(1);
    let corpus = generate_synthetic_corpus(&gen, seed)?;
    let out = str_arg(m, "output").expect("required");
    fs::write(out, corpus.to_json()).map_err(|e| Error::io(out, e))?;
    if let Some(inv) = str_arg(m, "inventory_output") {
        fs::write(inv, corpus.inventory_json()).map_err(|e| Error::io(inv, e))?;
    }
    eprintln!(
        "wrote {} documents, {} facts, NOTA fraction {:.4}",
        corpus.len(),
        corpus.num_facts(),
        corpus.nota_fraction()
    );
    Ok(0)
}

fn cmd_export(m: &ArgMatches) -> Result<i32> {
    let (params, meta) = load_checkpoint(Path::new(str_arg(m, "checkpoint").expect("required")))?;
    let (corpus, rels) = split_source(&meta, m)?;
    let docs = prepare_corpus(&corpus, &meta.vocab, meta.model.encoder.max_len)?;
    let plans = eval_plans(m, &meta, &corpus, &rels)?;
    let mut text = String::new();
    for (e, plan) in plans.iter().enumerate() {
        for (relation, vectors) in prototype_vectors(&meta.model, &params, &docs, plan)? {
            for row in 0..vectors.rows() {
                let line = json!({
                    "episode": e,
                    "relation": relation,
                    "index": row,
                    "vector": vectors.row_slice(row),
                });
                text.push_str(&line.to_string());
                text.push('\n');
            }
        }
    }
    write_output(str_arg(m, "output"), &text)?;
    Ok(0)
}
