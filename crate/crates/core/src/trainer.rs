//! Episodic training: configuration, learning-rate schedule, AdamW,
//! gradient clipping, dev-set early stopping and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calib::Supervision;
use crate::corpus::{parse_corpus, parse_corpus_with_inventory, parse_inventory, Corpus, CorpusFormat, Vocab};
use crate::diffcore::{clip_global_norm, GradMap, ParamSet, Tensor};
use crate::encoder::{AttentionSource, EncoderConfig};
use crate::episode::{sample_episode, split_relations, RelationSplit, SamplingStrategy, TaskSetting};
use crate::error::{Error, Result};
use crate::eval::{evaluate_plans, Aggregation};
use crate::hybrid::MentionPooling;
use crate::model::{episode_gradients, init_model, plan_episode, prepare_corpus, EpisodePlan, ModelConfig, PreparedDoc};
use crate::rng::{self, streams};
use crate::vat::{freelb_episode, PerturbationInit, VatConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VatMode {
    #[default]
    Off,
    Freelb,
}

impl FromStr for VatMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "freelb" => Ok(Self::Freelb),
            _ => Err(Error::Config(format!("unknown vat mode `{s}` (off or freelb)"))),
        }
    }
}

impl fmt::Display for VatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Freelb => "freelb",
        })
    }
}

/// Every knob of a run. The same names are used as config-file keys and
/// command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub setting: TaskSetting,
    pub strategy: SamplingStrategy,
    /// Strategy for dev and test episodes.
    pub eval_strategy: SamplingStrategy,
    pub vat: VatMode,
    pub episodes: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub eval_interval: usize,
    pub patience: usize,
    pub dev_episodes: usize,
    pub test_episodes: usize,
    /// Failed episodes tolerated before the run aborts.
    pub error_budget: usize,
    /// Relations drawn per training episode as its allowed set; 0 allows
    /// every training relation.
    pub episode_relations: usize,
    /// Keep the token embedding table at its initial values.
    pub freeze_embeddings: bool,

    pub omega: usize,
    pub beta: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub rho: usize,
    pub init_mode: PerturbationInit,

    pub use_he: bool,
    pub use_tpl: bool,
    pub use_dwc: bool,
    pub supervision: Supervision,
    pub pooling: MentionPooling,
    pub tpl_hidden: usize,
    pub nota_cap: usize,
    pub query_nota_ratio: usize,

    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub attention: AttentionSource,

    pub train_corpus: Option<String>,
    pub dev_corpus: Option<String>,
    pub test_corpus: Option<String>,
    pub inventory: Option<String>,
    /// Relation split used when no separate dev/test corpus is given.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub out_dir: String,
    pub aggregation: Aggregation,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let vat = VatConfig::default();
        Self {
            seed: 1,
            setting: TaskSetting::OneDoc,
            strategy: SamplingStrategy::Single,
            eval_strategy: SamplingStrategy::Single,
            vat: VatMode::Off,
            episodes: 50_000,
            lr: 2e-6,
            warmup: 0.06,
            weight_decay: 0.01,
            clip_norm: 1.0,
            eval_interval: 250,
            patience: 8,
            dev_episodes: 50,
            test_episodes: 100,
            error_budget: 20,
            episode_relations: 0,
            freeze_embeddings: false,
            omega: model.omega,
            beta: model.beta,
            alpha: model.alpha,
            gamma: vat.gamma,
            epsilon: vat.epsilon,
            rho: vat.rho,
            init_mode: vat.init,
            use_he: true,
            use_tpl: true,
            use_dwc: true,
            supervision: Supervision::Gold,
            pooling: MentionPooling::Token,
            tpl_hidden: 0,
            nota_cap: model.nota_cap,
            query_nota_ratio: model.query_nota_ratio,
            hidden: model.encoder.hidden,
            heads: model.encoder.heads,
            layers: model.encoder.layers,
            ff_dim: model.encoder.ff_dim,
            max_len: model.encoder.max_len,
            attention: AttentionSource::FinalLayer,
            train_corpus: None,
            dev_corpus: None,
            test_corpus: None,
            inventory: None,
            train_fraction: 0.6,
            dev_fraction: 0.2,
            test_fraction: 0.2,
            out_dir: "runs/default".into(),
            aggregation: Aggregation::Pooled,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    /// Settings for runs of a few thousand episodes on small synthetic
    /// corpora: default model shape, a larger learning rate.
    pub fn desk() -> Self {
        Self {
            episodes: 2000,
            lr: 3e-3,
            ..Self::default()
        }
    }

    /// Every key accepted by [`TrainConfig::set`].
    pub fn keys() -> Vec<String> {
        field_names(&Self::default())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        set_field(self, key, raw)
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn apply_file_contents(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_file_contents(&text)?;
        Ok(cfg)
    }

    /// The config as `key = value` lines, readable by [`TrainConfig::from_file`].
    pub fn to_file_contents(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("config serializes to an object");
        };
        let mut out = String::new();
        for (k, v) in map {
            let text = match v {
                Value::Null => "none".to_string(),
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {text}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive, warmup in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        let fr = [self.train_fraction, self.dev_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("relation split fractions must be nonnegative and sum to 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.vat_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                hidden: self.hidden,
                heads: self.heads,
                layers: self.layers,
                max_len: self.max_len,
                ff_dim: self.ff_dim,
                attention_source: self.attention,
            },
            omega: self.omega,
            beta: self.beta,
            alpha: self.alpha,
            tpl_hidden: self.tpl_hidden,
            use_he: self.use_he,
            use_tpl: self.use_tpl,
            use_dwc: self.use_dwc,
            supervision: self.supervision,
            pooling: self.pooling,
            nota_cap: self.nota_cap,
            query_nota_ratio: self.query_nota_ratio,
            strict_attention: false,
        }
    }

    pub fn vat_config(&self) -> VatConfig {
        VatConfig {
            rho: self.rho,
            gamma: self.gamma,
            epsilon: self.epsilon,
            init: self.init_mode,
        }
    }
}

/// Field names of a struct that serializes to a JSON object.
pub fn field_names<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Sets the field `key` of a flat struct from text, parsed according to the
/// field's current JSON type. `none` or an empty value clears an optional
/// string.
pub fn set_field<T: Serialize + DeserializeOwned>(target: &mut T, key: &str, raw: &str) -> Result<()> {
    let Value::Object(mut map) = serde_json::to_value(&*target).map_err(|e| Error::Internal(e.to_string()))? else {
        return Err(Error::Internal("settings do not serialize to an object".into()));
    };
    let current = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    let raw = raw.trim();
    let value = match current {
        Value::Bool(_) => match raw {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => return Err(Error::Config(format!("`{key}` expects true or false, got `{raw}`"))),
        },
        Value::Number(_) => {
            if let Ok(u) = raw.parse::<u64>() {
                Value::from(u)
            } else {
                raw.parse::<f64>()
                    .ok()
                    .and_then(serde_json::Number::from_f64)
                    .map(Value::Number)
                    .ok_or_else(|| Error::Config(format!("`{key}` expects a number, got `{raw}`")))?
            }
        }
        _ if raw.is_empty() || raw == "none" => Value::Null,
        _ => Value::String(raw.to_string()),
    };
    map.insert(key.to_string(), value);
    *target = serde_json::from_value(Value::Object(map))
        .map_err(|e| Error::Config(format!("invalid value `{raw}` for `{key}`: {e}")))?;
    Ok(())
}

/// Linear warmup from 0 to `base` over `floor(warmup * total)` steps, then
/// linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: f64, base: f64) -> f64 {
    let w = (warmup * total as f64).floor() as usize;
    if step < w {
        base * step as f64 / w as f64
    } else if total <= w {
        base
    } else {
        base * (total.saturating_sub(step)) as f64 / (total - w) as f64
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Rejects non-finite gradients before touching anything.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
            if params.get(name).map(Tensor::shape) != Some(g.shape()) {
                return Err(Error::Input(format!("gradient `{name}` does not match a parameter")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = 1.0 - lr * self.weight_decay;
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let pi = &mut p.data_mut()[i];
                *pi = *pi * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_macro_f1: Option<f64>,
}

/// Counters of the optimization loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub best_dev_macro_f1: Option<f64>,
    pub evals_since_improvement: usize,
    pub skipped: usize,
    pub errors: usize,
    pub optimizer: AdamW,
}

/// A corpus restricted to a relation subset, with its token ids.
pub struct EpisodeSource<'a> {
    pub corpus: &'a Corpus,
    pub relations: &'a [String],
    pub docs: &'a [PreparedDoc],
}

/// Samples and plans `count` episodes from one seeded stream.
pub fn sample_plans(
    source: &EpisodeSource<'_>,
    model: &ModelConfig,
    setting: TaskSetting,
    strategy: SamplingStrategy,
    count: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<EpisodePlan>> {
    (0..count)
        .map(|_| {
            let ep = sample_episode(source.corpus, source.relations, setting, strategy, rng)?;
            plan_episode(&ep, source.corpus, model, rng)
        })
        .collect()
}

/// Samples `count` episodes on the evaluation stream of `seed` and scores
/// them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_source(
    model: &ModelConfig,
    params: &ParamSet,
    source: &EpisodeSource<'_>,
    setting: TaskSetting,
    strategy: SamplingStrategy,
    count: usize,
    seed: u64,
    aggregation: Aggregation,
) -> Result<crate::eval::F1Report> {
    let plans = sample_plans(source, model, setting, strategy, count, &mut rng::stream(seed, streams::EVAL_EPISODES))?;
    evaluate_plans(model, params, source.docs, &plans, aggregation, 1)
}

pub struct TrainOutcome {
    /// Best-dev parameters, or the final ones without a dev set.
    pub params: ParamSet,
    pub model: ModelConfig,
    pub state: TrainState,
    pub stopped_early: bool,
}

/// Runs the episodic loop. `log` receives one record per optimizer step
/// (with the dev score on evaluation steps).
pub fn train(
    config: &TrainConfig,
    vocab: &Vocab,
    train_src: &EpisodeSource<'_>,
    dev_src: Option<&EpisodeSource<'_>>,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = config.model_config(vocab.len());
    model.validate()?;
    let vat = config.vat_config();
    let mut params = init_model(&model, &mut rng::stream(config.seed, streams::INIT))?;

    let dev_plans = match dev_src {
        Some(src) if config.dev_episodes > 0 => sample_plans(
            src,
            &model,
            config.setting,
            config.eval_strategy,
            config.dev_episodes,
            &mut rng::stream(config.seed, streams::DEV_EPISODES),
        )?,
        _ => Vec::new(),
    };

    let mut state = TrainState {
        step: 0,
        best_dev_macro_f1: None,
        evals_since_improvement: 0,
        skipped: 0,
        errors: 0,
        optimizer: AdamW::new(config.weight_decay),
    };
    let mut best = params.clone();
    let mut stopped_early = false;
    let mut sampler = rng::stream(config.seed, streams::TRAIN_EPISODES);
    let mut perturb = rng::stream(config.seed, streams::PERTURBATION);
    let total = config.episodes;

    for step in 0..total {
        let attempt = (|| -> Result<(f64, GradMap)> {
            let allowed: Vec<String> = if config.episode_relations > 0 && config.episode_relations < train_src.relations.len() {
                let mut pick = rand::seq::index::sample(&mut sampler, train_src.relations.len(), config.episode_relations).into_vec();
                pick.sort_unstable();
                pick.into_iter().map(|i| train_src.relations[i].clone()).collect()
            } else {
                train_src.relations.to_vec()
            };
            let ep = sample_episode(train_src.corpus, &allowed, config.setting, config.strategy, &mut sampler)?;
            let plan = plan_episode(&ep, train_src.corpus, &model, &mut sampler)?;
            match config.vat {
                VatMode::Off => episode_gradients(&model, &params, train_src.docs, &plan),
                VatMode::Freelb => {
                    let out = freelb_episode(&model, &params, train_src.docs, &plan, &vat, &mut perturb)?;
                    Ok((out.loss, out.grads))
                }
            }
        })();
        let (loss, mut grads) = match attempt {
            Ok(v) => v,
            Err(e @ Error::ZeroGradient { .. }) => {
                log::warn!("episode {}: skipped ({e})", step + 1);
                state.skipped += 1;
                continue;
            }
            Err(e) if matches!(e.category(), crate::ErrorCategory::Data | crate::ErrorCategory::Numeric) => {
                state.errors += 1;
                log::warn!("episode {}: {e} ({} of {} tolerated)", step + 1, state.errors, config.error_budget);
                if state.errors > config.error_budget {
                    return Err(e);
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        if config.freeze_embeddings {
            grads.remove("enc.tok_emb");
        }
        let grad_norm = clip_global_norm(&mut grads, config.clip_norm)?;
        let lr = lr_at(step + 1, total, config.warmup, config.lr);
        state.optimizer.step(&mut params, &grads, lr)?;
        state.step = step + 1;

        let mut record = LogRecord {
            step: state.step,
            loss,
            lr,
            grad_norm,
            dev_macro_f1: None,
        };
        let eval_now = !dev_plans.is_empty()
            && ((config.eval_interval > 0 && state.step % config.eval_interval == 0) || state.step == total);
        if eval_now {
            let src = dev_src.expect("dev plans need a dev source");
            let report = evaluate_plans(&model, &params, src.docs, &dev_plans, config.aggregation, config.jobs)?;
            record.dev_macro_f1 = Some(report.macro_f1);
            if state.best_dev_macro_f1.is_none_or(|b| report.macro_f1 > b) {
                state.best_dev_macro_f1 = Some(report.macro_f1);
                state.evals_since_improvement = 0;
                best = params.clone();
            } else {
                state.evals_since_improvement += 1;
            }
        }
        log(&record)?;
        if eval_now && state.evals_since_improvement >= config.patience.max(1) {
            log::info!("early stop at step {} (best dev Macro-F1 {:?})", state.step, state.best_dev_macro_f1);
            stopped_early = true;
            break;
        }
    }
    let params = if dev_plans.is_empty() || state.best_dev_macro_f1.is_none() { params } else { best };
    Ok(TrainOutcome {
        params,
        model,
        state,
        stopped_early,
    })
}

/// Corpora and relation splits of a run.
pub struct Dataset {
    pub train: Corpus,
    /// `None` means the dev relations live in the training corpus.
    pub dev: Option<Corpus>,
    pub test: Option<Corpus>,
    pub split: RelationSplit,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn dev_corpus(&self) -> &Corpus {
        self.dev.as_ref().unwrap_or(&self.train)
    }

    pub fn test_corpus(&self) -> &Corpus {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

pub fn load_corpus(path: &str, inventory: Option<&str>) -> Result<Corpus> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match inventory {
        Some(inv) => {
            let inv_raw = std::fs::read(inv).map_err(|e| Error::io(inv, e))?;
            parse_corpus_with_inventory(&raw, CorpusFormat::DocRed, parse_inventory(&inv_raw)?)
        }
        None => parse_corpus(&raw, CorpusFormat::DocRed),
    }
}

/// Loads the configured corpora. With a single corpus the relation
/// inventory is split by the configured fractions; with separate dev or
/// test corpora each split takes its corpus's whole inventory.
pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    let path = config
        .train_corpus
        .as_deref()
        .ok_or_else(|| Error::Config("train_corpus is not set".into()))?;
    let train = load_corpus(path, config.inventory.as_deref())?;
    let dev = config.dev_corpus.as_deref().map(|p| load_corpus(p, None)).transpose()?;
    let test = config.test_corpus.as_deref().map(|p| load_corpus(p, None)).transpose()?;
    Dataset::new(train, dev, test, config)
}

impl Dataset {
    pub fn new(train: Corpus, dev: Option<Corpus>, test: Option<Corpus>, config: &TrainConfig) -> Result<Self> {
        let split = if dev.is_none() && test.is_none() {
            split_relations(
                &train,
                [config.train_fraction, config.dev_fraction, config.test_fraction],
                config.seed,
            )?
        } else {
            RelationSplit {
                train: train.relation_inventory.clone(),
                dev: dev.as_ref().map(|c| c.relation_inventory.clone()).unwrap_or_default(),
                test: test.as_ref().map(|c| c.relation_inventory.clone()).unwrap_or_default(),
            }
        };
        let vocab = Vocab::build(std::iter::once(&train).chain(dev.as_ref()).chain(test.as_ref()));
        Ok(Self {
            train,
            dev,
            test,
            split,
            vocab,
        })
    }
}

/// A finished run with everything needed for a checkpoint.
pub struct Fitted {
    pub outcome: TrainOutcome,
    pub meta: CheckpointMeta,
}

/// Trains on `data` as configured, evaluating on its dev split.
pub fn fit(config: &TrainConfig, data: &Dataset, log: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<Fitted> {
    let max_len = config.max_len;
    let train_docs = prepare_corpus(&data.train, &data.vocab, max_len)?;
    let train_src = EpisodeSource {
        corpus: &data.train,
        relations: &data.split.train,
        docs: &train_docs,
    };
    let dev_docs = match &data.dev {
        Some(c) => Some(prepare_corpus(c, &data.vocab, max_len)?),
        None => None,
    };
    let dev_src = (!data.split.dev.is_empty()).then(|| EpisodeSource {
        corpus: data.dev_corpus(),
        relations: &data.split.dev,
        docs: dev_docs.as_deref().unwrap_or(&train_docs),
    });
    let outcome = train(config, &data.vocab, &train_src, dev_src.as_ref(), log)?;
    let meta = CheckpointMeta {
        config: config.clone(),
        model: outcome.model.clone(),
        vocab: data.vocab.clone(),
        train_relations: data.split.train.clone(),
        dev_relations: data.split.dev.clone(),
        test_relations: data.split.test.clone(),
        steps: outcome.state.step,
        best_dev_macro_f1: outcome.state.best_dev_macro_f1,
    };
    Ok(Fitted { outcome, meta })
}

/// JSON sidecar stored next to a binary checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub train_relations: Vec<String>,
    pub dev_relations: Vec<String>,
    pub test_relations: Vec<String>,
    pub steps: usize,
    pub best_dev_macro_f1: Option<f64>,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    params.save(path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    let params = ParamSet::load(path)?;
    let side = sidecar_path(path);
    let raw = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&raw)?;
    Ok((params, meta))
}

/// Writes log records as JSON lines.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> JsonLines<W> {
    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(self.0, "{line}").map_err(|e| Error::Internal(format!("log write failed: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0, 1000, 0.1, 1.0), 0.0);
        assert_eq!(lr_at(100, 1000, 0.1, 1.0), 1.0);
        assert_abs_diff_eq!(lr_at(550, 1000, 0.1, 1.0), 0.5, epsilon = 1e-15);
        assert_eq!(lr_at(1000, 1000, 0.1, 1.0), 0.0);
        assert_eq!(lr_at(0, 10, 0.0, 2.0), 2.0);
        assert_abs_diff_eq!(lr_at(50, 1000, 0.1, 3.0), 1.5, epsilon = 1e-15);
    }

    fn one(name: &str, v: Vec<f64>) -> (ParamSet, GradMap) {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::row(vec![1.0; v.len()])).unwrap();
        let mut g = GradMap::new();
        g.insert(name.to_string(), Tensor::row(v));
        (p, g)
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let (mut p, g) = one("w", vec![0.0, 0.0]);
        let before = p.clone();
        let mut opt = AdamW::new(0.0);
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        for scale in [1e-3, 1.0, 1e4] {
            let (mut p, g) = one("w", vec![scale, -scale]);
            AdamW::new(0.0).step(&mut p, &g, 0.01).unwrap();
            let d = p.get("w").unwrap().data();
            assert_abs_diff_eq!(d[0], 1.0 - 0.01, epsilon = 1e-4 * 0.01 + 1e-9);
            assert_abs_diff_eq!(d[1], 1.0 + 0.01, epsilon = 1e-4 * 0.01 + 1e-9);
        }
    }

    #[test]
    fn adamw_constant_gradient_moves_by_lr() {
        let (mut p, g) = one("w", vec![0.3]);
        let mut opt = AdamW::new(0.0);
        let mut last = 1.0;
        for _ in 0..200 {
            opt.step(&mut p, &g, 0.001).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert_abs_diff_eq!(last - now, 0.001, epsilon = 1e-7);
            last = now;
        }
    }

    #[test]
    fn adamw_decoupled_decay_and_rejection() {
        let (mut p, g) = one("w", vec![0.0]);
        AdamW::new(0.5).step(&mut p, &g, 0.1).unwrap();
        assert_abs_diff_eq!(p.get("w").unwrap().data()[0], 0.95, epsilon = 1e-15);
        let (mut p, g) = one("w", vec![f64::NAN]);
        let before = p.clone();
        assert!(matches!(AdamW::new(0.0).step(&mut p, &g, 0.1), Err(Error::NonFinite { .. })));
        assert_eq!(p, before);
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = TrainConfig::default();
        c.set("lr", "1e-3").unwrap();
        c.set("setting", "3doc").unwrap();
        c.set("strategy", "hard").unwrap();
        c.set("use_tpl", "false").unwrap();
        c.set("train_corpus", "data/train.json").unwrap();
        c.set("vat", "freelb").unwrap();
        c.set("attention", "mean").unwrap();
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.setting, TaskSetting::ThreeDoc);
        assert_eq!(c.strategy, SamplingStrategy::Hard);
        assert!(!c.use_tpl);
        assert_eq!(c.train_corpus.as_deref(), Some("data/train.json"));
        let mut back = TrainConfig::default();
        back.apply_file_contents(&c.to_file_contents()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::keys().contains(&"query_nota_ratio".to_string()));
    }

    #[test]
    fn config_errors() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.set("learning_rate", "1"), Err(Error::Config(_))));
        assert!(c.set("omega", "ten").is_err());
        assert!(c.set("omega", "2.5").is_err());
        assert!(c.set("setting", "5doc").is_err());
        assert!(c.apply_file_contents("lr 0.1").is_err());
        c.apply_file_contents("# comment\n\nlr = 0.5  # trailing\n").unwrap();
        assert_eq!(c.lr, 0.5);
        assert!(TrainConfig::from_file(Path::new("/nonexistent/tpn.conf")).is_err());
        c.warmup = 1.0;
        assert!(c.validate().is_err());
    }

    fn tiny_run(episodes: usize, dev: bool, seed: u64) -> (TrainOutcome, Vec<LogRecord>) {
        let (corpus, docs, _) = crate::model::tests::tiny_world(3);
        let vocab = Vocab::build([&corpus]);
        let mut cfg = TrainConfig::default();
        for (k, v) in [
            ("hidden", "8"),
            ("heads", "2"),
            ("ff_dim", "8"),
            ("max_len", "64"),
            ("omega", "4"),
            ("beta", "4"),
            ("setting", "3doc"),
            ("strategy", "hard"),
            ("eval_strategy", "hard"),
            ("lr", "0.01"),
            ("warmup", "0.1"),
            ("eval_interval", "5"),
            ("dev_episodes", "3"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg.episodes = episodes;
        cfg.seed = seed;
        let src = EpisodeSource {
            corpus: &corpus,
            relations: &corpus.relation_inventory,
            docs: &docs,
        };
        let mut records = Vec::new();
        let out = train(&cfg, &vocab, &src, dev.then_some(&src), &mut |r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        (out, records)
    }

    #[test]
    fn zero_episodes_returns_initial_params() {
        let (out, records) = tiny_run(0, true, 4);
        let init = init_model(&out.model, &mut rng::stream(4, streams::INIT)).unwrap();
        assert_eq!(out.params, init);
        assert!(records.is_empty());
        assert_eq!(out.state.step, 0);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let (a, ra) = tiny_run(12, true, 9);
        let (b, rb) = tiny_run(12, true, 9);
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 12 - a.state.skipped);
        assert!(ra.iter().any(|r| r.dev_macro_f1.is_some()));
        assert!(ra.last().unwrap().dev_macro_f1.is_some());
        for r in &ra {
            assert!(r.loss.is_finite() && r.lr >= 0.0 && r.lr <= 0.01);
        }
    }

    #[test]
    fn loss_goes_down_on_a_tiny_corpus() {
        let (_, records) = tiny_run(60, false, 2);
        let n = records.len();
        assert!(n >= 40);
        let head: f64 = records[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let tail: f64 = records[n - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let (out, _) = tiny_run(2, false, 1);
        let (corpus, _, _) = crate::model::tests::tiny_world(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            config: TrainConfig::default(),
            model: out.model.clone(),
            vocab: Vocab::build([&corpus]),
            train_relations: corpus.relation_inventory.clone(),
            dev_relations: vec![],
            test_relations: vec![],
            steps: out.state.step,
            best_dev_macro_f1: None,
        };
        save_checkpoint(&path, &out.params, &meta).unwrap();
        assert!(sidecar_path(&path).ends_with("model.ckpt.json"));
        let (p, m) = load_checkpoint(&path).unwrap();
        assert_eq!(p, out.params);
        assert_eq!(m, meta);
    }
}
