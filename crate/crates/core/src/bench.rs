//! Small reproducible experiments on synthetic corpora, shared by the
//! examples and the acceptance tests.

use serde::Serialize;

use crate::corpus::{generate_synthetic_corpus, GeneratorConfig, Vocab};
use crate::eval::F1Report;
use crate::model::prepare_corpus;
use crate::trainer::{evaluate_source, train, EpisodeSource, TrainConfig};
use crate::Result;

/// Trains on a corpus and scores fresh episodes over the same relations and
/// documents.
#[derive(Debug, Clone)]
pub struct Overfit {
    pub generator: GeneratorConfig,
    pub config: TrainConfig,
    pub eval_episodes: usize,
}

impl Default for Overfit {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            config: TrainConfig {
                dev_episodes: 0,
                ..TrainConfig::desk()
            },
            eval_episodes: 50,
        }
    }
}

impl Overfit {
    /// Corpus seed and run seed are both `config.seed`.
    pub fn run(&self, log: &mut dyn FnMut(&crate::trainer::LogRecord) -> Result<()>) -> Result<F1Report> {
        let cfg = &self.config;
        let corpus = generate_synthetic_corpus(&self.generator, cfg.seed)?;
        let vocab = Vocab::build([&corpus]);
        let docs = prepare_corpus(&corpus, &vocab, cfg.max_len)?;
        let src = EpisodeSource {
            corpus: &corpus,
            relations: &corpus.relation_inventory,
            docs: &docs,
        };
        let out = train(cfg, &vocab, &src, None, log)?;
        evaluate_source(&out.model, &out.params, &src, cfg.setting, cfg.eval_strategy, self.eval_episodes, cfg.seed, cfg.aggregation)
    }
}

/// Learned NOTA prototypes against one global NOTA vector when the test
/// relations are unseen and the look-alike context words of the test
/// corpus are disjoint from those seen in training.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub train_generator: GeneratorConfig,
    pub test_relations: usize,
    pub config: TrainConfig,
    pub eval_episodes: usize,
}

impl Default for Transfer {
    fn default() -> Self {
        Self {
            train_generator: GeneratorConfig {
                relations: 32,
                documents: 1600,
                ..GeneratorConfig::default()
            },
            test_relations: 4,
            config: TrainConfig {
                dev_episodes: 0,
                episode_relations: 2,
                ..TrainConfig::desk()
            },
            eval_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransferScore {
    pub seed: u64,
    pub learned: f64,
    pub global: f64,
}

impl TransferScore {
    pub fn gap(&self) -> f64 {
        self.learned - self.global
    }
}

impl Transfer {
    pub fn test_generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            first_relation: self.train_generator.first_relation + self.train_generator.relations,
            relations: self.test_relations,
            domain_shift: true,
            doc_prefix: "shift".into(),
            ..GeneratorConfig::default()
        }
    }

    /// Both variants share the corpora, the initialization seed and the
    /// episode streams; only `use_tpl` differs.
    pub fn run(&self, seed: u64) -> Result<TransferScore> {
        let train_corpus = generate_synthetic_corpus(&self.train_generator, seed)?;
        let test_corpus = generate_synthetic_corpus(&self.test_generator(), seed + 1000)?;
        let vocab = Vocab::build([&train_corpus, &test_corpus]);
        let max_len = self.config.max_len;
        let train_docs = prepare_corpus(&train_corpus, &vocab, max_len)?;
        let test_docs = prepare_corpus(&test_corpus, &vocab, max_len)?;
        let train_src = EpisodeSource {
            corpus: &train_corpus,
            relations: &train_corpus.relation_inventory,
            docs: &train_docs,
        };
        let test_src = EpisodeSource {
            corpus: &test_corpus,
            relations: &test_corpus.relation_inventory,
            docs: &test_docs,
        };
        let mut scores = [0.0; 2];
        for (slot, use_tpl) in [true, false].into_iter().enumerate() {
            let cfg = TrainConfig {
                seed,
                use_tpl,
                ..self.config.clone()
            };
            let out = train(&cfg, &vocab, &train_src, None, &mut |_| Ok(()))?;
            let report = evaluate_source(&out.model, &out.params, &test_src, cfg.setting, cfg.eval_strategy, self.eval_episodes, seed, cfg.aggregation)?;
            scores[slot] = report.macro_f1;
        }
        Ok(TransferScore {
            seed,
            learned: scores[0],
            global: scores[1],
        })
    }
}

/// Single against Hard support sampling on a corpus with several facts per
/// document, scored on held-out documents over the same relations.
#[derive(Debug, Clone)]
pub struct HardVsSingle {
    pub generator: GeneratorConfig,
    pub config: TrainConfig,
    pub eval_episodes: usize,
}

impl Default for HardVsSingle {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig {
                entities_per_doc: 6,
                nota_fraction: 0.92,
                ..GeneratorConfig::default()
            },
            config: TrainConfig {
                dev_episodes: 0,
                // the denser corpus needs more steps before pairs separate
                episodes: 4000,
                ..TrainConfig::desk()
            },
            eval_episodes: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StrategyScore {
    pub seed: u64,
    pub single: f64,
    pub hard: f64,
}

impl StrategyScore {
    pub fn delta(&self) -> f64 {
        self.hard - self.single
    }
}

impl HardVsSingle {
    pub fn run(&self, seed: u64) -> Result<StrategyScore> {
        use crate::episode::SamplingStrategy;
        let train_corpus = generate_synthetic_corpus(&self.generator, seed)?;
        let held_out = GeneratorConfig {
            doc_prefix: "held".into(),
            ..self.generator.clone()
        };
        let test_corpus = generate_synthetic_corpus(&held_out, seed + 1000)?;
        let vocab = Vocab::build([&train_corpus, &test_corpus]);
        let max_len = self.config.max_len;
        let train_docs = prepare_corpus(&train_corpus, &vocab, max_len)?;
        let test_docs = prepare_corpus(&test_corpus, &vocab, max_len)?;
        let train_src = EpisodeSource {
            corpus: &train_corpus,
            relations: &train_corpus.relation_inventory,
            docs: &train_docs,
        };
        let test_src = EpisodeSource {
            corpus: &test_corpus,
            relations: &test_corpus.relation_inventory,
            docs: &test_docs,
        };
        let mut scores = [0.0; 2];
        for (slot, strategy) in [SamplingStrategy::Single, SamplingStrategy::Hard].into_iter().enumerate() {
            let cfg = TrainConfig {
                seed,
                strategy,
                ..self.config.clone()
            };
            let out = train(&cfg, &vocab, &train_src, None, &mut |_| Ok(()))?;
            let report = evaluate_source(&out.model, &out.params, &test_src, cfg.setting, cfg.eval_strategy, self.eval_episodes, seed, cfg.aggregation)?;
            scores[slot] = report.macro_f1;
        }
        Ok(StrategyScore {
            seed,
            single: scores[0],
            hard: scores[1],
        })
    }
}
