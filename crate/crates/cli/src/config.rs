//! Run configuration files.
//!
//! A file is a sequence of `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment. Every key has a default, so an empty file
//! is a complete configuration. [`RunConfig::to_text`] writes the resolved
//! configuration back in the same format.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use fewshot::data::SynthConfig;
use fewshot::embedding::{ExtractorConfig, ExtractorKind, FilmLayers, NormMode, TenConfig};
use fewshot::episodes::QuerySpec;
use fewshot::metric::{AlphaSpec, SimilarityKind};
use fewshot::model::{MetricConfig, ModelConfig};
use fewshot::training::{AuxConfig, EvalConfig, TrainConfig, DEFAULT_LR_INTERVAL};

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Fc100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorChoice {
    /// Residual stack for images, MLP for flat vectors.
    Auto,
    Linear,
    Mlp,
    MiniResnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// Train one model per α.
    Train,
    /// Re-evaluate one trained model at each α.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub extractor: ExtractorChoice,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub blocks: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub film: FilmLayers,
    pub weight_decay: f64,
    pub output_scale: f64,
    pub norm: NormMode,
    pub ten: bool,
    pub ten_penalty: f64,
    pub gamma0_init: f64,
    pub beta0_init: f64,
    pub ten_zero_last_layer: bool,
    pub metric: SimilarityKind,
    pub alpha: f64,
    pub trainable_alpha: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    pub side: usize,
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub split: String,
    pub tasks: usize,
    pub queries: usize,
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub grid: Vec<f64>,
    pub mode: SweepMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub ways: usize,
    pub shots: usize,
    /// Unset means the shot-count default.
    pub tasks_per_batch: Option<usize>,
    pub queries_per_task: Option<usize>,
    pub episodes: usize,
    pub momentum: f64,
    pub lr0: f64,
    pub lr_interval: usize,
    pub val_interval: usize,
    pub val_tasks: usize,
    pub val_queries: usize,
    pub patience: Option<usize>,
    pub seed: u64,
    pub aux: AuxConfig,
    pub model: ModelSection,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::for_shots(5, 5);
        Self {
            ways: 5,
            shots: 5,
            tasks_per_batch: None,
            queries_per_task: None,
            episodes: t.episodes,
            momentum: t.momentum,
            lr0: t.lr0,
            lr_interval: DEFAULT_LR_INTERVAL,
            val_interval: t.val_interval,
            val_tasks: t.val_tasks,
            val_queries: t.val_queries,
            patience: None,
            seed: 0,
            aux: AuxConfig::default(),
            model: ModelSection {
                extractor: ExtractorChoice::Auto,
                hidden: vec![64],
                embed_dim: 64,
                blocks: 2,
                depth: 3,
                base_filters: 8,
                film: FilmLayers::All,
                weight_decay: 0.0005,
                output_scale: 1.0,
                norm: NormMode::Batch,
                ten: true,
                ten_penalty: TenConfig::default().penalty,
                gamma0_init: 0.0,
                beta0_init: 0.0,
                ten_zero_last_layer: false,
                metric: SimilarityKind::SquaredEuclidean,
                alpha: 1.0,
                trainable_alpha: true,
                seed: 0,
            },
            data: DataSection { source: DataSource::Synth, dir: None, side: 8, normalize: true },
            synth: SynthConfig::default(),
            eval: EvalSection { split: "test".into(), tasks: 500, queries: 100, restarts: 1, seed: 0 },
            sweep: SweepSection { grid: vec![0.01, 0.1, 1.0, 10.0, 100.0], mode: SweepMode::Train },
        }
    }
}

struct Entry<'a> {
    line: usize,
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, message: impl fmt::Display) -> ConfigError {
        ConfigError { line: Some(self.line), message: format!("key `{}` in [{}]: {message}", self.key, self.section) }
    }

    fn usize(&self) -> Result<usize, ConfigError> {
        self.value.parse().map_err(|_| self.err(format!("expected a non-negative integer, got `{}`", self.value)))
    }

    fn positive(&self) -> Result<usize, ConfigError> {
        match self.usize()? {
            0 => Err(self.err("must be at least 1")),
            n => Ok(n),
        }
    }

    fn u64(&self) -> Result<u64, ConfigError> {
        self.value.parse().map_err(|_| self.err(format!("expected a non-negative integer, got `{}`", self.value)))
    }

    fn f64(&self) -> Result<f64, ConfigError> {
        match self.value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(format!("expected a finite number, got `{}`", self.value))),
        }
    }

    fn positive_f64(&self) -> Result<f64, ConfigError> {
        let v = self.f64()?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.err(format!("must be positive, got {v}")))
        }
    }

    fn non_negative_f64(&self) -> Result<f64, ConfigError> {
        let v = self.f64()?;
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(self.err(format!("must be non-negative, got {v}")))
        }
    }

    fn bool(&self) -> Result<bool, ConfigError> {
        match self.value {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(format!("expected true or false, got `{v}`"))),
        }
    }

    fn list<T>(&self, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, ConfigError> {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|s| parse(s.trim()).ok_or_else(|| self.err(format!("cannot parse list item `{}`", s.trim()))))
            .collect()
    }

    fn choice<T: Copy>(&self, options: &[(&str, T)]) -> Result<T, ConfigError> {
        options.iter().find(|(n, _)| *n == self.value).map(|(_, v)| *v).ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            self.err(format!("expected one of {}, got `{}`", names.join(", "), self.value))
        })
    }
}

const EXTRACTORS: &[(&str, ExtractorChoice)] = &[
    ("auto", ExtractorChoice::Auto),
    ("linear", ExtractorChoice::Linear),
    ("mlp", ExtractorChoice::Mlp),
    ("mini_resnet", ExtractorChoice::MiniResnet),
];
const FILMS: &[(&str, FilmLayers)] =
    &[("none", FilmLayers::None), ("all", FilmLayers::All), ("pre-pool", FilmLayers::PrePool), ("last", FilmLayers::Last)];
const NORMS: &[(&str, NormMode)] = &[("batch", NormMode::Batch), ("frozen", NormMode::Frozen)];
const METRICS: &[(&str, SimilarityKind)] = &[("euclidean", SimilarityKind::SquaredEuclidean), ("cosine", SimilarityKind::Cosine)];
const ALPHA_MODES: &[(&str, bool)] = &[("fixed", false), ("trainable", true)];
const SOURCES: &[(&str, DataSource)] = &[("synth", DataSource::Synth), ("fc100", DataSource::Fc100)];
const SWEEP_MODES: &[(&str, SweepMode)] = &[("train", SweepMode::Train), ("fixed", SweepMode::Fixed)];
const SPLITS: &[(&str, &str)] = &[("train", "train"), ("val", "val"), ("test", "test")];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, o)| *o == v).map(|(n, _)| *n).expect("every variant has a name")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen = std::collections::BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError { line: Some(line), message: format!("malformed section header `{content}`") })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError { line: Some(line), message: format!("unknown section [{name}]") });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError { line: Some(line), message: format!("expected `key = value`, got `{content}`") })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(ConfigError { line: Some(line), message: format!("key `{key}` appears before any [section] header") });
            }
            if let Some(prev) = seen.insert((section.clone(), key.to_string()), line) {
                return Err(ConfigError {
                    line: Some(line),
                    message: format!("key `{key}` in [{section}] already set on line {prev}"),
                });
            }
            cfg.set(&Entry { line, section: &section, key, value })?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: None, message: format!("cannot read config {}: {e}", path.display()) })?;
        Self::parse(&text).map_err(|e| ConfigError { message: format!("{}: {}", path.display(), e.message), ..e })
    }

    fn set(&mut self, e: &Entry<'_>) -> Result<(), ConfigError> {
        let m = &mut self.model;
        match (e.section, e.key) {
            ("task", "ways") => self.ways = e.usize()?,
            ("task", "shots") => self.shots = e.positive()?,
            ("task", "tasks_per_batch") => self.tasks_per_batch = Some(e.positive()?),
            ("task", "queries_per_task") => self.queries_per_task = Some(e.positive()?),
            ("train", "episodes") => self.episodes = e.positive()?,
            ("train", "momentum") => self.momentum = e.non_negative_f64()?,
            ("train", "lr0") => self.lr0 = e.positive_f64()?,
            ("train", "lr_interval") => self.lr_interval = e.positive()?,
            ("train", "val_interval") => self.val_interval = e.positive()?,
            ("train", "val_tasks") => self.val_tasks = e.positive()?,
            ("train", "val_queries") => self.val_queries = e.positive()?,
            ("train", "patience") => self.patience = if e.value == "none" { None } else { Some(e.positive()?) },
            ("train", "seed") => self.seed = e.u64()?,
            ("aux", "enabled") => self.aux.enabled = e.bool()?,
            ("aux", "p0") => self.aux.p0 = e.positive_f64()?,
            ("aux", "decay_steps") => self.aux.decay_steps = e.usize()?,
            ("aux", "batch_size") => self.aux.batch_size = e.positive()?,
            ("model", "extractor") => m.extractor = e.choice(EXTRACTORS)?,
            ("model", "hidden") => m.hidden = e.list(|s| s.parse().ok().filter(|&n: &usize| n > 0))?,
            ("model", "embed_dim") => m.embed_dim = e.positive()?,
            ("model", "blocks") => m.blocks = e.positive()?,
            ("model", "depth") => m.depth = e.positive()?,
            ("model", "base_filters") => m.base_filters = e.positive()?,
            ("model", "film") => m.film = e.choice(FILMS)?,
            ("model", "weight_decay") => m.weight_decay = e.non_negative_f64()?,
            ("model", "output_scale") => m.output_scale = e.positive_f64()?,
            ("model", "norm") => m.norm = e.choice(NORMS)?,
            ("model", "ten") => m.ten = e.bool()?,
            ("model", "ten_penalty") => m.ten_penalty = e.non_negative_f64()?,
            ("model", "gamma0_init") => m.gamma0_init = e.f64()?,
            ("model", "beta0_init") => m.beta0_init = e.f64()?,
            ("model", "ten_zero_last_layer") => m.ten_zero_last_layer = e.bool()?,
            ("model", "metric") => m.metric = e.choice(METRICS)?,
            ("model", "alpha") => m.alpha = e.positive_f64()?,
            ("model", "alpha_mode") => m.trainable_alpha = e.choice(ALPHA_MODES)?,
            ("model", "seed") => m.seed = e.u64()?,
            ("data", "source") => self.data.source = e.choice(SOURCES)?,
            ("data", "dir") => self.data.dir = (!e.value.is_empty()).then(|| PathBuf::from(e.value)),
            ("data", "side") => self.data.side = e.positive()?,
            ("data", "normalize") => self.data.normalize = e.bool()?,
            ("synth", "classes") => self.synth.classes = e.positive()?,
            ("synth", "superclasses") => self.synth.superclasses = e.positive()?,
            ("synth", "input_dim") => self.synth.input_dim = e.positive()?,
            ("synth", "mean_scale") => self.synth.mean_scale = e.non_negative_f64()?,
            ("synth", "class_scale") => self.synth.class_scale = e.non_negative_f64()?,
            ("synth", "within_scale") => self.synth.within_scale = e.non_negative_f64()?,
            ("synth", "samples_per_class") => self.synth.samples_per_class = e.positive()?,
            ("synth", "split") => {
                let v = e.list(|s| s.parse::<usize>().ok())?;
                self.synth.split_superclasses =
                    v.try_into().map_err(|_| e.err("expected three comma-separated superclass counts"))?;
            }
            ("synth", "seed") => self.synth.seed = e.u64()?,
            ("eval", "split") => self.eval.split = e.choice(SPLITS)?.to_string(),
            ("eval", "tasks") => self.eval.tasks = e.positive()?,
            ("eval", "queries") => self.eval.queries = e.positive()?,
            ("eval", "restarts") => self.eval.restarts = e.positive()?,
            ("eval", "seed") => self.eval.seed = e.u64()?,
            ("sweep", "grid") => {
                let grid = e.list(|s| s.parse::<f64>().ok().filter(|v| v.is_finite() && *v > 0.0))?;
                if grid.is_empty() {
                    return Err(e.err("grid must list at least one positive value"));
                }
                self.sweep.grid = grid;
            }
            ("sweep", "mode") => self.sweep.mode = e.choice(SWEEP_MODES)?,
            (s, k) => return Err(ConfigError { line: Some(e.line), message: format!("unknown key `{k}` in [{s}]") }),
        }
        Ok(())
    }

    /// Cross-key checks that no single line can violate.
    fn check(&self) -> Result<(), ConfigError> {
        let top = |message: String| Err(ConfigError { line: None, message });
        if let Err(e) = self.train_config().validate() {
            return top(e.to_string());
        }
        if self.data.source == DataSource::Fc100 && 32 % self.data.side != 0 {
            return top(format!("key `side` in [data]: {} does not divide 32", self.data.side));
        }
        if self.eval.queries < self.ways {
            return top(format!("key `queries` in [eval]: {} queries cannot cover {} classes", self.eval.queries, self.ways));
        }
        if let Err(e) = self.synth.validate() {
            return top(format!("[synth]: {e}"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::for_shots(self.ways, self.shots);
        if let Some(n) = self.tasks_per_batch {
            t.tasks_per_batch = n;
        }
        if let Some(n) = self.queries_per_task {
            t.queries_per_task = n;
        }
        TrainConfig {
            episodes: self.episodes,
            momentum: self.momentum,
            lr0: self.lr0,
            lr_interval: self.lr_interval,
            aux: self.aux.clone(),
            val_interval: self.val_interval,
            val_tasks: self.val_tasks,
            val_queries: self.val_queries,
            patience: self.patience,
            seed: self.seed,
            ..t
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ways: self.ways,
            shots: self.shots,
            queries: QuerySpec::Total(self.eval.queries),
            tasks: self.eval.tasks,
            restarts: self.eval.restarts,
        }
    }

    /// Model for inputs of shape `input_shape`; `aux_classes` sizes the
    /// auxiliary head when co-training is enabled.
    pub fn model_config(&self, input_shape: &[usize], aux_classes: usize) -> ModelConfig {
        let m = &self.model;
        let image = input_shape.len() == 3;
        let kind = match m.extractor {
            ExtractorChoice::Linear => ExtractorKind::Linear { out_dim: m.embed_dim, bias: true },
            ExtractorChoice::Mlp => ExtractorKind::Mlp { hidden: m.hidden.clone(), out_dim: m.embed_dim },
            ExtractorChoice::MiniResnet => {
                ExtractorKind::MiniResnet { blocks: m.blocks, depth: m.depth, base_filters: m.base_filters }
            }
            ExtractorChoice::Auto if image => {
                ExtractorKind::MiniResnet { blocks: m.blocks, depth: m.depth, base_filters: m.base_filters }
            }
            ExtractorChoice::Auto => ExtractorKind::Mlp { hidden: m.hidden.clone(), out_dim: m.embed_dim },
        };
        ModelConfig {
            extractor: ExtractorConfig {
                kind,
                input_shape: input_shape.to_vec(),
                film_layers: m.film,
                weight_decay: m.weight_decay,
                output_scale: m.output_scale,
                norm: m.norm,
            },
            ten: m.ten.then(|| TenConfig {
                penalty: m.ten_penalty,
                gamma0_init: m.gamma0_init,
                beta0_init: m.beta0_init,
                zero_last_layer: m.ten_zero_last_layer,
            }),
            metric: MetricConfig {
                kind: m.metric,
                alpha: if m.trainable_alpha { AlphaSpec::Trainable { init: m.alpha } } else { AlphaSpec::Fixed(m.alpha) },
            },
            aux_classes: self.aux.enabled.then_some(aux_classes),
            seed: m.seed,
        }
    }

    /// The resolved configuration in the file format; parsing it back gives
    /// an equal configuration with the shot-count defaults made explicit.
    pub fn to_text(&self) -> String {
        let t = self.train_config();
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "[task]\nways = {}\nshots = {}", self.ways, self.shots);
        let _ = writeln!(s, "tasks_per_batch = {}\nqueries_per_task = {}", t.tasks_per_batch, t.queries_per_task);
        let _ = writeln!(s, "\n[train]\nepisodes = {}\nmomentum = {}\nlr0 = {}", t.episodes, t.momentum, t.lr0);
        let _ = writeln!(s, "lr_interval = {}\nval_interval = {}", t.lr_interval, t.val_interval);
        let _ = writeln!(s, "val_tasks = {}\nval_queries = {}", t.val_tasks, t.val_queries);
        let _ = writeln!(s, "patience = {}", t.patience.map_or("none".to_string(), |p| p.to_string()));
        let _ = writeln!(s, "seed = {}", t.seed);
        let a = &self.aux;
        let _ = writeln!(s, "\n[aux]\nenabled = {}\np0 = {}", a.enabled, a.p0);
        let _ = writeln!(s, "decay_steps = {}\nbatch_size = {}", a.decay_steps, a.batch_size);
        let _ = writeln!(s, "\n[model]\nextractor = {}\nhidden = {}", name_of(EXTRACTORS, m.extractor), list(&m.hidden));
        let _ = writeln!(s, "embed_dim = {}\nblocks = {}\ndepth = {}", m.embed_dim, m.blocks, m.depth);
        let _ = writeln!(s, "base_filters = {}\nfilm = {}", m.base_filters, name_of(FILMS, m.film));
        let _ = writeln!(s, "weight_decay = {}\noutput_scale = {}", m.weight_decay, m.output_scale);
        let _ = writeln!(s, "norm = {}\nten = {}\nten_penalty = {}", name_of(NORMS, m.norm), m.ten, m.ten_penalty);
        let _ = writeln!(s, "gamma0_init = {}\nbeta0_init = {}", m.gamma0_init, m.beta0_init);
        let _ = writeln!(s, "ten_zero_last_layer = {}\nmetric = {}", m.ten_zero_last_layer, name_of(METRICS, m.metric));
        let _ = writeln!(s, "alpha = {}\nalpha_mode = {}", m.alpha, name_of(ALPHA_MODES, m.trainable_alpha));
        let _ = writeln!(s, "seed = {}", m.seed);
        let d = &self.data;
        let dir = d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "\n[data]\nsource = {}\ndir = {dir}", name_of(SOURCES, d.source));
        let _ = writeln!(s, "side = {}\nnormalize = {}", d.side, d.normalize);
        let y = &self.synth;
        let _ = writeln!(s, "\n[synth]\nclasses = {}\nsuperclasses = {}", y.classes, y.superclasses);
        let _ = writeln!(s, "input_dim = {}\nmean_scale = {}", y.input_dim, y.mean_scale);
        let _ = writeln!(s, "class_scale = {}\nwithin_scale = {}", y.class_scale, y.within_scale);
        let _ = writeln!(s, "samples_per_class = {}\nsplit = {}", y.samples_per_class, list(&y.split_superclasses));
        let _ = writeln!(s, "seed = {}", y.seed);
        let e = &self.eval;
        let _ = writeln!(s, "\n[eval]\nsplit = {}\ntasks = {}\nqueries = {}", e.split, e.tasks, e.queries);
        let _ = writeln!(s, "restarts = {}\nseed = {}", e.restarts, e.seed);
        let grid: Vec<String> = self.sweep.grid.iter().map(|g| g.to_string()).collect();
        let _ = writeln!(s, "\n[sweep]\ngrid = {}\nmode = {}", grid.join(","), name_of(SWEEP_MODES, self.sweep.mode));
        s
    }
}

const SECTIONS: &[&str] = &["task", "train", "aux", "model", "data", "synth", "eval", "sweep"];
