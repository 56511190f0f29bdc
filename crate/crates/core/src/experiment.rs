//! Config-driven sweeps over schemes, code sizes, quantizers and seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::baselines::{fdml_topology, FdmlActivation};
use crate::data::mnist::{self, MnistLayout};
use crate::data::series::{gen_synthetic_series, SeriesConfig, SeriesLayout};
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::ledger::{bits_per_inference, raw_baseline_bits, MNIST_PIXEL_BITS, FLOAT_WIRE_BITS};
use crate::model::SplitTopology;
use crate::presets;
use crate::scalar::Scalar;
use crate::trainer::{evaluate_many, train, TrainConfig, TrainMode, TrainQuant, Trained};

pub const RESULTS_FILE: &str = "results.csv";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    Mnist,
    SyntheticSeries,
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Mnist => "mnist",
            Dataset::SyntheticSeries => "synthetic-series",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Centralized,
    Fdml,
    Proposed,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Centralized => "centralized",
            Scheme::Fdml => "fdml",
            Scheme::Proposed => "proposed",
        })
    }
}

/// Bits per code value, or `None` for unquantized codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QSetting(pub Option<u32>);

impl QSetting {
    /// Orders numeric settings ascending with "none" last.
    pub fn sort_key(self) -> u32 {
        self.0.unwrap_or(u32::MAX)
    }
}

impl PartialOrd for QSetting {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QSetting {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for QSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(q) => write!(f, "{q}"),
            None => f.write_str("none"),
        }
    }
}

impl std::str::FromStr for QSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(QSetting(None));
        }
        s.parse()
            .map(|q| QSetting(Some(q)))
            .map_err(|_| Error::Config(format!("q must be a bit count or \"none\", got {s:?}")))
    }
}

impl Serialize for QSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(q) => s.serialize_u32(q),
            None => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for QSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bits(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Bits(q) => Ok(QSetting(Some(q))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// A single value or a list.
fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match Either::deserialize(d)? {
        Either::One(v) => vec![v],
        Either::Many(v) => v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnistSource {
    pub dir: PathBuf,
    /// First `n` training images; all of them when absent.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for MnistSource {
    fn default() -> Self {
        Self { dir: PathBuf::from("data/mnist"), train_limit: Some(mnist::DEFAULT_TRAIN_LIMIT), test_limit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    #[serde(deserialize_with = "one_or_many")]
    pub scheme: Vec<Scheme>,
    /// Total code values per inference.
    #[serde(default, deserialize_with = "one_or_many")]
    pub c: Vec<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub q: Vec<QSetting>,
    #[serde(deserialize_with = "one_or_many")]
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Training path for split schemes.
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default)]
    pub fdml_activation: FdmlActivation,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mnist: MnistSource,
    #[serde(default)]
    pub series: SeriesConfig,
}

fn default_mode() -> TrainMode {
    TrainMode::Distributed
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Code sizes swept; the series topology has a fixed size.
    pub fn code_sizes(&self) -> Vec<usize> {
        match self.dataset {
            Dataset::Mnist => self.c.clone(),
            Dataset::SyntheticSeries if self.c.is_empty() => vec![presets::SERIES_NODES * presets::SERIES_CODE],
            Dataset::SyntheticSeries => self.c.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dup = |what: &str| Error::Config(format!("duplicate entries in `{what}`"));
        if self.scheme.is_empty() || self.q.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("`scheme`, `q` and `seeds` must be nonempty".into()));
        }
        let mut schemes = self.scheme.clone();
        schemes.sort();
        schemes.dedup();
        if schemes.len() != self.scheme.len() {
            return Err(dup("scheme"));
        }
        let mut qs = self.q.clone();
        qs.sort();
        qs.dedup();
        if qs.len() != self.q.len() {
            return Err(dup("q"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(dup("seeds"));
        }
        let mut cs = self.c.clone();
        cs.sort();
        cs.dedup();
        if cs.len() != self.c.len() {
            return Err(dup("c"));
        }
        for q in &self.q {
            if let Some(b) = q.0 {
                crate::quant::QuantizerSpec::unit(b).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        match self.dataset {
            Dataset::Mnist => {
                if self.c.is_empty() {
                    return Err(Error::Config("`c` must list at least one code size for mnist".into()));
                }
                for &c in &self.c {
                    presets::mnist_split(c, None).map_err(|e| Error::Config(e.to_string()))?;
                }
            }
            Dataset::SyntheticSeries => {
                let fixed = presets::SERIES_NODES * presets::SERIES_CODE;
                if self.c.iter().any(|&c| c != fixed) {
                    return Err(Error::Config(format!("the series topology sends C = {fixed}")));
                }
                self.series.validate()?;
            }
        }
        self.train.validate()
    }

    fn split_topology(&self, scheme: Scheme, c: usize, q: QSetting) -> Result<SplitTopology> {
        let base = match self.dataset {
            Dataset::Mnist => presets::mnist_split(c, q.0)?,
            Dataset::SyntheticSeries => presets::series_split(q.0)?,
        };
        match scheme {
            Scheme::Fdml => fdml_topology(&base, self.fdml_activation),
            _ => Ok(base),
        }
    }

    fn centralized_topology(&self) -> SplitTopology {
        match self.dataset {
            Dataset::Mnist => presets::mnist_centralized(),
            Dataset::SyntheticSeries => presets::series_centralized(),
        }
    }

    fn raw_bits(&self) -> u64 {
        match self.dataset {
            Dataset::Mnist => raw_baseline_bits(&[28 * 28], MNIST_PIXEL_BITS),
            Dataset::SyntheticSeries => {
                raw_baseline_bits(&[self.series.window; 1].repeat(self.series.nodes), FLOAT_WIRE_BITS)
            }
        }
    }
}

/// One trained-and-evaluated `(scheme, C, q, seed)` tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: Scheme,
    pub dataset: Dataset,
    pub c: usize,
    pub q: QSetting,
    pub seed: u64,
    pub accuracy: f64,
    pub eval_loss: f64,
    pub bits_per_inference: u64,
    pub raw_bits: u64,
    pub savings: f64,
    pub epochs: usize,
    pub train_uplink_bits: u64,
    pub train_downlink_bits: u64,
}

struct Loaded<T> {
    split: SplitData<T>,
    whole: Option<SplitData<T>>,
}

fn load_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<Loaded<T>> {
    let want_whole = cfg.scheme.contains(&Scheme::Centralized);
    match cfg.dataset {
        Dataset::Mnist => {
            let (train, test) = mnist::load_mnist_dir(&cfg.mnist.dir, cfg.mnist.train_limit, cfg.mnist.test_limit)?;
            let split = mnist::mnist_split_data(&train, &test, MnistLayout::Quadrants)?;
            let whole =
                if want_whole { Some(mnist::mnist_split_data(&train, &test, MnistLayout::Whole)?) } else { None };
            Ok(Loaded { split, whole })
        }
        Dataset::SyntheticSeries => {
            let stream = gen_synthetic_series(&cfg.series)?;
            let split = stream.split_data(SeriesLayout::PerNode);
            let whole = want_whole.then(|| stream.split_data(SeriesLayout::Joint));
            Ok(Loaded { split, whole })
        }
    }
}

/// Runs every tuple of `cfg`, calling `progress` after each row.
pub fn run_rows(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&ResultRow)) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_rows_as::<f32>(cfg, progress),
        Precision::F64 => run_rows_as::<f64>(cfg, progress),
    }
}

fn run_rows_as<T: Scalar>(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&ResultRow)) -> Result<Vec<ResultRow>> {
    let data = load_data::<T>(cfg)?;
    let raw = cfg.raw_bits();
    let mut rows = Vec::new();
    let mut emit = |row: ResultRow, rows: &mut Vec<ResultRow>| {
        progress(&row);
        rows.push(row);
    };
    for &seed in &cfg.seeds {
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        for &scheme in &cfg.scheme {
            if scheme == Scheme::Centralized {
                let topology = cfg.centralized_topology();
                let whole = data.whole.as_ref().expect("loaded when requested");
                let trained = train(&topology, whole, &train_cfg, TrainMode::Centralized)?;
                let eval = evaluate_many(&topology, &trained.params, &whole.eval, &[None])?[0];
                for &c in &cfg.code_sizes() {
                    for &q in &cfg.q {
                        let row = ResultRow {
                            scheme,
                            dataset: cfg.dataset,
                            c,
                            q,
                            seed,
                            accuracy: eval.accuracy,
                            eval_loss: eval.loss,
                            bits_per_inference: raw,
                            raw_bits: raw,
                            savings: 0.0,
                            epochs: trained.history.epochs.len(),
                            train_uplink_bits: 0,
                            train_downlink_bits: 0,
                        };
                        emit(row, &mut rows);
                    }
                }
                continue;
            }
            for &c in &cfg.code_sizes() {
                // Without training-time quantization one model serves every q.
                let groups: Vec<Vec<QSetting>> = match cfg.train.quant {
                    TrainQuant::Off => vec![cfg.q.clone()],
                    TrainQuant::StraightThrough => cfg.q.iter().map(|&q| vec![q]).collect(),
                };
                for group in groups {
                    let train_topology = cfg.split_topology(scheme, c, group[0])?;
                    let trained: Trained<T> = train(&train_topology, &data.split, &train_cfg, cfg.mode)?;
                    let quantizers = group
                        .iter()
                        .map(|q| cfg.split_topology(scheme, c, *q).map(|t| t.quantizer))
                        .collect::<Result<Vec<_>>>()?;
                    let evals = evaluate_many(&train_topology, &trained.params, &data.split.eval, &quantizers)?;
                    for (&q, eval) in group.iter().zip(evals) {
                        let t = cfg.split_topology(scheme, c, q)?;
                        let bits = bits_per_inference(&t).total;
                        let last = trained.history.last();
                        emit(
                            ResultRow {
                                scheme,
                                dataset: cfg.dataset,
                                c,
                                q,
                                seed,
                                accuracy: eval.accuracy,
                                eval_loss: eval.loss,
                                bits_per_inference: bits,
                                raw_bits: raw,
                                savings: 1.0 - bits as f64 / raw as f64,
                                epochs: trained.history.epochs.len(),
                                train_uplink_bits: last.map_or(0, |e| e.uplink_bits),
                                train_downlink_bits: last.map_or(0, |e| e.downlink_bits),
                            },
                            &mut rows,
                        );
                    }
                }
            }
        }
    }
    rows.sort_by_key(row_key);
    Ok(rows)
}

fn row_key(r: &ResultRow) -> (Scheme, Dataset, usize, QSetting, u64) {
    (r.scheme, r.dataset, r.c, r.q, r.seed)
}

pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(RESULT_HEADER)?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))?;
    Ok(())
}

const RESULT_HEADER: [&str; 13] = [
    "scheme",
    "dataset",
    "c",
    "q",
    "seed",
    "accuracy",
    "eval_loss",
    "bits_per_inference",
    "raw_bits",
    "savings",
    "epochs",
    "train_uplink_bits",
    "train_downlink_bits",
];

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format { what: "results", path: path.to_path_buf(), detail: e.to_string() })
        })
        .collect()
}

/// Rows aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub scheme: Scheme,
    pub dataset: Dataset,
    pub c: usize,
    pub q: QSetting,
    pub bits_per_inference: u64,
    pub raw_bits: u64,
    pub savings: f64,
    pub mean_accuracy: f64,
    pub accuracy_std: f64,
    pub epochs: usize,
    pub seeds: usize,
}

/// Groups rows by `(scheme, dataset, C, q)`, sorted by that key.
pub fn tradeoff(rows: &[ResultRow]) -> Vec<TradeoffRow> {
    let mut groups: BTreeMap<(Scheme, usize, QSetting, Dataset), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.scheme, r.c, r.q, r.dataset)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().map(|r| r.accuracy).sum::<f64>() / n;
            let var = if g.len() > 1 {
                g.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            TradeoffRow {
                scheme: g[0].scheme,
                dataset: g[0].dataset,
                c: g[0].c,
                q: g[0].q,
                bits_per_inference: g[0].bits_per_inference,
                raw_bits: g[0].raw_bits,
                savings: g[0].savings,
                mean_accuracy: mean,
                accuracy_std: var.sqrt(),
                epochs: g.iter().map(|r| r.epochs).max().unwrap_or(0),
                seeds: g.len(),
            }
        })
        .collect()
}

const TRADEOFF_HEADER: [&str; 11] = [
    "scheme",
    "dataset",
    "c",
    "q",
    "bits_per_inference",
    "raw_bits",
    "savings",
    "mean_accuracy",
    "accuracy_std",
    "epochs",
    "seeds",
];

/// Delimited trade-off table; a header alone when `rows` is empty.
pub fn emit_tradeoff_table<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRADEOFF_HEADER)?;
    for t in tradeoff(rows) {
        w.write_record([
            t.scheme.to_string(),
            t.dataset.to_string(),
            t.c.to_string(),
            t.q.to_string(),
            t.bits_per_inference.to_string(),
            t.raw_bits.to_string(),
            format!("{:.4}", t.savings),
            format!("{:.4}", t.mean_accuracy),
            format!("{:.4}", t.accuracy_std),
            t.epochs.to_string(),
            t.seeds.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<tradeoff>", e))?;
    Ok(())
}

/// Column-aligned rendering of the trade-off table.
pub fn format_tradeoff_text(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    emit_tradeoff_table(rows, &mut buf).expect("in-memory write");
    let text = String::from_utf8(buf).expect("utf8");
    let cells: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    let widths: Vec<usize> =
        (0..TRADEOFF_HEADER.len()).map(|i| cells.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn manifest(cfg: &ExperimentConfig, rows: &[ResultRow]) -> String {
    let mut m = String::new();
    m.push_str(&format!("package = {} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")));
    m.push_str(&format!("rows = {}\n", rows.len()));
    m.push_str(&format!("seeds = {:?}\n", cfg.seeds));
    m.push_str(&format!("epochs = {}\n", cfg.train.epochs));
    m.push_str("\n[config]\n");
    m.push_str(&cfg.to_toml());
    m
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub results: PathBuf,
    pub tradeoff: PathBuf,
    pub manifest: PathBuf,
}

/// Runs the sweep and writes the results table, trade-off table and manifest
/// into `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&ResultRow)) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.dataset == Dataset::Mnist {
        mnist::MnistFiles::in_dir(&cfg.mnist.dir).check()?;
    }
    let rows = run_rows(cfg, progress)?;
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = RunOutput {
        rows,
        results: dir.join(RESULTS_FILE),
        tradeoff: dir.join(TRADEOFF_FILE),
        manifest: dir.join(MANIFEST_FILE),
    };
    let create = |p: &Path| fs::File::create(p).map_err(|e| Error::io(p, e));
    write_results(&out.rows, create(&out.results)?)?;
    emit_tradeoff_table(&out.rows, create(&out.tradeoff)?)?;
    fs::write(&out.manifest, manifest(cfg, &out.rows)).map_err(|e| Error::io(&out.manifest, e))?;
    Ok(out)
}

/// Loads `path` and runs it.
pub fn run_experiment_file(path: &Path, progress: &mut dyn FnMut(&ResultRow)) -> Result<RunOutput> {
    run_experiment(&ExperimentConfig::load(path)?, progress)
}
