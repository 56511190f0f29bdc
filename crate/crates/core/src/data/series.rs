//! Seeded synthetic multi-node time series.
//!
//! A slow shared latent process `z_t` (unit-variance AR(1)) is observed by
//! every node through its own gain, offset and noise. The label of a window
//! is the quantile bin of `z` at the window's last step, so an accurate
//! label needs the evidence of several nodes combined.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SplitData, SplitDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WINDOW: usize = 50;
pub const CLASSES: usize = 20;
pub const NODES: usize = 4;

/// Length of the latent run used to place the quantile bin edges.
pub const CALIBRATION_LEN: usize = 100_000;

/// Train windows per eval window.
pub const TRAIN_EVAL_RATIO: usize = 5;

const LATENT_STREAM: u64 = 1;
const NODE_STREAM_BASE: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeriesConfig {
    pub seed: u64,
    /// Time steps generated.
    pub length: usize,
    pub nodes: usize,
    pub classes: usize,
    pub window: usize,
    /// AR(1) coefficient of the latent.
    pub persistence: f64,
    /// Standard deviation of each node's observation noise.
    pub noise: f64,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            length: 6_000,
            nodes: NODES,
            classes: CLASSES,
            window: WINDOW,
            persistence: 0.98,
            noise: 0.2,
        }
    }
}

impl SeriesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.classes < 2 || self.window == 0 {
            return Err(Error::Config("series needs nodes ≥ 1, classes ≥ 2 and window ≥ 1".into()));
        }
        let min = 2 * self.window + TRAIN_EVAL_RATIO;
        if self.length < min {
            return Err(Error::Config(format!(
                "length {} leaves no evaluation windows; need at least {min}",
                self.length
            )));
        }
        if !(0.0..1.0).contains(&self.persistence) || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config("persistence must lie in [0, 1) and noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-node windows ending at the same step, with the label of that step.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    pub start: usize,
    pub parts: Vec<Vec<f64>>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStream {
    pub latent: Vec<f64>,
    /// `channels[i][t]`: node `i` at step `t`.
    pub channels: Vec<Vec<f64>>,
    /// Label of every step.
    pub labels: Vec<usize>,
    /// Interior bin edges, ascending (`classes - 1` of them).
    pub edges: Vec<f64>,
    pub window: usize,
}

fn latent_process(seed: u64, persistence: f64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LATENT_STREAM);
    let innovation = (1.0 - persistence * persistence).sqrt();
    let mut z: f64 = rng.sample(StandardNormal);
    (0..len)
        .map(|t| {
            if t > 0 {
                let e: f64 = rng.sample(StandardNormal);
                z = persistence * z + innovation * e;
            }
            z
        })
        .collect()
}

/// Quantile edges of the latent from the calibration run for `cfg.seed`.
pub fn calibrate(cfg: &SeriesConfig) -> Vec<f64> {
    let mut z = latent_process(cfg.seed, cfg.persistence, CALIBRATION_LEN);
    z.sort_by(f64::total_cmp);
    (1..cfg.classes).map(|k| z[k * z.len() / cfg.classes]).collect()
}

/// Bin of `z` given ascending interior edges.
pub fn bin_of(edges: &[f64], z: f64) -> usize {
    edges.partition_point(|&e| e <= z)
}

pub fn gen_synthetic_series(cfg: &SeriesConfig) -> Result<SeriesStream> {
    cfg.validate()?;
    let edges = calibrate(cfg);
    let latent = latent_process(cfg.seed, cfg.persistence, cfg.length);
    let channels = (0..cfg.nodes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(NODE_STREAM_BASE + i as u64);
            let gain = rng.gen_range(0.7..1.3);
            let offset = rng.gen_range(-0.5..0.5);
            latent
                .iter()
                .map(|&z| {
                    let e: f64 = rng.sample(StandardNormal);
                    gain * z + offset + cfg.noise * e
                })
                .collect()
        })
        .collect();
    let labels = latent.iter().map(|&z| bin_of(&edges, z)).collect();
    Ok(SeriesStream { latent, channels, labels, edges, window: cfg.window })
}

/// How windows are laid out as node inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesLayout {
    /// One node per channel, each `[n, window, 1]`.
    PerNode,
    /// A single node holding every channel, `[n, window, nodes]`.
    Joint,
}

impl SeriesStream {
    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.channels.len()
    }

    /// Windows with stride one.
    pub fn window_count(&self) -> usize {
        self.len() + 1 - self.window
    }

    /// Window covering steps `[start, start + window)`.
    pub fn window(&self, start: usize) -> SeriesWindow {
        let r = start..start + self.window;
        SeriesWindow {
            start,
            parts: self.channels.iter().map(|c| c[r.clone()].to_vec()).collect(),
            label: self.labels[r.end - 1],
        }
    }

    /// Window start ranges for training and evaluation: chronological,
    /// `TRAIN_EVAL_RATIO : 1`, with a gap so no time step is shared.
    pub fn split_ranges(&self) -> (Range<usize>, Range<usize>) {
        let n = self.window_count();
        let gap = self.window - 1;
        let train_end = n.saturating_sub(gap) * TRAIN_EVAL_RATIO / (TRAIN_EVAL_RATIO + 1);
        let eval_start = (train_end + gap).min(n);
        (0..train_end, eval_start..n)
    }

    pub fn dataset<T: Scalar>(&self, starts: Range<usize>, layout: SeriesLayout) -> SplitDataset<T> {
        let n = starts.len();
        let w = self.window;
        let labels = starts.clone().map(|s| self.labels[s + w - 1]).collect();
        let inputs = match layout {
            SeriesLayout::PerNode => self
                .channels
                .iter()
                .map(|c| {
                    let data = starts.clone().flat_map(|s| c[s..s + w].iter().map(|&v| T::lit(v))).collect();
                    Tensor::new(vec![n, w, 1], data).expect("window shape")
                })
                .collect(),
            SeriesLayout::Joint => {
                let k = self.node_count();
                let mut data = Vec::with_capacity(n * w * k);
                for s in starts {
                    for t in s..s + w {
                        data.extend(self.channels.iter().map(|c| T::lit(c[t])));
                    }
                }
                vec![Tensor::new(vec![n, w, k], data).expect("window shape")]
            }
        };
        SplitDataset::new(inputs, labels).expect("aligned windows")
    }

    pub fn split_data<T: Scalar>(&self, layout: SeriesLayout) -> SplitData<T> {
        let (train, eval) = self.split_ranges();
        SplitData { train: self.dataset(train, layout), eval: self.dataset(eval, layout) }
    }

    /// One row per time step: `time, node0, ..., label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((0..self.node_count()).map(|i| format!("node{i}")));
        header.push("label".into());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.channels.iter().map(|c| c[t].to_string()));
            row.push(self.labels[t].to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<series>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let cfg = SeriesConfig { length: 500, ..SeriesConfig::default() };
        assert_eq!(gen_synthetic_series(&cfg).unwrap(), gen_synthetic_series(&cfg).unwrap());
        let other = SeriesConfig { seed: 1, ..cfg.clone() };
        assert_ne!(gen_synthetic_series(&cfg).unwrap().channels, gen_synthetic_series(&other).unwrap().channels);
    }

    #[test]
    fn latent_is_a_prefix_of_the_calibration_run() {
        let cfg = SeriesConfig { length: 300, seed: 4, ..SeriesConfig::default() };
        let s = gen_synthetic_series(&cfg).unwrap();
        assert_eq!(s.latent, latent_process(4, cfg.persistence, CALIBRATION_LEN)[..300].to_vec());
        assert_eq!(s.edges.len(), CLASSES - 1);
        assert!(s.edges.windows(2).all(|e| e[0] < e[1]));
    }

    #[test]
    fn labels_are_a_function_of_the_latent() {
        let s = gen_synthetic_series(&SeriesConfig { length: 2000, ..SeriesConfig::default() }).unwrap();
        for (z, &y) in s.latent.iter().zip(&s.labels) {
            assert_eq!(bin_of(&s.edges, *z), y);
            assert!(y < CLASSES);
        }
        assert_eq!(bin_of(&[0.0, 1.0], -5.0), 0);
        assert_eq!(bin_of(&[0.0, 1.0], 0.5), 1);
        assert_eq!(bin_of(&[0.0, 1.0], 9.0), 2);
    }

    #[test]
    fn windows_are_time_aligned() {
        let s = gen_synthetic_series(&SeriesConfig { length: 200, ..SeriesConfig::default() }).unwrap();
        assert_eq!(s.window_count(), 151);
        for t in [0, 17, 150] {
            let w = s.window(t);
            for (i, part) in w.parts.iter().enumerate() {
                assert_eq!(part.len(), WINDOW);
                assert_eq!(part.as_slice(), &s.channels[i][t..t + WINDOW]);
            }
            assert_eq!(w.label, s.labels[t + WINDOW - 1]);
        }
        let ds = s.dataset::<f64>(10..12, SeriesLayout::PerNode);
        assert_eq!(ds.inputs[2].shape(), &[2, 50, 1]);
        assert_eq!(ds.inputs[2].data()[50], s.channels[2][11]);
        let joint = s.dataset::<f64>(10..12, SeriesLayout::Joint);
        assert_eq!(joint.inputs[0].shape(), &[2, 50, 4]);
        assert_eq!(joint.inputs[0].data()[4 * 3 + 1], s.channels[1][13]);
    }

    #[test]
    fn split_is_five_to_one_without_overlap() {
        let s = gen_synthetic_series(&SeriesConfig { length: 1249, ..SeriesConfig::default() }).unwrap();
        let (train, eval) = s.split_ranges();
        assert_eq!(s.window_count(), 1200);
        assert_eq!((train.len(), eval.len()), (959, 192));
        assert_eq!(eval.start, train.end + WINDOW - 1);
        assert!(train.len().abs_diff(5 * eval.len()) <= 5);
    }

    #[test]
    fn rejects_short_streams() {
        assert!(gen_synthetic_series(&SeriesConfig { length: 10, ..SeriesConfig::default() }).is_err());
        assert!(gen_synthetic_series(&SeriesConfig { length: 104, ..SeriesConfig::default() }).is_err());
        let s = gen_synthetic_series(&SeriesConfig { length: 105, ..SeriesConfig::default() }).unwrap();
        let (train, eval) = s.split_ranges();
        assert!(!train.is_empty() && !eval.is_empty());
    }

    /// χ² against uniform on steps thinned far beyond the latent's memory.
    #[test]
    fn labels_are_roughly_uniform() {
        let cfg = SeriesConfig { seed: 11, length: 400_000, nodes: 1, ..SeriesConfig::default() };
        let s = gen_synthetic_series(&cfg).unwrap();
        let mut counts = [0usize; CLASSES];
        let thin = 400;
        for t in (0..s.len()).step_by(thin) {
            counts[s.labels[t]] += 1;
        }
        let n: usize = counts.iter().sum();
        let expected = n as f64 / CLASSES as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of χ² with 19 degrees of freedom.
        assert!(chi2 < 43.82, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let s = gen_synthetic_series(&SeriesConfig { length: 120, ..SeriesConfig::default() }).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,node0,node1,node2,node3,label\n"));
        assert_eq!(text.lines().count(), 121);
    }
}
