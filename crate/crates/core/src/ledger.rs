//! Bit accounting for inference and training traffic.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SplitTopology;
use crate::protocol::{Direction, ProtocolTrace};

/// Wire width of an unquantized value.
pub const FLOAT_WIRE_BITS: u32 = 32;

/// Bit depth of one raw MNIST pixel.
pub const MNIST_PIXEL_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Inference,
    Training,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub phase: Phase,
    pub direction: Direction,
    pub node: usize,
    pub values: u64,
    pub bits_per_value: u32,
    pub total_bits: u64,
}

/// Append-only log of transmissions.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, phase: Phase, direction: Direction, node: usize, values: u64, bits_per_value: u32) {
        self.entries.push(LedgerEntry {
            phase,
            direction,
            node,
            values,
            bits_per_value,
            total_bits: values * bits_per_value as u64,
        });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.total_bits).sum()
    }

    pub fn bits(&self, phase: Phase, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.phase == phase && e.direction == direction)
            .map(|e| e.total_bits)
            .sum()
    }

    /// Bills `samples` inferences: one uplink code per node per sample.
    pub fn record_inference(&mut self, topology: &SplitTopology, samples: u64) {
        let bits = topology.quantizer.map_or(FLOAT_WIRE_BITS, |q| q.bits);
        for (node, dim) in topology.code_dims().into_iter().enumerate() {
            self.append(Phase::Inference, Direction::Uplink, node, dim as u64 * samples, bits);
        }
    }

    /// Bills every message of a validated training trace.
    pub fn record_trace(&mut self, trace: &ProtocolTrace) -> Result<()> {
        trace.validate()?;
        for m in trace.messages() {
            self.append(Phase::Training, m.direction, m.node, m.value_count(), m.bits_per_value);
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io("<ledger>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceBits {
    pub per_node: Vec<u64>,
    pub total: u64,
}

/// Bits each node sends for one inference.
pub fn bits_per_inference(topology: &SplitTopology) -> InferenceBits {
    let width = topology.quantizer.map_or(FLOAT_WIRE_BITS, |q| q.bits) as u64;
    let per_node: Vec<u64> = topology.code_dims().into_iter().map(|c| c as u64 * width).collect();
    let total = per_node.iter().sum();
    InferenceBits { per_node, total }
}

/// Bits needed to ship the raw features: `Σ d_i × bit_depth`.
pub fn raw_baseline_bits(feature_dims: &[usize], bit_depth: u32) -> u64 {
    feature_dims.iter().map(|&d| d as u64 * bit_depth as u64).sum()
}

/// Fraction of raw-feature traffic avoided: `1 − inference / raw`.
pub fn savings(topology: &SplitTopology, bit_depth: u32) -> f64 {
    let dims: Vec<usize> = (0..topology.node_count()).map(|i| topology.feature_dim(i)).collect();
    let raw = raw_baseline_bits(&dims, bit_depth);
    1.0 - bits_per_inference(topology).total as f64 / raw as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundTraffic {
    pub round: usize,
    pub uplink: u64,
    pub downlink: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingTraffic {
    pub rounds: Vec<RoundTraffic>,
    pub uplink: u64,
    pub downlink: u64,
}

impl TrainingTraffic {
    pub fn total(&self) -> u64 {
        self.uplink + self.downlink
    }
}

/// Uplink and downlink bits per round and in total.
pub fn training_traffic(trace: &ProtocolTrace) -> Result<TrainingTraffic> {
    trace.validate()?;
    let mut out = TrainingTraffic::default();
    for round in trace.rounds() {
        let mut r = RoundTraffic { round: round[0].round, ..Default::default() };
        for m in round {
            match m.direction {
                Direction::Uplink => r.uplink += m.bits(),
                Direction::Downlink => r.downlink += m.bits(),
            }
        }
        out.uplink += r.uplink;
        out.downlink += r.downlink;
        out.rounds.push(r);
    }
    Ok(out)
}
