//! Messages exchanged during one distributed training round.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Node to aggregator.
    Uplink,
    /// Aggregator to node.
    Downlink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Payload {
    Code,
    DownstreamGradient,
}

/// One transmitted message. `node` is the sender on the uplink and the
/// recipient on the downlink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub direction: Direction,
    pub node: usize,
    pub role: Payload,
    pub dims: Vec<usize>,
    pub bits_per_value: u32,
}

impl Message {
    pub fn value_count(&self) -> u64 {
        self.dims.iter().product::<usize>() as u64
    }

    pub fn bits(&self) -> u64 {
        self.value_count() * self.bits_per_value as u64
    }
}

#[derive(Debug, Clone, Serialize)]
struct Record<'a> {
    round: usize,
    direction: Direction,
    node: usize,
    role: Payload,
    dims: &'a str,
    values: u64,
    bits: u64,
}

/// Ordered record of every message sent while training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProtocolTrace {
    nodes: usize,
    messages: Vec<Message>,
}

impl ProtocolTrace {
    pub fn new(nodes: usize) -> Self {
        Self { nodes, messages: Vec::new() }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn extend(&mut self, other: ProtocolTrace) {
        self.messages.extend(other.messages);
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Messages grouped by round, in order.
    pub fn rounds(&self) -> Vec<&[Message]> {
        self.messages.chunk_by(|a, b| a.round == b.round).collect()
    }

    /// Checks that every round carries exactly one code from each node
    /// followed by exactly one gradient back to each node, of matching size.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes;
        let mut last_round = None;
        for round in self.rounds() {
            let r = round[0].round;
            if last_round.is_some_and(|p| r <= p) {
                return Err(Error::Protocol(format!("round {r} out of order")));
            }
            last_round = Some(r);
            if round.len() != 2 * n {
                return Err(Error::Protocol(format!(
                    "round {r} has {} messages, expected {}",
                    round.len(),
                    2 * n
                )));
            }
            let (up, down) = round.split_at(n);
            let mut sent: Vec<Option<&Message>> = vec![None; n];
            for m in up {
                if m.direction != Direction::Uplink || m.role != Payload::Code {
                    return Err(Error::Protocol(format!(
                        "round {r}: expected uplink codes first, found {:?} {:?} for node {}",
                        m.direction, m.role, m.node
                    )));
                }
                let slot = sent
                    .get_mut(m.node)
                    .ok_or_else(|| Error::Protocol(format!("round {r}: unknown node {}", m.node)))?;
                if slot.replace(m).is_some() {
                    return Err(Error::Protocol(format!("round {r}: node {} sent twice", m.node)));
                }
            }
            let mut answered = vec![false; n];
            for m in down {
                if m.direction != Direction::Downlink || m.role != Payload::DownstreamGradient {
                    return Err(Error::Protocol(format!(
                        "round {r}: expected downlink gradients, found {:?} {:?} for node {}",
                        m.direction, m.role, m.node
                    )));
                }
                let code = sent
                    .get(m.node)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Protocol(format!("round {r}: gradient for node {} without a code", m.node)))?;
                if std::mem::replace(&mut answered[m.node], true) {
                    return Err(Error::Protocol(format!("round {r}: node {} answered twice", m.node)));
                }
                if code.dims != m.dims {
                    return Err(Error::Protocol(format!(
                        "round {r}: node {} code {:?} but gradient {:?}",
                        m.node, code.dims, m.dims
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for m in &self.messages {
            let dims = m.dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            w.serialize(Record {
                round: m.round,
                direction: m.direction,
                node: m.node,
                role: m.role,
                dims: &dims,
                values: m.value_count(),
                bits: m.bits(),
            })?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}
