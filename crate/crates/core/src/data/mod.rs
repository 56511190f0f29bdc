//! Datasets split across nodes.

pub mod mnist;
pub mod series;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples whose features are partitioned by node: `inputs[i]` holds node
/// `i`'s features for every sample along the leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> SplitDataset<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Invalid("dataset has no nodes".into()));
        }
        for (i, x) in inputs.iter().enumerate() {
            if x.rank() == 0 || x.shape()[0] != labels.len() {
                return Err(Error::Shape(format!(
                    "node {i} holds {:?} for {} labels",
                    x.shape(),
                    labels.len()
                )));
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.inputs.len()
    }

    /// Per-sample feature shape of node `i`.
    pub fn sample_shape(&self, node: usize) -> &[usize] {
        &self.inputs[node].shape()[1..]
    }

    pub fn batch(&self, index: &[usize]) -> Batch<T> {
        Batch {
            inputs: self.inputs.iter().map(|x| x.gather_rows(index)).collect(),
            labels: index.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Samples `[start, start + count)`, clamped to the dataset.
    pub fn slice(&self, start: usize, count: usize) -> Batch<T> {
        let start = start.min(self.len());
        let count = count.min(self.len() - start);
        Batch {
            inputs: self.inputs.iter().map(|x| x.rows(start, count)).collect(),
            labels: self.labels[start..start + count].to_vec(),
        }
    }

    /// The first `count` samples.
    pub fn head(&self, count: usize) -> Self {
        let b = self.slice(0, count);
        Self { inputs: b.inputs, labels: b.labels }
    }

    /// Only the listed nodes, in the given order.
    pub fn select_nodes(&self, nodes: &[usize]) -> Self {
        Self { inputs: nodes.iter().map(|&i| self.inputs[i].clone()).collect(), labels: self.labels.clone() }
    }

    pub fn cast<U: Scalar>(&self) -> SplitDataset<U> {
        SplitDataset { inputs: self.inputs.iter().map(Tensor::cast).collect(), labels: self.labels.clone() }
    }
}

/// Train and evaluation partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData<T> {
    pub train: SplitDataset<T>,
    pub eval: SplitDataset<T>,
}

impl<T: Scalar> SplitData<T> {
    pub fn cast<U: Scalar>(&self) -> SplitData<U> {
        SplitData { train: self.train.cast(), eval: self.eval.cast() }
    }

    pub fn select_nodes(&self, nodes: &[usize]) -> Self {
        Self { train: self.train.select_nodes(nodes), eval: self.eval.select_nodes(nodes) }
    }
}
