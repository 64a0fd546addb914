use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Samples sharing one private class.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    /// Batched samples, leading dimension is the sample.
    pub samples: Tensor,
    pub private_class: usize,
}

impl SampleGroup {
    pub fn new(samples: Tensor, private_class: usize) -> Result<Self> {
        if samples.shape().len() < 2 {
            return Err(Error::shape("sample group", &[1, 1], samples.shape()));
        }
        Ok(SampleGroup { samples, private_class })
    }

    pub fn len(&self) -> usize {
        self.samples.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples with a content (task) label and a private (identity) label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    samples: Tensor,
    content: Vec<usize>,
    private: Vec<usize>,
    content_classes: usize,
    private_classes: usize,
}

impl GroupedDataset {
    /// `samples` is batched; label counts are inferred as `max + 1`.
    pub fn new(samples: Tensor, content: Vec<usize>, private: Vec<usize>) -> Result<Self> {
        let cc = content.iter().max().map_or(0, |m| m + 1);
        let pc = private.iter().max().map_or(0, |m| m + 1);
        Self::with_classes(samples, content, private, cc, pc)
    }

    pub fn with_classes(
        samples: Tensor,
        content: Vec<usize>,
        private: Vec<usize>,
        content_classes: usize,
        private_classes: usize,
    ) -> Result<Self> {
        let n = samples.batch();
        if samples.shape().len() < 2 || content.len() != n || private.len() != n {
            return Err(Error::shape(
                "grouped dataset labels",
                &[n, n],
                &[content.len(), private.len()],
            ));
        }
        if content.iter().any(|&c| c >= content_classes) || private.iter().any(|&p| p >= private_classes) {
            return Err(Error::Config("label outside declared class count".into()));
        }
        Ok(GroupedDataset {
            samples,
            content,
            private,
            content_classes,
            private_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }

    /// Per-sample shape.
    pub fn item_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.item(i)
    }

    pub fn content_labels(&self) -> &[usize] {
        &self.content
    }

    pub fn private_labels(&self) -> &[usize] {
        &self.private
    }

    pub fn content_classes(&self) -> usize {
        self.content_classes
    }

    pub fn private_classes(&self) -> usize {
        self.private_classes
    }

    /// Stacks the chosen samples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Empty("batch indices"));
        }
        let item = self.samples.item_len();
        let mut data = Vec::with_capacity(item * indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.item_shape());
        Tensor::from_vec(&shape, data)
    }

    /// Dataset restricted to `indices`, keeping the class counts.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(GroupedDataset {
            samples: self.batch(indices)?,
            content: indices.iter().map(|&i| self.content[i]).collect(),
            private: indices.iter().map(|&i| self.private[i]).collect(),
            content_classes: self.content_classes,
            private_classes: self.private_classes,
        })
    }

    /// Sample indices keyed by private class.
    pub fn groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &p) in self.private.iter().enumerate() {
            out.entry(p).or_default().push(i);
        }
        out
    }

    /// All samples of one private class.
    pub fn group(&self, private_class: usize) -> Result<SampleGroup> {
        let idx = self.groups().remove(&private_class).ok_or(Error::Empty("sample group"))?;
        SampleGroup::new(self.batch(&idx)?, private_class)
    }

    /// Writes `index,content,private` rows.
    pub fn write_labels_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "index,content,private")?;
        for i in 0..self.len() {
            writeln!(f, "{i},{},{}", self.content[i], self.private[i])?;
        }
        f.flush()?;
        Ok(())
    }
}
