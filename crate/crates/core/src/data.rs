use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One task's samples, already shaped for the models: `[N, T, D]` features
/// (time-varying channels followed by the repeated statics), binary labels,
/// and the patient and cohort row each sample came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub timesteps: usize,
    pub features: usize,
    pub x: Vec<f64>,
    pub labels: Vec<u8>,
    pub patient_ids: Vec<i64>,
    /// Row of each sample in the originating cohort.
    pub source_indices: Vec<usize>,
}

impl TaskDataset {
    pub fn new(
        name: impl Into<String>,
        timesteps: usize,
        features: usize,
        x: Vec<f64>,
        labels: Vec<u8>,
        patient_ids: Vec<i64>,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if x.len() != n * timesteps * features || patient_ids.len() != n || source_indices.len() != n {
            return Err(Error::Data(format!(
                "task arrays disagree: {} features for {n} samples of [{timesteps}, {features}], {} patient ids, {} source rows",
                x.len(),
                patient_ids.len(),
                source_indices.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Data(format!("label {bad} is not binary")));
        }
        Ok(Self {
            name: name.into(),
            timesteps,
            features,
            x,
            labels,
            patient_ids,
            source_indices,
        })
    }

    pub fn empty_like(&self, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            timesteps: self.timesteps,
            features: self.features,
            x: Vec::new(),
            labels: Vec::new(),
            patient_ids: Vec::new(),
            source_indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_width(&self) -> usize {
        self.timesteps * self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.sample_width();
        &self.x[i * w..(i + 1) * w]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let w = self.sample_width();
        let mut x = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            x.extend_from_slice(self.sample(i));
        }
        Self {
            name: self.name.clone(),
            timesteps: self.timesteps,
            features: self.features,
            x,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            patient_ids: indices.iter().map(|&i| self.patient_ids[i]).collect(),
            source_indices: indices.iter().map(|&i| self.source_indices[i]).collect(),
        }
    }

    /// Appends `other`'s samples after this dataset's.
    pub fn extend(&mut self, other: &TaskDataset) -> Result<()> {
        if other.timesteps != self.timesteps || other.features != self.features {
            return Err(Error::Data(format!(
                "cannot concatenate [{}, {}] samples onto [{}, {}]",
                other.timesteps, other.features, self.timesteps, self.features
            )));
        }
        self.x.extend_from_slice(&other.x);
        self.labels.extend_from_slice(&other.labels);
        self.patient_ids.extend_from_slice(&other.patient_ids);
        self.source_indices.extend_from_slice(&other.source_indices);
        Ok(())
    }

    /// Concatenation of `parts` in order.
    pub fn concat<'a>(name: &str, parts: impl IntoIterator<Item = &'a TaskDataset>) -> Result<Option<Self>> {
        let mut out: Option<TaskDataset> = None;
        for p in parts {
            match out.as_mut() {
                None => {
                    let mut first = p.clone();
                    first.name = name.to_string();
                    out = Some(first);
                }
                Some(acc) => acc.extend(p)?,
            }
        }
        Ok(out)
    }

    /// Feature tensor `[B, T, D]` and labels for the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let w = self.sample_width();
        let mut x = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            x.extend_from_slice(self.sample(i));
        }
        let t = Tensor::new(vec![indices.len(), self.timesteps, self.features], x)?;
        Ok((t, indices.iter().map(|&i| usize::from(self.labels[i])).collect()))
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TaskDataset {
        TaskDataset::new(
            "a",
            2,
            1,
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![0, 1, 0],
            vec![10, 11, 12],
            vec![5, 6, 7],
        )
        .unwrap()
    }

    #[test]
    fn subset_and_batch() {
        let d = toy();
        let s = d.subset(&[2, 0]);
        assert_eq!(s.x, vec![4.0, 5.0, 0.0, 1.0]);
        assert_eq!(s.source_indices, vec![7, 5]);
        let (t, y) = d.batch(&[1]).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1]);
        assert_eq!(y, vec![1]);
    }

    #[test]
    fn rejects_inconsistent_arrays() {
        assert!(TaskDataset::new("a", 2, 1, vec![0.0; 5], vec![0, 1, 0], vec![1, 2, 3], vec![0, 1, 2]).is_err());
        assert!(TaskDataset::new("a", 1, 1, vec![0.0], vec![2], vec![1], vec![0]).is_err());
    }
}
