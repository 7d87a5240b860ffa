use serde::Serialize;

use crate::model::M3Model;
use crate::tensor::{Real, Tensor};

use super::TrainError;

/// In-memory segments: one `height x width` main feature per sample plus
/// optional flat gating features and both label sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub height: usize,
    pub width: usize,
    pub x: Vec<f32>,
    pub gate_main_dim: usize,
    pub gate_main: Vec<f32>,
    pub gate_aux_dim: usize,
    pub gate_aux: Vec<f32>,
    pub y_main: Vec<usize>,
    pub y_aux: Vec<usize>,
}

/// Model-ready tensors for a subset of a [`SampleSet`].
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub s_main: Option<Tensor<T>>,
    pub s_aux: Option<Tensor<T>>,
    pub y_main: Vec<usize>,
    pub y_aux: Vec<usize>,
}

impl SampleSet {
    pub fn new(height: usize, width: usize, gate_main_dim: usize, gate_aux_dim: usize) -> Self {
        SampleSet {
            height,
            width,
            gate_main_dim,
            gate_aux_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.y_main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_main.is_empty()
    }

    pub fn push(
        &mut self,
        x: &[f32],
        gate_main: &[f32],
        gate_aux: &[f32],
        y_main: usize,
        y_aux: usize,
    ) -> Result<(), TrainError> {
        if x.len() != self.height * self.width
            || gate_main.len() != self.gate_main_dim
            || gate_aux.len() != self.gate_aux_dim
        {
            return Err(TrainError::Data(format!(
                "sample dims ({}, {}, {}) do not match set dims ({}x{}, {}, {})",
                x.len(),
                gate_main.len(),
                gate_aux.len(),
                self.height,
                self.width,
                self.gate_main_dim,
                self.gate_aux_dim
            )));
        }
        self.x.extend_from_slice(x);
        self.gate_main.extend_from_slice(gate_main);
        self.gate_aux.extend_from_slice(gate_aux);
        self.y_main.push(y_main);
        self.y_aux.push(y_aux);
        Ok(())
    }

    /// Checks that all buffers agree with the sample count.
    pub fn validate(&self) -> Result<(), TrainError> {
        let n = self.len();
        let ok = self.y_aux.len() == n
            && self.x.len() == n * self.height * self.width
            && self.gate_main.len() == n * self.gate_main_dim
            && self.gate_aux.len() == n * self.gate_aux_dim;
        if !ok {
            return Err(TrainError::Data("sample buffers disagree on the sample count".into()));
        }
        if self
            .x
            .iter()
            .chain(&self.gate_main)
            .chain(&self.gate_aux)
            .any(|v| !v.is_finite())
        {
            return Err(TrainError::NonFinite("sample features".into()));
        }
        Ok(())
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.x[i * hw..(i + 1) * hw]
    }

    pub fn batch<T: Real>(&self, idx: &[usize]) -> Batch<T> {
        let gather = |data: &[f32], dim: usize| -> Option<Tensor<T>> {
            if dim == 0 {
                return None;
            }
            let v = idx
                .iter()
                .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().map(|&v| T::cast(v as f64)))
                .collect();
            Some(Tensor::from_vec(&[idx.len(), dim], v).expect("length matches"))
        };
        let x = gather(&self.x, self.height * self.width)
            .expect("non-empty feature")
            .reshape(&[idx.len(), 1, self.height, self.width])
            .expect("length matches");
        Batch {
            x,
            s_main: gather(&self.gate_main, self.gate_main_dim),
            s_aux: gather(&self.gate_aux, self.gate_aux_dim),
            y_main: idx.iter().map(|&i| self.y_main[i]).collect(),
            y_aux: idx.iter().map(|&i| self.y_aux[i]).collect(),
        }
    }
}

/// Confusion counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<(), TrainError> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(TrainError::Data(format!(
                "class index ({truth}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    /// Percentage of correct predictions, `100 * correct / total`.
    pub fn accuracy(&self) -> Result<f64, TrainError> {
        match self.total() {
            0 => Err(TrainError::Data("accuracy of an empty split".into())),
            t => Ok(100.0 * self.correct() as f64 / t as f64),
        }
    }

    /// `true\pred` header row, then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.classes {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&i.to_string());
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub main: Confusion,
    pub aux: Option<Confusion>,
}

impl Evaluation {
    pub fn main_accuracy(&self) -> f64 {
        self.main.accuracy().unwrap_or(0.0)
    }

    pub fn aux_accuracy(&self) -> Option<f64> {
        self.aux.as_ref().and_then(|c| c.accuracy().ok())
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frozen-model accuracy over a whole split, in batches of `batch_size`.
pub fn evaluate<T: Real>(model: &M3Model<T>, set: &SampleSet, batch_size: usize) -> Result<Evaluation, TrainError> {
    if set.is_empty() {
        return Err(TrainError::Data("cannot evaluate an empty split".into()));
    }
    set.validate()?;
    let cfg = model.config();
    let mut main = Confusion::new(cfg.main_classes);
    let mut aux = cfg.has_aux().then(|| Confusion::new(cfg.aux_classes));
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = set.batch::<T>(chunk);
        let out = model.infer(&b.x, b.s_main.as_ref(), b.s_aux.as_ref())?;
        for (row, &y) in out.main.data().chunks(cfg.main_classes).zip(&b.y_main) {
            main.add(y, argmax(row))?;
        }
        if let (Some(conf), Some(z)) = (aux.as_mut(), out.aux.as_ref()) {
            for (row, &y) in z.data().chunks(cfg.aux_classes).zip(&b.y_aux) {
                conf.add(y, argmax(row))?;
            }
        }
    }
    Ok(Evaluation { main, aux })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let mut c = Confusion::new(3);
        for k in 0..3 {
            for _ in 0..4 {
                c.add(k, k).unwrap();
            }
        }
        assert_eq!(c.accuracy().unwrap(), 100.0);
        let mut c = Confusion::new(4);
        for k in 0..4 {
            for _ in 0..5 {
                c.add(k, 2).unwrap();
            }
        }
        assert_eq!(c.accuracy().unwrap(), 25.0);
    }

    #[test]
    fn hand_built_fixture() {
        // 7 correct of 10
        let counts = vec![vec![3, 1, 0], vec![0, 2, 1], vec![1, 0, 2]];
        let c = Confusion { classes: 3, counts };
        assert_eq!((c.correct(), c.total()), (7, 10));
        assert_eq!(c.accuracy().unwrap(), 70.0);
        assert_eq!(c.to_csv(), "true\\pred,0,1,2\n0,3,1,0\n1,0,2,1\n2,1,0,2\n");
        assert!(Confusion::new(3).accuracy().is_err());
        assert!(Confusion::new(3).add(3, 0).is_err());
    }

    #[test]
    fn batches_gather_rows() {
        let mut s = SampleSet::new(1, 2, 1, 0);
        s.push(&[1.0, 2.0], &[9.0], &[], 0, 1).unwrap();
        s.push(&[3.0, 4.0], &[8.0], &[], 2, 3).unwrap();
        assert!(s.push(&[1.0], &[9.0], &[], 0, 0).is_err());
        let b = s.batch::<f64>(&[1, 0]);
        assert_eq!(b.x.shape(), &[2, 1, 1, 2]);
        assert_eq!(b.x.data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(b.s_main.unwrap().data(), &[8.0, 9.0]);
        assert!(b.s_aux.is_none());
        assert_eq!((b.y_main, b.y_aux), (vec![2, 0], vec![3, 1]));
    }
}
