//! Conditioning schemes for the generator: learned label embedding, soft
//! vectors, hot matrices and the vector-matrix combination.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Label,
    Vector,
    Matrix,
    VectorMatrix,
}

impl ConditioningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Label => "label",
            ConditioningMode::Vector => "vector",
            ConditioningMode::Matrix => "matrix",
            ConditioningMode::VectorMatrix => "vector_matrix",
        }
    }

    pub fn uses_matrix(self) -> bool {
        matches!(self, ConditioningMode::Matrix | ConditioningMode::VectorMatrix)
    }

    pub fn uses_vector(self) -> bool {
        matches!(self, ConditioningMode::Vector | ConditioningMode::VectorMatrix)
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(ConditioningMode::Label),
            "vector" => Ok(ConditioningMode::Vector),
            "matrix" => Ok(ConditioningMode::Matrix),
            "vector_matrix" | "vector-matrix" => Ok(ConditioningMode::VectorMatrix),
            _ => Err(Error::Config(format!("unknown conditioning mode `{s}`"))),
        }
    }
}

/// `N x N` binary matrix with row `label` and column `label` set to one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HotMatrix {
    n: usize,
    cells: Vec<u8>,
}

impl HotMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.n + col]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells.chunks(self.n).map(<[u8]>::to_vec).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    /// The unique index whose row is entirely ones.
    pub fn label(&self) -> Option<usize> {
        let full: Vec<usize> = (0..self.n)
            .filter(|&r| (0..self.n).all(|c| self.get(r, c) == 1))
            .collect();
        match full.as_slice() {
            [only] => Some(*only),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.cells.iter().map(|&c| c as f32).collect()
    }
}

pub fn hot_matrix(label: usize, n: usize) -> Result<HotMatrix> {
    if label >= n {
        return Err(Error::Argument(format!("label {label} outside [0, {n})")));
    }
    let mut cells = vec![0u8; n * n];
    for i in 0..n {
        cells[label * n + i] = 1;
        cells[i * n + label] = 1;
    }
    Ok(HotMatrix { n, cells })
}

/// One conditioning sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub mode: ConditioningMode,
    /// Pre-softmax normal draw; absent for hot conditions.
    pub raw: Option<Vec<f64>>,
    /// Target distribution for the KL term.
    pub dist: Vec<f64>,
    /// De facto label: argmax of `dist`, lowest index on ties.
    pub label: usize,
    pub matrix: Option<HotMatrix>,
}

impl Condition {
    pub fn num_classes(&self) -> usize {
        self.dist.len()
    }

    /// Re-targets the condition at another mode, attaching or dropping the
    /// hot matrix as needed.
    pub fn with_mode(mut self, mode: ConditioningMode) -> Self {
        self.matrix = if mode.uses_matrix() {
            Some(hot_matrix(self.label, self.dist.len()).expect("label < N by construction"))
        } else {
            None
        };
        self.mode = mode;
        self
    }
}

pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Soft condition from an explicit raw vector.
pub fn soft_condition(raw: Vec<f64>) -> Result<Condition> {
    if raw.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {}", raw.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("raw conditioning vector must be finite".into()));
    }
    let dist = softmax(&raw);
    let label = argmax(&dist);
    Ok(Condition {
        mode: ConditioningMode::Vector,
        raw: Some(raw),
        dist,
        label,
        matrix: None,
    })
}

pub fn sample_soft_conditions(count: usize, n: usize, seed: u64) -> Result<Vec<Condition>> {
    ConditionSampler::new(n, seed, false)?.sample(count)
}

pub fn hot_condition(label: usize, n: usize) -> Result<Condition> {
    if label >= n {
        return Err(Error::Argument(format!("label {label} outside [0, {n})")));
    }
    let mut dist = vec![0.0; n];
    dist[label] = 1.0;
    Ok(Condition {
        mode: ConditioningMode::Vector,
        raw: None,
        dist,
        label,
        matrix: None,
    })
}

/// Seeded stream of conditions. Soft streams draw `raw ~ N(0, I)`; hot
/// streams draw labels uniformly.
#[derive(Debug, Clone)]
pub struct ConditionSampler {
    n: usize,
    hot: bool,
    mode: ConditioningMode,
    rng: ChaCha8Rng,
}

impl ConditionSampler {
    pub fn new(n: usize, seed: u64, hot: bool) -> Result<Self> {
        if n < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {n}")));
        }
        Ok(Self {
            n,
            hot,
            mode: ConditioningMode::Vector,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_mode(mut self, mode: ConditioningMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn sample(&mut self, count: usize) -> Result<Vec<Condition>> {
        if count == 0 {
            return Err(Error::Argument("condition count must be positive".into()));
        }
        (0..count)
            .map(|_| {
                let c = if self.hot {
                    hot_condition(self.rng.random_range(0..self.n), self.n)?
                } else {
                    let raw = (0..self.n).map(|_| self.rng.sample(StandardNormal)).collect();
                    soft_condition(raw)?
                };
                Ok(c.with_mode(self.mode))
            })
            .collect()
    }
}

/// Batched tensors for a list of conditions sharing one mode.
pub struct ConditionBatch {
    pub mode: ConditioningMode,
    /// `(B, N)` target distributions.
    pub dist: Tensor,
    /// `(B,)` de facto labels.
    pub labels: Tensor,
    /// `(B, 1, N, N)` hot matrices for matrix modes.
    pub matrix: Option<Tensor>,
}

impl ConditionBatch {
    pub fn new(conds: &[Condition]) -> Result<Self> {
        let first = conds
            .first()
            .ok_or_else(|| Error::Argument("empty condition batch".into()))?;
        let (mode, n) = (first.mode, first.num_classes());
        if conds.iter().any(|c| c.mode != mode || c.num_classes() != n) {
            return Err(Error::Argument("conditions in a batch must share mode and class count".into()));
        }
        let b = conds.len() as i64;
        let dist: Vec<f32> = conds.iter().flat_map(|c| c.dist.iter().map(|&v| v as f32)).collect();
        let labels: Vec<i64> = conds.iter().map(|c| c.label as i64).collect();
        let matrix = if mode.uses_matrix() {
            let cells = conds
                .iter()
                .map(|c| {
                    c.matrix
                        .as_ref()
                        .map(HotMatrix::as_f32)
                        .ok_or_else(|| Error::Argument("matrix mode condition without matrix".into()))
                })
                .collect::<Result<Vec<_>>>()?
                .concat();
            Some(Tensor::from_slice(&cells).view([b, 1, n as i64, n as i64]))
        } else {
            None
        };
        Ok(Self {
            mode,
            dist: Tensor::from_slice(&dist).view([b, n as i64]),
            labels: Tensor::from_slice(&labels).to_kind(Kind::Int64),
            matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hot_matrix_examples() {
        assert_eq!(
            hot_matrix(1, 3).unwrap().rows(),
            vec![vec![0, 1, 0], vec![1, 1, 1], vec![0, 1, 0]]
        );
        assert_eq!(hot_matrix(0, 2).unwrap().rows(), vec![vec![1, 1], vec![1, 0]]);
        assert!(matches!(hot_matrix(3, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn forced_raw_vector() {
        let c = soft_condition(vec![2.0, 0.0, 0.0]).unwrap();
        let e2 = 2f64.exp();
        let expected = [e2 / (e2 + 2.0), 1.0 / (e2 + 2.0), 1.0 / (e2 + 2.0)];
        for (a, b) in c.dist.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((c.dist[0] - 0.7870).abs() < 1e-4 && (c.dist[1] - 0.1065).abs() < 1e-4);
        assert_eq!(c.label, 0);
    }

    #[test]
    fn hot_condition_is_one_hot() {
        let c = hot_condition(1, 3).unwrap();
        assert_eq!(c.dist, vec![0.0, 1.0, 0.0]);
        assert_eq!(c.label, 1);
        assert!(c.raw.is_none());
        assert_eq!(hot_condition(0, 10).unwrap().dist[0], 1.0);
        assert!(hot_condition(10, 10).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        let c = soft_condition(vec![1.0, 1.0]).unwrap();
        assert_eq!(c.label, 0);
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_soft_conditions(5, 10, 42).unwrap();
        let b = sample_soft_conditions(5, 10, 42).unwrap();
        let c = sample_soft_conditions(5, 10, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(sample_soft_conditions(1, 1, 0).is_err());
    }

    #[test]
    fn soft_vector_payload_never_reveals_a_one_hot() {
        for c in sample_soft_conditions(200, 10, 5).unwrap() {
            assert!(c.matrix.is_none());
            assert!(c.dist.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn batch_tensors() {
        let mut s = ConditionSampler::new(4, 1, false).unwrap().with_mode(ConditioningMode::VectorMatrix);
        let conds = s.sample(3).unwrap();
        let batch = ConditionBatch::new(&conds).unwrap();
        assert_eq!(batch.dist.size(), vec![3, 4]);
        assert_eq!(batch.matrix.as_ref().unwrap().size(), vec![3, 1, 4, 4]);
        let ones = batch.matrix.unwrap().sum(Kind::Float).double_value(&[]);
        assert_eq!(ones, 3.0 * 7.0);
        let mixed = vec![conds[0].clone(), conds[1].clone().with_mode(ConditioningMode::Vector)];
        assert!(ConditionBatch::new(&mixed).is_err());
    }

    proptest! {
        #[test]
        fn hot_matrix_counts_and_round_trips(n in 2usize..=12, seed in 0usize..1000) {
            let label = seed % n;
            let m = hot_matrix(label, n).unwrap();
            prop_assert_eq!(m.count_ones(), 2 * n - 1);
            prop_assert_eq!(m.label(), Some(label));
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(m.get(i, j) == 1, i == label || j == label);
                }
            }
        }

        #[test]
        fn soft_conditions_are_valid(n in 2usize..12, seed in any::<u64>()) {
            for c in sample_soft_conditions(4, n, seed).unwrap() {
                let sum: f64 = c.dist.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(c.dist.iter().all(|&p| p > 0.0));
                prop_assert_eq!(c.label, argmax(&c.dist));
            }
        }
    }
}
