//! Parameter manifests and their random initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::gradcore::{ParamStore, Scalar, Tensor};

/// Standard deviation of the truncated-normal weight initialization.
pub const WEIGHT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to ±2 std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize]) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init: Init::TruncNormal(WEIGHT_STD) }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init: Init::Zeros }
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init: Init::Ones }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Linear layer `[inp, out]` weight plus bias.
pub(crate) fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, inp: usize, outw: usize) {
    out.push(ParamSpec::weight(format!("{prefix}.w"), &[inp, outw]));
    out.push(ParamSpec::zeros(format!("{prefix}.b"), &[outw]));
}

pub(crate) fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::ones(format!("{prefix}.g"), &[d]));
    out.push(ParamSpec::zeros(format!("{prefix}.b"), &[d]));
}

/// Materializes `specs` in order with a generator seeded by `seed`.
pub fn init_store<T: Scalar>(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let n = spec.numel();
        let data: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * std {
                            break T::lit(x);
                        }
                    })
                    .collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(&spec.shape, data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_truncated() {
        let specs = vec![ParamSpec::weight("w", &[50, 40]), ParamSpec::ones("g", &[3]), ParamSpec::zeros("b", &[3])];
        let a = init_store::<f32>(&specs, 1).unwrap();
        let b = init_store::<f32>(&specs, 1).unwrap();
        assert_eq!(a, b);
        let w = a.get("w").unwrap().data();
        assert!(w.iter().all(|x| x.abs() <= 0.04 + 1e-7));
        assert!(w.iter().any(|&x| x != 0.0));
        assert_eq!(a.get("g").unwrap().data(), &[1.0; 3]);
    }
}
