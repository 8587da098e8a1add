use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named tensors iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts a tensor; replacing an existing name is allowed only with an
    /// identical shape.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        if let Some(old) = self.tensors.get(&name) {
            assert_eq!(old.shape(), t.shape(), "shape of `{name}` is immutable");
        }
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar elements.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// `self += other * c`, elementwise over matching names.
    pub fn add_scaled(&mut self, other: &ParamSet<T>, c: T) -> Result<()> {
        self.check_same_layout(other)?;
        for (name, t) in self.tensors.iter_mut() {
            let o = &other.tensors[name];
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = *a + b * c;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn check_same_layout(&self, other: &ParamSet<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Config(format!(
                "parameter sets differ: {} vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::Shape {
                        expected: t.shape().to_vec(),
                        actual: o.shape().to_vec(),
                    })
                }
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and element bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                feed(&x.as_f64().to_le_bytes());
            }
        }
        h
    }
}

/// Weight initializers shared by the models.
pub mod init {
    use super::*;

    /// Normal entries scaled by `1/sqrt(fan_in)`.
    pub fn lecun<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let std = 1.0 / (fan_in as f64).sqrt();
        normal(rng, &[fan_in, fan_out], std)
    }

    pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}
