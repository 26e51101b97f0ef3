//! Named parameter tensors, their gradient accumulators, and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_fbt, write_fbt, DType, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Parameters keyed by dotted names, iterated in lexicographic order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad });
    }

    /// Uniform in `±1/sqrt(fan_in)`, drawn from the store's seeded stream.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_vec(shape, data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: &[f64]) {
        if let Some(p) = self.params.get_mut(name) {
            for (a, g) in p.grad.data_mut().iter_mut().zip(grad) {
                *a += g;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Lists every parameter whose presence or shape differs from `other`.
    pub fn shape_differences(&self, other: &ParamStore) -> Vec<String> {
        let mut diffs = Vec::new();
        for (name, p) in &self.params {
            match other.params.get(name) {
                None => diffs.push(format!("{name}: missing from checkpoint")),
                Some(q) if q.value.shape() != p.value.shape() => diffs.push(format!(
                    "{name}: expected {:?}, checkpoint has {:?}",
                    p.value.shape(),
                    q.value.shape()
                )),
                _ => {}
            }
        }
        for name in other.params.keys() {
            if !self.params.contains_key(name) {
                diffs.push(format!("{name}: not part of this model"));
            }
        }
        diffs
    }

    /// Writes one FBT1 file per parameter plus a text manifest
    /// (`name file shape dtype`, shape as `AxBxC`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        writeln!(manifest, "# seed {}", self.seed).unwrap();
        for (name, p) in &self.params {
            let file = format!("{name}.fbt");
            write_fbt(dir.join(&file), &p.value)?;
            let shape: Vec<String> = p.value.shape().iter().map(|e| e.to_string()).collect();
            writeln!(
                manifest,
                "{name} {file} {} {}",
                if shape.is_empty() {
                    "scalar".to_string()
                } else {
                    shape.join("x")
                },
                p.value.dtype().name()
            )
            .unwrap();
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<ParamStore> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = ParamStore::new(0);
        let mut offset = 0u64;
        for line in text.lines() {
            let line_offset = offset;
            offset += line.len() as u64 + 1;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# seed ") {
                store.seed = rest.trim().parse().unwrap_or(0);
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: line_offset,
                    msg: format!("expected `name file shape dtype`, got `{line}`"),
                });
            }
            let tensor = read_fbt(dir.join(fields[1]))?;
            let declared = if fields[2] == "scalar" {
                Vec::new()
            } else {
                fields[2]
                    .split('x')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Format {
                        path: path.clone(),
                        offset: line_offset,
                        msg: format!("bad shape `{}`", fields[2]),
                    })?
            };
            if declared != tensor.shape() {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: line_offset,
                    msg: format!(
                        "{}: manifest shape {:?} but file holds {:?}",
                        fields[0],
                        declared,
                        tensor.shape()
                    ),
                });
            }
            let tensor = if tensor.dtype() == DType::Real32 {
                tensor.to_dtype(DType::Real64)
            } else {
                tensor
            };
            store.insert(fields[0], tensor);
        }
        store.rng = ChaCha8Rng::seed_from_u64(store.seed);
        Ok(store)
    }
}
