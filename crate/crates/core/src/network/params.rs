use std::cell::{Cell, RefCell};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use reid_autodiff::{Real, Tape, Tensor, Var};

use crate::error::{ReidError, Result};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total element count of parameters whose name satisfies `keep`.
    pub fn count(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| keep(n)).map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor<T>) -> Result<ParamId> {
        if self.names.contains(&name) {
            return Err(ReidError::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces values by name; every stored name must be supplied with a matching shape.
    pub fn load(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(ReidError::Config(format!(
                "expected {} parameters, got {}",
                self.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| ReidError::Config(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(ReidError::Config(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }
}

/// Seeded He-normal initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal weights with standard deviation `gain·sqrt(2 / fan_in)`.
    pub fn he<T: Real>(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::of(normal.sample(&mut self.rng)))
    }
}

/// Whether attention masks are computed or replaced by zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    #[default]
    Learned,
    /// Every mask is the zero tensor, so each block reduces to its feature path.
    Zero,
}

/// One forward pass: the tape, bound parameters and pass-wide switches.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a Tape<T>,
    params: Vec<Var>,
    pub training: bool,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    rng: RefCell<ChaCha8Rng>,
    macs: Cell<u64>,
    masks: RefCell<Vec<(String, Var)>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: Vec<Var>, training: bool, dropout: f64, seed: u64) -> Self {
        Self {
            tape,
            params,
            training,
            dropout,
            mask_mode: MaskMode::Learned,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            macs: Cell::new(0),
            masks: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Multiply-accumulates executed by convolutions and affine maps so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn count_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub(crate) fn record_mask(&self, name: &str, m: Var) {
        self.masks.borrow_mut().push((name.to_string(), m));
    }

    /// Attention masks recorded during the pass, in execution order.
    pub fn masks(&self) -> Vec<(String, Var)> {
        self.masks.borrow().clone()
    }

    pub fn dropout(&self, x: Var) -> Result<Var> {
        let mut rng = self.rng.borrow_mut();
        Ok(self.tape.dropout(x, self.dropout, self.training, &mut *rng)?)
    }
}
