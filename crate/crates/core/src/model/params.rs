use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Head, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::EngineRng;
use crate::scalar::Scalar;

/// A named block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Deterministic parameter layout for a configuration.
pub fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let mut slots = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        slots.push(Slot { name, shape, offset });
        offset += len;
    };
    let mut fan_in = cfg.input_dim();
    for l in 0..cfg.hidden_layers {
        push(format!("hidden.{l}.weight"), vec![cfg.hidden_width, fan_in]);
        push(format!("hidden.{l}.bias"), vec![cfg.hidden_width]);
        fan_in = cfg.hidden_width;
    }
    push("out.weight".into(), vec![cfg.output_dim(), fan_in]);
    push("out.bias".into(), vec![cfg.output_dim()]);
    if let Some(c) = cfg.num_classes {
        push("class.embed".into(), vec![c, cfg.class_features]);
        push("class.null".into(), vec![cfg.class_features]);
    }
    if cfg.head == Head::DiscreteToken {
        push("mask.embed".into(), vec![cfg.e]);
    }
    slots
}

/// Flat parameter vector plus its named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    slots: Vec<Slot>,
    values: Vec<F>,
}

impl<F: Scalar> Params<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let slots = layout(cfg);
        let n = slots.last().map_or(0, |s| s.offset + s.len());
        Params { slots, values: vec![F::zero(); n] }
    }

    /// Adopt a flat vector laid out for `cfg`.
    pub fn from_values(cfg: &ModelConfig, values: Vec<F>) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        if values.len() != p.values.len() {
            return Err(Error::shape(format!("{} values for a layout of {}", values.len(), p.values.len())));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter values".into()));
        }
        p.values = values;
        Ok(p)
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> &[F] {
        let s = self.slot(name).unwrap_or_else(|| panic!("no parameter block '{name}'"));
        &self.values[s.range()]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [F] {
        let r = self.slot(name).unwrap_or_else(|| panic!("no parameter block '{name}'")).range();
        &mut self.values[r]
    }

    pub fn matrix(&self, name: &str) -> ArrayView2<'_, F> {
        let s = self.slot(name).expect("parameter block");
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &self.values[s.range()]).expect("2-d block")
    }

    pub fn matrix_mut(&mut self, name: &str) -> ArrayViewMut2<'_, F> {
        let s = self.slot(name).expect("parameter block").clone();
        ArrayViewMut2::from_shape((s.shape[0], s.shape[1]), &mut self.values[s.range()]).expect("2-d block")
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, F> {
        ArrayView1::from(self.get(name))
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params { slots: self.slots.clone(), values: self.values.iter().map(|x| x.cast()).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// He-normal hidden weights, zero biases, zero output layer, standard normal
/// embedding tables. Deterministic per seed.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Params<F>> {
    cfg.validate()?;
    let mut p = Params::zeros(cfg);
    let mut rng = EngineRng::seed_from_u64(seed);
    for slot in p.slots.clone() {
        let block = &mut p.values[slot.range()];
        if slot.name.starts_with("hidden.") && slot.name.ends_with(".weight") {
            let std = (2.0 / slot.shape[1] as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            block.iter_mut().for_each(|x| *x = F::lit(dist.sample(&mut rng)));
        } else if slot.name.starts_with("class.") || slot.name == "mask.embed" {
            block.iter_mut().for_each(|x| {
                let v: f64 = StandardNormal.sample(&mut rng);
                *x = F::lit(v)
            });
        }
    }
    Ok(p)
}
