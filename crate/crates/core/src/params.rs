//! Named parameter storage with freeze flags and group hashes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Parameter groups; the unit a training stage freezes or trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Upscaler,
    VaeEncoder,
    VaeDecoder,
    VaeSfa,
    VaeTfa,
    VaeAdapter,
    UnetBackbone,
    UnetSfa,
    UnetTfa,
    UnetAdapter,
    LatentEncoder,
    Refiner,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 12] = [
        ParamGroup::Upscaler,
        ParamGroup::VaeEncoder,
        ParamGroup::VaeDecoder,
        ParamGroup::VaeSfa,
        ParamGroup::VaeTfa,
        ParamGroup::VaeAdapter,
        ParamGroup::UnetBackbone,
        ParamGroup::UnetSfa,
        ParamGroup::UnetTfa,
        ParamGroup::UnetAdapter,
        ParamGroup::LatentEncoder,
        ParamGroup::Refiner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Upscaler => "upscaler",
            ParamGroup::VaeEncoder => "vae.encoder",
            ParamGroup::VaeDecoder => "vae.decoder",
            ParamGroup::VaeSfa => "vae.sfa",
            ParamGroup::VaeTfa => "vae.tfa",
            ParamGroup::VaeAdapter => "vae.adapter",
            ParamGroup::UnetBackbone => "unet.backbone",
            ParamGroup::UnetSfa => "unet.sfa",
            ParamGroup::UnetTfa => "unet.tfa",
            ParamGroup::UnetAdapter => "unet.adapter",
            ParamGroup::LatentEncoder => "latent_encoder",
            ParamGroup::Refiner => "refiner",
        }
    }

    /// SFA/TFA parameters on either side.
    pub fn is_guidance_module(self) -> bool {
        matches!(self, ParamGroup::VaeSfa | ParamGroup::VaeTfa | ParamGroup::UnetSfa | ParamGroup::UnetTfa)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL.into_iter().find(|g| g.as_str() == s).ok_or_else(|| Error::Checkpoint(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init, rng: &mut RngState) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(c) => Tensor::full(shape, T::of(c)),
            Init::FanIn { fan_in, gain } => Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng),
        };
        self.insert(name, group, value)
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.to_string(), group, value, grad, frozen: false });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<_> = self.params.iter().map(|p| p.group).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Freeze everything except the listed groups.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.params {
            p.frozen = !groups.contains(&p.group);
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Add a gradient; frozen parameters ignore it.
    pub fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        for (g, &d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// SHA-256 over names, shapes and value bits of one group.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn group_hashes(&self) -> BTreeMap<ParamGroup, String> {
        self.groups().into_iter().map(|g| (g, self.group_hash(g))).collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Parameter { name: p.name.clone(), group: p.group, value: p.value.cast(), grad: p.grad.cast(), frozen: p.frozen }).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copy values from `other` for every parameter with the same name and
    /// shape. Returns the number copied.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_ignore_gradients() {
        let mut rng = RngState::new(0);
        let mut s = ParamStore::<f32>::new();
        let a = s.register("a", ParamGroup::Refiner, &[2], Init::Zeros, &mut rng);
        let b = s.register("b", ParamGroup::Upscaler, &[2], Init::Zeros, &mut rng);
        s.set_trainable(&[ParamGroup::Refiner]);
        s.accumulate(a, &[1.0, 2.0]);
        s.accumulate(b, &[1.0, 2.0]);
        assert_eq!(s.get(a).grad.data(), &[1.0, 2.0]);
        assert_eq!(s.get(b).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn group_hash_tracks_values() {
        let mut rng = RngState::new(0);
        let mut s = ParamStore::<f32>::new();
        let a = s.register("a", ParamGroup::Refiner, &[2], Init::Const(1.0), &mut rng);
        let h0 = s.group_hash(ParamGroup::Refiner);
        assert_eq!(h0, s.group_hash(ParamGroup::Refiner));
        s.get_mut(a).value.data_mut()[1] = 1.5;
        assert_ne!(h0, s.group_hash(ParamGroup::Refiner));
    }
}
