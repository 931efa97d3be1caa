//! Named, component-tagged parameters with trainability flags.
//!
//! Every learnable tensor of the model lives in a [`ParamRegistry`] under a
//! hierarchical dotted name. Modules hold cheap [`Param`] handles that share
//! storage and the trainable flag with the registry entry, so freezing a
//! component in the registry takes effect in the next forward pass: frozen
//! parameters enter the graph detached and never receive gradients.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which part of the architecture a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Vit,
    Cnn,
    Cba,
    Adapter,
    PromptEncoder,
    MaskDecoder,
    Apg,
    Fusion,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Vit,
        Component::Cnn,
        Component::Cba,
        Component::Adapter,
        Component::PromptEncoder,
        Component::MaskDecoder,
        Component::Apg,
        Component::Fusion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Vit => "vit",
            Component::Cnn => "cnn",
            Component::Cba => "cba",
            Component::Adapter => "adapter",
            Component::PromptEncoder => "prompt_encoder",
            Component::MaskDecoder => "mask_decoder",
            Component::Apg => "apg",
            Component::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownComponent(s.to_string()))
    }
}

/// Tuning regime: which components receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Adapt SAM: adapters, CNN branch, CBA and branch fusion train.
    SamusAdapt,
    /// Only the auto prompt generator trains.
    AutosamusApgOnly,
    /// The auto prompt generator plus everything `SamusAdapt` trains.
    AutosamusFull,
}

impl Regime {
    pub fn trainable_components(&self) -> &'static [Component] {
        const ADAPT: &[Component] = &[
            Component::Adapter,
            Component::Cnn,
            Component::Cba,
            Component::Fusion,
        ];
        const FULL: &[Component] = &[
            Component::Apg,
            Component::Adapter,
            Component::Cnn,
            Component::Cba,
            Component::Fusion,
        ];
        match self {
            Regime::SamusAdapt => ADAPT,
            Regime::AutosamusApgOnly => &[Component::Apg],
            Regime::AutosamusFull => FULL,
        }
    }

    pub fn trains(&self, component: Component) -> bool {
        self.trainable_components().contains(&component)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::SamusAdapt => "samus_adapt",
            Regime::AutosamusApgOnly => "autosamus_apg_only",
            Regime::AutosamusFull => "autosamus_full",
        }
    }

    pub fn uses_apg(&self) -> bool {
        !matches!(self, Regime::SamusAdapt)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "samus_adapt" => Ok(Regime::SamusAdapt),
            "autosamus_apg_only" => Ok(Regime::AutosamusApgOnly),
            "autosamus_full" => Ok(Regime::AutosamusFull),
            other => Err(Error::RunConfig(format!("unknown regime `{other}`"))),
        }
    }
}

/// Shared handle to one learnable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    var: Var,
    trainable: Arc<AtomicBool>,
}

impl Param {
    fn new(tensor: Tensor) -> Result<Self> {
        Ok(Self {
            var: Var::from_tensor(&tensor)?,
            trainable: Arc::new(AtomicBool::new(true)),
        })
    }

    /// The value as it should enter a forward pass: tracked when trainable,
    /// detached otherwise.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    /// A detached snapshot. It owns its storage, so later `set` calls and
    /// optimizer steps do not show through it.
    pub fn value(&self) -> Tensor {
        self.var
            .as_tensor()
            .detach()
            .copy()
            .expect("copying a CPU tensor cannot fail")
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.trainable.store(trainable, Ordering::Relaxed)
    }

    pub fn shape(&self) -> &Shape {
        self.var.shape()
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    /// Overwrite the value in place. The new value is converted to the
    /// parameter's dtype.
    pub fn set(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.var.dims() {
            return Err(Error::shape("Param::set", self.var.dims(), value.dims()));
        }
        let value = value.to_dtype(self.var.dtype())?.contiguous()?.detach();
        // `Var::set` refuses sources that alias the destination.
        let value = value.copy()?;
        self.var.set(&value)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub param: Param,
    pub component: Component,
}

/// All parameters of one model instance, ordered by name.
#[derive(Clone, Debug)]
pub struct ParamRegistry {
    entries: BTreeMap<String, ParamEntry>,
    dtype: DType,
    device: Device,
}

impl ParamRegistry {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: &str, component: Component, value: Tensor) -> Result<Param> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let param = Param::new(value.to_dtype(self.dtype)?)?;
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                param: param.clone(),
                component,
            },
        );
        Ok(param)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .map(|e| &e.param)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn names_in(&self, component: Component) -> Vec<String> {
        self.iter()
            .filter(|(_, e)| e.component == component)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Param)> {
        self.iter()
            .filter(|(_, e)| e.param.is_trainable())
            .map(|(n, e)| (n.to_string(), e.param.clone()))
            .collect()
    }

    /// Total scalar count, optionally restricted to one component.
    pub fn count(&self, component: Option<Component>) -> usize {
        self.iter()
            .filter(|(_, e)| component.is_none_or(|c| c == e.component))
            .map(|(_, e)| e.param.elem_count())
            .sum()
    }

    pub fn set_all_trainable(&self, trainable: bool) {
        for (_, e) in self.iter() {
            e.param.set_trainable(trainable);
        }
    }

    /// Mark exactly the regime's components trainable and freeze the rest.
    /// Only metadata changes; values are untouched.
    pub fn apply_freeze_plan(&self, regime: Regime) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyRegistry);
        }
        for (_, e) in self.iter() {
            e.param.set_trainable(regime.trains(e.component));
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of one parameter's value.
    pub fn fingerprint(&self, name: &str) -> Result<String> {
        tensor_fingerprint(&self.param(name)?.value())
    }

    pub fn fingerprints(&self) -> Result<BTreeMap<String, String>> {
        self.iter()
            .map(|(n, e)| Ok((n.to_string(), tensor_fingerprint(&e.param.value())?)))
            .collect()
    }
}

pub fn tensor_fingerprint(t: &Tensor) -> Result<String> {
    let bytes = crate::checkpoint::tensor_le_bytes(t)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Initialization rules for fresh parameters.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
    /// Truncated normal with `std = gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    /// 3×3 (or larger odd) convolution kernel passing channel `i` to output `i`
    /// through its center tap. Requires square in/out channels.
    IdentityConv,
}

/// Hierarchical builder that creates and registers parameters.
pub struct ParamBuilder<'a> {
    registry: &'a mut ParamRegistry,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    component: Component,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(registry: &'a mut ParamRegistry, rng: &'a mut ChaCha8Rng, component: Component) -> Self {
        Self {
            registry,
            rng,
            prefix: String::new(),
            component,
        }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: impl fmt::Display) -> ParamBuilder<'_> {
        let prefix = self.join(&name.to_string());
        ParamBuilder {
            registry: &mut *self.registry,
            rng: &mut *self.rng,
            prefix,
            component: self.component,
        }
    }

    /// Child builder with the same prefix but another component tag.
    pub fn tagged(&mut self, component: Component) -> ParamBuilder<'_> {
        ParamBuilder {
            registry: &mut *self.registry,
            rng: &mut *self.rng,
            prefix: self.prefix.clone(),
            component,
        }
    }

    pub fn component(&self) -> Component {
        self.component
    }

    pub fn dtype(&self) -> DType {
        self.registry.dtype
    }

    pub fn device(&self) -> Device {
        self.registry.device.clone()
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal { std } => trunc_normal(self.rng, n, std),
            Init::FanIn { fan_in, gain } => trunc_normal(self.rng, n, gain / (fan_in.max(1) as f64).sqrt()),
            Init::IdentityConv => {
                let [o, i, kh, kw] = shape else {
                    return Err(Error::shape("identity conv init", "4-d kernel", shape));
                };
                if o != i || kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape("identity conv init", "square odd kernel", shape));
                }
                let mut v = vec![0.0; n];
                for c in 0..*o {
                    v[((c * i + c) * kh + kh / 2) * kw + kw / 2] = 1.0;
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.registry.device)?;
        let name = self.join(name);
        self.registry.insert(&name, self.component, t)
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
            // keep the stream advancing deterministically
            let _: u32 = rng.random();
        })
        .collect()
}
