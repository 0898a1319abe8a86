//! Named parameter storage grouped by model component.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::tensor::Matrix;

/// Freezable model components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Backbone weights: embedders, input projections, attention and MLP blocks.
    Base,
    /// Low-rank adapters on the backbone.
    Adapters,
    UnifiedHeads,
    RenderHeads,
    Reflector,
    /// Fixed random lift used by the raw in-context variants. Never trained.
    ContextLift,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Base,
        Component::Adapters,
        Component::UnifiedHeads,
        Component::RenderHeads,
        Component::Reflector,
        Component::ContextLift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Base => "base",
            Component::Adapters => "adapters",
            Component::UnifiedHeads => "unified_heads",
            Component::RenderHeads => "render_heads",
            Component::Reflector => "reflector",
            Component::ContextLift => "context_lift",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownComponent(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub component: Component,
    pub value: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, component: Component, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            component,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        component: Component,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.add(name, component, Matrix::from_vec(rows, cols, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, component: Component, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, component, Matrix::from_vec(rows, cols, vec![v; rows * cols]))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn component(&self, id: ParamId) -> Component {
        self.params[id.0].component
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn count(&self, component: Component) -> usize {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.value.data.len())
            .sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of one component.
    pub fn checksum(&self, component: Component) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.component == component) {
            h.update(p.name.as_bytes());
            h.update((p.value.rows as u64).to_le_bytes());
            h.update((p.value.cols as u64).to_le_bytes());
            for v in &p.value.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksums(&self) -> BTreeMap<Component, String> {
        Component::ALL.iter().map(|&c| (c, self.checksum(c))).collect()
    }
}

/// Set of frozen components.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan(pub BTreeSet<Component>);

impl FreezePlan {
    pub fn none() -> Self {
        FreezePlan(BTreeSet::new())
    }

    pub fn of(components: &[Component]) -> Self {
        FreezePlan(components.iter().copied().collect())
    }

    /// Everything except the listed components.
    pub fn all_but(trainable: &[Component]) -> Self {
        FreezePlan(Component::ALL.iter().copied().filter(|c| !trainable.contains(c)).collect())
    }

    pub fn set(&mut self, component: Component, frozen: bool) {
        if frozen {
            self.0.insert(component);
        } else {
            self.0.remove(&component);
        }
    }

    pub fn is_frozen(&self, component: Component) -> bool {
        // the context lift is fixed by construction
        component == Component::ContextLift || self.0.contains(&component)
    }
}
