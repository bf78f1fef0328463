//! Named parameter storage and its binding onto a tape.

use std::fmt;

use mcinet_autodiff::{Gradients, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Module a parameter belongs to; gradient reports are grouped by this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    McfmBranch,
    McfmAttention,
    MlimProjector,
    MlimRescale,
    MlimRefiner,
    MsmpSmall,
    MsmpLarge,
    Aspp,
    SmallHead,
    LargeHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 11] = [
        ParamGroup::Backbone,
        ParamGroup::McfmBranch,
        ParamGroup::McfmAttention,
        ParamGroup::MlimProjector,
        ParamGroup::MlimRescale,
        ParamGroup::MlimRefiner,
        ParamGroup::MsmpSmall,
        ParamGroup::MsmpLarge,
        ParamGroup::Aspp,
        ParamGroup::SmallHead,
        ParamGroup::LargeHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::McfmBranch => "mcfm.branch",
            ParamGroup::McfmAttention => "mcfm.attention",
            ParamGroup::MlimProjector => "mlim.projector",
            ParamGroup::MlimRescale => "mlim.rescale",
            ParamGroup::MlimRefiner => "mlim.refiner",
            ParamGroup::MsmpSmall => "msmp.small",
            ParamGroup::MsmpLarge => "msmp.large",
            ParamGroup::Aspp => "msmp.aspp",
            ParamGroup::SmallHead => "head.small",
            ParamGroup::LargeHead => "head.large",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub frozen: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            frozen: false,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// He-normal conv weight `[out, in, k, k]` plus uniform bias.
    pub fn add_conv(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> (ParamId, ParamId) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(vec![cout, cin, k, k], |_| normal.sample(rng));
        let bound = 1.0 / fan_in.sqrt();
        let b = Tensor::from_fn(vec![cout], |_| rng.random_range(-bound..bound));
        (
            self.add(format!("{}.weight", name), group, w),
            self.add(format!("{}.bias", name), group, b),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn freeze_group(&mut self, group: ParamGroup) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.frozen = true;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Little-endian bytes of every parameter in order; used for checksums.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// A tape plus the lazily created leaf for each parameter touched so far.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = self.g.leaf(e.value.clone(), !e.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients; untouched or frozen parameters get zeros.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.store
            .entries
            .iter()
            .zip(&self.bound)
            .map(|(e, b)| {
                b.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(e.value.shape().to_vec()))
            })
            .collect()
    }
}
