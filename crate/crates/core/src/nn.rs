//! Thin layer wrappers over parameter ids.

use mcinet_autodiff::{Conv2dOptions, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore, Session};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub opts: Conv2dOptions,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv2dOptions,
    ) -> Self {
        let (weight, bias) = store.add_conv(rng, name, group, cin, cout, kernel);
        Self {
            weight,
            bias,
            kernel,
            opts,
        }
    }

    /// Stride-1 "same" convolution.
    pub fn same(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        Self::new(store, rng, name, group, cin, cout, kernel, Conv2dOptions::same(kernel, 1))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.forward_with(s, x, self.opts)
    }

    pub fn forward_with(&self, s: &mut Session, x: Var, opts: Conv2dOptions) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        Ok(s.g.conv2d(x, w, Some(b), opts)?)
    }
}

/// Two 3×3 convolutions joined by a rectifier.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            first: Conv::same(store, rng, &format!("{}.0", name), group, cin, cout, 3),
            second: Conv::same(store, rng, &format!("{}.1", name), group, cout, cout, 3),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = s.g.relu(h);
        self.second.forward(s, h)
    }
}
