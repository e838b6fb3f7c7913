//! Parameterized building blocks shared by the network modules.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::scalar::Scalar;

/// A 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        let cg = in_ch / spec.groups;
        let fan_in = cg * kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            [out_ch, cg, kernel, kernel],
            Init::Uniform { fan_in },
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), [1, out_ch, 1, 1], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv { weight, bias, spec })
    }

    /// 1x1 convolution with bias.
    pub fn pointwise<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 1, ConvSpec::new(1, 0), true)
    }

    /// Same-size square convolution with bias.
    pub fn same<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, kernel, ConvSpec::same(kernel), true)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.spec)
    }
}

/// Channel layer norm with learnable scale and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub scale: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            scale: store.add(&format!("{name}.scale"), [1, channels, 1, 1], Init::Ones)?,
            bias: store.add(&format!("{name}.bias"), [1, channels, 1, 1], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.scale], p[self.bias])
    }
}
