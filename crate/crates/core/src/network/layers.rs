use reid_autodiff::{conv_output_extent, Padding, Real, Var};

use crate::error::Result;
use crate::network::params::{Ctx, Init, ParamId, ParamStore};

/// Collects parameters while a model is being assembled.
pub(crate) struct Builder<T: Real> {
    pub store: ParamStore<T>,
    pub init: Init,
}

impl<T: Real> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            init: Init::new(seed),
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: (usize, usize),
        gain: f64,
    ) -> Result<Conv> {
        let shape = [kernel, kernel, cin, cout];
        let w = self.init.he(&shape, kernel * kernel * cin, gain);
        Ok(Conv {
            w: self.store.push(format!("{name}.w"), w)?,
            b: self.store.push(format!("{name}.b"), reid_autodiff::Tensor::zeros(&[cout]))?,
            kernel,
            cin,
            cout,
            stride,
        })
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> Result<Linear> {
        let w = self.init.he(&[din, dout], din, gain);
        self.linear_with(name, w)
    }

    pub fn linear_with(&mut self, name: &str, w: reid_autodiff::Tensor<T>) -> Result<Linear> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        Ok(Linear {
            w: self.store.push(format!("{name}.w"), w)?,
            b: self.store.push(format!("{name}.b"), reid_autodiff::Tensor::zeros(&[dout]))?,
            din,
            dout,
        })
    }
}

/// Same-padded convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: (usize, usize),
}

impl Conv {
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let y = ctx
            .tape
            .conv2d(x, ctx.p(self.w), Some(ctx.p(self.b)), self.stride, Padding::Same)?;
        let s = ctx.tape.shape(y);
        ctx.count_macs((s[0] * s[1] * s[2]) as u64 * self.macs_per_position());
        Ok(y)
    }

    pub fn macs_per_position(&self) -> u64 {
        (self.kernel * self.kernel * self.cin * self.cout) as u64
    }

    /// Output extent `(h, w)` for an input extent.
    pub fn output(&self, hw: (usize, usize)) -> (usize, usize) {
        let h = conv_output_extent(hw.0, self.kernel, self.stride.0, Padding::Same).expect("stride ≥ 1");
        let w = conv_output_extent(hw.1, self.kernel, self.stride.1, Padding::Same).expect("stride ≥ 1");
        (h.0, w.0)
    }

    /// `(output extent, multiply-accumulates)` for one image.
    pub fn cost(&self, hw: (usize, usize)) -> ((usize, usize), u64) {
        let o = self.output(hw);
        (o, (o.0 * o.1) as u64 * self.macs_per_position())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let y = ctx.tape.linear(x, ctx.p(self.w), Some(ctx.p(self.b)))?;
        ctx.count_macs((ctx.tape.shape(y)[0] * self.din * self.dout) as u64);
        Ok(y)
    }

    pub fn macs(&self) -> u64 {
        (self.din * self.dout) as u64
    }
}

/// `relu(1×1 → relu → 3×3 → relu → 1×1 + shortcut)`; the stride sits in the first 1×1
/// and in the projection.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: Conv,
    pub spatial: Conv,
    pub expand: Conv,
    /// `None` is the identity shortcut (same channels, stride 1).
    pub projection: Option<Conv>,
}

impl Bottleneck {
    /// `residual_gain` scales the initial weights of the last convolution of the branch.
    pub(crate) fn build<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: (usize, usize),
        residual_gain: f64,
    ) -> Result<Self> {
        let reduce = b.conv(&format!("{name}.reduce"), 1, cin, mid, stride, 1.0)?;
        let spatial = b.conv(&format!("{name}.spatial"), 3, mid, mid, (1, 1), 1.0)?;
        let expand = b.conv(&format!("{name}.expand"), 1, mid, cout, (1, 1), residual_gain)?;
        let projection = if cin != cout || stride != (1, 1) {
            Some(b.conv(&format!("{name}.project"), 1, cin, cout, stride, 1.0)?)
        } else {
            None
        };
        Ok(Self {
            reduce,
            spatial,
            expand,
            projection,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let h = t.relu(self.reduce.forward(ctx, x)?);
        let h = t.relu(self.spatial.forward(ctx, h)?);
        let h = self.expand.forward(ctx, h)?;
        let short = match &self.projection {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        Ok(t.relu(t.add(h, short)?))
    }

    pub fn cost(&self, hw: (usize, usize)) -> ((usize, usize), u64) {
        let (o, a) = self.reduce.cost(hw);
        let (_, b) = self.spatial.cost(o);
        let (_, c) = self.expand.cost(o);
        let d = self.projection.as_ref().map_or(0, |p| p.cost(hw).1);
        (o, a + b + c + d)
    }

    pub fn out_channels(&self) -> usize {
        self.expand.cout
    }
}
