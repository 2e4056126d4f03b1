use super::{InitRule, ParamHandle, ParamStore, TiedView};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Square conv with "same" padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamHandle,
    pub bias: ParamHandle,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            InitRule::KaimingUniform { fan_in: cin * kernel * kernel },
        )?;
        let bias = store.register(&format!("{name}.bias"), &[cout], InitRule::Zeros)?;
        Ok(Self { weight, bias, in_channels: cin, out_channels: cout, kernel })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = self.weight.on(tape);
        let b = self.bias.on(tape);
        tape.conv2d(x, w, Some(b), 1, self.kernel / 2)
    }
}

/// Two 3×3 same-padded convs, each followed by relu: `Cin → Cout → Cout`.
#[derive(Clone, Copy, Debug)]
pub struct DoubleConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl DoubleConvBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels() {
            return Err(Error::shape(
                "double_conv",
                format!("input has {c} channels, block expects {}", self.in_channels()),
            ));
        }
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        Ok(tape.relu(h))
    }
}

/// Transposed conv whose kernel is a [`TiedView`]; only the bias is its own.
#[derive(Clone, Copy, Debug)]
pub struct TiedConvTranspose {
    pub view: TiedView,
    pub bias: ParamHandle,
}

impl TiedConvTranspose {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, view: TiedView) -> Result<Self> {
        let bias = store.register(&format!("{name}.bias"), &[view.out_channels()], InitRule::Zeros)?;
        Ok(Self { view, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = self.view.source().on(tape);
        let b = self.bias.on(tape);
        tape.conv_transpose2d(x, w, Some(b), 1, self.view.kernel() / 2)
    }
}
