//! Parameterized layers built on the autograd tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for conv/linear weights.
pub const INIT_STD: f64 = 0.02;

/// Anything that owns trainable tensors.
///
/// Parameters are enumerated in a fixed order with hierarchical names; the
/// order is what optimizers and checkpoints key on.
pub trait Module {
    fn parameters(&self) -> Vec<(String, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    items: Vec<(String, &'a Tensor)>,
) -> impl Iterator<Item = (String, &'a Tensor)> + use<'a> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> impl Iterator<Item = (String, &'a mut Tensor)> + use<'a> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Tensor::randn(&[out_channels, in_channels, kernel, kernel], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        x.conv2d(w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[input, output], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.matmul(tape.param(&self.weight)).add_row_bias(tape.param(&self.bias))
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".to_string(), &self.weight), ("bias".to_string(), &self.bias)]
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".to_string(), &mut self.weight),
            ("bias".to_string(), &mut self.bias),
        ]
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Instance normalization whose per-channel affine transform is predicted
/// from a conditioning embedding: `y = norm(x) * (1 + scale(e)) + shift(e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondInstanceNorm {
    pub scale_head: Linear,
    pub shift_head: Linear,
}

impl CondInstanceNorm {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, channels: usize, rng: &mut R) -> Self {
        Self {
            scale_head: Linear::new(embed_dim, channels, INIT_STD, rng),
            shift_head: Linear::new(embed_dim, channels, INIT_STD, rng),
        }
    }

    /// `embedding` is `(N, embed_dim)`, one row per sample of `x`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, embedding: Var<'t>) -> Var<'t> {
        let scale = self.scale_head.forward(tape, embedding).add_scalar(1.0);
        let shift = self.shift_head.forward(tape, embedding);
        x.instance_norm(NORM_EPS).channel_affine(scale, shift)
    }
}

impl Module for CondInstanceNorm {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        prefixed("scale", self.scale_head.parameters())
            .chain(prefixed("shift", self.shift_head.parameters()))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("scale", self.scale_head.parameters_mut())
            .chain(prefixed_mut("shift", self.shift_head.parameters_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_shapes_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 8, 4, 2, 1, true, &mut rng);
        let tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[2, 3, 64, 64]));
        assert_eq!(conv.forward(&tape, x).shape(), [2, 8, 32, 32]);
        let names: Vec<_> = conv.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
        assert_eq!(conv.num_parameters(), 8 * 3 * 16 + 8);
    }

    #[test]
    fn cin_normalizes_then_modulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cin = CondInstanceNorm::new(4, 2, &mut rng);
        cin.scale_head.weight = Tensor::zeros(&[4, 2]);
        cin.shift_head.weight = Tensor::zeros(&[4, 2]);
        cin.shift_head.bias = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let tape = Tape::inference();
        let x = tape.constant(Tensor::randn(&[1, 2, 4, 4], 3.0, &mut rng));
        let e = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let y = cin.forward(&tape, x, e).value();
        let m0 = y.data()[..16].iter().sum::<f64>() / 16.0;
        let m1 = y.data()[16..].iter().sum::<f64>() / 16.0;
        assert!((m0 - 0.5).abs() < 1e-12 && (m1 + 0.5).abs() < 1e-12);
    }
}
