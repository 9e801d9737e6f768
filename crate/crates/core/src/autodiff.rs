//! Taped reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation eagerly together with its value.
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every node that depends on a `param` leaf.
//!
//! Clamp has a zero gradient wherever it is saturated (input strictly
//! outside the interval); `sqrt` has a zero gradient at an input of exactly 0.

use std::cell::Cell;

use crate::conv::{self, ConvGeom, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward passes run on the calling thread so far.
pub fn backward_passes() -> u64 {
    BACKWARD_PASSES.with(Cell::get)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    BroadcastAdd {
        input: Var,
        scalar: Var,
    },
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ChannelMean(Var),
    Clamp {
        input: Var,
        lo: f32,
        hi: f32,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Quantize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eager computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the objective with respect to `var`; zeros if `var` does
    /// not influence the objective.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        va.expect_same_shape(name, vb)?;
        let value = va.zip_map(vb, f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(kernel).shape(), stride, pad)?;
        let (out, cols) = conv::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let ng = self.needs(input) || self.needs(kernel);
        // the column buffer is only needed for the kernel/input gradients
        let cols = if ng { cols } else { Vec::new() };
        let value = Tensor::from_parts(vec![geom.c_out, geom.ho, geom.wo], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "channel_bias",
                format!("{c} channels but bias of length {}", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[ch]);
        }
        let ng = self.needs(input) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(vec![c, h, w], out), Op::ChannelBias { input, bias }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// Adds a single-element `scalar` to every element of `input`.
    pub fn broadcast_add(&mut self, input: Var, scalar: Var) -> Result<Var> {
        if !self.value(scalar).is_scalar() {
            return Err(Error::NotScalar {
                shape: self.value(scalar).shape().to_vec(),
            });
        }
        let s = self.value(scalar).data()[0];
        let value = self.value(input).map(|x| x + s);
        let ng = self.needs(input) || self.needs(scalar);
        Ok(self.push(value, Op::BroadcastAdd { input, scalar }, ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f32::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f32::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum_f64(self.value(a).data()) as f32;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = (sum_f64(t.data()) / t.len() as f64) as f32;
        let ng = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// `C×H×W → C×1×1` spatial average.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let n = (h * w) as f64;
        let out = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| (sum_f64(p) / n) as f32)
            .collect();
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![c, 1, 1], out), Op::ChannelMean(a), ng))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, Op::Clamp { input: a, lo, hi }, move |x| x.clamp(lo, hi))
    }

    /// 2×2 average pooling; height and width must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd spatial size {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let p = &src[ch * h * w..];
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    out[(ch * ho + y) * wo + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::AvgPool2(a), ng))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[(ch * ho + y) * wo + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::Upsample2(a), ng))
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(a, b), ng))
    }

    /// Rounds to the 8-bit grid. Has no gradient; backpropagating through it
    /// is an error.
    pub fn quantize8(&mut self, a: Var) -> Var {
        self.unary(a, Op::Quantize, |x| (x * 255.0).round() / 255.0)
    }

    /// Reverse pass from a single-element objective.
    pub fn backward(&self, objective: Var) -> Result<Gradients> {
        let root = self.value(objective);
        if !root.is_scalar() {
            return Err(Error::NotScalar {
                shape: root.shape().to_vec(),
            });
        }
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[objective.0] = Some(Tensor::from_parts(root.shape().to_vec(), vec![1.0]));

        for i in (0..=objective.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (gi, gk) = conv::conv2d_backward(
                    geom,
                    cols,
                    self.value(*kernel).data(),
                    gd,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernel, gk);
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.needs(*bias) {
                    let c = self.value(*bias).len();
                    let plane = gd.len() / c;
                    let gb = gd.chunks(plane).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, *bias, gb);
                }
                self.accumulate(grads, *input, gd.to_vec());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gd.iter().map(|v| v * c).collect()),
            Op::Offset(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::BroadcastAdd { input, scalar } => {
                self.accumulate(grads, *input, gd.to_vec());
                self.accumulate(grads, *scalar, vec![gd.iter().sum()]);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { g * slope }).collect(),
                );
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                self.accumulate(
                    grads,
                    *a,
                    gd.iter().zip(y).map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 }).collect(),
                );
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f32; n]);
            }
            Op::ChannelMean(a) => {
                let (_, h, w) = self.value(*a).dims3()?;
                let n = (h * w) as f32;
                let out = gd.iter().flat_map(|&v| std::iter::repeat(v / n).take(h * w)).collect();
                self.accumulate(grads, *a, out);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                self.accumulate(
                    grads,
                    *input,
                    gd.iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = self.value(*a).dims3()?;
                let (ho, wo) = (h / 2, w / 2);
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            out[(ch * h + y) * w + x] = 0.25 * gd[(ch * ho + y / 2) * wo + x / 2];
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Upsample2(a) => {
                let (c, h, w) = self.value(*a).dims3()?;
                let (ho, wo) = (2 * h, 2 * w);
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            out[(ch * h + y / 2) * w + x / 2] += gd[(ch * ho + y) * wo + x];
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, gd[..na].to_vec());
                self.accumulate(grads, *b, gd[na..].to_vec());
            }
            Op::Quantize => return Err(Error::Unsupported { op: "quantize8" }),
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Vec<f32>) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(Tensor::from_parts(self.value(target).shape().to_vec(), g)),
        }
    }
}

/// Reductions accumulate in `f64` and round once, so sums of identical
/// values are exact.
fn sum_f64(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum()
}

/// Reverse-mode gradient of the scalar `objective` with respect to `wrt`.
pub fn grad_scalar(tape: &Tape, objective: Var, wrt: Var) -> Result<Tensor> {
    Ok(tape.backward(objective)?.take(wrt))
}
