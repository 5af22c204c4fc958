//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! replays the record in reverse to accumulate gradients. The tape is rebuilt
//! each training iteration, which is what lets clipping decisions made from
//! forward values (via [`Tape::stop_gradient`]) take effect immediately.
//!
//! The operator set is exactly what the supersampling experiments require:
//! elementwise arithmetic, matmul, same-padded stride-1 conv2d, relu,
//! bilinear 2x upsampling, mean reductions, integer powers, reshape,
//! stop-gradient, and the huberize loss transform.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{numel_of, Element, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    /// Multiply by a host-side constant (the constant is not a tape node).
    Scale(Value, f64),
    /// x + bias, bias broadcast over the last axis.
    AddBias(Value, Value),
    Matmul(Value, Value),
    Conv2d { x: Value, weight: Value, k: usize },
    Relu(Value),
    Upsample2x(Value),
    /// Mean over all elements -> scalar.
    Mean(Value),
    /// Mean over all axes but the first -> [b].
    MeanPerSample(Value),
    Powi(Value, u32),
    Reshape(Value),
    StopGradient(Value),
    Huberize { x: Value, h: f64 },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
}

/// Gradients from one backward pass, indexed by the originating tape's node ids.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any gradient reached it.
    pub fn wrt(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, with unreachable nodes reported as zeros.
    pub fn wrt_or_zeros(&self, tape: &Tape<T>, v: Value) -> Tensor<T> {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

/// The operation record. One tape per training step, confined to one thread.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Value) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Value) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { trainable: true })
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Value {
        self.nodes.push(Node { value, op });
        Value(self.nodes.len() - 1)
    }

    /// Record a non-trainable input.
    pub fn input(&mut self, t: Tensor<T>) -> Value {
        self.push(t, Op::Leaf { trainable: false })
    }

    /// Record a trainable parameter.
    pub fn param(&mut self, t: Tensor<T>) -> Value {
        self.push(t, Op::Leaf { trainable: true })
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Value, b: Value) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape("subtract", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape("multiply", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Multiply every element by a host constant.
    pub fn scale(&mut self, x: Value, factor: f64) -> Value {
        let f = T::from_f64(factor);
        let t = self.value(x).map(|v| v * f);
        self.push(t, Op::Scale(x, factor))
    }

    /// x + bias with bias broadcast over the last axis of x.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let channels = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != channels {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("x {xs:?} with bias {bs:?}"),
            });
        }
        let bd = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % channels])
            .collect();
        let t = Tensor::new(xs, data)?;
        Ok(self.push(t, Op::AddBias(x, bias)))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b)))
    }

    /// Same-padded stride-1 convolution. x is [b,h,w,cin] NHWC, weight is
    /// [k,k,cin,cout] with odd k.
    pub fn conv2d(&mut self, x: Value, weight: Value) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bad = |detail: String| Error::ShapeMismatch { op: "conv2d", detail };
        if xs.len() != 4 || ws.len() != 4 {
            return Err(bad(format!("x {xs:?} with weight {ws:?}")));
        }
        let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw || kh % 2 == 0 {
            return Err(bad(format!("kernel must be odd square, got {ws:?}")));
        }
        if wcin != cin {
            return Err(bad(format!("x {xs:?} with weight {ws:?}")));
        }
        let mut out = vec![T::zero(); b * h * w * cout];
        kernels::conv2d_forward(
            b,
            h,
            w,
            cin,
            cout,
            kh,
            self.value(x).data(),
            self.value(weight).data(),
            &mut out,
        );
        let t = Tensor::new(vec![b, h, w, cout], out)?;
        Ok(self.push(t, Op::Conv2d { x, weight, k: kh }))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x))
    }

    /// Bilinear 2x upsample of an NHWC image.
    pub fn upsample2x(&mut self, x: Value) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_upsample_2x",
                detail: format!("want [b,h,w,c], got {xs:?}"),
            });
        }
        let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![T::zero(); b * 2 * h * 2 * w * c];
        kernels::bilinear_up2(b, h, w, c, self.value(x).data(), &mut out);
        let t = Tensor::new(vec![b, 2 * h, 2 * w, c], out)?;
        Ok(self.push(t, Op::Upsample2x(x)))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&mut self, x: Value) -> Value {
        let n = T::from_f64(self.value(x).numel() as f64);
        let sum = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(sum / n), Op::Mean(x))
    }

    /// Mean over all axes but the first: [b, ...] -> [b].
    pub fn mean_per_sample(&mut self, x: Value) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mean_per_sample",
                detail: "input must have a batch axis".into(),
            });
        }
        let b = xs[0];
        let per = numel_of(&xs[1..]).max(1);
        let inv = T::from_f64(1.0 / per as f64);
        let data = self.value(x).data();
        let out: Vec<T> = (0..b)
            .map(|bi| {
                data[bi * per..(bi + 1) * per]
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + v)
                    * inv
            })
            .collect();
        let t = Tensor::new(vec![b], out)?;
        Ok(self.push(t, Op::MeanPerSample(x)))
    }

    /// Elementwise integer power, exponent >= 1.
    pub fn powi(&mut self, x: Value, exponent: u32) -> Result<Value> {
        if exponent == 0 {
            return Err(Error::Config("power exponent must be >= 1".into()));
        }
        let t = self.value(x).map(|v| v.powi(exponent as i32));
        Ok(self.push(t, Op::Powi(x, exponent)))
    }

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Identity in the forward pass, blocks gradients in the backward pass.
    pub fn stop_gradient(&mut self, x: Value) -> Value {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient(x))
    }

    /// Elementwise v -> min(v, sqrt(h*v)), the order-reducing loss transform.
    /// Differentiable through whichever branch is active.
    pub fn huberize(&mut self, x: Value, h: f64) -> Result<Value> {
        if h <= 0.0 {
            return Err(Error::Config(format!("huberize threshold must be positive, got {h}")));
        }
        let hv = T::from_f64(h);
        let t = self.value(x).map(|v| if v < hv { v } else { (hv * v).sqrt() });
        Ok(self.push(t, Op::Huberize { x, h }))
    }

    /// Reverse pass from a scalar-shaped loss. Returns gradients for every
    /// node gradient reached; parameters off the reachable graph read as zeros
    /// through [`Gradients::wrt_or_zeros`].
    pub fn backward(&self, loss: Value) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), T::one()));

        // Nodes only reference earlier nodes, so one reverse sweep visits each
        // node exactly once with its full upstream gradient.
        for id in (0..self.nodes.len()).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            self.accumulate_inputs(id, &upstream, &mut grads);
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Value, delta: Tensor<T>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi = *gi + *di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_inputs(&self, id: usize, upstream: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, upstream.clone());
                Self::accumulate(grads, *b, upstream.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, upstream.clone());
                Self::accumulate(grads, *b, upstream.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                let ga = Tensor::new(
                    upstream.shape().to_vec(),
                    upstream.data().iter().zip(bd).map(|(&g, &v)| g * v).collect(),
                )
                .expect("mul grad shape");
                let gb = Tensor::new(
                    upstream.shape().to_vec(),
                    upstream.data().iter().zip(ad).map(|(&g, &v)| g * v).collect(),
                )
                .expect("mul grad shape");
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Op::Scale(x, factor) => {
                let f = T::from_f64(*factor);
                Self::accumulate(grads, *x, upstream.map(|v| v * f));
            }
            Op::AddBias(x, bias) => {
                Self::accumulate(grads, *x, upstream.clone());
                let channels = self.value(*bias).numel();
                let mut gb = vec![T::zero(); channels];
                for (i, &g) in upstream.data().iter().enumerate() {
                    gb[i % channels] = gb[i % channels] + g;
                }
                Self::accumulate(grads, *bias, Tensor::new(vec![channels], gb).expect("bias grad"));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = g . B^T, dB = A^T . g
                let mut b_t = vec![T::zero(); k * n];
                kernels::transpose(k, n, self.value(*b).data(), &mut b_t);
                let mut ga = vec![T::zero(); m * k];
                kernels::gemm(m, n, k, upstream.data(), &b_t, &mut ga);
                let mut a_t = vec![T::zero(); m * k];
                kernels::transpose(m, k, self.value(*a).data(), &mut a_t);
                let mut gb = vec![T::zero(); k * n];
                kernels::gemm(k, m, n, &a_t, upstream.data(), &mut gb);
                Self::accumulate(grads, *a, Tensor::new(vec![m, k], ga).expect("matmul grad"));
                Self::accumulate(grads, *b, Tensor::new(vec![k, n], gb).expect("matmul grad"));
            }
            Op::Conv2d { x, weight, k } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*weight).shape();
                let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = ws[3];
                let mut gx = vec![T::zero(); b * h * w * cin];
                let mut gw = vec![T::zero(); k * k * cin * cout];
                kernels::conv2d_backward(
                    b,
                    h,
                    w,
                    cin,
                    cout,
                    *k,
                    self.value(*x).data(),
                    self.value(*weight).data(),
                    upstream.data(),
                    &mut gx,
                    &mut gw,
                );
                Self::accumulate(grads, *x, Tensor::new(xs.to_vec(), gx).expect("conv grad"));
                Self::accumulate(grads, *weight, Tensor::new(ws.to_vec(), gw).expect("conv grad"));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let g = Tensor::new(
                    upstream.shape().to_vec(),
                    upstream
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                )
                .expect("relu grad shape");
                Self::accumulate(grads, *x, g);
            }
            Op::Upsample2x(x) => {
                let xs = self.value(*x).shape();
                let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let mut gx = vec![T::zero(); b * h * w * c];
                kernels::bilinear_up2_backward(b, h, w, c, upstream.data(), &mut gx);
                Self::accumulate(grads, *x, Tensor::new(xs.to_vec(), gx).expect("upsample grad"));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = upstream.data()[0] / T::from_f64(n as f64);
                Self::accumulate(grads, *x, Tensor::filled(self.value(*x).shape().to_vec(), g));
            }
            Op::MeanPerSample(x) => {
                let xs = self.value(*x).shape();
                let b = xs[0];
                let per = numel_of(&xs[1..]).max(1);
                let inv = T::from_f64(1.0 / per as f64);
                let mut gx = vec![T::zero(); b * per];
                for bi in 0..b {
                    let g = upstream.data()[bi] * inv;
                    gx[bi * per..(bi + 1) * per].fill(g);
                }
                Self::accumulate(grads, *x, Tensor::new(xs.to_vec(), gx).expect("mean grad"));
            }
            Op::Powi(x, exponent) => {
                let e = T::from_f64(*exponent as f64);
                let xd = self.value(*x).data();
                let g = Tensor::new(
                    upstream.shape().to_vec(),
                    upstream
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| g * e * v.powi(*exponent as i32 - 1))
                        .collect(),
                )
                .expect("powi grad shape");
                Self::accumulate(grads, *x, g);
            }
            Op::Reshape(x) => {
                let g = upstream
                    .reshaped(self.value(*x).shape().to_vec())
                    .expect("reshape grad");
                Self::accumulate(grads, *x, g);
            }
            Op::StopGradient(_) => {}
            Op::Huberize { x, h } => {
                let hv = T::from_f64(*h);
                let half = T::from_f64(0.5);
                let xd = self.value(*x).data();
                let g = Tensor::new(
                    upstream.shape().to_vec(),
                    upstream
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v < hv { g } else { g * half * (hv / v).sqrt() })
                        .collect(),
                )
                .expect("huberize grad shape");
                Self::accumulate(grads, *x, g);
            }
        }
    }
}
