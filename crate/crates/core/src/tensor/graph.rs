use rand::RngCore;

use super::ops::{self, ConvGeom, Mode, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// Entry cap for full Jacobian extraction (4096 x 4096).
pub const DEFAULT_JACOBIAN_CAP: usize = 4096 * 4096;

/// Rows of the Jacobian extracted per backward sweep.
const JACOBIAN_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Where a node reads a secondary operand from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        padding: Padding,
    },
    Dense {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Relu,
    LeakyRelu {
        slope: f32,
    },
    Tanh,
    Sigmoid,
    Dropout {
        rate: f32,
    },
    GlobalAvgPool,
    /// Adds the output of `skip` to the running value.
    Add {
        skip: Source,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::ConvTranspose2d { .. } => "conv2d_transpose",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::Tanh => "tanh",
            Layer::Sigmoid => "sigmoid",
            Layer::Dropout { .. } => "dropout",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Add { .. } => "add",
        }
    }

    fn params(&self) -> Vec<ParamId> {
        match *self {
            Layer::Conv2d { kernel, bias, .. } | Layer::ConvTranspose2d { kernel, bias, .. } => {
                std::iter::once(kernel).chain(bias).collect()
            }
            Layer::Dense { weight, bias } => std::iter::once(weight).chain(bias).collect(),
            _ => Vec::new(),
        }
    }
}

/// One layer application; it consumes the output of the preceding node
/// (or the graph input for node 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub layer: Layer,
    /// Per-item output shape.
    pub out_shape: Vec<usize>,
}

/// A sequential acyclic network with optional residual skips.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    param_names: Vec<String>,
    params: Vec<Tensor>,
}

/// Activations recorded by a forward pass, consumed by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    input: Tensor,
    outputs: Vec<Tensor>,
    masks: Vec<Option<Vec<f32>>>,
}

impl Trace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Output of node `i`.
    pub fn node_output(&self, i: usize) -> &Tensor {
        &self.outputs[i]
    }

    pub fn into_output(mut self) -> Tensor {
        self.outputs.pop().unwrap_or(self.input)
    }
}

/// Gradients of a scalar objective with respect to every parameter and the input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

/// Dense Jacobian `d output / d input`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl JacobianMatrix {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// `J v`, accumulated in `f64`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(&a, &b)| a as f64 * b).sum())
            .collect()
    }
}

fn with_batch(batch: usize, item: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(item.len() + 1);
    s.push(batch);
    s.extend_from_slice(item);
    s
}

fn add_bias(out: &mut [f32], bias: &Tensor) {
    let c = bias.len();
    for row in out.chunks_exact_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn bias_grad(grad_out: &[f32], c: usize) -> Vec<f32> {
    let mut g = vec![0.0f64; c];
    for row in grad_out.chunks_exact(c) {
        for (acc, &v) in g.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    g.into_iter().map(|v| v as f32).collect()
}

fn scale_by(t: &mut [f32], factor: &[f32]) {
    let n = factor.len();
    for chunk in t.chunks_exact_mut(n) {
        for (v, &f) in chunk.iter_mut().zip(factor) {
            *v *= f;
        }
    }
}

fn relu_slope(x: f32, negative: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else {
        negative
    }
}

impl Graph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.nodes
            .last()
            .map(|n| n.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.param_names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.params[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, replacement has {:?}",
                self.param_names[id.0],
                self.params[id.0].shape(),
                value.shape()
            )));
        }
        self.params[id.0] = value;
        Ok(())
    }

    /// Index of the first node of the given kind.
    pub fn find_node(&self, kind: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.layer.kind() == kind)
    }

    fn node_label(&self, i: usize) -> String {
        format!("node {i} ({})", self.nodes[i].layer.kind())
    }

    fn batch_of(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() == self.input_shape.len() + 1 && s[1..] == self.input_shape[..] {
            Ok(s[0])
        } else {
            Err(Error::shape(format!(
                "graph expects a batch of {:?}, got {:?}",
                self.input_shape, s
            )))
        }
    }

    /// Deterministic inference on a single item (`input_shape`) or a batch.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() == self.input_shape.as_slice() {
            let batch = x.clone().reshape(&with_batch(1, &self.input_shape))?;
            let out = self.run(&batch, None, None)?.into_output();
            out.reshape(self.output_shape())
        } else {
            Ok(self.run(x, None, None)?.into_output())
        }
    }

    /// Batched forward pass recording activations. `Train` mode samples
    /// dropout masks from `rng`; `Infer` mode never touches it.
    pub fn trace(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Trace> {
        match mode {
            Mode::Train => self.run(x, Some(rng), None),
            Mode::Infer => self.run(x, None, None),
        }
    }

    /// Inference pass that keeps every intermediate activation.
    pub fn trace_infer(&self, x: &Tensor) -> Result<Trace> {
        self.run(x, None, None)
    }

    /// Runs the graph. When `stop` is given, evaluation ends after that node.
    fn run(&self, x: &Tensor, mut rng: Option<&mut dyn RngCore>, stop: Option<usize>) -> Result<Trace> {
        let batch = self.batch_of(x)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut masks = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let prev = if i == 0 { x } else { &outputs[i - 1] };
            let shape = with_batch(batch, &node.out_shape);
            let mut mask = None;
            let data = match node.layer {
                Layer::Conv2d { kernel, bias, stride, padding } => {
                    let k = &self.params[kernel.0];
                    let (g, _) = ops::conv_geom_forward(prev, k, stride, padding)?;
                    let mut out = ops::conv_forward_raw(prev.data(), k.data(), &g);
                    if let Some(b) = bias {
                        add_bias(&mut out, &self.params[b.0]);
                    }
                    out
                }
                Layer::ConvTranspose2d { kernel, bias, stride, padding } => {
                    let k = &self.params[kernel.0];
                    let (g, _) = ops::conv_geom_transpose(prev, k, stride, padding)?;
                    let mut out = ops::conv_input_grad_raw(prev.data(), k.data(), &g);
                    if let Some(b) = bias {
                        add_bias(&mut out, &self.params[b.0]);
                    }
                    out
                }
                Layer::Dense { weight, bias } => {
                    let mut out = ops::dense(prev, &self.params[weight.0])?.into_data();
                    if let Some(b) = bias {
                        add_bias(&mut out, &self.params[b.0]);
                    }
                    out
                }
                Layer::Relu => prev.data().iter().map(|&v| v.max(0.0)).collect(),
                Layer::LeakyRelu { slope } => prev
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { slope * v })
                    .collect(),
                Layer::Tanh => prev.data().iter().map(|&v| v.tanh()).collect(),
                Layer::Sigmoid => prev.data().iter().map(|&v| sigmoid(v)).collect(),
                Layer::Dropout { rate } => match rng.as_deref_mut() {
                    Some(r) if rate > 0.0 => {
                        let m = ops::dropout_mask(prev.len(), rate, r);
                        let out = prev.data().iter().zip(&m).map(|(&v, &s)| v * s).collect();
                        mask = Some(m);
                        out
                    }
                    _ => prev.data().to_vec(),
                },
                Layer::GlobalAvgPool => ops::global_avg_pool(prev)?.into_data(),
                Layer::Add { skip } => {
                    let other = match skip {
                        Source::Input => x,
                        Source::Node(j) => &outputs[j],
                    };
                    prev.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect()
                }
            };
            let out = Tensor::from_raw(shape, data);
            if !out.is_finite() {
                return Err(Error::NonFinite(self.node_label(i)));
            }
            outputs.push(out);
            masks.push(mask);
            if stop == Some(i) {
                break;
            }
        }
        Ok(Trace {
            input: x.clone(),
            outputs,
            masks,
        })
    }

    /// Inference output of node `node` for a batch (used for feature embedding).
    pub fn infer_until(&self, x: &Tensor, node: usize) -> Result<Tensor> {
        if node >= self.nodes.len() {
            return Err(Error::invalid(format!("graph has no node {node}")));
        }
        Ok(self.run(x, None, Some(node))?.into_output())
    }

    /// Vector-Jacobian product of the recorded pass with `upstream`.
    pub fn backward(&self, trace: &Trace, upstream: &Tensor) -> Result<Gradients> {
        let out = trace.output();
        if upstream.shape() != out.shape() {
            return Err(Error::shape(format!(
                "upstream {:?} does not match output {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let n = self.nodes.len();
        let mut param_grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut node_grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut input_grad: Option<Vec<f32>> = None;
        if n == 0 {
            return Ok(Gradients {
                params: param_grads,
                input: upstream.clone(),
            });
        }
        node_grads[n - 1] = Some(upstream.data().to_vec());

        fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let grad = match node_grads[i].take() {
                Some(g) => g,
                None => vec![0.0; trace.outputs[i].len()],
            };
            let input = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let output = &trace.outputs[i];
            let grad_in: Vec<f32> = match self.nodes[i].layer {
                Layer::Conv2d { kernel, bias, stride, padding } => {
                    let k = &self.params[kernel.0];
                    let (g, _) = ops::conv_geom_forward(input, k, stride, padding)?;
                    ops::conv_kernel_grad_raw(input.data(), &grad, &g, param_grads[kernel.0].data_mut());
                    if let Some(b) = bias {
                        param_grads[b.0] = Tensor::from_raw(vec![g.cout], bias_grad(&grad, g.cout));
                    }
                    ops::conv_input_grad_raw(&grad, k.data(), &g)
                }
                Layer::ConvTranspose2d { kernel, bias, stride, padding } => {
                    let k = &self.params[kernel.0];
                    let (g, _) = ops::conv_geom_transpose(input, k, stride, padding)?;
                    // the dense side of the geometry is this layer's output
                    ops::conv_kernel_grad_raw(&grad, input.data(), &g, param_grads[kernel.0].data_mut());
                    if let Some(b) = bias {
                        param_grads[b.0] = Tensor::from_raw(vec![g.cin], bias_grad(&grad, g.cin));
                    }
                    ops::conv_forward_raw(&grad, k.data(), &g)
                }
                Layer::Dense { weight, bias } => {
                    let w = &self.params[weight.0];
                    let (o, d) = (w.shape()[0], w.shape()[1]);
                    let b = input.batch_len();
                    // dW = grad^T x, dx = grad W
                    ops::gemm(o, b, d, &grad, (1, o), input.data(), (d, 1), 1.0, param_grads[weight.0].data_mut());
                    if let Some(bi) = bias {
                        param_grads[bi.0] = Tensor::from_raw(vec![o], bias_grad(&grad, o));
                    }
                    let mut dx = vec![0.0f32; b * d];
                    ops::gemm(b, o, d, &grad, (o, 1), w.data(), (d, 1), 0.0, &mut dx);
                    dx
                }
                Layer::Relu => grad
                    .iter()
                    .zip(input.data())
                    .map(|(&g, &x)| g * relu_slope(x, 0.0))
                    .collect(),
                Layer::LeakyRelu { slope } => grad
                    .iter()
                    .zip(input.data())
                    .map(|(&g, &x)| g * relu_slope(x, slope))
                    .collect(),
                Layer::Tanh => grad
                    .iter()
                    .zip(output.data())
                    .map(|(&g, &y)| g * (1.0 - y * y))
                    .collect(),
                Layer::Sigmoid => grad
                    .iter()
                    .zip(output.data())
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect(),
                Layer::Dropout { .. } => match &trace.masks[i] {
                    Some(m) => grad.iter().zip(m).map(|(&g, &s)| g * s).collect(),
                    None => grad,
                },
                Layer::GlobalAvgPool => {
                    let (b, h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
                    let scale = 1.0 / (h * w) as f32;
                    let mut dx = vec![0.0f32; b * h * w * c];
                    for bi in 0..b {
                        let gi = &grad[bi * c..(bi + 1) * c];
                        for px in dx[bi * h * w * c..(bi + 1) * h * w * c].chunks_exact_mut(c) {
                            for (d, &g) in px.iter_mut().zip(gi) {
                                *d = g * scale;
                            }
                        }
                    }
                    dx
                }
                Layer::Add { skip } => {
                    match skip {
                        Source::Input => accumulate(&mut input_grad, grad.clone()),
                        Source::Node(j) => accumulate(&mut node_grads[j], grad.clone()),
                    }
                    grad
                }
            };
            if grad_in.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", self.node_label(i))));
            }
            if i == 0 {
                accumulate(&mut input_grad, grad_in);
            } else {
                accumulate(&mut node_grads[i - 1], grad_in);
            }
        }
        for (j, g) in param_grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", self.param_names[j])));
            }
        }
        let input = Tensor::from_raw(
            trace.input.shape().to_vec(),
            input_grad.unwrap_or_else(|| vec![0.0; trace.input.len()]),
        );
        Ok(Gradients {
            params: param_grads,
            input,
        })
    }

    /// Forward-mode derivative at a single point `x` (shape `input_shape`)
    /// along each of the `tangents` (shape `[m, input_shape..]`), in inference
    /// mode. Returns `(f(x), J t_1 .. J t_m)`.
    pub fn jvp(&self, x: &Tensor, tangents: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "jvp point must have shape {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let m = self.batch_of(tangents)?;
        let primal = self.run(&x.clone().reshape(&with_batch(1, &self.input_shape))?, None, None)?;
        let mut tans: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let prev_t = if i == 0 { tangents } else { &tans[i - 1] };
            let prev_p = if i == 0 { &primal.input } else { &primal.outputs[i - 1] };
            let out_p = &primal.outputs[i];
            let data = match node.layer {
                Layer::Conv2d { kernel, stride, padding, .. } => {
                    let k = &self.params[kernel.0];
                    let (g, _) = ops::conv_geom_forward(prev_t, k, stride, padding)?;
                    ops::conv_forward_raw(prev_t.data(), k.data(), &g)
                }
                Layer::ConvTranspose2d { kernel, stride, padding, .. } => {
                    let k = &self.params[kernel.0];
                    let (g, _) = ops::conv_geom_transpose(prev_t, k, stride, padding)?;
                    ops::conv_input_grad_raw(prev_t.data(), k.data(), &g)
                }
                Layer::Dense { weight, .. } => ops::dense(prev_t, &self.params[weight.0])?.into_data(),
                Layer::Relu | Layer::LeakyRelu { .. } => {
                    let neg = match node.layer {
                        Layer::LeakyRelu { slope } => slope,
                        _ => 0.0,
                    };
                    let d: Vec<f32> = prev_p.data().iter().map(|&v| relu_slope(v, neg)).collect();
                    let mut t = prev_t.data().to_vec();
                    scale_by(&mut t, &d);
                    t
                }
                Layer::Tanh => {
                    let d: Vec<f32> = out_p.data().iter().map(|&y| 1.0 - y * y).collect();
                    let mut t = prev_t.data().to_vec();
                    scale_by(&mut t, &d);
                    t
                }
                Layer::Sigmoid => {
                    let d: Vec<f32> = out_p.data().iter().map(|&y| y * (1.0 - y)).collect();
                    let mut t = prev_t.data().to_vec();
                    scale_by(&mut t, &d);
                    t
                }
                Layer::Dropout { .. } => prev_t.data().to_vec(),
                Layer::GlobalAvgPool => ops::global_avg_pool(prev_t)?.into_data(),
                Layer::Add { skip } => {
                    let other = match skip {
                        Source::Input => tangents,
                        Source::Node(j) => &tans[j],
                    };
                    prev_t.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect()
                }
            };
            let t = Tensor::from_raw(with_batch(m, &node.out_shape), data);
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("tangent of {}", self.node_label(i))));
            }
            tans.push(t);
        }
        let out = primal.into_output().reshape(self.output_shape())?;
        let tan = tans.pop().unwrap_or_else(|| tangents.clone());
        Ok((out, tan))
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Full Jacobian of `graph` at the single point `x`, assembled row by row
/// from vector-Jacobian products with unit upstream vectors.
pub fn jacobian(graph: &Graph, x: &Tensor, cap: usize) -> Result<JacobianMatrix> {
    if x.shape() != graph.input_shape() {
        return Err(Error::shape(format!(
            "jacobian point must have shape {:?}, got {:?}",
            graph.input_shape(),
            x.shape()
        )));
    }
    let rows = graph.output_len();
    let cols = graph.input_len();
    if rows.saturating_mul(cols) > cap {
        return Err(Error::JacobianTooLarge { rows, cols, cap });
    }
    let mut data = vec![0.0f32; rows * cols];
    let chunk = JACOBIAN_CHUNK.min(rows);
    let full = Tensor::stack(&vec![x.clone(); chunk])?;
    let trace_full = graph.trace_infer(&full)?;
    let mut start = 0;
    while start < rows {
        let c = chunk.min(rows - start);
        let partial;
        let trace = if c == chunk {
            &trace_full
        } else {
            partial = graph.trace_infer(&Tensor::stack(&vec![x.clone(); c])?)?;
            &partial
        };
        let mut up = Tensor::zeros(&with_batch(c, graph.output_shape()));
        for r in 0..c {
            up.data_mut()[r * rows + start + r] = 1.0;
        }
        let g = graph.backward(trace, &up)?;
        data[start * cols..(start + c) * cols].copy_from_slice(g.input.data());
        start += c;
    }
    Ok(JacobianMatrix { rows, cols, data })
}

/// Incremental constructor that tracks shapes and validates every layer.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    current: Vec<usize>,
    nodes: Vec<Node>,
    param_names: Vec<String>,
    params: Vec<Tensor>,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            current: input_shape.to_vec(),
            nodes: Vec::new(),
            param_names: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn current_shape(&self) -> &[usize] {
        &self.current
    }

    /// The most recent node's output, for use as a residual skip.
    pub fn mark(&self) -> Source {
        match self.nodes.len() {
            0 => Source::Input,
            n => Source::Node(n - 1),
        }
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.param_names.contains(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.param_names.push(name);
        self.params.push(value);
        Ok(ParamId(self.params.len() - 1))
    }

    fn push(&mut self, layer: Layer, out_shape: Vec<usize>) {
        self.current = out_shape.clone();
        self.nodes.push(Node { layer, out_shape });
    }

    fn check_bias(&self, bias: Option<ParamId>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.params[b.0].shape() != [channels] {
                return Err(Error::shape(format!(
                    "bias {} must have shape [{channels}]",
                    self.param_names[b.0]
                )));
            }
        }
        Ok(())
    }

    fn probe(&self) -> Result<Tensor> {
        if self.current.len() != 3 {
            return Err(Error::shape(format!(
                "convolution needs an [H,W,C] value, current shape is {:?}",
                self.current
            )));
        }
        Ok(Tensor::zeros(&with_batch(1, &self.current)))
    }

    pub fn conv2d(&mut self, kernel: ParamId, bias: Option<ParamId>, stride: usize, padding: Padding) -> Result<&mut Self> {
        let probe = self.probe()?;
        let (g, _) = ops::conv_geom_forward(&probe, &self.params[kernel.0], stride, padding)?;
        self.check_bias(bias, g.cout)?;
        self.push(Layer::Conv2d { kernel, bias, stride, padding }, vec![g.oh, g.ow, g.cout]);
        Ok(self)
    }

    pub fn conv2d_transpose(&mut self, kernel: ParamId, bias: Option<ParamId>, stride: usize, padding: Padding) -> Result<&mut Self> {
        let probe = self.probe()?;
        let g: ConvGeom = ops::conv_geom_transpose(&probe, &self.params[kernel.0], stride, padding)?.0;
        self.check_bias(bias, g.cin)?;
        self.push(Layer::ConvTranspose2d { kernel, bias, stride, padding }, vec![g.h, g.w, g.cin]);
        Ok(self)
    }

    pub fn dense(&mut self, weight: ParamId, bias: Option<ParamId>) -> Result<&mut Self> {
        let w = self.params[weight.0].shape().to_vec();
        if self.current.len() != 1 || w.len() != 2 || w[1] != self.current[0] {
            return Err(Error::shape(format!(
                "dense weight {w:?} does not accept value of shape {:?}",
                self.current
            )));
        }
        self.check_bias(bias, w[0])?;
        self.push(Layer::Dense { weight, bias }, vec![w[0]]);
        Ok(self)
    }

    pub fn relu(&mut self) -> &mut Self {
        let s = self.current.clone();
        self.push(Layer::Relu, s);
        self
    }

    pub fn leaky_relu(&mut self, slope: f32) -> &mut Self {
        let s = self.current.clone();
        self.push(Layer::LeakyRelu { slope }, s);
        self
    }

    pub fn tanh(&mut self) -> &mut Self {
        let s = self.current.clone();
        self.push(Layer::Tanh, s);
        self
    }

    pub fn sigmoid(&mut self) -> &mut Self {
        let s = self.current.clone();
        self.push(Layer::Sigmoid, s);
        self
    }

    pub fn dropout(&mut self, rate: f32) -> Result<&mut Self> {
        ops::check_rate(rate)?;
        let s = self.current.clone();
        self.push(Layer::Dropout { rate }, s);
        Ok(self)
    }

    pub fn global_avg_pool(&mut self) -> Result<&mut Self> {
        if self.current.len() != 3 {
            return Err(Error::shape(format!(
                "global average pool needs [H,W,C], got {:?}",
                self.current
            )));
        }
        let c = self.current[2];
        self.push(Layer::GlobalAvgPool, vec![c]);
        Ok(self)
    }

    pub fn add(&mut self, skip: Source) -> Result<&mut Self> {
        let skip_shape = match skip {
            Source::Input => self.input_shape.clone(),
            Source::Node(j) => self
                .nodes
                .get(j)
                .ok_or_else(|| Error::invalid(format!("skip references missing node {j}")))?
                .out_shape
                .clone(),
        };
        if skip_shape != self.current {
            return Err(Error::shape(format!(
                "residual add of {:?} onto {:?}",
                skip_shape, self.current
            )));
        }
        let s = self.current.clone();
        self.push(Layer::Add { skip }, s);
        Ok(self)
    }

    pub fn finish(self) -> Result<Graph> {
        let mut used = vec![false; self.params.len()];
        for n in &self.nodes {
            for p in n.layer.params() {
                used[p.0] = true;
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::Consistency(format!(
                "parameter {} is not referenced by any node",
                self.param_names[i]
            )));
        }
        Ok(Graph {
            input_shape: self.input_shape,
            nodes: self.nodes,
            param_names: self.param_names,
            params: self.params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn dense_graph(w: Tensor) -> Graph {
        let mut b = GraphBuilder::new(&[w.shape()[1]]);
        let id = b.param("w", w).unwrap();
        b.dense(id, None).unwrap();
        b.finish().unwrap()
    }

    #[test]
    fn dense_input_gradient_is_w_transpose_upstream() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let g = dense_graph(w);
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let tr = g.trace_infer(&x).unwrap();
        let up = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let grads = g.backward(&tr, &up).unwrap();
        assert_eq!(grads.input.data(), &[3.0, 3.5, 2.0]);
        // dW = upstream x^T
        let dw = &grads.params[0];
        assert!((dw.data()[0] - 0.6).abs() < 1e-6);
        assert!((dw.data()[5] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let g = dense_graph(Tensor::zeros(&[2, 3]));
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let tr = g.trace_infer(&x).unwrap();
        let grads = g.backward(&tr, &Tensor::full(&[1, 2], 1.0)).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_jacobian_is_the_weight_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&[5, 4], 1.0, &mut rng);
        let g = dense_graph(w.clone());
        let x = rand_tensor(&[4], 1.0, &mut rng);
        let j = jacobian(&g, &x, DEFAULT_JACOBIAN_CAP).unwrap();
        assert_eq!((j.rows, j.cols), (5, 4));
        assert_eq!(j.data, w.data());
    }

    #[test]
    fn tanh_jacobian_is_diagonal() {
        let mut b = GraphBuilder::new(&[3, 3, 1]);
        b.tanh();
        let g = b.finish().unwrap();
        let x = Tensor::from_fn(&[3, 3, 1], |i| i as f32 * 0.3 - 1.2);
        let j = jacobian(&g, &x, DEFAULT_JACOBIAN_CAP).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let want = if r == c { 1.0 - x.data()[r].tanh().powi(2) } else { 0.0 };
                assert!((j.get(r, c) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_cap_is_enforced() {
        let g = dense_graph(Tensor::zeros(&[10, 10]));
        let err = jacobian(&g, &Tensor::zeros(&[10]), 99).unwrap_err();
        assert!(matches!(err, Error::JacobianTooLarge { rows: 10, cols: 10, cap: 99 }));
    }

    #[test]
    fn relu_subgradient_at_zero_uses_negative_slope() {
        let mut b = GraphBuilder::new(&[2]);
        b.relu();
        let g = b.finish().unwrap();
        let j = jacobian(&g, &Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), 100).unwrap();
        assert_eq!(j.data, vec![0.0, 0.0, 0.0, 1.0]);

        let mut b = GraphBuilder::new(&[1]);
        b.leaky_relu(0.2);
        let g = b.finish().unwrap();
        let j = jacobian(&g, &Tensor::new(vec![1], vec![0.0]).unwrap(), 100).unwrap();
        assert_eq!(j.data, vec![0.2]);
    }

    #[test]
    fn non_finite_activation_names_the_node() {
        let w = Tensor::full(&[1, 1], f32::MAX);
        let mut b = GraphBuilder::new(&[1]);
        let id = b.param("w", w).unwrap();
        b.dense(id, None).unwrap();
        let id2 = b.param("w2", Tensor::full(&[1, 1], f32::MAX)).unwrap();
        b.dense(id2, None).unwrap();
        let g = b.finish().unwrap();
        let err = g.infer(&Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("node 0"), "{msg}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unused_parameter_is_rejected() {
        let mut b = GraphBuilder::new(&[2]);
        b.param("orphan", Tensor::zeros(&[1])).unwrap();
        b.relu();
        assert!(matches!(b.finish(), Err(Error::Consistency(_))));
    }

    #[test]
    fn upstream_shape_must_match() {
        let g = dense_graph(Tensor::zeros(&[2, 3]));
        let tr = g.trace_infer(&Tensor::zeros(&[1, 3])).unwrap();
        assert!(g.backward(&tr, &Tensor::zeros(&[1, 3])).is_err());
    }
}
