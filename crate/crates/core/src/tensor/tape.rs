use super::conv::{self, ConvGeom};
use super::ops;
use super::Tensor;
use crate::affine;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics source for normalization layers.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with frozen running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics, variance unbiased, for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Which form of the smoothed cross-entropy to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CeVariant {
    /// `-sum_i q_i log p_i` with `q = (1-eps) onehot + eps / C`.
    #[default]
    SmoothedTargets,
    /// `-sum_i y_i log(p_i + eps / C)` with one-hot `y`.
    LogShift,
}

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const PROB_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        per_instance: bool,
        batch_stats: bool,
    },
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    AffineGrid {
        theta: Var,
    },
    GridSample {
        input: Var,
        grid: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        dl_dp: Vec<f64>,
    },
    Triplet {
        emb: Var,
        terms: Vec<(usize, usize, usize)>,
        squared: bool,
        anchors: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every op's inputs precede it and
/// a single reverse sweep visits each op exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn out(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = self.rg(inputs);
        let t = Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: rg,
        };
        self.push(t, op, rg)
    }

    fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<()> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::dim(format!(
                "{what} expects rank {rank}, got shape {s:?}"
            )));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // forward ops

    /// `input` is `[N, C_in, H, W]`, `kernel` is `[C_out, C_in, kH, kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.expect_rank(input, 4, "conv2d input")?;
        self.expect_rank(kernel, 4, "conv2d kernel")?;
        let &[n, cin, h, w] = self.shape(input) else {
            unreachable!()
        };
        let &[cout, kcin, kh, kw] = self.shape(kernel) else {
            unreachable!()
        };
        if cin != kcin {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!(
                    "conv2d bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let y = conv::forward(
            self.exec,
            &geom,
            n,
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
        );
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.out(
            &[n, cout, geom.ho, geom.wo],
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.out(&shape, y, Op::Relu(x), &[x])
    }

    /// `x` is `[N, D]`, `w` is `[O, D]`, `b` is `[O]`; returns `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.expect_rank(x, 2, "linear input")?;
        self.expect_rank(w, 2, "linear weight")?;
        let &[n, d] = self.shape(x) else { unreachable!() };
        let &[o, wd] = self.shape(w) else { unreachable!() };
        if d != wd {
            return Err(Error::dim(format!(
                "linear: input width {d} vs weight width {wd}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim(format!(
                    "linear bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        let mut y = vec![0.0; n * o];
        conv::gemm(n, d, o, self.data(x), false, self.data(w), true, 0.0, &mut y);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in y.chunks_mut(o) {
                row.iter_mut().zip(bd).for_each(|(v, bb)| *v += bb);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.out(&[n, o], y, Op::Linear { x, w, b }, &inputs))
    }

    /// Non-overlapping `k x k` average pooling over `[N, C, H, W]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (shape, y) = ops::avg_pool_forward(self.value(x), k)?;
        Ok(self.out(&shape, y, Op::AvgPool { x, k }, &[x]))
    }

    /// Non-overlapping `k x k` max pooling over `[N, C, H, W]`.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (shape, y, argmax) = ops::max_pool_forward(self.value(x), k)?;
        Ok(self.out(&shape, y, Op::MaxPool { x, argmax }, &[x]))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.expect_rank(x, 4, "global_avg_pool")?;
        let &[n, c, h, w] = self.shape(x) else {
            unreachable!()
        };
        let s = (h * w) as f64;
        let y = self
            .data(x)
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / s)
            .collect();
        Ok(self.out(&[n, c], y, Op::GlobalAvgPool(x), &[x]))
    }

    /// Batch normalization over `[N, C, ...]`, per channel.
    ///
    /// In [`NormMode::Batch`] the returned stats are this batch's mean and
    /// unbiased variance, ready for a running-average update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BnStats>)> {
        let (y, xhat, inv_std, stats) = ops::norm_forward(
            self.value(x),
            self.data(gamma),
            self.data(beta),
            false,
            mode,
        )?;
        let shape = self.shape(x).to_vec();
        let v = self.out(
            &shape,
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_instance: false,
                batch_stats: matches!(mode, NormMode::Batch),
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Instance normalization over `[N, C, H, W]`, per sample and channel.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.expect_rank(x, 4, "instance_norm")?;
        let (y, xhat, inv_std, _) = ops::norm_forward(
            self.value(x),
            self.data(gamma),
            self.data(beta),
            true,
            NormMode::Batch,
        )?;
        let shape = self.shape(x).to_vec();
        Ok(self.out(
            &shape,
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_instance: true,
                batch_stats: true,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let y = t.data().chunks(d).flat_map(ops::softmax_row).collect();
        let shape = t.shape().to_vec();
        self.out(&shape, y, Op::Softmax(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.out(&shape, y, Op::Scale(x, factor), &[x])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                y.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.out(
            &shape,
            y,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Normalizes each row (last axis) to unit Euclidean norm.
    /// Returns the indices of zero rows, which are left as zero vectors.
    pub fn l2_normalize_flagged(&mut self, x: Var) -> (Var, Vec<usize>) {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut norms = Vec::with_capacity(t.numel() / d);
        let mut y = Vec::with_capacity(t.numel());
        let mut zero_rows = Vec::new();
        for (r, row) in t.data().chunks(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n == 0.0 {
                zero_rows.push(r);
                y.extend(std::iter::repeat_n(0.0, d));
            } else {
                y.extend(row.iter().map(|v| v / n));
            }
        }
        let shape = t.shape().to_vec();
        let v = self.out(&shape, y, Op::L2Normalize { x, norms }, &[x]);
        (v, zero_rows)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        self.l2_normalize_flagged(x).0
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.out(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.data(x);
        let s = t.iter().sum::<f64>() / t.len() as f64;
        self.out(&[1], vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let y = self.data(x).to_vec();
        Ok(self.out(shape, y, Op::Reshape(x), &[x]))
    }

    /// `theta` is `[N, 6]`; returns the source-coordinate grid `[N, H, W, 2]`.
    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        self.expect_rank(theta, 2, "affine_grid")?;
        let &[n, six] = self.shape(theta) else {
            unreachable!()
        };
        if six != 6 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "affine_grid expects [N, 6] and a non-empty target, got {:?} -> {h}x{w}",
                self.shape(theta)
            )));
        }
        let t = self.data(theta);
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index: i,
                message: "non-finite affine parameter".into(),
            });
        }
        let mut y = Vec::with_capacity(n * h * w * 2);
        for row in t.chunks(6) {
            y.extend(affine::grid_kernel(row.try_into().unwrap(), h, w));
        }
        Ok(self.out(&[n, h, w, 2], y, Op::AffineGrid { theta }, &[theta]))
    }

    /// Bilinear sampling of `input [N, C, H, W]` at `grid [N, Ho, Wo, 2]`
    /// with zero padding outside the image.
    pub fn grid_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        self.expect_rank(input, 4, "grid_sample input")?;
        self.expect_rank(grid, 4, "grid_sample grid")?;
        let &[n, c, h, w] = self.shape(input) else {
            unreachable!()
        };
        let &[gn, ho, wo, two] = self.shape(grid) else {
            unreachable!()
        };
        if gn != n || two != 2 {
            return Err(Error::dim(format!(
                "grid_sample: grid {:?} incompatible with input {:?}",
                self.shape(grid),
                self.shape(input)
            )));
        }
        let x = self.data(input);
        let g = self.data(grid);
        let (il, gl) = (c * h * w, ho * wo * 2);
        let mut y = Vec::with_capacity(n * c * ho * wo);
        for s in 0..n {
            y.extend(affine::sample_kernel(
                &x[s * il..(s + 1) * il],
                [c, h, w],
                &g[s * gl..(s + 1) * gl],
                [ho, wo],
            ));
        }
        Ok(self.out(&[n, c, ho, wo], y, Op::GridSample { input, grid }, &[input, grid]))
    }

    /// Mean over the batch of the (smoothed) cross-entropy of `logits [B, C]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        variant: CeVariant,
    ) -> Result<Var> {
        self.expect_rank(logits, 2, "cross_entropy")?;
        let &[b, c] = self.shape(logits) else {
            unreachable!()
        };
        if targets.len() != b {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for batch of {b}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::dim(format!("target {t} out of range for {c} classes")));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Usage(format!("label smoothing {eps} outside [0, 1)")));
        }
        let (loss, probs, dl_dp) = ops::cross_entropy(self.data(logits), c, targets, eps, variant);
        Ok(self.out(
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                dl_dp,
            },
            &[logits],
        ))
    }

    /// Batch-hard triplet loss over `emb [B, D]`: per anchor, the farthest
    /// positive and the nearest negative, hinge `d_pos - d_neg + margin`,
    /// averaged over anchors that have a positive. With `squared`, distances
    /// enter squared.
    pub fn batch_hard_triplet(
        &mut self,
        emb: Var,
        labels: &[usize],
        margin: f64,
        squared: bool,
    ) -> Result<Var> {
        self.expect_rank(emb, 2, "batch_hard_triplet")?;
        let &[b, d] = self.shape(emb) else {
            unreachable!()
        };
        if labels.len() != b {
            return Err(Error::dim(format!(
                "batch_hard_triplet: {} labels for batch of {b}",
                labels.len()
            )));
        }
        let (loss, terms, anchors) =
            ops::batch_hard_triplet(self.data(emb), d, labels, margin, squared)?;
        Ok(self.out(
            &[1],
            vec![loss],
            Op::Triplet {
                emb,
                terms,
                squared,
                anchors,
            },
            &[emb],
        ))
    }

    // ------------------------------------------------------------------
    // reverse sweep

    /// Populates the gradient slot of every tensor reachable from `loss`
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    /// Clears every gradient slot so the tape can be swept again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let n = self.shape(*input)[0];
                let cg = conv::backward(
                    self.exec,
                    geom,
                    n,
                    self.data(*input),
                    self.data(*kernel),
                    g,
                );
                acc(*input, cg.input);
                acc(*kernel, cg.kernel);
                if let Some(b) = bias {
                    acc(*b, cg.bias);
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 })
                    .collect();
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let &[n, d] = self.shape(*x) else { unreachable!() };
                let o = self.shape(*w)[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * d];
                    conv::gemm(n, o, d, g, false, self.data(*w), false, 0.0, &mut dx);
                    acc(*x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; o * d];
                    conv::gemm(o, n, d, g, true, self.data(*x), false, 0.0, &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    acc(*b, db);
                }
            }
            Op::AvgPool { x, k } => {
                acc(*x, ops::avg_pool_backward(self.shape(*x), *k, g));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &gg) in argmax.iter().zip(g) {
                    dx[src] += gg;
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let &[_, _, h, w] = self.shape(*x) else {
                    unreachable!()
                };
                let s = (h * w) as f64;
                let dx = g
                    .iter()
                    .flat_map(|&gg| std::iter::repeat_n(gg / s, h * w))
                    .collect();
                acc(*x, dx);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_instance,
                batch_stats,
            } => {
                let ng = ops::norm_backward(
                    self.shape(*x),
                    self.data(*gamma),
                    xhat,
                    inv_std,
                    *per_instance,
                    *batch_stats,
                    g,
                );
                acc(*x, ng.input);
                acc(*gamma, ng.gamma);
                acc(*beta, ng.beta);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yy, gg)| yy * (gg - dot)));
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(db).map(|(gg, v)| gg * v).collect());
                acc(*b, g.iter().zip(da).map(|(gg, v)| gg * v).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|v| v * f).collect()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut dv = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        dv.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    acc(v, dv);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks(d).zip(g.chunks(d)).zip(norms) {
                    if n == 0.0 {
                        dx.extend(std::iter::repeat_n(0.0, d));
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yy, gg)| (gg - yy * dot) / n));
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::AffineGrid { theta } => {
                let &[_, h, w, _] = node.value.shape() else {
                    unreachable!()
                };
                let dtheta = g
                    .chunks(h * w * 2)
                    .flat_map(|dg| affine::grid_backward_kernel(dg, h, w))
                    .collect();
                acc(*theta, dtheta);
            }
            Op::GridSample { input, grid } => {
                let &[n, c, h, w] = self.shape(*input) else {
                    unreachable!()
                };
                let &[_, ho, wo, _] = self.shape(*grid) else {
                    unreachable!()
                };
                let (il, gl, ol) = (c * h * w, ho * wo * 2, c * ho * wo);
                let (x, gr) = (self.data(*input), self.data(*grid));
                let mut dx = Vec::with_capacity(n * il);
                let mut dgrid = Vec::with_capacity(n * gl);
                for s in 0..n {
                    let (a, b) = affine::sample_backward_kernel(
                        &x[s * il..(s + 1) * il],
                        [c, h, w],
                        &gr[s * gl..(s + 1) * gl],
                        [ho, wo],
                        &g[s * ol..(s + 1) * ol],
                    );
                    dx.extend(a);
                    dgrid.extend(b);
                }
                acc(*input, dx);
                acc(*grid, dgrid);
            }
            Op::CrossEntropy {
                logits,
                probs,
                dl_dp,
            } => {
                let c = self.shape(*logits)[1];
                let b = probs.len() / c;
                let scale = g[0] / b as f64;
                let mut dz = Vec::with_capacity(probs.len());
                for (pr, gr) in probs.chunks(c).zip(dl_dp.chunks(c)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    dz.extend(pr.iter().zip(gr).map(|(p, q)| scale * p * (q - dot)));
                }
                acc(*logits, dz);
            }
            Op::Triplet {
                emb,
                terms,
                squared,
                anchors,
            } => {
                let d = self.shape(*emb)[1];
                let e = self.data(*emb);
                let mut de = vec![0.0; e.len()];
                let scale = g[0] / *anchors as f64;
                for &(a, p, n) in terms {
                    ops::triplet_pair_grad(e, d, a, p, scale, *squared, &mut de);
                    ops::triplet_pair_grad(e, d, a, n, -scale, *squared, &mut de);
                }
                acc(*emb, de);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn hand_convolution_of_two_by_two_window() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 5.0);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 7, 9]));
        let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 5]);
        let bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, bad, None, 1, 0), Err(Error::Dimension(_))));
        let big = tape.constant(Tensor::zeros(&[1, 3, 10, 3]));
        assert!(tape.conv2d(x, big, None, 1, 0).is_err());
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1., 2., 0.]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0., 2., 0.]);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 1., 0.]);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1 - 1.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_uniform_and_row_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0., 0., 0.]));
        let y = tape.softmax(x);
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = tape.constant(Tensor::from_fn(&[4, 5], |i| ((i * 37) % 11) as f64 * 3.3 - 15.0));
        let y = tape.softmax(z);
        for row in tape.value(y).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 3], 4.2));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.instance_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_standardizes_each_channel() {
        let mut tape = Tape::new();
        // spread chosen so that eps / var stays below 1e-6
        let x = tape.constant(Tensor::from_fn(&[4, 3, 5, 5], |i| {
            (((i * 7919) % 101) as f64 - 50.0) * 10.0 + (i % 3) as f64
        }));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batch_norm(x, g, b, NormMode::Batch).unwrap();
        assert!(stats.is_some());
        let y = tape.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-6, "var {v}");
        }
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_flag() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3., 4., 0., 0.]));
        let (y, zero) = tape.l2_normalize_flagged(x);
        assert_eq!(zero, vec![1]);
        assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn concat_channels_layout() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]
        );
    }

    #[test]
    fn gradients_accumulate_across_fan_out() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.5, -2.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -3.0]);
    }
}
