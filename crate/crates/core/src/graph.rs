//! Define-by-run reverse-mode autodiff over 2-D tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each primitive validates
//! shapes, computes its value eagerly, checks the result is finite and
//! records enough state for its vector-Jacobian product. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! requires one, so calling it twice without clearing doubles each gradient.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a loss over many rows is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Geometry of a strided 2-D convolution lowered to a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    MeanRows {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        denom: T,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    Im2Col {
        a: Var,
        geom: ConvGeometry,
    },
    L2Normalize {
        a: Var,
        norms: Vec<T>,
    },
    SelectCols {
        a: Var,
        cols: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Tape of recorded operations for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Clears every stored gradient on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    /// Records an input tensor; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    /// Loads a named parameter once per graph; frozen parameters do not require grad.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))?;
        let mut t = t.clone();
        t.grad = None;
        t.requires_grad = !store.is_frozen(name);
        let v = self.push(t, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters loaded on this graph, by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        shape: &[usize],
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i.0].tensor.requires_grad);
        let t = Tensor::new(shape, data)?.with_requires_grad(rg);
        Ok(self.push(t, op))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(CoreError::invalid(
                op,
                format!("expected a matrix, got shape {shape:?}"),
            )),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (br, bc) = self.mat(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(CoreError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.record(
            "matmul",
            &[m, n],
            out,
            Op::MatMul { a, b, trans_b },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("add", &shape, data, Op::Add { a, b }, &[a, b])
    }

    /// Adds a rank-1 `bias` onto every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.mat(a, "add")?;
        let bshape = self.shape(bias).to_vec();
        if bshape.iter().product::<usize>() != c
            || bshape.len() > 2
            || (bshape.len() == 2 && bshape[0] != 1)
        {
            return Err(CoreError::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: bshape,
            });
        }
        let bv = self.value(bias).data().to_vec();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .zip(&bv)
                    .map(|(&x, &y)| x + y)
                    .collect::<Vec<_>>()
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("add", &shape, data, Op::AddBias { a, bias }, &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("mul", &shape, data, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = s::<T>(c);
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.record("scale", &shape, data, Op::Scale { a, c }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = s::<T>(GELU_C);
        let k = s::<T>(0.044715);
        let half = s::<T>(0.5);
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("gelu", &shape, data, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.max(T::zero()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("relu", &shape, data, Op::Relu { a }, &[a])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last dimension of a square score matrix where row
    /// `i` only attends to columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "softmax-lastdim")?;
        if r != c {
            return Err(CoreError::invalid(
                "softmax-lastdim",
                format!("causal mask needs a square matrix, got {r}x{c}"),
            ));
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (_, c) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let live = if causal { i + 1 } else { c };
            softmax_in_place(&mut row[..live]);
            row[live..].iter_mut().for_each(|v| *v = T::zero());
        }
        let shape = self.shape(a).to_vec();
        self.record("softmax-lastdim", &shape, data, Op::Softmax { a }, &[a])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "layernorm")?;
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(CoreError::Shape {
                    op: "layernorm",
                    lhs: self.shape(a).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = s::<T>(LN_EPS);
        let nc = s::<T>(c as f64);
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / nc;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nc;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.record(
            "layernorm",
            &[r, c],
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[a, gain, bias],
        )
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.mat(table, "embedding-gather")?;
        if ids.is_empty() {
            return Err(CoreError::invalid("embedding-gather", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CoreError::invalid(
                "embedding-gather",
                format!("row {bad} out of range for table of {rows} rows"),
            ));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        self.record(
            "embedding-gather",
            &[ids.len(), c],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(CoreError::invalid(
                "concat",
                "need at least one part and axis 0 or 1",
            ));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let (r0, c0) = self.mat(parts[0], "concat")?;
        for &p in &parts[1..] {
            let (r, c) = self.mat(p, "concat")?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(CoreError::Shape {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (shape, data) = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            ([rows, c0], data)
        } else {
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            ([r0, cols], data)
        };
        self.record(
            "concat",
            &shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Contiguous range `start..start+len` along `axis` of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(CoreError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {r}x{c}", start + len),
            ));
        }
        let x = self.value(a).data();
        let (shape, data) = if axis == 0 {
            ([len, c], x[start * c..(start + len) * c].to_vec())
        } else {
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&x[i * c + start..i * c + start + len]);
            }
            ([r, len], d)
        };
        self.record("slice", &shape, data, Op::Slice { a, axis, start }, &[a])
    }

    /// Mean over rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "mean")?;
        let x = self.value(a).data();
        let inv = T::one() / s::<T>(r as f64);
        let mut out = vec![T::zero(); c];
        for row in x.chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        self.record("mean", &[1, c], out, Op::MeanRows { a }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).data();
        let m = x.iter().copied().sum::<T>() / s::<T>(x.len() as f64);
        self.record("mean", &[1], vec![m], Op::MeanAll { a }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).data().iter().copied().sum::<T>();
        self.record("sum", &[1], vec![m], Op::SumAll { a }, &[a])
    }

    /// Negative log-likelihood of `targets` under row-wise softmax of `logits`.
    ///
    /// Rows with `None` targets are ignored. `Mean` divides by the number of
    /// targeted rows, `Sum` returns the total.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        reduction: Reduction,
    ) -> Result<Var> {
        let (r, c) = self.mat(logits, "cross-entropy-with-logits")?;
        if targets.len() != r {
            return Err(CoreError::Shape {
                op: "cross-entropy-with-logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(CoreError::invalid(
                "cross-entropy-with-logits",
                "no targets",
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(CoreError::invalid(
                "cross-entropy-with-logits",
                format!("target {bad} out of range for {c} classes"),
            ));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            total += z.ln() + max - row[t];
        }
        let denom = match reduction {
            Reduction::Mean => s::<T>(count as f64),
            Reduction::Sum => T::one(),
        };
        self.record(
            "cross-entropy-with-logits",
            &[1],
            vec![total / denom],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                denom,
            },
            &[logits],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(CoreError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        self.record("reshape", shape, data, Op::Reshape { a }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.record("transpose", &[c, r], out, Op::Transpose { a }, &[a])
    }

    /// Sum of equally shaped nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| CoreError::invalid("add", "no operands"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Unfolds an image stored as `(height·width) × channels` into
    /// `(out_h·out_w) × (kernel·kernel·channels)` patches, zero padded.
    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Result<Var> {
        let (r, c) = self.mat(a, "im2col")?;
        if r != geom.height * geom.width
            || c != geom.channels
            || geom.kernel == 0
            || geom.stride == 0
        {
            return Err(CoreError::Shape {
                op: "im2col",
                lhs: self.shape(a).to_vec(),
                rhs: vec![geom.height, geom.width, geom.channels],
            });
        }
        let x = self.value(a).data();
        let (oh, ow, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let mut out = vec![T::zero(); oh * ow * pl];
        for_each_patch_entry(&geom, |o, p, src| out[o * pl + p] = x[src]);
        self.record("im2col", &[oh * ow, pl], out, Op::Im2Col { a, geom }, &[a])
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.mat(a, "l2-normalize")?;
        let x = self.value(a).data();
        let eps = s::<T>(1e-12);
        let norms: Vec<T> = x
            .chunks(c)
            .map(|row| (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt())
            .collect();
        let data = x
            .chunks(c)
            .zip(&norms)
            .flat_map(|(row, &n)| row.iter().map(move |&v| v / n))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(
            "l2-normalize",
            &shape,
            data,
            Op::L2Normalize { a, norms },
            &[a],
        )
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(a, "select-cols")?;
        if cols.is_empty() || cols.iter().any(|&j| j >= c) {
            return Err(CoreError::invalid(
                "select-cols",
                format!("columns {cols:?} invalid for width {c}"),
            ));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            out.extend(cols.iter().map(|&j| x[i * c + j]));
        }
        self.record(
            "select-cols",
            &[r, cols.len()],
            out,
            Op::SelectCols {
                a,
                cols: cols.to_vec(),
            },
            &[a],
        )
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(CoreError::invalid(
                "dropout",
                format!("rate {rate} must be below 1"),
            ));
        }
        let keep = s::<T>(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("dropout", &shape, data, Op::Dropout { a, mask }, &[a])
    }

    /// Back-propagates from a scalar `loss`, accumulating into every node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.vjp(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.tensor.requires_grad, g) {
                match &mut node.tensor.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.tensor.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.tensor.data();
        let rg = |v: Var| self.nodes[v.0].tensor.requires_grad;
        let numel = |v: Var| self.nodes[v.0].tensor.numel();
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![T::zero(); numel($v)])
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2();
                let n = node.tensor.dims2().1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if rg(*a) {
                    // dA = dY · op(B)ᵀ
                    let (rsb, csb) = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        dy,
                        n as isize,
                        1,
                        bv,
                        rsb,
                        csb,
                        T::one(),
                        acc!(*a),
                        k as isize,
                        1,
                    );
                }
                if rg(*b) {
                    if *trans_b {
                        // dB (n×k) = dYᵀ · A
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            dy,
                            1,
                            n as isize,
                            av,
                            k as isize,
                            1,
                            T::one(),
                            acc!(*b),
                            k as isize,
                            1,
                        );
                    } else {
                        // dB (k×n) = Aᵀ · dY
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av,
                            1,
                            k as isize,
                            dy,
                            n as isize,
                            1,
                            T::one(),
                            acc!(*b),
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        acc!(v).iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if rg(*a) {
                    acc!(*a).iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if rg(*bias) {
                    let c = node.tensor.dims2().1;
                    let gb = acc!(*bias);
                    for row in dy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if rg(*a) {
                    acc!(*a)
                        .iter_mut()
                        .zip(dy.iter().zip(bv))
                        .for_each(|(g, (&d, &x))| *g += d * x);
                }
                if rg(*b) {
                    acc!(*b)
                        .iter_mut()
                        .zip(dy.iter().zip(av))
                        .for_each(|(g, (&d, &x))| *g += d * x);
                }
            }
            Op::Scale { a, c } => {
                acc!(*a).iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *c);
            }
            Op::Gelu { a } => {
                let c = s::<T>(GELU_C);
                let k = s::<T>(0.044715);
                let half = s::<T>(0.5);
                let three = s::<T>(3.0);
                let xv = self.value(*a).data();
                acc!(*a)
                    .iter_mut()
                    .zip(dy.iter().zip(xv))
                    .for_each(|(g, (&d, &x))| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *g += d * (half * (T::one() + t) + half * x * dt);
                    });
            }
            Op::Relu { a } => {
                let xv = self.value(*a).data();
                acc!(*a)
                    .iter_mut()
                    .zip(dy.iter().zip(xv))
                    .for_each(|(g, (&d, &x))| {
                        if x > T::zero() {
                            *g += d;
                        }
                    });
            }
            Op::Softmax { a } => {
                let c = node.tensor.dims2().1;
                let ga = acc!(*a);
                for ((gr, yr), dr) in ga.chunks_mut(c).zip(y.chunks(c)).zip(dy.chunks(c)) {
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for j in 0..c {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.tensor.dims2().1;
                let gv = self.value(*gain).data();
                if rg(*gain) {
                    let gg = acc!(*gain);
                    for (dr, hr) in dy.chunks(c).zip(xhat.chunks(c)) {
                        gg.iter_mut()
                            .zip(dr.iter().zip(hr))
                            .for_each(|(g, (&d, &h))| *g += d * h);
                    }
                }
                if rg(*bias) {
                    let gb = acc!(*bias);
                    for dr in dy.chunks(c) {
                        gb.iter_mut().zip(dr).for_each(|(g, &d)| *g += d);
                    }
                }
                if rg(*a) {
                    let nc = s::<T>(c as f64);
                    let ga = acc!(*a);
                    let mut dh = vec![T::zero(); c];
                    for (row, ((dr, hr), &rs)) in
                        dy.chunks(c).zip(xhat.chunks(c)).zip(rstd).enumerate()
                    {
                        for j in 0..c {
                            dh[j] = dr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / nc;
                        let mean_dhh = dh.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() / nc;
                        let gr = &mut ga[row * c..(row + 1) * c];
                        for j in 0..c {
                            gr[j] += rs * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = node.tensor.dims2().1;
                let gt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(&dy[r * c..(r + 1) * c])
                        .for_each(|(g, &d)| *g += d);
                }
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = node.tensor.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2();
                    if rg(p) {
                        let gp = acc!(p);
                        if *axis == 0 {
                            gp.iter_mut()
                                .zip(&dy[offset * cols..(offset + pr) * cols])
                                .for_each(|(g, &d)| *g += d);
                        } else {
                            for r in 0..rows {
                                let src = &dy[r * cols + offset..r * cols + offset + pc];
                                gp[r * pc..(r + 1) * pc]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(g, &d)| *g += d);
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { a, axis, start } => {
                let (_, c) = self.value(*a).dims2();
                let (r, len) = node.tensor.dims2();
                let ga = acc!(*a);
                if *axis == 0 {
                    ga[start * c..start * c + dy.len()]
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, &d)| *g += d);
                } else {
                    for i in 0..r {
                        ga[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(&dy[i * len..(i + 1) * len])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::MeanRows { a } => {
                let (r, c) = self.value(*a).dims2();
                let inv = T::one() / s::<T>(r as f64);
                for row in acc!(*a).chunks_mut(c) {
                    row.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * inv);
                }
            }
            Op::MeanAll { a } => {
                let inv = dy[0] / s::<T>(numel(*a) as f64);
                acc!(*a).iter_mut().for_each(|g| *g += inv);
            }
            Op::SumAll { a } => {
                let d = dy[0];
                acc!(*a).iter_mut().for_each(|g| *g += d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            } => {
                let c = self.value(*logits).dims2().1;
                let scale = dy[0] / *denom;
                let gl = acc!(*logits);
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let gr = &mut gl[i * c..(i + 1) * c];
                    for j in 0..c {
                        gr[j] += probs[i * c + j] * scale;
                    }
                    gr[t] -= scale;
                }
            }
            Op::Reshape { a } => {
                acc!(*a).iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
            }
            Op::Transpose { a } => {
                let (r, c) = self.value(*a).dims2();
                let ga = acc!(*a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += dy[j * r + i];
                    }
                }
            }
            Op::Im2Col { a, geom } => {
                let pl = geom.patch_len();
                let ga = acc!(*a);
                for_each_patch_entry(geom, |o, p, src| ga[src] += dy[o * pl + p]);
            }
            Op::L2Normalize { a, norms } => {
                let c = node.tensor.dims2().1;
                let ga = acc!(*a);
                for (((gr, yr), dr), &n) in ga
                    .chunks_mut(c)
                    .zip(y.chunks(c))
                    .zip(dy.chunks(c))
                    .zip(norms)
                {
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for j in 0..c {
                        gr[j] += (dr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::SelectCols { a, cols } => {
                let c = self.value(*a).dims2().1;
                let k = cols.len();
                let ga = acc!(*a);
                for (i, dr) in dy.chunks(k).enumerate() {
                    for (&j, &d) in cols.iter().zip(dr) {
                        ga[i * c + j] += d;
                    }
                }
            }
            Op::Dropout { a, mask } => {
                acc!(*a)
                    .iter_mut()
                    .zip(dy.iter().zip(mask))
                    .for_each(|(g, (&d, &m))| *g += d * m);
            }
        }
    }
}

/// Calls `f(output_row, patch_offset, source_index)` for every in-bounds
/// entry of the unfolded patch matrix.
fn for_each_patch_entry(geom: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (h, w, ch, k) = (
        geom.height as isize,
        geom.width as isize,
        geom.channels,
        geom.kernel,
    );
    for oy in 0..oh {
        for ox in 0..ow {
            let o = oy * ow + ox;
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let src = (iy * w + ix) as usize * ch;
                    let p = (ky * k + kx) * ch;
                    for c in 0..ch {
                        f(o, p + c, src + c);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Log-softmax of a single row, in f64.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| (v.to_f64_lossy() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|v| v.to_f64_lossy() - lse).collect()
}
