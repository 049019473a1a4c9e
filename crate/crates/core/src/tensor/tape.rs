use super::linalg::{gemm, Scalar};
use super::{conv_out_len, shape_err, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
        // im2col buffers, one [patch, out_pixels] block per sample; kept only
        // when the kernels need a gradient
        cols: Vec<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu {
        input: Var,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Lstm {
        xproj: Var,
        h: Var,
        c: Var,
        w_hh: Var,
        rows: usize,
        hidden: usize,
        // activated gates i, f, g, o per row
        gates: Vec<T>,
    },
    Reshape {
        input: Var,
    },
    SliceCols {
        input: Var,
        start: usize,
        rows: usize,
        in_cols: usize,
    },
    ConcatCols {
        inputs: Vec<(Var, usize)>,
        rows: usize,
    },
    SliceRows {
        input: Var,
        offset: usize,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation and replays it backwards.
///
/// Values are copied onto the tape; after [`Tape::backward`] the gradients of
/// leaf values are available through [`Tape::grad`].
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copies a tensor onto the tape. It participates in gradient
    /// computation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        let Tensor { shape, data, .. } = t;
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape shapes are consistent")
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Valid (unpadded) strided 2-D convolution.
    ///
    /// `input` is `[C, H, W]` or `[B, C, H, W]`, `kernels` `[O, C, K, K]`,
    /// `bias` `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernels).to_vec();
        let (batch, c_in, h, w, batched) = match ishape.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [b, c, h, w] => (*b, *c, *h, *w, true),
            _ => return Err(shape_err("conv2d", format!("input rank {}", ishape.len()))),
        };
        let [c_out, kc, kh, kw] = kshape.as_slice() else {
            return Err(shape_err("conv2d", format!("kernel shape {kshape:?}")));
        };
        if *kc != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input has {c_in} channels, kernels expect {kc}"),
            ));
        }
        if kh != kw {
            return Err(shape_err("conv2d", "kernels must be square"));
        }
        if self.shape(bias) != [*c_out] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} for {c_out} kernels", self.shape(bias)),
            ));
        }
        let k = *kh;
        let (Some(ho), Some(wo)) = (conv_out_len(h, k, stride), conv_out_len(w, k, stride)) else {
            return Err(shape_err(
                "conv2d",
                format!("input {h}x{w} too small for {k}x{k} kernel at stride {stride}"),
            ));
        };
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out: *c_out,
            k,
            stride,
            ho,
            wo,
        };
        let keep_cols = self.node(kernels).requires_grad;
        let (patch, pix) = (geom.patch(), geom.out_pixels());
        let mut out = vec![T::zero(); batch * geom.c_out * pix];
        let mut cols = vec![T::zero(); if keep_cols { batch * patch * pix } else { patch * pix }];
        {
            let x = &self.node(input).value;
            let wv = &self.node(kernels).value;
            let bv = &self.node(bias).value;
            for b in 0..batch {
                let col = if keep_cols {
                    &mut cols[b * patch * pix..(b + 1) * patch * pix]
                } else {
                    &mut cols[..]
                };
                im2col(&x[b * geom.in_len()..(b + 1) * geom.in_len()], &geom, col);
                let ob = &mut out[b * geom.c_out * pix..(b + 1) * geom.c_out * pix];
                gemm(geom.c_out, patch, pix, wv, false, col, false, T::zero(), ob);
                for (o, row) in ob.chunks_exact_mut(pix).enumerate() {
                    let bo = bv[o];
                    row.iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let shape = if batched {
            vec![batch, geom.c_out, ho, wo]
        } else {
            vec![geom.c_out, ho, wo]
        };
        let rg = self.rg(&[input, kernels, bias]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Non-overlapping max pooling over the last two axes; trailing rows and
    /// columns that do not fill a window are dropped.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 3 || shape.len() > 4 {
            return Err(shape_err("maxpool2d", format!("input rank {}", shape.len())));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if window == 0 || h < window || w < window {
            return Err(shape_err(
                "maxpool2d",
                format!("{h}x{w} input smaller than window {window}"),
            ));
        }
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let (ho, wo) = (h / window, w / window);
        let x = &self.node(input).value;
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            if window == 2 {
                pool2_plane(x, base, w, ho, wo, &mut out, &mut argmax);
                continue;
            }
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = base + oy * window * w + ox * window;
                    let mut best = x[best_idx];
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
        let mut oshape = shape.clone();
        let r = oshape.len();
        oshape[r - 2] = ho;
        oshape[r - 1] = wo;
        let rg = self.rg(&[input]);
        Ok(self.push(oshape, out, rg, Op::MaxPool { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let n = self.node(input);
        let out = n
            .value
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, out, rg, Op::Relu { input })
    }

    /// `y = W·x + b` for `x` of shape `[N]` or `[B, N]`, `W` `[M, N]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let Some((rows, n_in)) = matrix_dims(&ishape) else {
            return Err(shape_err("dense", format!("input shape {ishape:?}")));
        };
        let [n_out, wn] = *self.shape(weights) else {
            return Err(shape_err(
                "dense",
                format!("weight shape {:?}", self.shape(weights)),
            ));
        };
        if wn != n_in {
            return Err(shape_err(
                "dense",
                format!("input length {n_in} vs weight inner dimension {wn}"),
            ));
        }
        if self.shape(bias) != [n_out] {
            return Err(shape_err("dense", format!("bias shape {:?}", self.shape(bias))));
        }
        let mut out = vec![T::zero(); rows * n_out];
        gemm(
            rows,
            n_in,
            n_out,
            &self.node(input).value,
            false,
            &self.node(weights).value,
            true,
            T::zero(),
            &mut out,
        );
        let bv = &self.node(bias).value;
        for row in out.chunks_exact_mut(n_out) {
            row.iter_mut().zip(bv).for_each(|(y, &b)| *y = *y + b);
        }
        let shape = if ishape.len() == 1 {
            vec![n_out]
        } else {
            vec![rows, n_out]
        };
        let rg = self.rg(&[input, weights, bias]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Dense {
                input,
                weights,
                bias,
                rows,
                n_in,
                n_out,
            },
        ))
    }

    /// One LSTM cell step with gate order (input, forget, candidate, output).
    ///
    /// `w_ih` is `[4H, N]`, `w_hh` `[4H, H]`, `bias` `[4H]`; `x`, `h`, `c` are
    /// single vectors or `[B, ·]` batches. Returns `(h', c')`.
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_step(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
    ) -> Result<(Var, Var), TensorError> {
        let xshape = self.shape(x).to_vec();
        let Some((rows, n_in)) = matrix_dims(&xshape) else {
            return Err(shape_err("lstm_step", format!("x shape {xshape:?}")));
        };
        let Some((hrows, hidden)) = matrix_dims(self.shape(h)) else {
            return Err(shape_err("lstm_step", "h must be rank 1 or 2"));
        };
        if hrows != rows || self.shape(h).len() != xshape.len() || self.shape(c) != self.shape(h) {
            return Err(shape_err(
                "lstm_step",
                format!(
                    "x {:?}, h {:?}, c {:?}",
                    xshape,
                    self.shape(h),
                    self.shape(c)
                ),
            ));
        }
        let g4 = 4 * hidden;
        if self.shape(w_ih) != [g4, n_in]
            || self.shape(w_hh) != [g4, hidden]
            || self.shape(bias) != [g4]
        {
            return Err(shape_err(
                "lstm_step",
                format!(
                    "weights {:?}/{:?}/{:?} for input {n_in}, hidden {hidden}",
                    self.shape(w_ih),
                    self.shape(w_hh),
                    self.shape(bias)
                ),
            ));
        }
        let _ = n_in;
        let xproj = self.dense(x, w_ih, bias)?;
        self.lstm_cell(xproj, h, c, w_hh)
    }

    /// LSTM cell on a precomputed input projection `xproj = W_ih·x + b`
    /// (`[4H]` or `[B, 4H]`). Returns `(h', c')`.
    pub fn lstm_cell(&mut self, xproj: Var, h: Var, c: Var, w_hh: Var) -> Result<(Var, Var), TensorError> {
        let pshape = self.shape(xproj).to_vec();
        let Some((rows, g4)) = matrix_dims(&pshape) else {
            return Err(shape_err("lstm_cell", format!("xproj shape {pshape:?}")));
        };
        let hidden = g4 / 4;
        let hshape = self.shape(h).to_vec();
        if g4 % 4 != 0
            || matrix_dims(&hshape) != Some((rows, hidden))
            || hshape.len() != pshape.len()
            || self.shape(c) != hshape.as_slice()
            || self.shape(w_hh) != [g4, hidden]
        {
            return Err(shape_err(
                "lstm_cell",
                format!(
                    "xproj {pshape:?}, h {hshape:?}, c {:?}, w_hh {:?}",
                    self.shape(c),
                    self.shape(w_hh)
                ),
            ));
        }
        let mut gates = self.node(xproj).value.clone();
        gemm(
            rows,
            hidden,
            g4,
            &self.node(h).value,
            false,
            &self.node(w_hh).value,
            true,
            T::one(),
            &mut gates,
        );
        let cv = &self.node(c).value;
        let mut hc = vec![T::zero(); rows * 2 * hidden];
        for r in 0..rows {
            let g = &mut gates[r * g4..(r + 1) * g4];
            for j in 0..hidden {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[hidden + j]);
                let cand = g[2 * hidden + j].tanh();
                let o = sigmoid(g[3 * hidden + j]);
                g[j] = i;
                g[hidden + j] = f;
                g[2 * hidden + j] = cand;
                g[3 * hidden + j] = o;
                let c_new = f * cv[r * hidden + j] + i * cand;
                hc[r * 2 * hidden + j] = o * c_new.tanh();
                hc[r * 2 * hidden + hidden + j] = c_new;
            }
        }
        let shape = if pshape.len() == 2 {
            vec![rows, 2 * hidden]
        } else {
            vec![2 * hidden]
        };
        let rg = self.rg(&[xproj, h, c, w_hh]);
        let both = self.push(
            shape,
            hc,
            rg,
            Op::Lstm {
                xproj,
                h,
                c,
                w_hh,
                rows,
                hidden,
                gates,
            },
        );
        let h_new = self.slice_cols(both, 0, hidden)?;
        let c_new = self.slice_cols(both, hidden, hidden)?;
        Ok((h_new, c_new))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n = self.node(input);
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", n.shape),
            ));
        }
        let value = n.value.clone();
        let rg = n.requires_grad;
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { input }))
    }

    /// Columns `[start, start+len)` of a vector or matrix.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let Some((rows, cols)) = matrix_dims(&ishape) else {
            return Err(shape_err("slice_cols", format!("shape {ishape:?}")));
        };
        if len == 0 || start + len > cols {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {}) of {cols}", start + len),
            ));
        }
        let x = &self.node(input).value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let shape = if ishape.len() == 1 {
            vec![len]
        } else {
            vec![rows, len]
        };
        let rg = self.rg(&[input]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::SliceCols {
                input,
                start,
                rows,
                in_cols: cols,
            },
        ))
    }

    /// Concatenates vectors (or matrices with equal row counts) along the
    /// last axis.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let rank = self.shape(*first).len();
        let (rows, _) = matrix_dims(self.shape(*first))
            .ok_or_else(|| shape_err("concat_cols", "inputs must be rank 1 or 2"))?;
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            match matrix_dims(self.shape(v)) {
                Some((r, c)) if r == rows && self.shape(v).len() == rank => parts.push((v, c)),
                _ => {
                    return Err(shape_err(
                        "concat_cols",
                        format!("incompatible shape {:?}", self.shape(v)),
                    ))
                }
            }
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(v, c) in &parts {
                out.extend_from_slice(&self.node(v).value[r * c..(r + 1) * c]);
            }
        }
        let shape = if rank == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::ConcatCols {
                inputs: parts,
                rows,
            },
        ))
    }

    /// Rows `[start, start+len)` along the leading axis.
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() < 2 || len == 0 || start + len > ishape[0] {
            return Err(shape_err(
                "slice_rows",
                format!("[{start}, {}) of {ishape:?}", start + len),
            ));
        }
        let row_len: usize = ishape[1..].iter().product();
        let out = self.node(input).value[start * row_len..(start + len) * row_len].to_vec();
        let mut shape = ishape;
        shape[0] = len;
        let rg = self.rg(&[input]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::SliceRows {
                input,
                offset: start * row_len,
            },
        ))
    }

    /// Stacks tensors with equal trailing dimensions along the leading axis.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        if tail.is_empty() {
            return Err(shape_err("concat_rows", "inputs must have rank >= 2"));
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.len() < 2 || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("incompatible shape {s:?}")));
            }
            rows += s[0];
            out.extend_from_slice(&self.node(v).value);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self
            .node(input)
            .value
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[input]);
        self.push(vec![1], vec![s], rg, Op::Sum { input })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let n = self.node(input);
        let out = n.value.iter().map(|&v| v * factor).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, out, rg, Op::Scale { input, factor })
    }

    /// Mean over all elements of `(pred - target)^2`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let p = &self.node(pred).value;
        let t = &self.node(target).value;
        let n = T::from_f64(p.len() as f64);
        let s = p
            .iter()
            .zip(t)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![s / n], rg, Op::Mse { pred, target }))
    }

    /// Reverse pass from a scalar loss. Leaf gradients are kept for
    /// [`Tape::grad`]; intermediate ones are dropped once consumed.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if ln.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, node, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Zero-initialized gradient buffer for `v`, or `None` if `v` does not
/// participate in differentiation.
fn buf<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernels,
            bias,
            geom,
            cols,
        } => {
            let (patch, pix, co) = (geom.patch(), geom.out_pixels(), geom.c_out);
            if let Some(db) = buf(nodes, grads, *bias) {
                for b in 0..geom.batch {
                    for o in 0..co {
                        let s = g[(b * co + o) * pix..(b * co + o + 1) * pix]
                            .iter()
                            .fold(T::zero(), |a, &v| a + v);
                        db[o] = db[o] + s;
                    }
                }
            }
            if let Some(dw) = buf(nodes, grads, *kernels) {
                for b in 0..geom.batch {
                    gemm(
                        co,
                        pix,
                        patch,
                        &g[b * co * pix..(b + 1) * co * pix],
                        false,
                        &cols[b * patch * pix..(b + 1) * patch * pix],
                        true,
                        T::one(),
                        dw,
                    );
                }
            }
            if let Some(dx) = buf(nodes, grads, *input) {
                let w = val(*kernels);
                let mut dcol = vec![T::zero(); patch * pix];
                for b in 0..geom.batch {
                    gemm(
                        patch,
                        co,
                        pix,
                        w,
                        true,
                        &g[b * co * pix..(b + 1) * co * pix],
                        false,
                        T::zero(),
                        &mut dcol,
                    );
                    col2im(
                        &dcol,
                        geom,
                        &mut dx[b * geom.in_len()..(b + 1) * geom.in_len()],
                    );
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(dx) = buf(nodes, grads, *input) {
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx as usize] = dx[idx as usize] + gv;
                }
            }
        }
        Op::Relu { input } => {
            let x = val(*input);
            if let Some(dx) = buf(nodes, grads, *input) {
                for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                    if xv > T::zero() {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::Dense {
            input,
            weights,
            bias,
            rows,
            n_in,
            n_out,
        } => {
            let (rows, n_in, n_out) = (*rows, *n_in, *n_out);
            if let Some(db) = buf(nodes, grads, *bias) {
                for row in g.chunks_exact(n_out) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                }
            }
            if let Some(dw) = buf(nodes, grads, *weights) {
                gemm(n_out, rows, n_in, g, true, val(*input), false, T::one(), dw);
            }
            if let Some(dx) = buf(nodes, grads, *input) {
                gemm(rows, n_out, n_in, g, false, val(*weights), false, T::one(), dx);
            }
        }
        Op::Lstm {
            xproj,
            h,
            c,
            w_hh,
            rows,
            hidden,
            gates,
        } => {
            let (rows, hd) = (*rows, *hidden);
            let g4 = 4 * hd;
            let c_prev = val(*c);
            let mut dpre = vec![T::zero(); rows * g4];
            let mut dc_prev = vec![T::zero(); rows * hd];
            let one = T::one();
            for r in 0..rows {
                let ga = &gates[r * g4..(r + 1) * g4];
                for j in 0..hd {
                    let (i, f, cand, o) = (ga[j], ga[hd + j], ga[2 * hd + j], ga[3 * hd + j]);
                    let cp = c_prev[r * hd + j];
                    let c_new = node.value[r * 2 * hd + hd + j];
                    let tc = c_new.tanh();
                    let dh = g[r * 2 * hd + j];
                    let dc = g[r * 2 * hd + hd + j] + dh * o * (one - tc * tc);
                    let dp = &mut dpre[r * g4..(r + 1) * g4];
                    dp[j] = dc * cand * i * (one - i);
                    dp[hd + j] = dc * cp * f * (one - f);
                    dp[2 * hd + j] = dc * i * (one - cand * cand);
                    dp[3 * hd + j] = dh * tc * o * (one - o);
                    dc_prev[r * hd + j] = dc * f;
                }
            }
            if let Some(dx) = buf(nodes, grads, *xproj) {
                dx.iter_mut().zip(&dpre).for_each(|(d, &v)| *d = *d + v);
            }
            if let Some(dc) = buf(nodes, grads, *c) {
                dc.iter_mut().zip(&dc_prev).for_each(|(d, &v)| *d = *d + v);
            }
            if let Some(dw) = buf(nodes, grads, *w_hh) {
                gemm(g4, rows, hd, &dpre, true, val(*h), false, one, dw);
            }
            if let Some(dh) = buf(nodes, grads, *h) {
                gemm(rows, g4, hd, &dpre, false, val(*w_hh), false, one, dh);
            }
        }
        Op::Reshape { input } => {
            if let Some(dx) = buf(nodes, grads, *input) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
            }
        }
        Op::SliceCols {
            input,
            start,
            rows,
            in_cols,
        } => {
            if let Some(dx) = buf(nodes, grads, *input) {
                let len = g.len() / rows;
                for r in 0..*rows {
                    let dst = &mut dx[r * in_cols + start..r * in_cols + start + len];
                    dst.iter_mut()
                        .zip(&g[r * len..(r + 1) * len])
                        .for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
        Op::ConcatCols { inputs, rows } => {
            let total: usize = inputs.iter().map(|p| p.1).sum();
            let mut off = 0;
            for &(v, c) in inputs {
                if let Some(dx) = buf(nodes, grads, v) {
                    for r in 0..*rows {
                        dx[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[r * total + off..r * total + off + c])
                            .for_each(|(d, &gv)| *d = *d + gv);
                    }
                }
                off += c;
            }
        }
        Op::SliceRows { input, offset } => {
            if let Some(dx) = buf(nodes, grads, *input) {
                dx[*offset..*offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &v)| *d = *d + v);
            }
        }
        Op::ConcatRows { inputs } => {
            let mut off = 0;
            for &v in inputs {
                let n = nodes[v.0].value.len();
                if let Some(dx) = buf(nodes, grads, v) {
                    dx.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(d, &gv)| *d = *d + gv);
                }
                off += n;
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(dx) = buf(nodes, grads, v) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                }
            }
        }
        Op::Sum { input } => {
            if let Some(dx) = buf(nodes, grads, *input) {
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Scale { input, factor } => {
            if let Some(dx) = buf(nodes, grads, *input) {
                dx.iter_mut()
                    .zip(g)
                    .for_each(|(d, &gv)| *d = *d + gv * *factor);
            }
        }
        Op::Mse { pred, target } => {
            let p = val(*pred);
            let t = val(*target);
            let scale = T::from_f64(2.0) * g[0] / T::from_f64(p.len() as f64);
            if let Some(dp) = buf(nodes, grads, *pred) {
                for ((d, &a), &b) in dp.iter_mut().zip(p).zip(t) {
                    *d = *d + scale * (a - b);
                }
            }
            if let Some(dt) = buf(nodes, grads, *target) {
                for ((d, &a), &b) in dt.iter_mut().zip(p).zip(t) {
                    *d = *d - scale * (a - b);
                }
            }
        }
    }
}

/// 2×2 pooling of one plane; ties keep the first element in row-major order.
fn pool2_plane<T: Scalar>(
    x: &[T],
    base: usize,
    w: usize,
    ho: usize,
    wo: usize,
    out: &mut Vec<T>,
    argmax: &mut Vec<u32>,
) {
    for oy in 0..ho {
        let r0 = base + 2 * oy * w;
        let top = &x[r0..r0 + 2 * wo];
        let bot = &x[r0 + w..r0 + w + 2 * wo];
        for (ox, (t, b)) in top.chunks_exact(2).zip(bot.chunks_exact(2)).enumerate() {
            let mut best = t[0];
            let mut off = 0;
            if t[1] > best {
                best = t[1];
                off = 1;
            }
            if b[0] > best {
                best = b[0];
                off = w;
            }
            if b[1] > best {
                best = b[1];
                off = w + 1;
            }
            out.push(best);
            argmax.push((r0 + 2 * ox + off) as u32);
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let pix = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * pix..(row + 1) * pix];
                let span = (g.wo - 1) * g.stride + 1;
                for (oy, d) in dst.chunks_exact_mut(g.wo).enumerate() {
                    let start = c * g.h * g.w + (oy * g.stride + ky) * g.w + kx;
                    let src = &x[start..start + span];
                    for (v, s) in d.iter_mut().zip(src.iter().step_by(g.stride)) {
                        *v = *s;
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let pix = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let srcrow = &col[row * pix..(row + 1) * pix];
                let span = (g.wo - 1) * g.stride + 1;
                for (oy, s) in srcrow.chunks_exact(g.wo).enumerate() {
                    let start = c * g.h * g.w + (oy * g.stride + ky) * g.w + kx;
                    let d = &mut dx[start..start + span];
                    for (v, s) in d.iter_mut().step_by(g.stride).zip(s) {
                        *v = *v + *s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_counting_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::filled(&[1, 5, 5], 1.0));
        let k = tape.leaf(&Tensor::filled(&[1, 1, 5, 5], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y), &[25.0]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 9, 7]));
        let k = tape.leaf(&t(&[3, 2, 5, 5], (0..150).map(|i| i as f64).collect()));
        let b = tape.leaf(&t(&[3], vec![0.5, -1.0, 2.0]));
        let y = tape.conv2d(x, k, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[3, 3, 2]);
        for (o, chunk) in tape.value(y).chunks(6).enumerate() {
            assert!(chunk.iter().all(|&v| v == [0.5, -1.0, 2.0][o]));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 9, 9]));
        let k = tape.leaf(&Tensor::zeros(&[3, 1, 5, 5]));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        assert!(matches!(
            tape.conv2d(x, k, b, 1),
            Err(TensorError::Shape { op: "conv2d", .. })
        ));
        let small = tape.leaf(&Tensor::zeros(&[1, 4, 9]));
        let k1 = tape.leaf(&Tensor::zeros(&[3, 1, 5, 5]));
        assert!(tape.conv2d(small, k1, b, 1).is_err());
    }

    #[test]
    fn maxpool_max_and_tie_routing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).param());
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y), &[4.0]);

        let c = tape.leaf(&Tensor::filled(&[1, 4, 5], 7.0).param());
        let p = tape.maxpool2d(c, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 2]);
        assert!(tape.value(p).iter().all(|&v| v == 7.0));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        let g = tape.grad(c).unwrap();
        let mut expect = vec![0.0; 20];
        for idx in [0, 2, 10, 12] {
            expect[idx] = 1.0;
        }
        assert_eq!(g, expect.as_slice());
        assert!(tape.maxpool2d(c, 5).is_err());
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], vec![-1.0, 0.0, 2.0]).param());
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_identity_and_zero_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], vec![1.0, -2.0, 3.0]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let w = tape.leaf(&t(&[3, 3], eye));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[1.0, -2.0, 3.0]);

        let z = tape.leaf(&Tensor::zeros(&[4]));
        let w2 = tape.leaf(&Tensor::filled(&[2, 4], 3.0));
        let b2 = tape.leaf(&t(&[2], vec![0.25, -0.5]));
        let y2 = tape.dense(z, w2, b2).unwrap();
        assert_eq!(tape.value(y2), &[0.25, -0.5]);
        assert!(tape.dense(x, w2, b2).is_err());
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(&t(&[1, 3], vec![1.0, 0.0, 0.0]).param());
        let q = tape.leaf(&Tensor::zeros(&[1, 3]));
        let l = tape.mse_loss(p, q).unwrap();
        assert!((tape.value(l)[0] - 1.0 / 3.0).abs() < 1e-15);
        tape.backward(l).unwrap();
        // 2 (p - t) / (3B)
        assert_eq!(tape.grad(p).unwrap(), &[2.0 / 3.0, 0.0, 0.0]);
        let same = tape.mse_loss(q, q).unwrap();
        assert_eq!(tape.value(same), &[0.0]);
        let r = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert!(tape.mse_loss(p, r).is_err());
    }

    #[test]
    fn backward_sum_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).param());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 5]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], vec![1.0, 2.0]).param());
        let y = tape.add(x, x).unwrap();
        let y = tape.scale(y, 3.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, 6.0]);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn lstm_zero_everything_gives_zero_state() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[3]));
        let h = tape.leaf(&Tensor::zeros(&[2]));
        let c = tape.leaf(&Tensor::zeros(&[2]));
        let wi = tape.leaf(&Tensor::zeros(&[8, 3]));
        let wh = tape.leaf(&Tensor::zeros(&[8, 2]));
        let b = tape.leaf(&Tensor::zeros(&[8]));
        let (h2, c2) = tape.lstm_step(x, h, c, wi, wh, b).unwrap();
        assert_eq!(tape.value(h2), &[0.0, 0.0]);
        assert_eq!(tape.value(c2), &[0.0, 0.0]);
        let bad = tape.leaf(&Tensor::zeros(&[8, 4]));
        assert!(tape.lstm_step(x, h, c, bad, wh, b).is_err());
    }

    #[test]
    fn row_and_column_glue() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).param());
        let b = tape.leaf(&t(&[2, 1], vec![5.0, 6.0]).param());
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let r = tape.slice_rows(c, 1, 1).unwrap();
        assert_eq!(tape.value(r), &[3.0, 4.0, 6.0]);
        let cc = tape.slice_cols(c, 1, 2).unwrap();
        assert_eq!(tape.value(cc), &[2.0, 5.0, 4.0, 6.0]);
        let stacked = tape.concat_rows(&[r, r]).unwrap();
        assert_eq!(tape.shape(stacked), &[2, 3]);
        let s = tape.sum(stacked);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 2.0]);
    }
}
