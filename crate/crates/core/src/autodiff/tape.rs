use rand::Rng;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Affine(Var, T),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        cols: Vec<T>,
        dims: ConvDims,
    },
    GlobalAvgPool(Var),
    CropWidth {
        x: Var,
        offset: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    L2Normalize {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        norms: Vec<T>,
    },
    CosineSimilarity {
        a: Var,
        b: Var,
        len: usize,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        scale: T,
    },
    BinaryCrossEntropy {
        pred: Var,
        targets: Vec<T>,
        scale: T,
        clip: T,
    },
    SquaredError {
        pred: Var,
        targets: Vec<T>,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in evaluation order; [`Tape::backward`] replays them
/// in reverse to accumulate gradients.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Value written by [`Tape::masked_fill`]; large enough to vanish under
/// `exp` while staying finite in `f32`.
pub const MASK_VALUE: f64 = -1e30;

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (e.g. a bias row added to every row of a matrix).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let period = self.value(b).numel().max(1);
        let bd = self.value(b).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % period])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `gain * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, gain: T, shift: T) -> Var {
        let out = self.map(a, |x| gain * x + shift);
        let rg = self.rg(&[a]);
        self.push(out, Op::Affine(a, gain), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, false, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, false, b, true)
    }

    fn matmul_ext(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.exp());
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.ln());
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::cst(v.numel().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// 2-D convolution with valid padding. `x` is `[B, C, H, W]`, `w` is
    /// `[OC, C, KH, KW]`, `bias` is `[OC]`; output is `[B, OC, OH, OW]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sx[2] < sw[2] || sx[3] < sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &sw[..1]));
            }
        }
        let dims = ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            sh: stride.0,
            sw: stride.1,
            oh: (sx[2] - sw[2]) / stride.0 + 1,
            ow: (sx[3] - sw[3]) / stride.1 + 1,
        };
        let cols = im2col(self.value(x).data(), &dims);
        let rows = dims.rows();
        let mut mat = vec![T::zero(); rows * dims.out_ch];
        T::gemm(
            rows,
            dims.patch(),
            dims.out_ch,
            &cols,
            false,
            self.value(w).data(),
            true,
            &mut mat,
            false,
        );
        let plane = dims.oh * dims.ow;
        let mut out = vec![T::zero(); dims.batch * dims.out_ch * plane];
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        for b in 0..dims.batch {
            for p in 0..plane {
                let src = &mat[(b * plane + p) * dims.out_ch..][..dims.out_ch];
                for (oc, &v) in src.iter().enumerate() {
                    let bv = bias_data.as_ref().map_or(T::zero(), |bd| bd[oc]);
                    out[(b * dims.out_ch + oc) * plane + p] = v + bv;
                }
            }
        }
        let out = Tensor::new(vec![dims.batch, dims.out_ch, dims.oh, dims.ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                cols,
                dims,
            },
            rg,
        ))
    }

    /// Mean over all spatial positions: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::shape("global_avg_pool", &s, &[]));
        }
        let plane = s[2] * s[3];
        let inv = T::cst(1.0 / plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1]], data)?,
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// Keep columns `offset..offset + width` of a `[B, C, H, W]` tensor.
    pub fn crop_width(&mut self, x: Var, offset: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || offset + width > s[3] {
            return Err(Error::shape("crop_width", &s, &[offset, width]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * s[1] * s[2] * width);
        for row in src.chunks(s[3]) {
            data.extend_from_slice(&row[offset..offset + width]);
        }
        let out = Tensor::new(vec![s[0], s[1], s[2], width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::CropWidth { x, offset }, rg))
    }

    /// Inverted dropout; `p = 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidInput(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::cst(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Scale every 1-D fibre along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("l2_normalize", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(outer * inner);
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let sq: T = (0..len).map(|j| src[idx(j)] * src[idx(j)]).sum();
                let n = sq.sqrt();
                if n <= T::zero() {
                    return Err(Error::Norm { row: o * inner + i });
                }
                for j in 0..len {
                    data[idx(j)] = src[idx(j)] / n;
                }
                norms.push(n);
            }
        }
        let out = Tensor::new(s, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
                norms,
            },
            rg,
        ))
    }

    /// Cosine similarity between matching fibres along the last axis; the
    /// last axis is removed from the output shape.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let s = self.shape(a).to_vec();
        let len = *s
            .last()
            .ok_or_else(|| Error::shape("cosine_similarity", &s, &[]))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() / len.max(1));
        for (r, (ra, rb)) in va.chunks(len).zip(vb.chunks(len)).enumerate() {
            let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            if na <= T::zero() || nb <= T::zero() {
                return Err(Error::Norm { row: r });
            }
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let out = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::CosineSimilarity { a, b, len }, rg))
    }

    /// Overwrite masked entries with [`MASK_VALUE`]; they receive no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::shape("masked_fill", v.shape(), &[mask.len()]));
        }
        let fill = T::cst(MASK_VALUE);
        let data = v
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| if m { fill } else { a })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskedFill { x, mask }, rg))
    }

    /// Cross entropy of row-wise softmax against integer class targets.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[targets.len()]));
        }
        let (rows, classes) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidInput(format!(
                "target class {bad} out of range for {classes} classes"
            )));
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::cst(1.0 / rows.max(1) as f64),
        };
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for (r, row) in src.chunks(classes).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            for (c, &x) in row.iter().enumerate() {
                probs[r * classes + c] = (x - lse).exp();
            }
            total += lse - row[targets[r]];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Mean binary cross entropy of probabilities `pred` (clipped to
    /// `[clip, 1 - clip]`) against targets in `[0, 1]`.
    pub fn binary_cross_entropy(&mut self, pred: Var, targets: &Tensor<T>, clip: T) -> Result<Var> {
        let v = self.value(pred);
        if v.shape() != targets.shape() {
            return Err(Error::shape(
                "binary_cross_entropy",
                v.shape(),
                targets.shape(),
            ));
        }
        let scale = T::cst(1.0 / v.numel().max(1) as f64);
        let hi = T::one() - clip;
        let total: T = v
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| {
                let p = p.max(clip).min(hi);
                y * p.ln() + (T::one() - y) * (T::one() - p).ln()
            })
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(-total * scale),
            Op::BinaryCrossEntropy {
                pred,
                targets: targets.data().to_vec(),
                scale,
                clip,
            },
            rg,
        ))
    }

    /// Squared error against fixed targets.
    pub fn squared_error(
        &mut self,
        pred: Var,
        targets: &Tensor<T>,
        reduction: Reduction,
    ) -> Result<Var> {
        let v = self.value(pred);
        if v.shape() != targets.shape() {
            return Err(Error::shape("squared_error", v.shape(), targets.shape()));
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::cst(1.0 / v.numel().max(1) as f64),
        };
        let total: T = v
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::SquaredError {
                pred,
                targets: targets.data().to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients are summed over all
    /// paths; the tape is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", ls, &[]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Accumulate `f(i)` into the gradient buffer of `v`.
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(usize) -> T| {
            if !wants(v) {
                return;
            }
            let len = nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |i| g[i]);
                acc(grads, *b, &mut |i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |i| g[i]);
                acc(grads, *b, &mut |i| -g[i]);
            }
            Op::AddBroadcast(a, b) => {
                acc(grads, *a, &mut |i| g[i]);
                if wants(*b) {
                    let period = nodes[b.0].value.numel().max(1);
                    let mut red = vec![T::zero(); period];
                    for (i, &gi) in g.iter().enumerate() {
                        red[i % period] += gi;
                    }
                    acc(grads, *b, &mut |i| red[i]);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(grads, *a, &mut |i| g[i] * vb[i]);
                acc(grads, *b, &mut |i| g[i] * va[i]);
            }
            Op::Scale(a, c) | Op::Affine(a, c) => {
                acc(grads, *a, &mut |i| g[i] * *c);
            }
            Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    if *ta {
                        // stored k x m: B' * dC^T
                        T::gemm(k, n, m, val(*b), *tb, g, true, &mut da, false);
                    } else {
                        T::gemm(m, n, k, g, false, val(*b), !*tb, &mut da, false);
                    }
                    acc(grads, *a, &mut |i| da[i]);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *tb {
                        // stored n x k: dC^T * A'
                        T::gemm(n, m, k, g, true, val(*a), *ta, &mut db, false);
                    } else {
                        T::gemm(k, m, n, val(*a), !*ta, g, false, &mut db, false);
                    }
                    acc(grads, *b, &mut |i| db[i]);
                }
            }
            Op::Reshape(a) => acc(grads, *a, &mut |i| g[i]),
            Op::Relu(a) => {
                let va = val(*a);
                acc(grads, *a, &mut |i| {
                    if va[i] > T::zero() {
                        g[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, &mut |i| g[i] * y[i] * (T::one() - y[i]));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(grads, *a, &mut |i| g[i] * y[i]);
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(grads, *a, &mut |i| g[i] / va[i]);
            }
            Op::Sum(a) => acc(grads, *a, &mut |_| g[0]),
            Op::Mean(a) => {
                let inv = T::cst(1.0 / nodes[a.0].value.numel().max(1) as f64);
                acc(grads, *a, &mut |_| g[0] * inv);
            }
            Op::Conv2d {
                x,
                w,
                bias,
                cols,
                dims,
            } => {
                let d = *dims;
                let plane = d.oh * d.ow;
                let rows = d.rows();
                // dmat[r, oc] with r = (b, p)
                let mut dmat = vec![T::zero(); rows * d.out_ch];
                for b in 0..d.batch {
                    for oc in 0..d.out_ch {
                        let src = &g[(b * d.out_ch + oc) * plane..][..plane];
                        for (p, &v) in src.iter().enumerate() {
                            dmat[(b * plane + p) * d.out_ch + oc] = v;
                        }
                    }
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); d.out_ch * d.patch()];
                    T::gemm(
                        d.out_ch,
                        rows,
                        d.patch(),
                        &dmat,
                        true,
                        cols,
                        false,
                        &mut dw,
                        false,
                    );
                    acc(grads, *w, &mut |i| dw[i]);
                }
                if let Some(bv) = bias {
                    if wants(*bv) {
                        let mut db = vec![T::zero(); d.out_ch];
                        for row in dmat.chunks(d.out_ch) {
                            for (o, &v) in row.iter().enumerate() {
                                db[o] += v;
                            }
                        }
                        acc(grads, *bv, &mut |i| db[i]);
                    }
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); rows * d.patch()];
                    T::gemm(
                        rows,
                        d.out_ch,
                        d.patch(),
                        &dmat,
                        false,
                        val(*w),
                        false,
                        &mut dcols,
                        false,
                    );
                    let dx = col2im(&dcols, &d);
                    acc(grads, *x, &mut |i| dx[i]);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                let inv = T::cst(1.0 / plane as f64);
                acc(grads, *x, &mut |i| g[i / plane] * inv);
            }
            Op::CropWidth { x, offset } => {
                if wants(*x) {
                    let s = nodes[x.0].value.shape();
                    let (w_in, w_out) = (s[3], node.value.shape()[3]);
                    let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                    for (r, src) in g.chunks(w_out).enumerate() {
                        dx[r * w_in + offset..][..w_out].copy_from_slice(src);
                    }
                    acc(grads, *x, &mut |i| dx[i]);
                }
            }
            Op::Dropout { x, mask } => acc(grads, *x, &mut |i| g[i] * mask[i]),
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
                norms,
            } => {
                if wants(*x) {
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..*len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                            let n = norms[o * inner + i];
                            for j in 0..*len {
                                dx[idx(j)] = (g[idx(j)] - y[idx(j)] * dot) / n;
                            }
                        }
                    }
                    acc(grads, *x, &mut |i| dx[i]);
                }
            }
            Op::CosineSimilarity { a, b, len } => {
                let (va, vb) = (val(*a), val(*b));
                let c = node.value.data();
                let mut da = vec![T::zero(); va.len()];
                let mut db = vec![T::zero(); vb.len()];
                for (r, (ra, rb)) in va.chunks(*len).zip(vb.chunks(*len)).enumerate() {
                    let na2: T = ra.iter().map(|&x| x * x).sum();
                    let nb2: T = rb.iter().map(|&x| x * x).sum();
                    let inv = T::one() / (na2.sqrt() * nb2.sqrt());
                    for j in 0..*len {
                        da[r * len + j] = g[r] * (rb[j] * inv - c[r] * ra[j] / na2);
                        db[r * len + j] = g[r] * (ra[j] * inv - c[r] * rb[j] / nb2);
                    }
                }
                acc(grads, *a, &mut |i| da[i]);
                acc(grads, *b, &mut |i| db[i]);
            }
            Op::MaskedFill { x, mask } => {
                acc(grads, *x, &mut |i| if mask[i] { T::zero() } else { g[i] });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let classes = nodes[logits.0].value.shape()[1];
                let s = g[0] * *scale;
                acc(grads, *logits, &mut |i| {
                    let onehot = if targets[i / classes] == i % classes {
                        T::one()
                    } else {
                        T::zero()
                    };
                    s * (probs[i] - onehot)
                });
            }
            Op::BinaryCrossEntropy {
                pred,
                targets,
                scale,
                clip,
            } => {
                let p = val(*pred);
                let hi = T::one() - *clip;
                let s = g[0] * *scale;
                acc(grads, *pred, &mut |i| {
                    let (pi, y) = (p[i], targets[i]);
                    if pi <= *clip || pi >= hi {
                        T::zero()
                    } else {
                        -s * (y / pi - (T::one() - y) / (T::one() - pi))
                    }
                });
            }
            Op::SquaredError {
                pred,
                targets,
                scale,
            } => {
                let p = val(*pred);
                let s = g[0] * *scale * T::cst(2.0);
                acc(grads, *pred, &mut |i| s * (p[i] - targets[i]));
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let patch = d.patch();
    let mut cols = vec![T::zero(); d.rows() * patch];
    for b in 0..d.batch {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let r = (b * d.oh + oh) * d.ow + ow;
                let dst = &mut cols[r * patch..(r + 1) * patch];
                let mut c = 0;
                for ci in 0..d.in_ch {
                    let base = (b * d.in_ch + ci) * d.height;
                    for kh in 0..d.kh {
                        let row = (base + oh * d.sh + kh) * d.width + ow * d.sw;
                        dst[c..c + d.kw].copy_from_slice(&x[row..row + d.kw]);
                        c += d.kw;
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let patch = d.patch();
    let mut x = vec![T::zero(); d.batch * d.in_ch * d.height * d.width];
    for b in 0..d.batch {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let r = (b * d.oh + oh) * d.ow + ow;
                let src = &cols[r * patch..(r + 1) * patch];
                let mut c = 0;
                for ci in 0..d.in_ch {
                    let base = (b * d.in_ch + ci) * d.height;
                    for kh in 0..d.kh {
                        let row = (base + oh * d.sh + kh) * d.width + ow * d.sw;
                        for (dst, &v) in x[row..row + d.kw].iter_mut().zip(&src[c..c + d.kw]) {
                            *dst += v;
                        }
                        c += d.kw;
                    }
                }
            }
        }
    }
    x
}
