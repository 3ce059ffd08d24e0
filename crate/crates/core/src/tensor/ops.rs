use super::Tensor;
use crate::error::{Error, Result};

/// Backward record: operation tag plus the parents and whatever forward
/// context the vector-Jacobian product needs.
pub(crate) enum Op {
    Matmul { a: Tensor, b: Tensor, m: usize, k: usize, n: usize },
    MatmulNt { a: Tensor, b: Tensor, m: usize, k: usize, n: usize },
    Add { a: Tensor, b: Tensor },
    AddRow { a: Tensor, bias: Tensor },
    Mul { a: Tensor, b: Tensor },
    RowScale { a: Tensor, s: Tensor },
    Scale { a: Tensor, c: f64 },
    Silu { a: Tensor },
    RmsNorm { x: Tensor, gain: Tensor, inv_rms: Vec<f64> },
    Softmax { a: Tensor, outer: usize, len: usize, inner: usize },
    TopKMask { a: Tensor, kept: Vec<bool> },
    CrossEntropy { logits: Tensor, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Embedding { table: Tensor, ids: Vec<usize> },
    MeanAxis { a: Tensor, outer: usize, len: usize, inner: usize },
    Sum { a: Tensor },
    ConcatRows { parts: Vec<Tensor> },
    SliceCols { a: Tensor, start: usize, end: usize },
    ConcatCols { parts: Vec<Tensor> },
    IndexRows { a: Tensor, idx: Vec<usize> },
    ScatterAddRows { parts: Vec<(Tensor, Vec<usize>)> },
    GatherElems { a: Tensor, pos: Vec<usize> },
    Transpose { a: Tensor, m: usize, n: usize },
    Reshape { a: Tensor },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::MatmulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::RowScale { .. } => "row_scale",
            Op::Scale { .. } => "scale",
            Op::Silu { .. } => "silu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Softmax { .. } => "softmax",
            Op::TopKMask { .. } => "top_k_mask",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Embedding { .. } => "embedding",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum { .. } => "sum",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::IndexRows { .. } => "index_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::GatherElems { .. } => "gather_elems",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Matmul { a, b, .. }
            | Op::MatmulNt { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b } => vec![a, b],
            Op::AddRow { a, bias } => vec![a, bias],
            Op::RowScale { a, s } => vec![a, s],
            Op::RmsNorm { x, gain, .. } => vec![x, gain],
            Op::Scale { a, .. }
            | Op::Silu { a }
            | Op::Softmax { a, .. }
            | Op::TopKMask { a, .. }
            | Op::MeanAxis { a, .. }
            | Op::Sum { a }
            | Op::SliceCols { a, .. }
            | Op::IndexRows { a, .. }
            | Op::GatherElems { a, .. }
            | Op::Transpose { a, .. }
            | Op::Reshape { a } => vec![a],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Embedding { table, .. } => vec![table],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.iter().collect(),
            Op::ScatterAddRows { parts } => parts.iter().map(|(t, _)| t).collect(),
        }
    }

    /// Vector-Jacobian product: gradient for each parent given the output
    /// values `out` and upstream gradient `g`.
    pub(crate) fn backward(&self, out: &[f64], out_shape: &[usize], g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let mut res = Vec::new();
        match self {
            Op::Matmul { a, b, m, k, n } => {
                if a.requires_grad() {
                    // g · bᵀ
                    res.push((a.clone(), matmul_nt_raw(g, &b.data(), *m, *n, *k)));
                }
                if b.requires_grad() {
                    // aᵀ · g
                    res.push((b.clone(), matmul_tn_raw(&a.data(), g, *k, *m, *n)));
                }
            }
            Op::MatmulNt { a, b, m, k, n } => {
                // out = a · bᵀ with a: m×k, b: n×k
                if a.requires_grad() {
                    res.push((a.clone(), matmul_raw(g, &b.data(), *m, *n, *k)));
                }
                if b.requires_grad() {
                    res.push((b.clone(), matmul_tn_raw(g, &a.data(), *n, *m, *k)));
                }
            }
            Op::Add { a, b } => {
                res.push((a.clone(), g.to_vec()));
                res.push((b.clone(), g.to_vec()));
            }
            Op::AddRow { a, bias } => {
                res.push((a.clone(), g.to_vec()));
                if bias.requires_grad() {
                    let n = bias.numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    res.push((bias.clone(), gb));
                }
            }
            Op::Mul { a, b } => {
                if a.requires_grad() {
                    let bd = b.data();
                    res.push((a.clone(), g.iter().zip(bd.iter()).map(|(x, y)| x * y).collect()));
                }
                if b.requires_grad() {
                    let ad = a.data();
                    res.push((b.clone(), g.iter().zip(ad.iter()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::RowScale { a, s } => {
                let sd = s.data();
                let n = a.shape()[1];
                if a.requires_grad() {
                    let ga = g
                        .chunks(n)
                        .zip(sd.iter())
                        .flat_map(|(row, &sc)| row.iter().map(move |x| x * sc))
                        .collect();
                    res.push((a.clone(), ga));
                }
                if s.requires_grad() {
                    let ad = a.data();
                    let gs = g
                        .chunks(n)
                        .zip(ad.chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    res.push((s.clone(), gs));
                }
            }
            Op::Scale { a, c } => res.push((a.clone(), g.iter().map(|x| x * c).collect())),
            Op::Silu { a } => {
                let ad = a.data();
                let ga = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(gy, &x)| {
                        let s = sigmoid(x);
                        gy * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                res.push((a.clone(), ga));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xd = x.data();
                let gd = gain.data();
                let n = gd.len();
                if x.requires_grad() {
                    let mut gx = vec![0.0; xd.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xs = &xd[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = (0..n).map(|j| gs[j] * gd[j] * xs[j]).sum();
                        let coef = inv * inv * inv * dot / n as f64;
                        for j in 0..n {
                            gx[r * n + j] = inv * gs[j] * gd[j] - coef * xs[j];
                        }
                    }
                    res.push((x.clone(), gx));
                }
                if gain.requires_grad() {
                    let mut gg = vec![0.0; n];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xd[r * n + j] * inv;
                        }
                    }
                    res.push((gain.clone(), gg));
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let mut ga = vec![0.0; out.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..*len {
                            ga[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                res.push((a.clone(), ga));
            }
            Op::TopKMask { a, kept } => {
                let ga = g.iter().zip(kept).map(|(x, &k)| if k { *x } else { 0.0 }).collect();
                res.push((a.clone(), ga));
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let v = logits.shape()[1];
                let scale = g[0];
                let mut gl = vec![0.0; probs.len()];
                for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..v {
                        gl[t * v + j] = scale * w * probs[t * v + j];
                    }
                    gl[t * v + y] -= scale * w;
                }
                res.push((logits.clone(), gl));
            }
            Op::Embedding { table, ids } => {
                let d = table.shape()[1];
                let mut gt = vec![0.0; table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                res.push((table.clone(), gt));
            }
            Op::MeanAxis { a, outer, len, inner } => {
                let mut ga = vec![0.0; a.numel()];
                let inv = 1.0 / *len as f64;
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            ga[(o * len + j) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                res.push((a.clone(), ga));
            }
            Op::Sum { a } => res.push((a.clone(), vec![g[0]; a.numel()])),
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    if p.requires_grad() {
                        res.push((p.clone(), g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceCols { a, start, end } => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let w = end - start;
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                res.push((a.clone(), ga));
            }
            Op::ConcatCols { parts } => {
                let m = out_shape[0];
                let total = out_shape[1];
                let mut col = 0;
                for p in parts {
                    let w = p.shape()[1];
                    if p.requires_grad() {
                        let mut gp = vec![0.0; m * w];
                        for r in 0..m {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        res.push((p.clone(), gp));
                    }
                    col += w;
                }
            }
            Op::IndexRows { a, idx } => {
                let n = a.shape()[1];
                let mut ga = vec![0.0; a.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[src * n + j] += g[r * n + j];
                    }
                }
                res.push((a.clone(), ga));
            }
            Op::ScatterAddRows { parts } => {
                let d = out_shape[1];
                for (p, idx) in parts {
                    if !p.requires_grad() {
                        continue;
                    }
                    let mut gp = vec![0.0; p.numel()];
                    for (r, &dst) in idx.iter().enumerate() {
                        gp[r * d..(r + 1) * d].copy_from_slice(&g[dst * d..(dst + 1) * d]);
                    }
                    res.push((p.clone(), gp));
                }
            }
            Op::GatherElems { a, pos } => {
                let mut ga = vec![0.0; a.numel()];
                for (r, &p) in pos.iter().enumerate() {
                    ga[p] += g[r];
                }
                res.push((a.clone(), ga));
            }
            Op::Transpose { a, m, n } => res.push((a.clone(), transpose_raw(g, *n, *m))),
            Op::Reshape { a } => res.push((a.clone(), g.to_vec())),
        }
        res
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// a: m×k, b: k×n
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a: m×k, b: n×k, returns a·bᵀ (m×n)
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a: m×k (read as k×m transposed), b: m×n, returns aᵀ·b (k×n)
fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Parameter(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tensor {
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), b.shape()));
        }
        let out = matmul_raw(&self.data(), &b.data(), m, k, n);
        Ok(Tensor::from_op(vec![m, n], out, Op::Matmul { a: self.clone(), b: b.clone(), m, k, n }))
    }

    /// `self · bᵀ` where `b` is n×k.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(), b.shape()));
        }
        let out = matmul_nt_raw(&self.data(), &b.data(), m, k, n);
        Ok(Tensor::from_op(vec![m, n], out, Op::MatmulNt { a: self.clone(), b: b.clone(), m, k, n }))
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        if self.shape() != b.shape() {
            return Err(Error::shape("add", self.shape(), b.shape()));
        }
        let out = self.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Add { a: self.clone(), b: b.clone() }))
    }

    /// Adds a length-n vector to every row of a `...×n` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let n = bias.numel();
        if self.shape().last() != Some(&n) {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let bd = bias.data();
        let out = self
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd.iter()).map(|(x, y)| x + y))
            .collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::AddRow { a: self.clone(), bias: bias.clone() }))
    }

    pub fn mul(&self, b: &Tensor) -> Result<Tensor> {
        if self.shape() != b.shape() {
            return Err(Error::shape("mul", self.shape(), b.shape()));
        }
        let out = self.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Mul { a: self.clone(), b: b.clone() }))
    }

    /// Multiplies row i of an m×n matrix by `s[i]` (s has m entries).
    pub fn row_scale(&self, s: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if s.numel() != m {
            return Err(Error::shape("row_scale", self.shape(), s.shape()));
        }
        let sd = s.data();
        let out = self
            .data()
            .chunks(n)
            .zip(sd.iter())
            .flat_map(|(row, &sc)| row.iter().map(move |x| x * sc))
            .collect();
        Ok(Tensor::from_op(vec![m, n], out, Op::RowScale { a: self.clone(), s: s.clone() }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale { a: self.clone(), c })
    }

    pub fn silu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Silu { a: self.clone() })
    }

    /// Root-mean-square normalization of each row, times a learned gain.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Result<Tensor> {
        let n = gain.numel();
        if self.shape().last() != Some(&n) {
            return Err(Error::shape("rms_norm", self.shape(), gain.shape()));
        }
        let xd = self.data();
        let gd = gain.data();
        let mut out = Vec::with_capacity(xd.len());
        let mut inv_rms = Vec::with_capacity(xd.len() / n.max(1));
        for row in xd.chunks(n) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(gd.iter()).map(|(x, g)| x * inv * g));
        }
        drop(xd);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::RmsNorm { x: self.clone(), gain: gain.clone(), inv_rms },
        ))
    }

    /// Softmax along `axis`, stabilized by max subtraction. `-inf` entries
    /// map to exactly zero; a slice with no finite entry is an error.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let xd = self.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY || max.is_nan() {
                    return Err(Error::Degenerate(format!(
                        "softmax slice {o}/{i} has no finite entry"
                    )));
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xd[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax { a: self.clone(), outer, len, inner },
        ))
    }

    /// Keeps the `k` largest entries of every last-axis slice and replaces
    /// the rest with `-inf`. Ties go to the lowest index.
    pub fn top_k_mask(&self, k: usize) -> Result<Tensor> {
        let width = *self.shape().last().unwrap_or(&0);
        if k == 0 || k > width {
            return Err(Error::Parameter(format!("top-k requires 1 <= k <= {width}, got {k}")));
        }
        let xd = self.data();
        let mut out = vec![f64::NEG_INFINITY; xd.len()];
        let mut kept = vec![false; xd.len()];
        for (s, row) in xd.chunks(width).enumerate() {
            for j in top_k_indices(row, k) {
                out[s * width + j] = row[j];
                kept[s * width + j] = true;
            }
        }
        drop(xd);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::TopKMask { a: self.clone(), kept }))
    }

    /// Mean negative log-likelihood over positions where `mask` is true.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss("every position is masked".into()));
        }
        let w = 1.0 / count as f64;
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.cross_entropy_weighted(targets, &weights)
    }

    /// `Σ_t weights[t] · -log softmax(logits[t])[targets[t]]`. Zero-weight
    /// positions contribute neither loss nor gradient.
    pub fn cross_entropy_weighted(&self, targets: &[usize], weights: &[f64]) -> Result<Tensor> {
        let (t_len, v) = self.dims2()?;
        if targets.len() != t_len || weights.len() != t_len {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().zip(weights).find(|(&y, &w)| w != 0.0 && y >= v).map(|(y, _)| y) {
            return Err(Error::Parameter(format!("target {bad} outside vocabulary of {v}")));
        }
        let xd = self.data();
        let mut probs = vec![0.0; xd.len()];
        let mut loss = 0.0;
        for t in 0..t_len {
            if weights[t] == 0.0 {
                continue;
            }
            let row = &xd[t * v..(t + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[t * v + j] = (row[j] - max).exp() / sum;
            }
            loss += weights[t] * (lse - row[targets[t]]);
        }
        drop(xd);
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Gathers rows of a V×D table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Parameter(format!("token id {bad} outside table of {v} rows")));
        }
        let td = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        Ok(Tensor::from_op(vec![ids.len(), d], out, Op::Embedding { table: self.clone(), ids: ids.to_vec() }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        if len == 0 {
            return Err(Error::Parameter("mean over an empty axis".into()));
        }
        let xd = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + j) * inner + i];
                }
            }
        }
        let n = len as f64;
        out.iter_mut().for_each(|x| *x /= n);
        drop(xd);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(shape, out, Op::MeanAxis { a: self.clone(), outer, len, inner }))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::Sum { a: self.clone() })
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Parameter("concat of nothing".into()))?;
        let (_, n) = first.dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (m, pn) = p.dims2()?;
            if pn != n {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            rows += m;
            out.extend_from_slice(&p.data());
        }
        Ok(Tensor::from_op(vec![rows, n], out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if start >= end || end > n {
            return Err(Error::Parameter(format!("column slice {start}..{end} of width {n}")));
        }
        let xd = self.data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&xd[r * n + start..r * n + end]);
        }
        drop(xd);
        Ok(Tensor::from_op(vec![m, end - start], out, Op::SliceCols { a: self.clone(), start, end }))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Parameter("concat of nothing".into()))?;
        let (m, _) = first.dims2()?;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return Err(Error::shape("concat_cols", first.shape(), p.shape()));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..m {
            for (p, d) in parts.iter().zip(&datas) {
                let w = p.shape()[1];
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(vec![m, total], out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn index_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Parameter(format!("row {bad} out of {m}")));
        }
        let xd = self.data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xd[i * n..(i + 1) * n]);
        }
        drop(xd);
        Ok(Tensor::from_op(vec![idx.len(), n], out, Op::IndexRows { a: self.clone(), idx: idx.to_vec() }))
    }

    /// `rows×d` zeros with each part's rows added at its destination rows.
    pub fn scatter_add_rows(rows: usize, d: usize, parts: Vec<(Tensor, Vec<usize>)>) -> Result<Tensor> {
        let mut out = vec![0.0; rows * d];
        for (p, idx) in &parts {
            let (pm, pn) = p.dims2()?;
            if pn != d || pm != idx.len() {
                return Err(Error::shape("scatter_add_rows", p.shape(), &[idx.len(), d]));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(Error::Parameter(format!("row {bad} out of {rows}")));
            }
            let pd = p.data();
            for (r, &dst) in idx.iter().enumerate() {
                for j in 0..d {
                    out[dst * d + j] += pd[r * d + j];
                }
            }
        }
        Ok(Tensor::from_op(vec![rows, d], out, Op::ScatterAddRows { parts }))
    }

    /// Picks entries `(row, col)` of a matrix into an `n×1` column.
    pub fn gather_elems(&self, positions: &[(usize, usize)]) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let xd = self.data();
        let mut pos = Vec::with_capacity(positions.len());
        let mut out = Vec::with_capacity(positions.len());
        for &(r, c) in positions {
            if r >= m || c >= n {
                return Err(Error::Parameter(format!("element ({r},{c}) outside {m}x{n}")));
            }
            pos.push(r * n + c);
            out.push(xd[r * n + c]);
        }
        drop(xd);
        Ok(Tensor::from_op(vec![positions.len(), 1], out, Op::GatherElems { a: self.clone(), pos }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let out = transpose_raw(&self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], out, Op::Transpose { a: self.clone(), m, n }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape { a: self.clone() }))
    }
}

/// Indices of the `k` largest values, ordered by value descending then
/// index ascending.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
