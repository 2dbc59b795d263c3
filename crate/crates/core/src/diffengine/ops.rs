use std::rc::Rc;

use super::kernels::{axpy, dot, index_map, mm_nn, mm_tn, strides, transpose};
use super::{check, Op, Tape, Var};
use crate::error::{shape_err, Error, Result};

/// One weighted term of a sparse kernel aggregation:
/// `out[dst] += coef * x[src] . w[kernel]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEntry {
    pub dst: usize,
    pub src: usize,
    pub kernel: usize,
    pub coef: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Conv3dGeom {
    b: usize,
    h: usize,
    w: usize,
    c_in: usize,
    s: usize,
    c_out: usize,
    k: [usize; 3],
}

impl Conv3dGeom {
    fn positions(&self) -> usize {
        self.b * self.h * self.w * self.s
    }
    fn patch(&self) -> usize {
        self.c_in * self.k[0] * self.k[1] * self.k[2]
    }
    /// Calls `f(position, column, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kh, kw, kt] = self.k;
        let (ph, pw, pt) = ((kh / 2) as isize, (kw / 2) as isize, (kt / 2) as isize);
        let (h, w, s, c) = (self.h as isize, self.w as isize, self.s as isize, self.c_in);
        let mut p = 0;
        for b in 0..self.b {
            for y in 0..h {
                for x in 0..w {
                    for t in 0..s {
                        for ci in 0..c {
                            for dh in 0..kh as isize {
                                let iy = y + dh - ph;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for dw in 0..kw as isize {
                                    let ix = x + dw - pw;
                                    if ix < 0 || ix >= w {
                                        continue;
                                    }
                                    for dt in 0..kt as isize {
                                        let it = t + dt - pt;
                                        if it < 0 || it >= s {
                                            continue;
                                        }
                                        let col = ((ci * kh + dh as usize) * kw + dw as usize) * kt
                                            + dt as usize;
                                        let idx = ((((b * self.h) + iy as usize) * self.w
                                            + ix as usize)
                                            * c
                                            + ci)
                                            * self.s
                                            + it as usize;
                                        f(p, col, idx);
                                    }
                                }
                            }
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    check(tape.shape(a) == tape.shape(b), || {
        format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )
    })
}

fn keep_map(shape: &[usize], keep: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    check(
        keep.windows(2).all(|w| w[0] < w[1]) && keep.iter().all(|&a| a < shape.len()),
        || format!("reduction axes {keep:?} invalid for shape {shape:?}"),
    )?;
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut target = vec![0; shape.len()];
    for (pos, &a) in keep.iter().enumerate() {
        target[a] = out_strides[pos];
    }
    Ok((out_shape, index_map(shape, &target)))
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.record(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.record(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.record(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x + s).collect();
        self.record(self.shape(a).to_vec(), data, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        self.record(self.shape(a).to_vec(), data, Op::MulScalar(a, s), &[a])
    }

    pub fn powf(&mut self, a: Var, e: f64) -> Var {
        let data = self.data(a).iter().map(|x| x.powf(e)).collect();
        self.record(self.shape(a).to_vec(), data, Op::Powf(a, e), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.record(self.shape(a).to_vec(), data, Op::Relu(a), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], || {
            format!("matmul of {sa:?} and {sb:?}")
        })?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        check(n == self.data(a).len(), || {
            format!("cannot reshape {:?} to {shape:?}", self.shape(a))
        })?;
        let data = self.data(a).to_vec();
        Ok(self.record(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        check(
            perm.len() == shape.len()
                && perm
                    .iter()
                    .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true)),
            || format!("{perm:?} is not a permutation of {} axes", shape.len()),
        )?;
        let (out_shape, map) = permute_map(&shape, perm);
        let x = self.data(a);
        let data = map.iter().map(|&i| x[i]).collect();
        Ok(self.record(out_shape, data, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        check(axis < base.len(), || {
            format!("concat axis {axis} for rank {}", base.len())
        })?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            check(
                s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(a, (x, y))| a == axis || x == y),
                || format!("concat: {s:?} incompatible with {base:?} along axis {axis}"),
            )?;
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.record(shape, data, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check(
            axis < shape.len() && start <= end && end <= shape[axis],
            || format!("slice {start}..{end} on axis {axis} of {shape:?}"),
        )?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(a);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&x[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.record(out_shape, data, Op::Slice { x: a, axis, start }, &[a]))
    }

    /// Zero padding of `(before, after)` elements per axis.
    pub fn pad(&mut self, a: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check(pads.len() == shape.len(), || {
            format!("{} pad pairs for rank {}", pads.len(), shape.len())
        })?;
        let (out_shape, offset, map) = pad_map(&shape, pads);
        let mut data = vec![0.0; out_shape.iter().product()];
        for (v, &m) in self.data(a).iter().zip(&map) {
            data[offset + m] = *v;
        }
        Ok(self.record(out_shape, data, Op::Pad(a, pads.to_vec()), &[a]))
    }

    /// Rows `idx` of `a` (axis 0).
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check(!shape.is_empty(), || "gather from a scalar".into())?;
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Index(format!("gather row {bad} of {}", shape[0])));
        }
        let x = self.data(a);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx.iter() {
            data.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        Ok(self.record(out_shape, data, Op::Gather(a, idx), &[a]))
    }

    /// Sums row `r` of `a` into output row `idx[r]`; output has `n_out` rows.
    pub fn index_add(&mut self, a: Var, idx: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let (row, mut out_shape) = self.scatter_shape(a, &idx, n_out)?;
        let x = self.data(a);
        let mut data = vec![0.0; n_out * row];
        for (r, &o) in idx.iter().enumerate() {
            for c in 0..row {
                data[o * row + c] += x[r * row + c];
            }
        }
        out_shape[0] = n_out;
        Ok(self.record(out_shape, data, Op::IndexAdd(a, idx), &[a]))
    }

    /// Element-wise max of the rows mapped to each output row; rows that
    /// receive nothing are zero. Ties go to the lowest source row.
    pub fn scatter_max(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let (row, mut out_shape) = self.scatter_shape(a, idx, n_out)?;
        let x = self.data(a);
        let mut data = vec![0.0; n_out * row];
        let mut argmax = vec![usize::MAX; n_out * row];
        for (r, &o) in idx.iter().enumerate() {
            for c in 0..row {
                let (src, dst) = (r * row + c, o * row + c);
                if argmax[dst] == usize::MAX || x[src] > data[dst] {
                    data[dst] = x[src];
                    argmax[dst] = src;
                }
            }
        }
        out_shape[0] = n_out;
        Ok(self.record(out_shape, data, Op::ScatterMax { x: a, argmax }, &[a]))
    }

    fn scatter_shape(&self, a: Var, idx: &[usize], n_out: usize) -> Result<(usize, Vec<usize>)> {
        let shape = self.shape(a).to_vec();
        check(!shape.is_empty() && shape[0] == idx.len(), || {
            format!("{} scatter indices for shape {shape:?}", idx.len())
        })?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::Index(format!("scatter target {bad} of {n_out}")));
        }
        Ok((shape[1..].iter().product(), shape))
    }

    /// Sums over every axis not listed in `keep` (ascending).
    pub fn reduce_sum(&mut self, a: Var, keep: &[usize]) -> Result<Var> {
        self.reduce(a, keep, false)
    }

    pub fn reduce_mean(&mut self, a: Var, keep: &[usize]) -> Result<Var> {
        self.reduce(a, keep, true)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, &[], false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, &[], true)
    }

    fn reduce(&mut self, a: Var, keep: &[usize], mean: bool) -> Result<Var> {
        let (out_shape, map) = keep_map(self.shape(a), keep)?;
        let n_out: usize = out_shape.iter().product();
        let count = self.data(a).len() / n_out.max(1);
        check(!mean || count > 0, || "mean over zero elements".into())?;
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut data = vec![0.0; n_out];
        for (v, &m) in self.data(a).iter().zip(&map) {
            data[m] += v;
        }
        if mean {
            data.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(self.record(out_shape, data, Op::Reduce { x: a, map, scale }, &[a]))
    }

    /// Population variance over every axis not in `keep`.
    pub fn reduce_var(&mut self, a: Var, keep: &[usize]) -> Result<Var> {
        let (out_shape, map) = keep_map(self.shape(a), keep)?;
        let n_out: usize = out_shape.iter().product();
        let count = self.data(a).len() / n_out.max(1);
        check(count > 0, || "variance over zero elements".into())?;
        let count = count as f64;
        let x = self.data(a);
        let mut mean = vec![0.0; n_out];
        for (v, &m) in x.iter().zip(&map) {
            mean[m] += v;
        }
        mean.iter_mut().for_each(|v| *v /= count);
        let mut var = vec![0.0; n_out];
        for (v, &m) in x.iter().zip(&map) {
            let d = v - mean[m];
            var[m] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= count);
        Ok(self.record(
            out_shape,
            var,
            Op::ReduceVar {
                x: a,
                map,
                mean,
                count,
            },
            &[a],
        ))
    }

    /// Repeats `a` over `shape`; `axes[k]` is the target axis of `a`'s axis `k`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize], axes: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        check(
            src.len() == axes.len()
                && axes.windows(2).all(|w| w[0] < w[1])
                && axes
                    .iter()
                    .zip(&src)
                    .all(|(&ax, &n)| ax < shape.len() && shape[ax] == n),
            || format!("cannot broadcast {src:?} onto {shape:?} along {axes:?}"),
        )?;
        let (_, map) = keep_map(shape, axes)?;
        let x = self.data(a);
        let data = map.iter().map(|&m| x[m]).collect();
        Ok(self.record(shape.to_vec(), data, Op::Broadcast { x: a, map }, &[a]))
    }

    /// Sparse kernel-weighted aggregation: `x` is `[n_in, c_in]`, `w` is
    /// `[kernels, c_in, c_out]`, the result is `[n_out, c_out]`. Each entry
    /// adds `coef * x[src] . w[kernel]` to row `dst`, in entry order.
    pub fn kernel_aggregate(
        &mut self,
        x: Var,
        w: Var,
        entries: Rc<[KernelEntry]>,
        n_out: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        check(sx.len() == 2 && sw.len() == 3 && sx[1] == sw[1], || {
            format!("kernel aggregation of features {sx:?} with weights {sw:?}")
        })?;
        let (n_in, c_in, n_kernels, c_out) = (sx[0], sx[1], sw[0], sw[2]);
        if let Some(e) = entries
            .iter()
            .find(|e| e.dst >= n_out || e.src >= n_in || e.kernel >= n_kernels)
        {
            return Err(Error::Index(format!("kernel entry {e:?} out of range")));
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; n_out * c_out];
        for e in entries.iter() {
            let row = &mut out[e.dst * c_out..(e.dst + 1) * c_out];
            let xs = &xd[e.src * c_in..(e.src + 1) * c_in];
            let wk = &wd[e.kernel * c_in * c_out..(e.kernel + 1) * c_in * c_out];
            for (l, &xv) in xs.iter().enumerate() {
                let s = e.coef * xv;
                if s != 0.0 {
                    axpy(s, &wk[l * c_out..(l + 1) * c_out], row);
                }
            }
        }
        Ok(self.record(
            vec![n_out, c_out],
            out,
            Op::KernelAggregate { x, w, entries },
            &[x, w],
        ))
    }

    /// Stride-1 cross-correlation with zero "same" padding. `x` is
    /// `[B, H, W, C_in, S]`, `w` is `[C_out, C_in, kh, kw, kt]` with odd
    /// kernel sizes; the result is `[B, H, W, C_out, S]`.
    pub fn conv3d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        check(sx.len() == 5 && sw.len() == 5 && sx[3] == sw[1], || {
            format!("conv3d of {sx:?} with weights {sw:?}")
        })?;
        check(sw[2] % 2 == 1 && sw[3] % 2 == 1 && sw[4] % 2 == 1, || {
            format!("conv3d kernel {:?} must be odd", &sw[2..])
        })?;
        let geom = Conv3dGeom {
            b: sx[0],
            h: sx[1],
            w: sx[2],
            c_in: sx[3],
            s: sx[4],
            c_out: sw[0],
            k: [sw[2], sw[3], sw[4]],
        };
        let (p, kc, co) = (geom.positions(), geom.patch(), geom.c_out);
        let xd = self.data(x);
        let mut cols = vec![0.0; p * kc];
        geom.for_each_tap(|pos, col, idx| cols[pos * kc + col] = xd[idx]);
        let w_t = transpose(self.data(w), co, kc);
        let mut rows = vec![0.0; p * co];
        mm_nn(&cols, &w_t, &mut rows, p, kc, co);
        let out = rows_to_channels(&rows, geom.b * geom.h * geom.w, geom.s, co);
        let cols = if self.needs_grad(w) { cols } else { Vec::new() };
        let shape = vec![geom.b, geom.h, geom.w, co, geom.s];
        Ok(self.record(shape, out, Op::Conv3d { x, w, cols, geom }, &[x, w]))
    }

    /// Max pooling over `[B, H, W, C, S]` with `(h, w, t)` windows and strides.
    pub fn max_pool3d(&mut self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check(s.len() == 5, || {
            format!("max_pool3d expects rank 5, got {s:?}")
        })?;
        check(window.iter().chain(&stride).all(|&v| v > 0), || {
            "pool window and stride must be positive".into()
        })?;
        let dims = [s[1], s[2], s[4]];
        check(dims.iter().zip(&window).all(|(d, w)| d >= w), || {
            format!("pool window {window:?} larger than input (h, w, t) = {dims:?}")
        })?;
        let out_dims: Vec<usize> = (0..3)
            .map(|a| (dims[a] - window[a]) / stride[a] + 1)
            .collect();
        let (b, c) = (s[0], s[3]);
        let (ho, wo, so) = (out_dims[0], out_dims[1], out_dims[2]);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(b * ho * wo * c * so);
        let mut argmax = Vec::with_capacity(data.capacity());
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ci in 0..c {
                        for ot in 0..so {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = usize::MAX;
                            for dy in 0..window[0] {
                                for dx in 0..window[1] {
                                    for dt in 0..window[2] {
                                        let (iy, ix, it) = (
                                            oy * stride[0] + dy,
                                            ox * stride[1] + dx,
                                            ot * stride[2] + dt,
                                        );
                                        let idx =
                                            (((bi * s[1] + iy) * s[2] + ix) * c + ci) * s[4] + it;
                                        if at == usize::MAX || xd[idx] > best {
                                            best = xd[idx];
                                            at = idx;
                                        }
                                    }
                                }
                            }
                            data.push(best);
                            argmax.push(at);
                        }
                    }
                }
            }
        }
        Ok(self.record(
            vec![b, ho, wo, c, so],
            data,
            Op::MaxPool3d { x, argmax },
            &[x],
        ))
    }

    /// Mean over the batch of `-log softmax(logits[b])[labels[b]]`, computed
    /// with max subtraction. `logits` is `[B, Q]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        check(s.len() == 2 && s[0] == labels.len() && s[0] > 0, || {
            format!("cross entropy of logits {s:?} with {} labels", labels.len())
        })?;
        let q = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= q) {
            return Err(Error::Index(format!("label {bad} outside {q} classes")));
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &x[b * q..(b + 1) * q];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (p, v) in probs[b * q..(b + 1) * q].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            total += m + z.ln() - row[label];
        }
        let loss = total / labels.len() as f64;
        Ok(self.record(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }
}

fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let target: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    (out_shape.clone(), index_map(&out_shape, &target))
}

fn pad_map(shape: &[usize], pads: &[(usize, usize)]) -> (Vec<usize>, usize, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(pads)
        .map(|(n, (b, a))| n + b + a)
        .collect();
    let out_strides = strides(&out_shape);
    let offset = pads.iter().zip(&out_strides).map(|((b, _), s)| b * s).sum();
    (out_shape, offset, index_map(shape, &out_strides))
}

/// `[groups * s, c]` rows to `[groups, c, s]`.
fn rows_to_channels(rows: &[f64], groups: usize, s: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for g in 0..groups {
        for t in 0..s {
            for ch in 0..c {
                out[(g * c + ch) * s + t] = rows[(g * s + t) * c + ch];
            }
        }
    }
    out
}

fn channels_to_rows(data: &[f64], groups: usize, s: usize, c: usize) -> Vec<f64> {
    let mut rows = vec![0.0; data.len()];
    for g in 0..groups {
        for ch in 0..c {
            for t in 0..s {
                rows[(g * s + t) * c + ch] = data[(g * c + ch) * s + t];
            }
        }
    }
    rows
}

fn slot<'a>(tape: &Tape, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !tape.needs_grad(v) {
        return None;
    }
    let n = tape.data(v).len();
    Some(grads[v.index()].get_or_insert_with(|| vec![0.0; n]))
}

/// Accumulates the input gradients of node `k` given its output gradient `g`.
pub(super) fn backward(tape: &Tape, k: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = tape.node_value(k);
    match tape.node_op(k) {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(tape, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(tape, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = slot(tape, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (tape.data(*a), tape.data(*b));
            if let Some(d) = slot(tape, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * xb[i];
                }
            }
            if let Some(d) = slot(tape, grads, *b) {
                for i in 0..d.len() {
                    d[i] += g[i] * xa[i];
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = slot(tape, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::MulScalar(a, s) => {
            if let Some(d) = slot(tape, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
            }
        }
        Op::Powf(a, e) => {
            let x = tape.data(*a);
            if let Some(d) = slot(tape, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * e * x[i].powf(e - 1.0);
                }
            }
        }
        Op::Relu(a) => {
            let x = tape.data(*a);
            if let Some(d) = slot(tape, grads, *a) {
                for i in 0..d.len() {
                    if x[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (m, kk, n) = (sa[0], sa[1], sb[1]);
            if tape.needs_grad(*a) {
                let b_t = transpose(tape.data(*b), kk, n);
                let d = slot(tape, grads, *a).unwrap();
                mm_nn(g, &b_t, d, m, n, kk);
            }
            if tape.needs_grad(*b) {
                let xa = tape.data(*a).to_vec();
                let d = slot(tape, grads, *b).unwrap();
                mm_tn(&xa, g, d, m, kk, n);
            }
        }
        Op::Permute(a, perm) => {
            let (_, map) = permute_map(tape.shape(*a), perm);
            if let Some(d) = slot(tape, grads, *a) {
                for (gi, &m) in g.iter().zip(&map) {
                    d[m] += gi;
                }
            }
        }
        Op::Concat(parts, axis) => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = tape.shape(p)[*axis];
                if let Some(d) = slot(tape, grads, p) {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (dv, gv) in d[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *dv += gv;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let shape = tape.shape(*x).to_vec();
            let len = out.shape()[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            if let Some(d) = slot(tape, grads, *x) {
                for o in 0..outer {
                    let base = o * shape[*axis] * inner + start * inner;
                    for (dv, gv) in d[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Pad(a, pads) => {
            let (_, offset, map) = pad_map(tape.shape(*a), pads);
            if let Some(d) = slot(tape, grads, *a) {
                for (dv, &m) in d.iter_mut().zip(&map) {
                    *dv += g[offset + m];
                }
            }
        }
        Op::Gather(a, idx) => {
            let row: usize = tape.shape(*a)[1..].iter().product();
            if let Some(d) = slot(tape, grads, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..row {
                        d[i * row + c] += g[r * row + c];
                    }
                }
            }
        }
        Op::IndexAdd(a, idx) => {
            let row: usize = tape.shape(*a)[1..].iter().product();
            if let Some(d) = slot(tape, grads, *a) {
                for (r, &o) in idx.iter().enumerate() {
                    for c in 0..row {
                        d[r * row + c] += g[o * row + c];
                    }
                }
            }
        }
        Op::ScatterMax { x, argmax } | Op::MaxPool3d { x, argmax } => {
            if let Some(d) = slot(tape, grads, *x) {
                for (gv, &src) in g.iter().zip(argmax) {
                    if src != usize::MAX {
                        d[src] += gv;
                    }
                }
            }
        }
        Op::Reduce { x, map, scale } => {
            if let Some(d) = slot(tape, grads, *x) {
                for (dv, &m) in d.iter_mut().zip(map) {
                    *dv += g[m] * scale;
                }
            }
        }
        Op::ReduceVar {
            x,
            map,
            mean,
            count,
        } => {
            let xd = tape.data(*x);
            if let Some(d) = slot(tape, grads, *x) {
                for i in 0..d.len() {
                    let m = map[i];
                    d[i] += g[m] * 2.0 * (xd[i] - mean[m]) / count;
                }
            }
        }
        Op::Broadcast { x, map } => {
            if let Some(d) = slot(tape, grads, *x) {
                for (gv, &m) in g.iter().zip(map) {
                    d[m] += gv;
                }
            }
        }
        Op::KernelAggregate { x, w, entries } => {
            let (c_in, c_out) = (tape.shape(*x)[1], tape.shape(*w)[2]);
            let (xd, wd) = (tape.data(*x), tape.data(*w));
            if let Some(d) = slot(tape, grads, *x) {
                for e in entries.iter() {
                    let gd = &g[e.dst * c_out..(e.dst + 1) * c_out];
                    let wk = &wd[e.kernel * c_in * c_out..(e.kernel + 1) * c_in * c_out];
                    for l in 0..c_in {
                        d[e.src * c_in + l] += e.coef * dot(&wk[l * c_out..(l + 1) * c_out], gd);
                    }
                }
            }
            if let Some(d) = slot(tape, grads, *w) {
                for e in entries.iter() {
                    let gd = &g[e.dst * c_out..(e.dst + 1) * c_out];
                    for l in 0..c_in {
                        let s = e.coef * xd[e.src * c_in + l];
                        if s != 0.0 {
                            let base = (e.kernel * c_in + l) * c_out;
                            axpy(s, gd, &mut d[base..base + c_out]);
                        }
                    }
                }
            }
        }
        Op::Conv3d { x, w, cols, geom } => {
            let (p, kc, co) = (geom.positions(), geom.patch(), geom.c_out);
            let rows = channels_to_rows(g, geom.b * geom.h * geom.w, geom.s, co);
            if tape.needs_grad(*w) {
                let mut dw_t = vec![0.0; kc * co];
                mm_tn(cols, &rows, &mut dw_t, p, kc, co);
                let d = slot(tape, grads, *w).unwrap();
                for (dv, v) in d.iter_mut().zip(transpose(&dw_t, kc, co)) {
                    *dv += v;
                }
            }
            if tape.needs_grad(*x) {
                let mut dcols = vec![0.0; p * kc];
                mm_nn(&rows, tape.data(*w), &mut dcols, p, co, kc);
                let d = slot(tape, grads, *x).unwrap();
                geom.for_each_tap(|pos, col, idx| d[idx] += dcols[pos * kc + col]);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let q = tape.shape(*logits)[1];
            let scale = g[0] / labels.len() as f64;
            if let Some(d) = slot(tape, grads, *logits) {
                for (b, &label) in labels.iter().enumerate() {
                    for c in 0..q {
                        let target = if c == label { 1.0 } else { 0.0 };
                        d[b * q + c] += scale * (probs[b * q + c] - target);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::DiffArray;
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        t.leaf(
            DiffArray::new(shape.to_vec(), data)
                .unwrap()
                .requires_grad(),
        )
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], vec![1.0, 2.0]);
        let b = leaf(&mut t, &[2], vec![3.0, 4.0]);
        let s = t.add(a, b).unwrap();
        assert_eq!(t.data(s), &[4.0, 6.0]);
        let r = leaf(&mut t, &[2], vec![-1.0, 2.0]);
        let r = t.relu(r);
        assert_eq!(t.data(r), &[0.0, 2.0]);
        let x = leaf(&mut t, &[2, 3], vec![1.0; 6]);
        let y = leaf(&mut t, &[3, 2], vec![1.0; 6]);
        let m = t.matmul(x, y).unwrap();
        assert_eq!(t.data(m), &[3.0; 4]);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], vec![1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);

        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], vec![1.0]);
        let neg = t.mul_scalar(x, -1.0);
        let r = t.relu(neg);
        let loss = t.sum(r).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_and_index_errors() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], vec![1.0, 2.0]);
        let b = leaf(&mut t, &[3], vec![1.0; 3]);
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(
            t.gather(a, Rc::from(vec![2])),
            Err(Error::Index(_))
        ));
        assert!(matches!(t.scatter_max(a, &[0, 5], 2), Err(Error::Index(_))));
        assert!(t.matmul(a, b).is_err());
        assert!(t.reshape(a, &[3]).is_err());
        let ce_logits = leaf(&mut t, &[1, 2], vec![0.0, 0.0]);
        assert!(matches!(
            t.cross_entropy(ce_logits, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn scatter_max_ties_go_to_lowest_source() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3, 1], vec![2.0, 2.0, 1.0]);
        let y = t.scatter_max(x, &[0, 0, 0], 2).unwrap();
        assert_eq!(t.data(y), &[2.0, 0.0]);
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_max_keeps_negative_maxima() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 1], vec![-3.0, -1.0]);
        let y = t.scatter_max(x, &[1, 1], 2).unwrap();
        assert_eq!(t.data(y), &[0.0, -1.0]);
    }

    #[test]
    fn structural_ops_forward() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], (0..6).map(f64::from).collect());
        let p = t.permute(x, &[1, 0]).unwrap();
        assert_eq!(t.shape(p), &[3, 2]);
        assert_eq!(t.data(p), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let s = t.slice(x, 1, 1, 3).unwrap();
        assert_eq!(t.data(s), &[1.0, 2.0, 4.0, 5.0]);
        let c = t.concat(&[x, s], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 5]);
        assert_eq!(
            t.data(c),
            &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0]
        );
        let pd = t.pad(x, &[(1, 0), (0, 1)]).unwrap();
        assert_eq!(t.shape(pd), &[3, 4]);
        assert_eq!(
            t.data(pd),
            &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 5.0, 0.0]
        );
        let m = t.reduce_mean(x, &[1]).unwrap();
        assert_eq!(t.data(m), &[1.5, 2.5, 3.5]);
        let v = t.reduce_var(x, &[0]).unwrap();
        assert_eq!(t.data(v), &[2.0 / 3.0, 2.0 / 3.0]);
        let col = leaf(&mut t, &[3], vec![1.0, 2.0, 3.0]);
        let bc = t.broadcast(col, &[2, 3], &[1]).unwrap();
        assert_eq!(t.data(bc), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let u = leaf(&mut t, &[1, 4], vec![0.3; 4]);
        let l = t.cross_entropy(u, &[2]).unwrap();
        assert!((t.data(l)[0] - 4f64.ln()).abs() < 1e-12);

        let big = leaf(&mut t, &[1, 2], vec![1000.0, 0.0]);
        let l = t.cross_entropy(big, &[0]).unwrap();
        assert!(t.data(l)[0].abs() < 1e-12);

        let mut t = Tape::new();
        let z = leaf(&mut t, &[1, 2], vec![0.0, 0.0]);
        let l = t.cross_entropy(z, &[0]).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(z).unwrap(), &[-0.5, 0.5]);
    }
}
