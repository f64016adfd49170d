//! Capsule layers: squash, parameter-shared and fully-connected transforms,
//! and dot-product k-means routing.
//!
//! Shapes used throughout:
//! - low-level capsules `u`: `[B, N, d_in]`
//! - predictions `û`: `[B, N, M, d_out]`
//! - high-level capsules `v`: `[B, M, d_out]`
//! - coupling coefficients `c`: `[B, N, M]`, each row over `M` sums to one.

use rand::Rng;

use crate::backend::{CustomOp, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Coupling coefficients and output capsules of one routing pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace<T: Float> {
    /// Squashed high-level capsules, `[B, M, d_out]`.
    pub capsules: Tensor<T>,
    /// Final-iteration coupling coefficients, `[B, N, M]`.
    pub coupling: Tensor<T>,
}

impl<T: Float> RoutingTrace<T> {
    pub fn batch(&self) -> usize {
        self.coupling.shape()[0]
    }

    pub fn low_count(&self) -> usize {
        self.coupling.shape()[1]
    }

    pub fn high_count(&self) -> usize {
        self.coupling.shape()[2]
    }

    /// Capsule lengths `[B, M]`.
    pub fn lengths(&self) -> Tensor<T> {
        let shape = self.capsules.shape();
        let d = shape[2];
        let data = self
            .capsules
            .data()
            .chunks_exact(d)
            .map(|v| v.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        Tensor::from_vec(&shape[..2], data).expect("lengths shape")
    }
}

/// Differentiable output of a capsule layer.
pub struct Routed<T> {
    /// Squashed high-level capsules on the graph.
    pub capsules: Var,
    /// Final coupling coefficients. Not differentiated.
    pub coupling: Tensor<T>,
}

impl<T: Float> Routed<T> {
    pub fn trace(&self, g: &Graph<T>) -> RoutingTrace<T> {
        RoutingTrace {
            capsules: g.value(self.capsules).clone(),
            coupling: self.coupling.clone(),
        }
    }
}

/// The squash scale `|v| / (1 + |v|^2)` applied to a capsule of norm `n`.
fn squash_scale<T: Float>(n: T) -> T {
    n / (T::one() + n * n)
}

/// `squash(v) = |v| / (1 + |v|^2) * v`, in place on one capsule.
pub fn squash_in_place<T: Float>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let s = squash_scale(n);
    v.iter_mut().for_each(|x| *x *= s);
}

fn rank(op: &'static str, shape: &[usize], want: usize) -> Result<()> {
    if shape.len() != want {
        return Err(Error::shape(op, format!("expected rank {want}, got {shape:?}")));
    }
    Ok(())
}

struct Squash {
    inputs: [Var; 1],
    dim: usize,
}

impl<T: Float> CustomOp<T> for Squash {
    fn name(&self) -> &'static str {
        "squash"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); grad.len()];
        for ((v, g), d) in inputs[0]
            .data()
            .chunks_exact(self.dim)
            .zip(grad.chunks_exact(self.dim))
            .zip(dx.chunks_exact_mut(self.dim))
        {
            squash_vjp(v, g, d);
        }
        vec![Some(dx)]
    }
}

/// Vector-Jacobian product of squash at `v`, accumulated into `out`.
fn squash_vjp<T: Float>(v: &[T], g: &[T], out: &mut [T]) {
    let n2: T = v.iter().map(|&x| x * x).sum();
    let n = n2.sqrt();
    if n == T::zero() {
        return;
    }
    let one = T::one();
    let f = squash_scale(n);
    // f'(n) / n with f(n) = n / (1 + n^2)
    let fp_over_n = (one - n2) / ((one + n2) * (one + n2) * n);
    let vg: T = v.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &vi), &gi) in out.iter_mut().zip(v).zip(g) {
        *o += f * gi + fp_over_n * vg * vi;
    }
}

/// Squash over the last axis.
pub fn squash<T: Float>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let src = g.value(v);
    let dim = *src.shape().last().ok_or_else(|| Error::shape("squash", "scalar input"))?;
    if dim == 0 {
        return Err(Error::shape("squash", "capsule dimension must be at least 1"));
    }
    let mut data = src.data().to_vec();
    data.chunks_exact_mut(dim).for_each(squash_in_place);
    let value = Tensor::from_vec(src.shape(), data)?;
    g.custom(value, Box::new(Squash { inputs: [v], dim }))
}

struct Lengths {
    inputs: [Var; 1],
    dim: usize,
}

impl<T: Float> CustomOp<T> for Lengths {
    fn name(&self) -> &'static str {
        "capsule_lengths"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for (((v, d), &n), &g) in inputs[0]
            .data()
            .chunks_exact(self.dim)
            .zip(dx.chunks_exact_mut(self.dim))
            .zip(out.data())
            .zip(grad)
        {
            if n > T::zero() {
                for (di, &vi) in d.iter_mut().zip(v) {
                    *di = g * vi / n;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// L2 norm over the last axis: `[B, M, d] -> [B, M]`.
pub fn capsule_lengths<T: Float>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let src = g.value(v);
    let shape = src.shape();
    let Some((&dim, lead)) = shape.split_last() else {
        return Err(Error::shape("capsule_lengths", "scalar input"));
    };
    let data = src
        .data()
        .chunks_exact(dim.max(1))
        .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    let value = Tensor::from_vec(lead, data)?;
    g.custom(value, Box::new(Lengths { inputs: [v], dim }))
}

/// Position of low-level capsule `i` in a `[slots*d, h, w]` feature map.
///
/// Capsules are numbered slot-major: `i = (slot * h + y) * w + x`, and
/// capsule `i` holds channels `[slot*d, slot*d + d)` at site `(y, x)`.
pub fn capsule_site(i: usize, h: usize, w: usize) -> (usize, usize, usize) {
    (i / (h * w), (i / w) % h, i % w)
}

struct ToCapsules {
    inputs: [Var; 1],
    shape: [usize; 4],
    dim: usize,
}

impl ToCapsules {
    /// Calls `f(feature_index, capsule_index)` for every element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [b, c, h, w] = self.shape;
        let plane = h * w;
        let n = (c / self.dim) * plane;
        for bi in 0..b {
            for ch in 0..c {
                let (slot, e) = (ch / self.dim, ch % self.dim);
                for p in 0..plane {
                    let cap = slot * plane + p;
                    f((bi * c + ch) * plane + p, (bi * n + cap) * self.dim + e);
                }
            }
        }
    }
}

impl<T: Float> CustomOp<T> for ToCapsules {
    fn name(&self) -> &'static str {
        "to_capsules"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); inputs[0].numel()];
        self.for_each(|src, dst| dx[src] = grad[dst]);
        vec![Some(dx)]
    }
}

/// Splits a `[B, C, H, W]` feature map along channels into `(C/d)*H*W`
/// capsules of dimension `d`, numbered as in [`capsule_site`].
pub fn capsules_from_feature_map<T: Float>(g: &mut Graph<T>, x: Var, dim: usize) -> Result<Var> {
    let shape: [usize; 4] = g
        .shape(x)
        .try_into()
        .map_err(|_| Error::shape("to_capsules", format!("expected rank 4, got {:?}", g.shape(x))))?;
    let [b, c, h, w] = shape;
    if dim == 0 || c % dim != 0 {
        return Err(Error::shape(
            "to_capsules",
            format!("{c} channels not divisible into capsules of {dim}"),
        ));
    }
    let op = ToCapsules {
        inputs: [x],
        shape,
        dim,
    };
    let src = g.value(x).data();
    let mut out = vec![T::zero(); src.len()];
    op.for_each(|s, d| out[d] = src[s]);
    let value = Tensor::from_vec(&[b, (c / dim) * h * w, dim], out)?;
    g.custom(value, Box::new(op))
}

struct PsTransform {
    inputs: [Var; 2],
    rows: usize,
    high: usize,
    d_in: usize,
    d_out: usize,
}

/// `[M, d_in, d_out] -> [d_in, M*d_out]`, the layout one GEMM consumes.
fn ps_pack<T: Float>(w: &[T], m: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut packed = vec![T::zero(); w.len()];
    for j in 0..m {
        for d in 0..d_in {
            for e in 0..d_out {
                packed[d * m * d_out + j * d_out + e] = w[(j * d_in + d) * d_out + e];
            }
        }
    }
    packed
}

impl<T: Float> CustomOp<T> for PsTransform {
    fn name(&self) -> &'static str {
        "transform_ps"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (rows, m, di, dout) = (self.rows, self.high, self.d_in, self.d_out);
        let cols = m * dout;
        let du = needs[0].then(|| {
            let packed = ps_pack(inputs[1].data(), m, di, dout);
            let mut du = vec![T::zero(); rows * di];
            crate::backend::matmul(rows, cols, di, grad, false, &packed, true, &mut du, T::one(), T::zero());
            du
        });
        let dw = needs[1].then(|| {
            let mut dpacked = vec![T::zero(); di * cols];
            crate::backend::matmul(di, rows, cols, inputs[0].data(), true, grad, false, &mut dpacked, T::one(), T::zero());
            let mut dw = vec![T::zero(); m * di * dout];
            for j in 0..m {
                for d in 0..di {
                    for e in 0..dout {
                        dw[(j * di + d) * dout + e] = dpacked[d * cols + j * dout + e];
                    }
                }
            }
            dw
        });
        vec![du, dw]
    }
}

/// `û[b,i,j] = u[b,i] W_j` with one shared `[d_in, d_out]` matrix per output capsule.
pub fn transform_ps<T: Float>(g: &mut Graph<T>, u: Var, w: Var) -> Result<Var> {
    rank("transform_ps", g.shape(u), 3)?;
    rank("transform_ps", g.shape(w), 3)?;
    let (b, n, d_in) = (g.shape(u)[0], g.shape(u)[1], g.shape(u)[2]);
    let (m, wd_in, d_out) = (g.shape(w)[0], g.shape(w)[1], g.shape(w)[2]);
    if wd_in != d_in {
        return Err(Error::shape(
            "transform_ps",
            format!("capsules have dimension {d_in}, weights expect {wd_in}"),
        ));
    }
    let rows = b * n;
    let packed = ps_pack(g.value(w).data(), m, d_in, d_out);
    let mut out = vec![T::zero(); rows * m * d_out];
    crate::backend::matmul(rows, d_in, m * d_out, g.value(u).data(), false, &packed, false, &mut out, T::one(), T::zero());
    let value = Tensor::from_vec(&[b, n, m, d_out], out)?;
    g.custom(
        value,
        Box::new(PsTransform {
            inputs: [u, w],
            rows,
            high: m,
            d_in,
            d_out,
        }),
    )
}

struct FcTransform {
    inputs: [Var; 2],
    batch: usize,
    low: usize,
    high: usize,
    d_in: usize,
    d_out: usize,
}

impl<T: Float> CustomOp<T> for FcTransform {
    fn name(&self) -> &'static str {
        "transform_fc"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        use crate::backend::gemm_strided as gemm;
        let FcTransform {
            batch,
            low: n,
            high: m,
            d_in: di,
            d_out: dout,
            ..
        } = *self;
        let (u, w) = (inputs[0].data(), inputs[1].data());
        let su = strided(n * di, 1);
        let sg = strided(n * m * dout, 1);
        let mut du = needs[0].then(|| vec![T::zero(); u.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        for i in 0..n {
            for j in 0..m {
                let w_off = (j * n + i) * di * dout;
                let g_off = (i * m + j) * dout;
                if let Some(du) = du.as_mut() {
                    gemm(
                        batch, dout, di, T::one(),
                        grad, sg.at(g_off),
                        w, strided(1, dout).at(w_off),
                        T::one(), du, su.at(i * di),
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    gemm(
                        di, batch, dout, T::one(),
                        u, strided(1, n * di).at(i * di),
                        grad, sg.at(g_off),
                        T::zero(), dw, strided(dout, 1).at(w_off),
                    );
                }
            }
        }
        vec![du, dw]
    }
}

fn strided(rs: usize, cs: usize) -> crate::backend::Strided {
    crate::backend::Strided { offset: 0, rs, cs }
}

/// `û[b,i,j] = u[b,i] W_ij` with a distinct matrix for every capsule pair.
/// The weight shape `[M, N, d_in, d_out]` fixes `N`.
pub fn transform_fc<T: Float>(g: &mut Graph<T>, u: Var, w: Var) -> Result<Var> {
    use crate::backend::gemm_strided as gemm;
    rank("transform_fc", g.shape(u), 3)?;
    rank("transform_fc", g.shape(w), 4)?;
    let (b, n, d_in) = (g.shape(u)[0], g.shape(u)[1], g.shape(u)[2]);
    let (m, wn, wd_in, d_out) = (g.shape(w)[0], g.shape(w)[1], g.shape(w)[2], g.shape(w)[3]);
    if wn != n {
        return Err(Error::shape(
            "transform_fc",
            format!("layer was built for {wn} low-level capsules, got {n}"),
        ));
    }
    if wd_in != d_in {
        return Err(Error::shape(
            "transform_fc",
            format!("capsules have dimension {d_in}, weights expect {wd_in}"),
        ));
    }
    let (uv, wv) = (g.value(u).data(), g.value(w).data());
    let mut out = vec![T::zero(); b * n * m * d_out];
    for i in 0..n {
        for j in 0..m {
            gemm(
                b, d_in, d_out, T::one(),
                uv, strided(n * d_in, 1).at(i * d_in),
                wv, strided(d_out, 1).at((j * n + i) * d_in * d_out),
                T::zero(), &mut out, strided(n * m * d_out, 1).at((i * m + j) * d_out),
            );
        }
    }
    let value = Tensor::from_vec(&[b, n, m, d_out], out)?;
    g.custom(
        value,
        Box::new(FcTransform {
            inputs: [u, w],
            batch: b,
            low: n,
            high: m,
            d_in,
            d_out,
        }),
    )
}

/// Intermediate state of one routing pass over a single batch element.
struct RouteTape<T> {
    /// Cluster centres entering each iteration plus the final one: `r+1` of `[M, D]`.
    centres: Vec<Vec<T>>,
    /// Similarities `b` per iteration, `[N, M]`.
    logits: Vec<Vec<T>>,
    /// Couplings `c` per iteration, `[N, M]`.
    couplings: Vec<Vec<T>>,
}

/// Dot-product k-means routing over one batch element's `û: [N, M, D]`.
fn route_one<T: Float>(uhat: &[T], n: usize, m: usize, d: usize, iters: usize) -> RouteTape<T> {
    let inv_m = T::one() / T::from_usize(m).unwrap();
    let mut centre = vec![T::zero(); m * d];
    for i in 0..n {
        for (acc, &x) in centre.iter_mut().zip(&uhat[i * m * d..(i + 1) * m * d]) {
            *acc += x;
        }
    }
    centre.iter_mut().for_each(|x| *x *= inv_m);

    let mut tape = RouteTape {
        centres: vec![centre],
        logits: Vec::with_capacity(iters),
        couplings: Vec::with_capacity(iters),
    };
    for _ in 0..iters {
        let w = tape.centres.last().unwrap();
        let norms: Vec<T> = w.chunks_exact(d).map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
        let mut logits = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                if norms[j] > T::zero() {
                    let u = &uhat[(i * m + j) * d..][..d];
                    let dot: T = u.iter().zip(&w[j * d..(j + 1) * d]).map(|(&a, &b)| a * b).sum();
                    logits[i * m + j] = dot / norms[j];
                }
            }
        }
        let mut coupling = vec![T::zero(); n * m];
        for (lane, out) in logits.chunks_exact(m).zip(coupling.chunks_exact_mut(m)) {
            crate::backend::softmax_lane(lane, out);
        }
        let mut next = vec![T::zero(); m * d];
        for i in 0..n {
            for j in 0..m {
                let c = coupling[i * m + j];
                let u = &uhat[(i * m + j) * d..][..d];
                for (acc, &x) in next[j * d..(j + 1) * d].iter_mut().zip(u) {
                    *acc += c * x;
                }
            }
        }
        tape.logits.push(logits);
        tape.couplings.push(coupling);
        tape.centres.push(next);
    }
    tape
}

/// Reverse sweep of [`route_one`]; returns `dL/dû` given `dL/dv_final`.
fn route_one_vjp<T: Float>(uhat: &[T], tape: &RouteTape<T>, n: usize, m: usize, d: usize, gout: &[T]) -> Vec<T> {
    let mut du = vec![T::zero(); uhat.len()];
    let mut gv = gout.to_vec();
    for t in (0..tape.couplings.len()).rev() {
        let (c, b, w) = (&tape.couplings[t], &tape.logits[t], &tape.centres[t]);
        let norms: Vec<T> = w.chunks_exact(d).map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
        let mut gw = vec![T::zero(); m * d];
        let mut gc = vec![T::zero(); m];
        for i in 0..n {
            // v_j = sum_i c_ij û_ij
            for j in 0..m {
                let u = &uhat[(i * m + j) * d..][..d];
                let g = &gv[j * d..(j + 1) * d];
                gc[j] = u.iter().zip(g).map(|(&a, &b)| a * b).sum();
                let cij = c[i * m + j];
                for (acc, &gj) in du[(i * m + j) * d..][..d].iter_mut().zip(g) {
                    *acc += cij * gj;
                }
            }
            // c_i = softmax(b_i)
            let dot: T = (0..m).map(|j| c[i * m + j] * gc[j]).sum();
            for j in 0..m {
                let gb = c[i * m + j] * (gc[j] - dot);
                let nj = norms[j];
                if nj == T::zero() || gb == T::zero() {
                    continue;
                }
                // b_ij = û_ij . w_j / |w_j|
                let u = &uhat[(i * m + j) * d..][..d];
                let wj = &w[j * d..(j + 1) * d];
                let bij = b[i * m + j];
                for e in 0..d {
                    du[(i * m + j) * d + e] += gb * wj[e] / nj;
                    gw[j * d + e] += gb * (u[e] / nj - bij * wj[e] / (nj * nj));
                }
            }
        }
        gv = gw;
    }
    // v_j = (1/M) sum_i û_ij
    let inv_m = T::one() / T::from_usize(m).unwrap();
    for i in 0..n {
        for (acc, &g) in du[i * m * d..(i + 1) * m * d].iter_mut().zip(&gv) {
            *acc += g * inv_m;
        }
    }
    du
}

struct Route<T> {
    inputs: [Var; 1],
    dims: [usize; 4],
    tapes: Vec<RouteTape<T>>,
}

impl<T: Float> CustomOp<T> for Route<T> {
    fn name(&self) -> &'static str {
        "kmeans_route"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let [_, n, m, d] = self.dims;
        let per_in = n * m * d;
        let per_out = m * d;
        let mut du = Vec::with_capacity(inputs[0].numel());
        for (b, tape) in self.tapes.iter().enumerate() {
            let uhat = &inputs[0].data()[b * per_in..(b + 1) * per_in];
            du.extend(route_one_vjp(uhat, tape, n, m, d, &grad[b * per_out..(b + 1) * per_out]));
        }
        vec![Some(du)]
    }
}

/// Modified k-means routing of `û: [B, N, M, D]` for `iters` iterations.
///
/// Centres start at `(1/M) Σ_i û_ij`. Each iteration recomputes the
/// similarities `b_ij = û_ij · v_j / |v_j|` from scratch (zero when
/// `|v_j| = 0`), sets `c_ij = softmax_j b_ij` and `v_j = Σ_i c_ij û_ij`.
/// The returned capsules are squashed; with `iters == 0` the coupling is
/// uniform `1/M`. Gradients flow through every iteration.
pub fn kmeans_route<T: Float>(g: &mut Graph<T>, uhat: Var, iters: usize) -> Result<Routed<T>> {
    rank("kmeans_route", g.shape(uhat), 4)?;
    let dims: [usize; 4] = g.shape(uhat).try_into().unwrap();
    let [b, n, m, d] = dims;
    if m == 0 || d == 0 {
        return Err(Error::shape("kmeans_route", format!("degenerate predictions {dims:?}")));
    }
    let data = g.value(uhat).data();
    let per_in = n * m * d;
    let tapes: Vec<RouteTape<T>> = (0..b)
        .map(|bi| route_one(&data[bi * per_in..(bi + 1) * per_in], n, m, d, iters))
        .collect();
    let mut centres = Vec::with_capacity(b * m * d);
    let mut coupling = Vec::with_capacity(b * n * m);
    let uniform = T::one() / T::from_usize(m).unwrap();
    for tape in &tapes {
        centres.extend_from_slice(tape.centres.last().unwrap());
        match tape.couplings.last() {
            Some(c) => coupling.extend_from_slice(c),
            None => coupling.extend(std::iter::repeat_n(uniform, n * m)),
        }
    }
    let value = Tensor::from_vec(&[b, m, d], centres)?;
    let raw = g.custom(value, Box::new(Route { inputs: [uhat], dims, tapes }))?;
    let capsules = squash(g, raw)?;
    Ok(Routed {
        capsules,
        coupling: Tensor::from_vec(&[b, n, m], coupling)?,
    })
}

/// Half-width of the uniform init of capsule transforms; Glorot-scale
/// weights saturate squash over summed predictions from the first step.
fn capsule_init_bound(d_in: usize) -> f64 {
    1.0 / d_in as f64
}

/// Parameter-shared capsule layer: `M` transform matrices of `[d_in, d_out]`
/// shared by every low-level capsule, so any `N` is accepted.
#[derive(Clone, Copy, Debug)]
pub struct PsCapsuleLayer {
    pub weight: ParamId,
    pub high: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl PsCapsuleLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        high: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = capsule_init_bound(d_in);
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[high, d_in, d_out], bound, rng));
        PsCapsuleLayer {
            weight,
            high,
            d_in,
            d_out,
        }
    }

    pub fn num_params(&self) -> usize {
        self.high * self.d_in * self.d_out
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, u: Var, iters: usize) -> Result<Routed<T>> {
        let w = g.param(store, self.weight);
        let uhat = transform_ps(g, u, w)?;
        kmeans_route(g, uhat, iters)
    }
}

/// Fully-connected capsule layer: one `[d_in, d_out]` matrix per
/// (low-level, high-level) pair; only accepts the `N` it was built for.
#[derive(Clone, Copy, Debug)]
pub struct FcCapsuleLayer {
    pub weight: ParamId,
    pub low: usize,
    pub high: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl FcCapsuleLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        low: usize,
        high: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = capsule_init_bound(d_in);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[high, low, d_in, d_out], bound, rng),
        );
        FcCapsuleLayer {
            weight,
            low,
            high,
            d_in,
            d_out,
        }
    }

    pub fn num_params(&self) -> usize {
        self.high * self.low * self.d_in * self.d_out
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, u: Var, iters: usize) -> Result<Routed<T>> {
        let w = g.param(store, self.weight);
        let uhat = transform_fc(g, u, w)?;
        kmeans_route(g, uhat, iters)
    }
}
