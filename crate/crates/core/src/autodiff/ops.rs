//! Operator set for the tape. Forward code fills a fresh tensor; each op
//! installs a closure computing vector-Jacobian products into its parents.

use super::{accum, Tape, Tensor, Var};

/// Row-major GEMM helpers over raw slices.
fn mm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_major(k: usize) -> (isize, isize) {
    (k as isize, 1)
}

fn transposed(rows: usize) -> (isize, isize) {
    (1, rows as isize)
}

/// How `b` lines up with `a` in a binary elementwise op.
enum Broadcast {
    Same,
    Scalar,
    /// `b.shape` is a suffix of `a.shape`; `b` tiles over the leading dims.
    Suffix { reps: usize, len: usize },
}

fn broadcast_of(a: &Tensor, b: &Tensor) -> Broadcast {
    if a.shape == b.shape {
        Broadcast::Same
    } else if b.numel() == 1 {
        Broadcast::Scalar
    } else if a.shape.len() > b.shape.len() && a.shape.ends_with(&b.shape) {
        let len = b.numel();
        Broadcast::Suffix { reps: a.numel() / len, len }
    } else {
        panic!("incompatible shapes for broadcast: {:?} vs {:?}", a.shape, b.shape)
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast_of(ta, tb);
        let mut out = ta.clone();
        match &bc {
            Broadcast::Same => {
                for (o, y) in out.data.iter_mut().zip(&tb.data) {
                    *o += y;
                }
            }
            Broadcast::Scalar => {
                let s = tb.data[0];
                for o in &mut out.data {
                    *o += s;
                }
            }
            Broadcast::Suffix { reps, len } => {
                for r in 0..*reps {
                    for i in 0..*len {
                        out.data[r * len + i] += tb.data[i];
                    }
                }
            }
        }
        let b_shape = tb.shape.clone();
        self.push(
            out,
            Box::new(move |g, _vals, grads| {
                accum(grads, a.0, g.clone());
                accum(grads, b.0, reduce_to(g, &b_shape, &bc));
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast_of(ta, tb);
        let mut out = ta.clone();
        match &bc {
            Broadcast::Same => {
                for (o, y) in out.data.iter_mut().zip(&tb.data) {
                    *o -= y;
                }
            }
            Broadcast::Scalar => {
                let s = tb.data[0];
                for o in &mut out.data {
                    *o -= s;
                }
            }
            Broadcast::Suffix { reps, len } => {
                for r in 0..*reps {
                    for i in 0..*len {
                        out.data[r * len + i] -= tb.data[i];
                    }
                }
            }
        }
        let b_shape = tb.shape.clone();
        self.push(
            out,
            Box::new(move |g, _vals, grads| {
                accum(grads, a.0, g.clone());
                let mut gb = reduce_to(g, &b_shape, &bc);
                for v in &mut gb.data {
                    *v = -*v;
                }
                accum(grads, b.0, gb);
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast_of(ta, tb);
        let mut out = ta.clone();
        match &bc {
            Broadcast::Same => {
                for (o, y) in out.data.iter_mut().zip(&tb.data) {
                    *o *= y;
                }
            }
            Broadcast::Scalar => {
                let s = tb.data[0];
                for o in &mut out.data {
                    *o *= s;
                }
            }
            Broadcast::Suffix { reps, len } => {
                for r in 0..*reps {
                    for i in 0..*len {
                        out.data[r * len + i] *= tb.data[i];
                    }
                }
            }
        }
        let b_shape = tb.shape.clone();
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                // da = g .* broadcast(b)
                let mut da = g.clone();
                match &bc {
                    Broadcast::Same => {
                        for (o, y) in da.data.iter_mut().zip(&tb.data) {
                            *o *= y;
                        }
                    }
                    Broadcast::Scalar => {
                        let s = tb.data[0];
                        for o in &mut da.data {
                            *o *= s;
                        }
                    }
                    Broadcast::Suffix { reps, len } => {
                        for r in 0..*reps {
                            for i in 0..*len {
                                da.data[r * len + i] *= tb.data[i];
                            }
                        }
                    }
                }
                accum(grads, a.0, da);
                // db = reduce(g .* a)
                let mut ga = g.clone();
                for (o, x) in ga.data.iter_mut().zip(&ta.data) {
                    *o *= x;
                }
                accum(grads, b.0, reduce_to(&ga, &b_shape, &bc));
            }),
        )
    }

    /// Elementwise division; `b` must be same-shape or scalar.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let scalar_b = tb.numel() == 1;
        assert!(scalar_b || ta.shape == tb.shape, "div shape mismatch");
        let mut out = ta.clone();
        if scalar_b {
            let s = tb.data[0];
            for o in &mut out.data {
                *o /= s;
            }
        } else {
            for (o, y) in out.data.iter_mut().zip(&tb.data) {
                *o /= y;
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                if scalar_b {
                    let s = tb.data[0];
                    let mut da = g.clone();
                    for v in &mut da.data {
                        *v /= s;
                    }
                    accum(grads, a.0, da);
                    let gb: f64 = g.data.iter().zip(&ta.data).map(|(g, x)| -g * x / (s * s)).sum();
                    accum(grads, b.0, Tensor::scalar(gb));
                } else {
                    let mut da = g.clone();
                    for (v, y) in da.data.iter_mut().zip(&tb.data) {
                        *v /= y;
                    }
                    accum(grads, a.0, da);
                    let mut db = g.clone();
                    for ((v, x), y) in db.data.iter_mut().zip(&ta.data).zip(&tb.data) {
                        *v = -*v * x / (y * y);
                    }
                    accum(grads, b.0, db);
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v *= c;
        }
        self.push(
            out,
            Box::new(move |g, _vals, grads| {
                let mut da = g.clone();
                for v in &mut da.data {
                    *v *= c;
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v += c;
        }
        self.push(out, Box::new(move |g, _vals, grads| accum(grads, a.0, g.clone())))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.exp();
        }
        let saved = out.data.clone();
        self.push(
            out,
            Box::new(move |g, _vals, grads| {
                let mut da = g.clone();
                for (v, e) in da.data.iter_mut().zip(&saved) {
                    *v *= e;
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.ln();
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&vals[a.0].data) {
                    *v /= x;
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let saved = out.data.clone();
        self.push(
            out,
            Box::new(move |g, _vals, grads| {
                let mut da = g.clone();
                for (v, s) in da.data.iter_mut().zip(&saved) {
                    *v *= s * (1.0 - s);
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&vals[a.0].data) {
                    if *x <= 0.0 {
                        *v = 0.0;
                    }
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.abs();
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&vals[a.0].data) {
                    *v *= x.signum() * (if *x == 0.0 { 0.0 } else { 1.0 });
                }
                accum(grads, a.0, da);
            }),
        )
    }

    /// Clamp with zero gradient outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.clamp(lo, hi);
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&vals[a.0].data) {
                    if *x <= lo || *x >= hi {
                        *v = 0.0;
                    }
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data.iter().sum();
        let shape = self.value(a).shape.clone();
        self.push(
            Tensor::scalar(total),
            Box::new(move |g, _vals, grads| accum(grads, a.0, Tensor::full(&shape, g.data[0]))),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let total: f64 = self.value(a).data.iter().sum();
        let shape = self.value(a).shape.clone();
        self.push(
            Tensor::scalar(total / n as f64),
            Box::new(move |g, _vals, grads| {
                accum(grads, a.0, Tensor::full(&shape, g.data[0] / n as f64))
            }),
        )
    }

    /// Sum over the last dim: [.., M] -> [..].
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let r = ta.shape.len();
        assert!(r >= 2);
        let m = ta.shape[r - 1];
        let rows = ta.numel() / m;
        let out_shape = ta.shape[..r - 1].to_vec();
        let mut out = Tensor::zeros(&out_shape);
        for row in 0..rows {
            out.data[row] = ta.data[row * m..(row + 1) * m].iter().sum();
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut da = Tensor::zeros(&vals[a.0].shape);
                for row in 0..rows {
                    for i in 0..m {
                        da.data[row * m + i] = g.data[row];
                    }
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.numel(), shape.iter().product::<usize>(), "reshape numel mismatch");
        let out = Tensor::from_vec(shape, ta.data.clone());
        let old_shape = ta.shape.clone();
        self.push(
            out,
            Box::new(move |g, _vals, grads| {
                accum(grads, a.0, Tensor::from_vec(&old_shape, g.data.clone()))
            }),
        )
    }

    /// a [m,k] x b [k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape.len(), 2);
        assert_eq!(tb.shape.len(), 2);
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = Tensor::zeros(&[m, n]);
        mm(m, k, n, &ta.data, row_major(k), &tb.data, row_major(n), &mut out.data, 0.0);
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let mut da = Tensor::zeros(&[m, k]);
                // dA = G [m,n] x B^T [n,k]
                mm(m, n, k, &g.data, row_major(n), &tb.data, transposed(n), &mut da.data, 0.0);
                accum(grads, a.0, da);
                let mut db = Tensor::zeros(&[k, n]);
                // dB = A^T [k,m] x G [m,n]
                mm(k, m, n, &ta.data, transposed(k), &g.data, row_major(n), &mut db.data, 0.0);
                accum(grads, b.0, db);
            }),
        )
    }

    /// Batched matmul over equal leading dims: a [..,m,k] x b [..,k,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let ra = ta.shape.len();
        let rb = tb.shape.len();
        assert!(ra >= 3 && ra == rb, "bmm wants equal-rank >=3 tensors");
        assert_eq!(ta.shape[..ra - 2], tb.shape[..rb - 2], "bmm leading dims");
        let (m, k) = (ta.shape[ra - 2], ta.shape[ra - 1]);
        let (k2, n) = (tb.shape[rb - 2], tb.shape[rb - 1]);
        assert_eq!(k, k2, "bmm inner dims");
        let batch: usize = ta.shape[..ra - 2].iter().product();
        let mut out_shape = ta.shape[..ra - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = Tensor::zeros(&out_shape);
        for i in 0..batch {
            mm(
                m,
                k,
                n,
                &ta.data[i * m * k..],
                row_major(k),
                &tb.data[i * k * n..],
                row_major(n),
                &mut out.data[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let mut da = Tensor::zeros(&ta.shape);
                let mut db = Tensor::zeros(&tb.shape);
                for i in 0..batch {
                    mm(
                        m,
                        n,
                        k,
                        &g.data[i * m * n..],
                        row_major(n),
                        &tb.data[i * k * n..],
                        transposed(n),
                        &mut da.data[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                    mm(
                        k,
                        m,
                        n,
                        &ta.data[i * m * k..],
                        transposed(k),
                        &g.data[i * m * n..],
                        row_major(n),
                        &mut db.data[i * k * n..(i + 1) * k * n],
                        0.0,
                    );
                }
                accum(grads, a.0, da);
                accum(grads, b.0, db);
            }),
        )
    }

    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let r = ta.shape.len();
        assert!(r >= 2);
        let (m, n) = (ta.shape[r - 2], ta.shape[r - 1]);
        let batch: usize = ta.shape[..r - 2].iter().product();
        let mut shape = ta.shape.clone();
        shape.swap(r - 2, r - 1);
        let mut out = Tensor::zeros(&shape);
        for b in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    out.data[b * m * n + j * m + i] = ta.data[b * m * n + i * n + j];
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut da = Tensor::zeros(&vals[a.0].shape);
                for b in 0..batch {
                    for i in 0..m {
                        for j in 0..n {
                            da.data[b * m * n + i * n + j] = g.data[b * m * n + j * m + i];
                        }
                    }
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let r = ta.shape.len();
        let d = ta.shape[r - 1];
        let rows = ta.numel() / d;
        let mut out = ta.clone();
        for row in 0..rows {
            let s = &mut out.data[row * d..(row + 1) * d];
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in s.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in s.iter_mut() {
                *v /= z;
            }
        }
        let saved = out.clone();
        self.push(
            out,
            Box::new(move |g, _vals, grads| {
                let mut da = Tensor::zeros(&saved.shape);
                for row in 0..rows {
                    let y = &saved.data[row * d..(row + 1) * d];
                    let gr = &g.data[row * d..(row + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for i in 0..d {
                        da.data[row * d + i] = y[i] * (gr[i] - dot);
                    }
                }
                accum(grads, a.0, da);
            }),
        )
    }

    pub fn layernorm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let r = ta.shape.len();
        let d = ta.shape[r - 1];
        assert_eq!(self.value(gamma).shape, vec![d]);
        assert_eq!(self.value(beta).shape, vec![d]);
        let rows = ta.numel() / d;
        let mut out = Tensor::zeros(&ta.shape);
        let mut xhat = vec![0.0; ta.numel()];
        let mut inv_std = vec![0.0; rows];
        {
            let gdat = &self.value(gamma).data;
            let bdat = &self.value(beta).data;
            let xdat = &self.value(a).data;
            for row in 0..rows {
                let x = &xdat[row * d..(row + 1) * d];
                let mu: f64 = x.iter().sum::<f64>() / d as f64;
                let var: f64 = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[row] = istd;
                for i in 0..d {
                    let xh = (x[i] - mu) * istd;
                    xhat[row * d + i] = xh;
                    out.data[row * d + i] = gdat[i] * xh + bdat[i];
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let gdat = &vals[gamma.0].data;
                let mut da = Tensor::zeros(&vals[a.0].shape);
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for row in 0..rows {
                    let istd = inv_std[row];
                    let xh = &xhat[row * d..(row + 1) * d];
                    let gr = &g.data[row * d..(row + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for i in 0..d {
                        let dxh = gr[i] * gdat[i];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[i];
                        dgamma.data[i] += gr[i] * xh[i];
                        dbeta.data[i] += gr[i];
                    }
                    for i in 0..d {
                        let dxh = gr[i] * gdat[i];
                        da.data[row * d + i] =
                            istd * (dxh - sum_dxh / d as f64 - xh[i] * sum_dxh_xh / d as f64);
                    }
                }
                accum(grads, a.0, da);
                accum(grads, gamma.0, dgamma);
                accum(grads, beta.0, dbeta);
            }),
        )
    }

    /// Per-channel batch normalization over (N, H, W).
    ///
    /// `frozen` replaces the batch statistics with (0, 1); used to make
    /// forward passes per-sample independent in tests.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, frozen: bool) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).shape, vec![c]);
        assert_eq!(self.value(beta).shape, vec![c]);
        let m = n * h * w;
        let plane = h * w;
        let mut out = Tensor::zeros(&self.value(x).shape);

        if frozen {
            let gdat = self.value(gamma).data.clone();
            let bdat = self.value(beta).data.clone();
            let xdat = &self.value(x).data;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        out.data[base + i] = gdat[ci] * xdat[base + i] + bdat[ci];
                    }
                }
            }
            return self.push(
                out,
                Box::new(move |g, vals, grads| {
                    let gdat = &vals[gamma.0].data;
                    let xdat = &vals[x.0].data;
                    let mut dx = Tensor::zeros(&vals[x.0].shape);
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for i in 0..plane {
                                let gg = g.data[base + i];
                                dx.data[base + i] = gg * gdat[ci];
                                dgamma.data[ci] += gg * xdat[base + i];
                                dbeta.data[ci] += gg;
                            }
                        }
                    }
                    accum(grads, x.0, dx);
                    accum(grads, gamma.0, dgamma);
                    accum(grads, beta.0, dbeta);
                }),
            );
        }

        let mut xhat = vec![0.0; self.value(x).numel()];
        let mut inv_std = vec![0.0; c];
        {
            let xdat = &self.value(x).data;
            let gdat = &self.value(gamma).data;
            let bdat = &self.value(beta).data;
            for ci in 0..c {
                let mut mu = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        mu += xdat[base + i];
                    }
                }
                mu /= m as f64;
                let mut var = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        let d = xdat[base + i] - mu;
                        var += d * d;
                    }
                }
                var /= m as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[ci] = istd;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        let xh = (xdat[base + i] - mu) * istd;
                        xhat[base + i] = xh;
                        out.data[base + i] = gdat[ci] * xh + bdat[ci];
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let gdat = &vals[gamma.0].data;
                let mut dx = Tensor::zeros(&vals[x.0].shape);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            let gg = g.data[base + i];
                            let dxh = gg * gdat[ci];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[base + i];
                            dgamma.data[ci] += gg * xhat[base + i];
                            dbeta.data[ci] += gg;
                        }
                    }
                    let istd = inv_std[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            let gg = g.data[base + i];
                            let dxh = gg * gdat[ci];
                            dx.data[base + i] = istd
                                * (dxh - sum_dxh / m as f64 - xhat[base + i] * sum_dxh_xh / m as f64);
                        }
                    }
                }
                accum(grads, x.0, dx);
                accum(grads, gamma.0, dgamma);
                accum(grads, beta.0, dbeta);
            }),
        )
    }

    /// 2D convolution, zero padding, square kernel. x [N,C,H,W], w [O,C,kh,kw].
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape.clone();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv2d channel mismatch: input {c}, kernel {}", ws[1]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let j = n * oh * ow;
        let ks = c * kh * kw;

        let cols = im2col(&self.value(x).data, n, c, h, wd, kh, kw, stride, pad, oh, ow);
        let mut y_mat = vec![0.0; o * j];
        mm(o, ks, j, &self.value(w).data, row_major(ks), &cols, row_major(j), &mut y_mat, 0.0);

        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let bias_data = bias.map(|b| {
            assert_eq!(self.value(b).shape, vec![o]);
            self.value(b).data.clone()
        });
        for ni in 0..n {
            for oi in 0..o {
                let b = bias_data.as_ref().map_or(0.0, |bd| bd[oi]);
                for yy in 0..oh {
                    for xx in 0..ow {
                        out.data[((ni * o + oi) * oh + yy) * ow + xx] =
                            y_mat[oi * j + (ni * oh + yy) * ow + xx] + b;
                    }
                }
            }
        }

        self.push(
            out,
            Box::new(move |g, vals, grads| {
                // gather dY back into [O, J]
                let mut dy_mat = vec![0.0; o * j];
                for ni in 0..n {
                    for oi in 0..o {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                dy_mat[oi * j + (ni * oh + yy) * ow + xx] =
                                    g.data[((ni * o + oi) * oh + yy) * ow + xx];
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let mut db = Tensor::zeros(&[o]);
                    for oi in 0..o {
                        db.data[oi] = dy_mat[oi * j..(oi + 1) * j].iter().sum();
                    }
                    accum(grads, b.0, db);
                }
                // dW = dY [O,J] x cols^T [J,KS]
                let cols = im2col(&vals[x.0].data, n, c, h, wd, kh, kw, stride, pad, oh, ow);
                let mut dw = Tensor::zeros(&vals[w.0].shape);
                mm(o, j, ks, &dy_mat, row_major(j), &cols, transposed(j), &mut dw.data, 0.0);
                accum(grads, w.0, dw);
                // dcols = W^T [KS,O] x dY [O,J], then scatter back
                let mut dcols = vec![0.0; ks * j];
                mm(ks, o, j, &vals[w.0].data, transposed(ks), &dy_mat, row_major(j), &mut dcols, 0.0);
                let mut dx = Tensor::zeros(&vals[x.0].shape);
                col2im(&dcols, &mut dx.data, n, c, h, wd, kh, kw, stride, pad, oh, ow);
                accum(grads, x.0, dx);
            }),
        )
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 wants even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; out.numel()];
        {
            let xd = &self.value(x).data;
            for nc in 0..n * c {
                let xb = nc * h * w;
                let ob = nc * oh * ow;
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = xb + (2 * yy + dy) * w + 2 * xx + dx;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_i = idx;
                                }
                            }
                        }
                        out.data[ob + yy * ow + xx] = best;
                        argmax[ob + yy * ow + xx] = best_i as u32;
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut dx = Tensor::zeros(&vals[x.0].shape);
                for (gi, &src) in g.data.iter().zip(&argmax) {
                    dx.data[src as usize] += gi;
                }
                accum(grads, x.0, dx);
            }),
        )
    }

    /// Fixed 2x bilinear upsampling (half-pixel centres, edge clamped).
    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let axis = |o: usize, size: usize| -> (usize, usize, f64) {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = s.floor();
            let frac = s - i0;
            let a = (i0.max(0.0) as usize).min(size - 1);
            let b = ((i0 as isize + 1).clamp(0, size as isize - 1)) as usize;
            (a, b, frac)
        };
        let ys: Vec<(usize, usize, f64)> = (0..oh).map(|o| axis(o, h)).collect();
        let xs: Vec<(usize, usize, f64)> = (0..ow).map(|o| axis(o, w)).collect();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let xd = &self.value(x).data;
            for nc in 0..n * c {
                let xb = nc * h * w;
                let ob = nc * oh * ow;
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let v00 = xd[xb + y0 * w + x0];
                        let v01 = xd[xb + y0 * w + x1];
                        let v10 = xd[xb + y1 * w + x0];
                        let v11 = xd[xb + y1 * w + x1];
                        out.data[ob + oy * ow + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                            + fy * ((1.0 - fx) * v10 + fx * v11);
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut dx = Tensor::zeros(&vals[x.0].shape);
                for nc in 0..n * c {
                    let xb = nc * h * w;
                    let ob = nc * oh * ow;
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gg = g.data[ob + oy * ow + ox];
                            dx.data[xb + y0 * w + x0] += gg * (1.0 - fy) * (1.0 - fx);
                            dx.data[xb + y0 * w + x1] += gg * (1.0 - fy) * fx;
                            dx.data[xb + y1 * w + x0] += gg * fy * (1.0 - fx);
                            dx.data[xb + y1 * w + x1] += gg * fy * fx;
                        }
                    }
                }
                accum(grads, x.0, dx);
            }),
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        {
            let ad = &self.value(a).data;
            let bd = &self.value(b).data;
            for ni in 0..n {
                let dst = ni * (ca + cb) * plane;
                out.data[dst..dst + ca * plane].copy_from_slice(&ad[ni * ca * plane..(ni + 1) * ca * plane]);
                out.data[dst + ca * plane..dst + (ca + cb) * plane]
                    .copy_from_slice(&bd[ni * cb * plane..(ni + 1) * cb * plane]);
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut da = Tensor::zeros(&vals[a.0].shape);
                let mut db = Tensor::zeros(&vals[b.0].shape);
                for ni in 0..n {
                    let src = ni * (ca + cb) * plane;
                    da.data[ni * ca * plane..(ni + 1) * ca * plane]
                        .copy_from_slice(&g.data[src..src + ca * plane]);
                    db.data[ni * cb * plane..(ni + 1) * cb * plane]
                        .copy_from_slice(&g.data[src + ca * plane..src + (ca + cb) * plane]);
                }
                accum(grads, a.0, da);
                accum(grads, b.0, db);
            }),
        )
    }

    /// [N,F,H,W] -> [N, (H/P)(W/P), P*P*F]; channel-major within a patch.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let (n, f, h, w) = self.value(x).dims4();
        assert!(h % p == 0 && w % p == 0, "feature map not divisible by patch size");
        let (gy, gx) = (h / p, w / p);
        let l = gy * gx;
        let d = f * p * p;
        let mut out = Tensor::zeros(&[n, l, d]);
        {
            let xd = &self.value(x).data;
            for ni in 0..n {
                for ty in 0..gy {
                    for tx in 0..gx {
                        let t = ty * gx + tx;
                        for fi in 0..f {
                            for py in 0..p {
                                for px in 0..p {
                                    out.data[(ni * l + t) * d + (fi * p + py) * p + px] =
                                        xd[((ni * f + fi) * h + ty * p + py) * w + tx * p + px];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut dx = Tensor::zeros(&vals[x.0].shape);
                for ni in 0..n {
                    for ty in 0..gy {
                        for tx in 0..gx {
                            let t = ty * gx + tx;
                            for fi in 0..f {
                                for py in 0..p {
                                    for px in 0..p {
                                        dx.data[((ni * f + fi) * h + ty * p + py) * w + tx * p + px] =
                                            g.data[(ni * l + t) * d + (fi * p + py) * p + px];
                                    }
                                }
                            }
                        }
                    }
                }
                accum(grads, x.0, dx);
            }),
        )
    }

    /// Exact inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, tokens: Var, f: usize, h: usize, w: usize, p: usize) -> Var {
        let (n, l, d) = self.value(tokens).dims3();
        let (gy, gx) = (h / p, w / p);
        assert_eq!(l, gy * gx, "token count mismatch");
        assert_eq!(d, f * p * p, "token dim mismatch");
        let mut out = Tensor::zeros(&[n, f, h, w]);
        {
            let td = &self.value(tokens).data;
            for ni in 0..n {
                for ty in 0..gy {
                    for tx in 0..gx {
                        let t = ty * gx + tx;
                        for fi in 0..f {
                            for py in 0..p {
                                for px in 0..p {
                                    out.data[((ni * f + fi) * h + ty * p + py) * w + tx * p + px] =
                                        td[(ni * l + t) * d + (fi * p + py) * p + px];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut dt = Tensor::zeros(&vals[tokens.0].shape);
                for ni in 0..n {
                    for ty in 0..gy {
                        for tx in 0..gx {
                            let t = ty * gx + tx;
                            for fi in 0..f {
                                for py in 0..p {
                                    for px in 0..p {
                                        dt.data[(ni * l + t) * d + (fi * p + py) * p + px] =
                                            g.data[((ni * f + fi) * h + ty * p + py) * w + tx * p + px];
                                    }
                                }
                            }
                        }
                    }
                }
                accum(grads, tokens.0, dt);
            }),
        )
    }

    /// [N,L,D] -> [N,h,L,D/h]
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let (n, l, d) = self.value(x).dims3();
        assert_eq!(d % heads, 0, "model dim not divisible by heads");
        let dh = d / heads;
        let mut out = Tensor::zeros(&[n, heads, l, dh]);
        {
            let xd = &self.value(x).data;
            for ni in 0..n {
                for li in 0..l {
                    for hi in 0..heads {
                        let src = (ni * l + li) * d + hi * dh;
                        let dst = ((ni * heads + hi) * l + li) * dh;
                        out.data[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut dx = Tensor::zeros(&vals[x.0].shape);
                for ni in 0..n {
                    for li in 0..l {
                        for hi in 0..heads {
                            let dst = (ni * l + li) * d + hi * dh;
                            let src = ((ni * heads + hi) * l + li) * dh;
                            dx.data[dst..dst + dh].copy_from_slice(&g.data[src..src + dh]);
                        }
                    }
                }
                accum(grads, x.0, dx);
            }),
        )
    }

    /// [N,h,L,dh] -> [N,L,h*dh]
    pub fn merge_heads(&mut self, x: Var) -> Var {
        let s = self.value(x).shape.clone();
        assert_eq!(s.len(), 4);
        let (n, heads, l, dh) = (s[0], s[1], s[2], s[3]);
        let d = heads * dh;
        let mut out = Tensor::zeros(&[n, l, d]);
        {
            let xd = &self.value(x).data;
            for ni in 0..n {
                for li in 0..l {
                    for hi in 0..heads {
                        let src = ((ni * heads + hi) * l + li) * dh;
                        let dst = (ni * l + li) * d + hi * dh;
                        out.data[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, vals, grads| {
                let mut dx = Tensor::zeros(&vals[x.0].shape);
                for ni in 0..n {
                    for li in 0..l {
                        for hi in 0..heads {
                            let dst = ((ni * heads + hi) * l + li) * dh;
                            let src = (ni * l + li) * d + hi * dh;
                            dx.data[dst..dst + dh].copy_from_slice(&g.data[src..src + dh]);
                        }
                    }
                }
                accum(grads, x.0, dx);
            }),
        )
    }

    /// Mean absolute cosine similarity over all filter pairs of two
    /// [K, M] weight matrices. Zero-norm rows contribute cos = 0.
    pub fn pairwise_abs_cos(&mut self, w1: Var, w2: Var) -> Var {
        let (t1, t2) = (self.value(w1), self.value(w2));
        assert_eq!(t1.shape.len(), 2);
        assert_eq!(t2.shape.len(), 2);
        assert_eq!(t1.shape[1], t2.shape[1], "filter length mismatch");
        let (k1, m) = (t1.shape[0], t1.shape[1]);
        let k2 = t2.shape[0];
        const EPS: f64 = 1e-12;

        let norms1: Vec<f64> =
            (0..k1).map(|i| t1.data[i * m..(i + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let norms2: Vec<f64> =
            (0..k2).map(|i| t2.data[i * m..(i + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if norms1.iter().chain(&norms2).any(|n| *n < EPS) {
            eprintln!("warning: zero-norm filter in orthogonality penalty, treated as cos = 0");
        }

        let mut total = 0.0;
        for a in 0..k1 {
            for b in 0..k2 {
                if norms1[a] < EPS || norms2[b] < EPS {
                    continue;
                }
                let dot: f64 =
                    t1.data[a * m..(a + 1) * m].iter().zip(&t2.data[b * m..(b + 1) * m]).map(|(x, y)| x * y).sum();
                total += (dot / (norms1[a] * norms2[b])).abs();
            }
        }
        let value = total / (k1 * k2) as f64;

        self.push(
            Tensor::scalar(value),
            Box::new(move |g, vals, grads| {
                let go = g.data[0] / (k1 * k2) as f64;
                let (t1, t2) = (&vals[w1.0], &vals[w2.0]);
                let mut d1 = Tensor::zeros(&t1.shape);
                let mut d2 = Tensor::zeros(&t2.shape);
                for a in 0..k1 {
                    let na = norms1[a];
                    if na < EPS {
                        continue;
                    }
                    let u = &t1.data[a * m..(a + 1) * m];
                    for b in 0..k2 {
                        let nb = norms2[b];
                        if nb < EPS {
                            continue;
                        }
                        let v = &t2.data[b * m..(b + 1) * m];
                        let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                        let cos = dot / (na * nb);
                        let sign = if cos > 0.0 {
                            1.0
                        } else if cos < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let c1 = go * sign / (na * nb);
                        let c2a = go * sign * cos / (na * na);
                        let c2b = go * sign * cos / (nb * nb);
                        for i in 0..m {
                            d1.data[a * m + i] += c1 * v[i] - c2a * u[i];
                            d2.data[b * m + i] += c1 * u[i] - c2b * v[i];
                        }
                    }
                }
                accum(grads, w1.0, d1);
                accum(grads, w2.0, d2);
            }),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let j = n * oh * ow;
    let mut cols = vec![0.0; c * kh * kw * j];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let base = row * j;
                for ni in 0..n {
                    let xb = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iyw = xb + iy as usize * w;
                        let jb = base + (ni * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[jb + ox] = x[iyw + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    x: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let j = n * oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let base = row * j;
                for ni in 0..n {
                    let xb = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iyw = xb + iy as usize * w;
                        let jb = base + (ni * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[iyw + ix as usize] += cols[jb + ox];
                        }
                    }
                }
            }
        }
    }
}

fn reduce_to(g: &Tensor, b_shape: &[usize], bc: &Broadcast) -> Tensor {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::from_vec(b_shape, vec![g.data.iter().sum()]),
        Broadcast::Suffix { reps, len } => {
            let mut out = Tensor::zeros(b_shape);
            for r in 0..*reps {
                for i in 0..*len {
                    out.data[i] += g.data[r * len + i];
                }
            }
            out
        }
    }
}
