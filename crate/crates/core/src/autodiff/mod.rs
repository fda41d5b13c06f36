//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records one define-by-run computation graph. Every op pushes
//! a value node plus a boxed backward closure; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node, leaves
//! included. Everything is deterministic: no threading, fixed iteration
//! order, and GEMM-backed convolutions with a fixed blocking scheme.

mod ops;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Dimension product helper for [N, C, H, W] style shapes.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected 3-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

/// Node handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn FnOnce(&Tensor, &[Tensor], &mut [Option<Tensor>])>;

/// One recorded computation.
pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), backs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Register an input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.backs.push(None);
        Var(self.values.len() - 1)
    }

    /// Copy a recorded value back in as a fresh leaf, cutting the gradient
    /// path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.values[v.0].clone();
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub(crate) fn push(&mut self, value: Tensor, back: BackFn) -> Var {
        self.values.push(value);
        self.backs.push(Some(back));
        Var(self.values.len() - 1)
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(self.values[root.0].numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = self.backs[i].take() {
                let g = grads[i].take().expect("grad present");
                back(&g, &self.values, &mut grads);
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, zeros if the root never touched it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub(crate) fn accum(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Central finite differences, the independent oracle used by every
/// gradient test in this crate. Evaluates `f` at `x ± h` component-wise.
pub mod gradcheck {
    /// d f / d x_i via central differences with step `h`.
    pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    /// Largest relative error between analytic and finite-difference
    /// gradients, with an absolute floor for near-zero pairs.
    pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
        assert_eq!(analytic.len(), fd.len());
        analytic
            .iter()
            .zip(fd)
            .map(|(a, f)| {
                let denom = a.abs().max(f.abs()).max(1e-6);
                (a - f).abs() / denom
            })
            .fold(0.0, f64::max)
    }
}
