/// A smooth scalar function of a flat parameter vector.
pub trait Objective {
    fn dimension(&self) -> usize;

    fn evaluate(&self, x: &[f64]) -> f64;

    /// Writes the gradient into `grad` and returns the value. The default
    /// uses central differences and is meant for tests and prototypes.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        central_differences(self, x, 1e-6, grad);
        self.evaluate(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.value_and_gradient(x, &mut g);
        g
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        (**self).evaluate(x)
    }
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (**self).value_and_gradient(x, grad)
    }
}

pub fn central_differences<O: Objective + ?Sized>(obj: &O, x: &[f64], step: f64, grad: &mut [f64]) {
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = obj.evaluate(&xp);
        xp[i] = x[i] - step;
        let fm = obj.evaluate(&xp);
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
}

/// Closure-backed objective with an analytic gradient.
pub struct FnObjective<F, G> {
    pub dim: usize,
    pub value: F,
    pub value_grad: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64], &mut [f64]) -> f64,
{
    fn dimension(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.value_grad)(x, grad)
    }
}

/// Maximum over coordinates of `|fd − analytic| / max(1, |analytic|)`,
/// with central differences of the given step.
pub fn check_gradient<O: Objective + ?Sized>(obj: &O, x: &[f64], step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut analytic = vec![0.0; x.len()];
    obj.value_and_gradient(x, &mut analytic);
    let mut fd = vec![0.0; x.len()];
    central_differences(obj, x, step, &mut fd);
    analytic
        .iter()
        .zip(&fd)
        .map(|(a, f)| (f - a).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// View of an objective in which only the coordinates listed in `free`
/// vary; the rest stay at their values in `base`.
pub struct Restricted<'a, O: ?Sized> {
    inner: &'a O,
    base: Vec<f64>,
    free: Vec<usize>,
}

impl<'a, O: Objective + ?Sized> Restricted<'a, O> {
    pub fn new(inner: &'a O, base: Vec<f64>, free: Vec<usize>) -> Self {
        assert_eq!(base.len(), inner.dimension(), "base point dimension");
        assert!(free.iter().all(|&i| i < base.len()), "free index out of range");
        Restricted { inner, base, free }
    }

    /// The free coordinates of `base`.
    pub fn start(&self) -> Vec<f64> {
        self.free.iter().map(|&i| self.base[i]).collect()
    }

    /// Full-dimensional point for reduced coordinates `x`.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut full = self.base.clone();
        for (&i, v) in self.free.iter().zip(x) {
            full[i] = *v;
        }
        full
    }
}

impl<O: Objective + ?Sized> Objective for Restricted<'_, O> {
    fn dimension(&self) -> usize {
        self.free.len()
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        self.inner.evaluate(&self.embed(x))
    }
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let full = self.embed(x);
        let mut g = vec![0.0; full.len()];
        let f = self.inner.value_and_gradient(&full, &mut g);
        for (out, &i) in grad.iter_mut().zip(&self.free) {
            *out = g[i];
        }
        f
    }
}
