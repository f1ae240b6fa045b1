//! Fully connected layer.

use super::Float;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Linear<F: Float> {
    pub w: Array2<F>, // (out, in)
    pub b: Array1<F>,
    pub gw: Array2<F>,
    pub gb: Array1<F>,
}

impl<F: Float> Linear<F> {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        let std = F::from_f64((2.0 / n_in as f64).sqrt());
        let w = Array2::from_shape_simple_fn((n_out, n_in), || {
            let z: F = StandardNormal.sample(rng);
            z * std
        });
        Self {
            gw: Array2::zeros(w.dim()),
            w,
            b: Array1::zeros(n_out),
            gb: Array1::zeros(n_out),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn backward(&mut self, x: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
        self.gw += &gy.t().dot(x);
        self.gb += &gy.sum_axis(Axis(0));
        gy.dot(&self.w)
    }

    pub fn backward_input(&self, gy: &Array2<F>) -> Array2<F> {
        gy.dot(&self.w)
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &[usize], &mut [F], &mut [F]),
    ) {
        let wshape = self.w.shape().to_vec();
        f(
            &format!("{prefix}.w"),
            &wshape,
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        let bshape = self.b.shape().to_vec();
        f(
            &format!("{prefix}.b"),
            &bshape,
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(
            &format!("{prefix}.w"),
            self.w.shape(),
            self.w.as_slice().unwrap(),
        );
        f(
            &format!("{prefix}.b"),
            self.b.shape(),
            self.b.as_slice().unwrap(),
        );
    }
}
