use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::param::Param;
use crate::bayes::FastWeights;

/// Fully connected layer, y = x Wᵀ + b, with optional rank-1 fast weights.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub fast: Option<FastWeights>,
    pub input: usize,
    pub output: usize,
}

pub struct DenseCache {
    xs: Array2<f64>,
    x: Option<Array2<f64>>,
    pre: Option<Array2<f64>>,
    members: Vec<usize>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::xavier(&[output, input], input, output, rng),
            bias: Param::zeros(&[output]),
            fast: None,
            input,
            output,
        }
    }

    pub fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.output, self.input), &self.weight.value).expect("weight shape")
    }

    pub fn forward(&self, x: &Array2<f64>, members: &[usize]) -> (Array2<f64>, DenseCache) {
        assert_eq!(x.ncols(), self.input, "dense input width");
        let w = self.weight_view();
        match &self.fast {
            None => {
                let mut y = x.dot(&w.t());
                for mut row in y.rows_mut() {
                    row.iter_mut().zip(&self.bias.value).for_each(|(v, b)| *v += b);
                }
                let cache = DenseCache {
                    xs: x.clone(),
                    x: None,
                    pre: None,
                    members: members.to_vec(),
                };
                (y, cache)
            }
            Some(f) => {
                let mut xs = x.clone();
                for (i, mut row) in xs.rows_mut().into_iter().enumerate() {
                    let s = f.s_row(members[i]);
                    row.iter_mut().zip(s).for_each(|(v, s)| *v *= s);
                }
                let pre = xs.dot(&w.t());
                let mut y = pre.clone();
                for (i, mut row) in y.rows_mut().into_iter().enumerate() {
                    let r = f.r_row(members[i]);
                    row.iter_mut()
                        .zip(r)
                        .zip(&self.bias.value)
                        .for_each(|((v, r), b)| *v = *v * r + b);
                }
                let cache = DenseCache {
                    xs,
                    x: Some(x.clone()),
                    pre: Some(pre),
                    members: members.to_vec(),
                };
                (y, cache)
            }
        }
    }

    pub fn backward(&mut self, cache: &DenseCache, d_out: &Array2<f64>) -> Array2<f64> {
        for (g, s) in self.bias.grad.iter_mut().zip(d_out.sum_axis(Axis(0))) {
            *g += s;
        }
        let mut d_pre = d_out.clone();
        if let Some(f) = &mut self.fast {
            let pre = cache.pre.as_ref().expect("cached pre-activation");
            for (i, mut row) in d_pre.rows_mut().into_iter().enumerate() {
                let m = cache.members[i];
                for (o, v) in row.iter_mut().enumerate() {
                    f.r.grad[m * f.out_dim + o] += *v * pre[[i, o]];
                    *v *= f.r.value[m * f.out_dim + o];
                }
            }
        }
        let dw = d_pre.t().dot(&cache.xs);
        for (g, v) in self.weight.grad.iter_mut().zip(dw.iter()) {
            *g += v;
        }
        let mut d_x = d_pre.dot(&self.weight_view());
        if let Some(f) = &mut self.fast {
            let x = cache.x.as_ref().expect("cached input");
            for (i, mut row) in d_x.rows_mut().into_iter().enumerate() {
                let m = cache.members[i];
                for (k, v) in row.iter_mut().enumerate() {
                    f.s.grad[m * f.in_dim + k] += *v * x[[i, k]];
                    *v *= f.s.value[m * f.in_dim + k];
                }
            }
        }
        d_x
    }
}
