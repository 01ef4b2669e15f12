use ndarray::Array2;

use super::param::Param;

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the forward output was not positive.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Parametric ReLU with one learnable slope shared across units.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: Param,
}

impl Default for PRelu {
    fn default() -> Self {
        Self {
            slope: Param::filled(&[1], 0.25),
        }
    }
}

impl PRelu {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let a = self.slope.value[0];
        x.mapv(|v| if v > 0.0 { v } else { a * v })
    }

    pub fn backward(&mut self, input: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
        let a = self.slope.value[0];
        let mut ga = 0.0;
        let mut d = d_out.clone();
        for (g, &x) in d.iter_mut().zip(input.iter()) {
            if x <= 0.0 {
                ga += *g * x;
                *g *= a;
            }
        }
        self.slope.grad[0] += ga;
        d
    }
}

/// Clamps into [lo, hi]; gradient passes only where the value was inside.
pub fn clamp_forward(x: &mut [f64], lo: f64, hi: f64) -> Vec<bool> {
    x.iter_mut()
        .map(|v| {
            let inside = *v >= lo && *v <= hi;
            *v = v.clamp(lo, hi);
            inside
        })
        .collect()
}

pub fn clamp_backward(inside: &[bool], grad: &mut [f64]) {
    for (g, &ok) in grad.iter_mut().zip(inside) {
        if !ok {
            *g = 0.0;
        }
    }
}
