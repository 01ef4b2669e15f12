use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::grid::Grid5;
use super::param::Param;
use crate::bayes::FastWeights;

/// 3D convolution with cubic kernels, computed by im2col + GEMM. With fast
/// weights attached, row b is convolved with `W ⊙ (r sᵀ)` of its member,
/// applied as input-channel scaling by s and output-channel scaling by r.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Param,
    pub fast: Option<FastWeights>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    input: Option<Grid5>,
    in_dims: [usize; 3],
    members: Vec<usize>,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let k3 = kernel * kernel * kernel;
        Self {
            weight: Param::xavier(&[cout, cin * k3], cin * k3, cout * k3, rng),
            bias: Param::zeros(&[cout]),
            fast: None,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        let f = |x: usize| (x + 2 * self.pad - self.kernel) / self.stride + 1;
        [f(d[0]), f(d[1]), f(d[2])]
    }

    fn k3(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64], d: [usize; 3], od: [usize; 3]) -> Array2<f64> {
        let k = self.kernel;
        let p = od[0] * od[1] * od[2];
        let mut cols = Array2::<f64>::zeros((self.cin * self.k3(), p));
        let spatial = d[0] * d[1] * d[2];
        let cols_s = cols.as_slice_mut().expect("contiguous");
        for ci in 0..self.cin {
            let xc = &x[ci * spatial..(ci + 1) * spatial];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ci * self.k3() + (kd * k + kh) * k + kw;
                        let dst = &mut cols_s[row * p..(row + 1) * p];
                        for oz in 0..od[0] {
                            let iz = (oz * self.stride + kd) as isize - self.pad as isize;
                            if iz < 0 || iz >= d[0] as isize {
                                continue;
                            }
                            for oy in 0..od[1] {
                                let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                                if iy < 0 || iy >= d[1] as isize {
                                    continue;
                                }
                                let src_row = (iz as usize * d[1] + iy as usize) * d[2];
                                let dst_row = (oz * od[1] + oy) * od[2];
                                for ox in 0..od[2] {
                                    let ix = (ox * self.stride + kw) as isize - self.pad as isize;
                                    if ix < 0 || ix >= d[2] as isize {
                                        continue;
                                    }
                                    dst[dst_row + ox] = xc[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, d: [usize; 3], od: [usize; 3], out: &mut [f64]) {
        let k = self.kernel;
        let p = od[0] * od[1] * od[2];
        let spatial = d[0] * d[1] * d[2];
        let cols_s = cols.as_slice().expect("contiguous");
        for ci in 0..self.cin {
            let xc = &mut out[ci * spatial..(ci + 1) * spatial];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ci * self.k3() + (kd * k + kh) * k + kw;
                        let src = &cols_s[row * p..(row + 1) * p];
                        for oz in 0..od[0] {
                            let iz = (oz * self.stride + kd) as isize - self.pad as isize;
                            if iz < 0 || iz >= d[0] as isize {
                                continue;
                            }
                            for oy in 0..od[1] {
                                let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                                if iy < 0 || iy >= d[1] as isize {
                                    continue;
                                }
                                let dst_row = (iz as usize * d[1] + iy as usize) * d[2];
                                let src_row = (oz * od[1] + oy) * od[2];
                                for ox in 0..od[2] {
                                    let ix = (ox * self.stride + kw) as isize - self.pad as isize;
                                    if ix < 0 || ix >= d[2] as isize {
                                        continue;
                                    }
                                    xc[dst_row + ix as usize] += src[src_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.cout, self.cin * self.k3()), &self.weight.value).expect("weight shape")
    }

    /// `members` holds one ensemble member per row; ignored without fast weights.
    pub fn forward(&self, x: &Grid5, members: &[usize]) -> (Grid5, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let od = self.out_dims(x.dims);
        let mut out = Grid5::zeros(x.n, self.cout, od);
        let mut cols_all = Vec::with_capacity(x.n);
        let mut pre_all = Vec::new();
        let spatial = x.spatial();
        let w = self.weight_view();
        for b in 0..x.n {
            let cols = match &self.fast {
                Some(f) => {
                    let s = f.s_row(members[b]);
                    let mut xs = x.sample(b).to_vec();
                    for ci in 0..self.cin {
                        xs[ci * spatial..(ci + 1) * spatial].iter_mut().for_each(|v| *v *= s[ci]);
                    }
                    self.im2col(&xs, x.dims, od)
                }
                None => self.im2col(x.sample(b), x.dims, od),
            };
            let pre = w.dot(&cols);
            let o = out.sample_mut(b);
            let p = pre.ncols();
            let pre_s = pre.as_slice().expect("contiguous");
            for co in 0..self.cout {
                let scale = self.fast.as_ref().map_or(1.0, |f| f.r_row(members[b])[co]);
                let bias = self.bias.value[co];
                for (dst, &v) in o[co * p..(co + 1) * p].iter_mut().zip(&pre_s[co * p..(co + 1) * p]) {
                    *dst = v * scale + bias;
                }
            }
            cols_all.push(cols);
            if self.fast.is_some() {
                pre_all.push(pre);
            }
        }
        let cache = ConvCache {
            cols: cols_all,
            pre: pre_all,
            input: self.fast.as_ref().map(|_| x.clone()),
            in_dims: x.dims,
            members: members.to_vec(),
        };
        (out, cache)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, d_out: &Grid5) -> Grid5 {
        let od = d_out.dims;
        let p = od[0] * od[1] * od[2];
        let d = cache.in_dims;
        let spatial = d[0] * d[1] * d[2];
        let mut d_in = Grid5::zeros(d_out.n, self.cin, d);
        let ck = self.cin * self.k3();
        let mut dw = Array2::<f64>::zeros((self.cout, ck));
        for b in 0..d_out.n {
            let g = d_out.sample(b);
            let mut d_pre = Array2::from_shape_vec((self.cout, p), g.to_vec()).expect("grad shape");
            for co in 0..self.cout {
                self.bias.grad[co] += g[co * p..(co + 1) * p].iter().sum::<f64>();
            }
            if let Some(f) = &mut self.fast {
                let m = cache.members[b];
                let pre = cache.pre[b].as_slice().expect("contiguous");
                for co in 0..self.cout {
                    let gr: f64 = g[co * p..(co + 1) * p]
                        .iter()
                        .zip(&pre[co * p..(co + 1) * p])
                        .map(|(a, b)| a * b)
                        .sum();
                    f.r.grad[m * f.out_dim + co] += gr;
                    let r = f.r.value[m * f.out_dim + co];
                    d_pre.row_mut(co).iter_mut().for_each(|v| *v *= r);
                }
            }
            ndarray::linalg::general_mat_mul(1.0, &d_pre, &cache.cols[b].t(), 1.0, &mut dw);
            let w = ArrayView2::from_shape((self.cout, ck), &self.weight.value).expect("weight shape");
            let d_cols = w.t().dot(&d_pre);
            let mut d_xs = vec![0.0; self.cin * spatial];
            self.col2im(&d_cols.as_standard_layout().to_owned(), d, od, &mut d_xs);
            let dst = d_in.sample_mut(b);
            match &mut self.fast {
                Some(f) => {
                    let m = cache.members[b];
                    let x = cache.input.as_ref().expect("cached input").sample(b);
                    for ci in 0..self.cin {
                        let range = ci * spatial..(ci + 1) * spatial;
                        let gs: f64 = d_xs[range.clone()].iter().zip(&x[range.clone()]).map(|(a, b)| a * b).sum();
                        f.s.grad[m * f.in_dim + ci] += gs;
                        let s = f.s.value[m * f.in_dim + ci];
                        for (o, v) in dst[range.clone()].iter_mut().zip(&d_xs[range]) {
                            *o = v * s;
                        }
                    }
                }
                None => dst.copy_from_slice(&d_xs),
            }
        }
        for (g, v) in self.weight.grad.iter_mut().zip(dw.iter()) {
            *g += v;
        }
        d_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // direct nested-loop convolution
    fn naive(conv: &Conv3d, x: &Grid5) -> Grid5 {
        let od = conv.out_dims(x.dims);
        let mut out = Grid5::zeros(x.n, conv.cout, od);
        let k = conv.kernel as isize;
        for b in 0..x.n {
            for co in 0..conv.cout {
                for oz in 0..od[0] {
                    for oy in 0..od[1] {
                        for ox in 0..od[2] {
                            let mut acc = conv.bias.value[co];
                            for ci in 0..conv.cin {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let iz = (oz * conv.stride) as isize + kd - conv.pad as isize;
                                            let iy = (oy * conv.stride) as isize + kh - conv.pad as isize;
                                            let ix = (ox * conv.stride) as isize + kw - conv.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= x.dims[0] || iy >= x.dims[1] || ix >= x.dims[2] {
                                                continue;
                                            }
                                            let wi = co * conv.cin * 27
                                                + ci * 27
                                                + ((kd * k + kh) * k + kw) as usize;
                                            let xi = (iz * x.dims[1] + iy) * x.dims[2] + ix;
                                            acc += conv.weight.value[wi] * x.channel(b, ci)[xi];
                                        }
                                    }
                                }
                            }
                            let oi = (oz * od[1] + oy) * od[2] + ox;
                            out.channel_mut(b, co)[oi] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv3d::new(2, 3, 3, 2, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3];
        let mut x = Grid5::zeros(2, 2, [5, 6, 7]);
        x.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let (y, _) = conv.forward(&x, &[0, 0]);
        let z = naive(&conv, &x);
        assert_eq!(y.dims, [3, 3, 4]);
        for (a, b) in y.data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv3d::new(2, 2, 3, 1, &mut rng);
        let mut x = Grid5::zeros(1, 2, [4, 4, 4]);
        x.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let (y, cache) = conv.forward(&x, &[0]);
        // loss = sum(y * c) for fixed c
        let mut c = y.clone();
        c.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let d_in = conv.backward(&cache, &c);
        let loss = |conv: &Conv3d, x: &Grid5| -> f64 {
            let (y, _) = conv.forward(x, &[0]);
            y.data.iter().zip(&c.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in [0, 17, 63, 100] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - d_in.data[i]).abs() < 1e-7, "{fd} vs {}", d_in.data[i]);
        }
        for i in [0, 5, 30, 107] {
            let mut cp = conv.clone();
            cp.weight.value[i] += h;
            let mut cm = conv.clone();
            cm.weight.value[i] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-7);
        }
    }
}
