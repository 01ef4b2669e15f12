/// Batched channel-major volumetric activations, laid out N×C×D×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid5 {
    pub n: usize,
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Grid5 {
    pub fn zeros(n: usize, c: usize, dims: [usize; 3]) -> Self {
        Self {
            n,
            c,
            dims,
            data: vec![0.0; n * c * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.spatial()
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[b * l..(b + 1) * l]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[b * l..(b + 1) * l]
    }

    pub fn channel(&self, b: usize, ch: usize) -> &[f64] {
        let s = self.spatial();
        let off = (b * self.c + ch) * s;
        &self.data[off..off + s]
    }

    pub fn channel_mut(&mut self, b: usize, ch: usize) -> &mut [f64] {
        let s = self.spatial();
        let off = (b * self.c + ch) * s;
        &mut self.data[off..off + s]
    }
}
