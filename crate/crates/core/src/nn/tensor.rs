/// Dense NCHW float tensor. Vectors (dense-layer activations) are stored as
/// `[n, c, 1, 1]` so every activation in a graph shares one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data does not match dims {dims:?}"
        );
        Tensor { dims, data }
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stacks per-sample CHW buffers into one batch tensor.
    pub fn stack(samples: &[&[f32]], chw: [usize; 3]) -> Tensor {
        let len = chw[0] * chw[1] * chw[2];
        let mut data = Vec::with_capacity(len * samples.len());
        for s in samples {
            assert_eq!(s.len(), len);
            data.extend_from_slice(s);
        }
        Tensor::from_vec([samples.len(), chw[0], chw[1], chw[2]], data)
    }
}
