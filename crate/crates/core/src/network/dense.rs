/// Fully connected layer `y = W x + b`, `W` stored row-major as
/// `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Dense) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += alpha * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight.iter_mut().for_each(|v| *v *= factor);
        self.bias.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `W^T delta`.
    pub fn backward_vec(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, &d) in self.weight.chunks_exact(self.inputs).zip(delta) {
            if d != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += d * w;
                }
            }
        }
        out
    }

    /// `W += delta x^T`, `b += delta`.
    pub fn outer_accumulate(&mut self, delta: &[f64], x: &[f64]) {
        for (row, &d) in self.weight.chunks_exact_mut(self.inputs).zip(delta) {
            if d != 0.0 {
                for (w, v) in row.iter_mut().zip(x) {
                    *w += d * v;
                }
            }
        }
        for (b, d) in self.bias.iter_mut().zip(delta) {
            *b += d;
        }
    }

    /// Row-wise forward over `n` inputs stored row-major (`n x inputs`).
    pub fn forward_batch(&self, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.inputs);
        let mut out = vec![0.0; n * self.outputs];
        for row in out.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias);
        }
        // SAFETY: slices have exactly the extents described by the strides.
        unsafe {
            matrixmultiply::dgemm(
                n,
                self.inputs,
                self.outputs,
                1.0,
                x.as_ptr(),
                self.inputs as isize,
                1,
                self.weight.as_ptr(),
                1,
                self.inputs as isize,
                1.0,
                out.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
        out
    }

    /// `W += delta^T x`, `b += column sums of delta`, for `n` rows.
    pub fn batch_outer_accumulate(&mut self, delta: &[f64], x: &[f64], n: usize) {
        debug_assert_eq!(delta.len(), n * self.outputs);
        debug_assert_eq!(x.len(), n * self.inputs);
        // SAFETY: as above.
        unsafe {
            matrixmultiply::dgemm(
                self.outputs,
                n,
                self.inputs,
                1.0,
                delta.as_ptr(),
                1,
                self.outputs as isize,
                x.as_ptr(),
                self.inputs as isize,
                1,
                1.0,
                self.weight.as_mut_ptr(),
                self.inputs as isize,
                1,
            );
        }
        for row in delta.chunks_exact(self.outputs) {
            for (b, d) in self.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
    }

    /// `delta W` for `n` rows (`n x inputs`).
    pub fn backward_batch(&self, delta: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.inputs];
        // SAFETY: as above.
        unsafe {
            matrixmultiply::dgemm(
                n,
                self.outputs,
                self.inputs,
                1.0,
                delta.as_ptr(),
                self.outputs as isize,
                1,
                self.weight.as_ptr(),
                self.inputs as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                self.inputs as isize,
                1,
            );
        }
        out
    }
}
