use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::ApproxError;

/// `tanh(softplus(x))` from a single exponential.
#[inline]
fn tanh_softplus(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    n / (n + 2.0)
}

/// Mish activation, `x * tanh(softplus(x))`.
#[inline]
pub fn mish(x: f64) -> f64 {
    x * tanh_softplus(x)
}

/// Derivative of [`mish`].
#[inline]
pub fn mish_grad(x: f64) -> f64 {
    let t = tanh_softplus(x);
    t + x * (1.0 - t * t) * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One affine layer. `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform fan-in initialisation in `±sqrt(1/fan_in)`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || {
            rng.random_range(-bound..bound)
        });
        let bias = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Dense feed-forward network: Mish on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    version: u64,
}

/// Activations recorded by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    version: u64,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        dense_tensors(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        dense_tensors_mut(&mut self.layers)
    }

    /// Accumulates `other` into `self`.
    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

fn dense_tensors(layers: &[Dense]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

fn dense_tensors_mut(layers: &mut [Dense]) -> Vec<&mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
        .collect()
}

impl Mlp {
    /// Builds a network with the given layer widths, e.g. `[in, 64, 64, out]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self, ApproxError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ApproxError::InvalidWidths(widths.to_vec()));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, ApproxError> {
        if layers.is_empty() {
            return Err(ApproxError::InvalidWidths(vec![]));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(ApproxError::DimensionMismatch {
                    expected: pair[1].input_dim(),
                    got: pair[0].output_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(ApproxError::DimensionMismatch {
                    expected: l.output_dim(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].input_dim()];
        w.extend(self.layers.iter().map(Dense::output_dim));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    /// Zeroes the output layer, so the network initially emits zeros.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        self.version += 1;
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        dense_tensors(&self.layers)
    }

    /// Mutable parameter slices. Any outstanding cache becomes stale.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        dense_tensors_mut(&mut self.layers)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Batched forward pass over the rows of `input`.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache), ApproxError> {
        if input.ncols() != self.input_dim() {
            return Err(ApproxError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pres = Vec::with_capacity(n);
        let mut h = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(h);
            if i + 1 < n {
                h = z.mapv(mish);
                pres.push(z);
            } else {
                h = z.clone();
                pres.push(z);
            }
        }
        Ok((
            h,
            MlpCache {
                inputs,
                pre_activations: pres,
                version: self.version,
            },
        ))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, ApproxError> {
        if input.ncols() != self.input_dim() {
            return Err(ApproxError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        let n = self.layers.len();
        let mut h = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if i + 1 < n {
                z.mapv_inplace(mish);
            }
            h = z;
        }
        Ok(h)
    }

    /// Single-vector forward pass.
    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>, ApproxError> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| ApproxError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            })?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Reverse-mode pass. `grad_output` is dLoss/dOutput for every row of the
    /// batch; returns parameter gradients summed over rows and the input gradient.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_output: ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>), ApproxError> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(ApproxError::StaleCache);
        }
        let batch = cache.inputs[0].nrows();
        if grad_output.nrows() != batch || grad_output.ncols() != self.output_dim() {
            return Err(ApproxError::DimensionMismatch {
                expected: self.output_dim(),
                got: grad_output.ncols(),
            });
        }
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut g = grad_output.to_owned();
        for i in (0..n).rev() {
            if i + 1 < n {
                ndarray::Zip::from(&mut g)
                    .and(&cache.pre_activations[i])
                    .for_each(|gv, &z| *gv *= mish_grad(z));
            }
            let weight = g.t().dot(&cache.inputs[i]);
            let bias = g.sum_axis(Axis(0));
            g = g.dot(&self.layers[i].weight);
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mish_values() {
        assert_eq!(mish(0.0), 0.0);
        // 5 * tanh(ln(1 + e^5))
        let expected = 5.0 * (1.0 + 5f64.exp()).ln().tanh();
        assert!((mish(5.0) - expected).abs() < 1e-15);
        assert!((mish(5.0) - 4.99955).abs() < 1e-4);
    }

    #[test]
    fn mish_grad_matches_finite_difference() {
        for &x in &[-6.0, -1.3, -0.2, 0.0, 0.4, 2.0, 7.5] {
            let h = 1e-6;
            let fd = (mish(x + h) - mish(x - h)) / (2.0 * h);
            assert!((fd - mish_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn zero_weight_network_outputs_final_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
        for t in net.tensors_mut() {
            t.fill(0.0);
        }
        net.layers[1].bias = array![0.7, -1.5];
        let out = net.forward_one(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.7, -1.5]);
    }

    #[test]
    fn identity_linear_layer() {
        let layer = Dense {
            weight: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(net.forward_one(&[0.5, -2.0, 9.0]).unwrap(), vec![0.5, -2.0, 9.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 4, 1], &mut rng).unwrap();
        assert!(matches!(
            net.forward_one(&[1.0, 2.0]),
            Err(ApproxError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&[2, 4, 1], &mut rng).unwrap();
        let x = array![[0.1, 0.2]];
        let (_, cache) = net.forward(x.view()).unwrap();
        net.tensors_mut()[0][0] += 1.0;
        let g = array![[1.0]];
        assert!(matches!(net.backward(&cache, g.view()), Err(ApproxError::StaleCache)));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 6, 6, 3], &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (_, cache) = net.forward(x.view()).unwrap();
        let (grads, gin) = net.backward(&cache, Array2::zeros((5, 3)).view()).unwrap();
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_least_squares_gradient_matches_closed_form() {
        // y = W x + b, loss = 0.5 * sum (y - t)^2 ; dW = (y - t) x^T, db = y - t
        let w = array![[0.5, -1.0], [2.0, 0.25]];
        let b = array![0.1, -0.2];
        let net = Mlp::from_layers(vec![Dense {
            weight: w.clone(),
            bias: b.clone(),
        }])
        .unwrap();
        let x = array![[1.5, -0.5]];
        let t = array![[0.3, 0.9]];
        let (y, cache) = net.forward(x.view()).unwrap();
        let resid = &y - &t;
        let (grads, _) = net.backward(&cache, resid.view()).unwrap();
        let expected_w = resid.t().dot(&x);
        for (a, e) in grads.layers[0].weight.iter().zip(expected_w.iter()) {
            assert!((a - e).abs() < 1e-14);
        }
        for (a, e) in grads.layers[0].bias.iter().zip(resid.row(0).iter()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_backward_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[3, 8, 2], &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let g = Array2::from_shape_fn((4, 2), |(i, j)| ((i + 2 * j) as f64).cos());
        let (y1, c1) = net.forward(x.view()).unwrap();
        let (y2, c2) = net.forward(x.view()).unwrap();
        assert_eq!(y1, y2);
        let (g1, i1) = net.backward(&c1, g.view()).unwrap();
        let (g2, i2) = net.backward(&c2, g.view()).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(i1, i2);
    }
}
