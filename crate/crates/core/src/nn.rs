//! Feed-forward networks with hand-written backpropagation and Adam.
//!
//! Batches are row-major: one sample per row. Weights are stored as
//! `out x in` matrices so a layer computes `y = act(x W^T + b)`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, IoContext, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"IFM1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            t => Err(Error::ModelFormat(format!("unknown activation tag {t}"))),
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `out x in`.
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
    revision: u64,
}

impl<T: Scalar> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by a batched forward pass.
///
/// `values[0]` is the input batch and `values[l + 1]` the output of layer
/// `l`. Backward consumes the cache, so each one is used at most once.
#[derive(Debug)]
pub struct Cache<T> {
    values: Vec<Array2<T>>,
    revision: u64,
}

impl<T: Scalar> Cache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.values.last().expect("cache holds the input")
    }
}

/// Gradients of a scalar loss with respect to every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
    pub input: Array2<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn scale(&mut self, s: T) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
        self.input *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

fn check_dims(dims: &[usize], activations: &[Activation]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config("a network needs at least two layer dimensions".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config("layer dimensions must be positive".into()));
    }
    if activations.len() != dims.len() - 1 {
        return Err(Error::DimensionMismatch {
            expected: dims.len() - 1,
            got: activations.len(),
        });
    }
    Ok(())
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        check_dims(dims, activations)?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    T::lit(rng.gen_range(-limit..limit))
                });
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Ok(Self::from_layers(layers).expect("dimensions checked"))
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        check_dims(dims, activations)?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| Layer {
                weights: Array2::zeros((d[1], d[0])),
                bias: Array1::zeros(d[1]),
                activation,
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::DimensionMismatch {
                    expected: layer.fan_out(),
                    got: layer.bias.len(),
                });
            }
            if l > 0 && layers[l - 1].fan_out() != layer.fan_in() {
                return Err(Error::DimensionMismatch {
                    expected: layers[l - 1].fan_out(),
                    got: layer.fan_in(),
                });
            }
        }
        Ok(Mlp {
            layers,
            revision: next_revision(),
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable access to the parameters. Outstanding caches become stale.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.revision = next_revision();
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in()];
        dims.extend(self.layers.iter().map(|l| l.fan_out()));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer<T>, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&layer.weights.t());
        y += &layer.bias;
        if layer.activation == Activation::Tanh {
            y.mapv_inplace(|v| v.tanh());
        }
        y
    }

    /// Outputs for a batch without keeping intermediate activations.
    pub fn predict_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(x.ncols())?;
        let mut h = Self::layer_forward(&self.layers[0], &x);
        for layer in &self.layers[1..] {
            h = Self::layer_forward(layer, &h.view());
        }
        Ok(h)
    }

    /// Output for a single input, using matrix-vector products.
    pub fn predict(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x.len())?;
        let mut h = ArrayView1::from(x).to_owned();
        for layer in &self.layers {
            h = layer.weights.dot(&h) + &layer.bias;
            if layer.activation == Activation::Tanh {
                h.mapv_inplace(|v| v.tanh());
            }
        }
        Ok(h.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<T>) -> Result<(Array2<T>, Cache<T>)> {
        self.check_input(x.ncols())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_owned());
        for layer in &self.layers {
            let y = Self::layer_forward(layer, &values.last().expect("input pushed").view());
            values.push(y);
        }
        let out = values.last().expect("non-empty").clone();
        Ok((
            out,
            Cache {
                values,
                revision: self.revision,
            },
        ))
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, Cache<T>)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let (out, cache) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    /// Reverse-mode gradients of `sum(grad_out * output)` summed over the batch.
    pub fn backward(&self, cache: Cache<T>, grad_out: ArrayView2<T>) -> Result<Gradients<T>> {
        if cache.revision != self.revision || cache.values.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache(
                "cache was produced by different parameters".into(),
            ));
        }
        let out = cache.output();
        if grad_out.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: grad_out.len(),
            });
        }
        let depth = self.layers.len();
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        let mut delta = grad_out.to_owned();
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            if layer.activation == Activation::Tanh {
                delta.zip_mut_with(&cache.values[l + 1], |d, &y| *d *= T::one() - y * y);
            }
            weights.push(delta.t().dot(&cache.values[l]));
            biases.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&layer.weights);
        }
        weights.reverse();
        biases.reverse();
        Ok(Gradients {
            weights,
            biases,
            input: delta,
        })
    }

    /// One Adam update.
    pub fn opt_step(&mut self, grads: &Gradients<T>, state: &mut OptimState<T>) -> Result<()> {
        state.check_shapes(self)?;
        if grads.weights.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: grads.weights.len(),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if grads.weights[l].dim() != layer.weights.dim() || grads.biases[l].len() != layer.bias.len() {
                return Err(Error::DimensionMismatch {
                    expected: layer.weights.len() + layer.bias.len(),
                    got: grads.weights[l].len() + grads.biases[l].len(),
                });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (state.beta1, state.beta2);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = state.lr;
        let eps = state.eps;
        let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (l, layer) in self.layers.iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.weights)
                .and(&grads.weights[l])
                .and(&mut state.m_weights[l])
                .and(&mut state.v_weights[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&grads.biases[l])
                .and(&mut state.m_biases[l])
                .and(&mut state.v_biases[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        self.revision = next_revision();
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for d in self.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for layer in &self.layers {
            w.write_all(&[layer.activation.tag()])?;
        }
        for layer in &self.layers {
            for &x in layer.weights.iter().chain(layer.bias.iter()) {
                w.write_all(&x.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
            r.read_exact(buf)
                .map_err(|e| Error::ModelFormat(format!("truncated model: {e}")))
        }
        fn u32_le<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            fill(r, &mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        fill(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = u32_le(r)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let count = u32_le(r)? as usize;
        if count == 0 || count > 1024 {
            return Err(Error::ModelFormat(format!("implausible layer count {count}")));
        }
        let dims = (0..=count).map(|_| u32_le(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let mut tags = vec![0u8; count];
        fill(r, &mut tags)?;
        let activations = tags.into_iter().map(Activation::from_tag).collect::<Result<Vec<_>>>()?;
        check_dims(&dims, &activations).map_err(|e| Error::ModelFormat(e.to_string()))?;
        let mut read_vec = |len: usize| -> Result<Vec<T>> {
            let mut bytes = vec![0u8; len * 8];
            fill(r, &mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect())
        };
        let mut layers = Vec::with_capacity(count);
        for (d, activation) in dims.windows(2).zip(activations) {
            let weights = Array2::from_shape_vec((d[1], d[0]), read_vec(d[0] * d[1])?)
                .expect("length matches shape");
            let bias = Array1::from(read_vec(d[1])?);
            layers.push(Layer {
                weights,
                bias,
                activation,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::ModelFormat(e.to_string()))? != 0 {
            return Err(Error::ModelFormat("trailing bytes".into()));
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.param_count() * 8);
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Adam moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m_weights: Vec<Array2<T>>,
    pub v_weights: Vec<Array2<T>>,
    pub m_biases: Vec<Array1<T>>,
    pub v_biases: Vec<Array1<T>>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> OptimState<T> {
    /// Zero moments with lr 1e-3, decays 0.9 / 0.999 and guard 1e-8.
    pub fn new(m: &Mlp<T>) -> Self {
        Self::with_lr(m, T::lit(1e-3))
    }

    pub fn with_lr(m: &Mlp<T>, lr: T) -> Self {
        let zw = || m.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect::<Vec<_>>();
        let zb = || m.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect::<Vec<_>>();
        OptimState {
            m_weights: zw(),
            v_weights: zw(),
            m_biases: zb(),
            v_biases: zb(),
            step: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    fn check_shapes(&self, m: &Mlp<T>) -> Result<()> {
        let ok = self.m_weights.len() == m.layers.len()
            && m.layers.iter().enumerate().all(|(l, layer)| {
                self.m_weights[l].dim() == layer.weights.dim()
                    && self.v_weights[l].dim() == layer.weights.dim()
                    && self.m_biases[l].len() == layer.bias.len()
                    && self.v_biases[l].len() == layer.bias.len()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: m.param_count(),
                got: self.m_weights.iter().map(|w| w.len()).sum::<usize>()
                    + self.m_biases.iter().map(|b| b.len()).sum::<usize>(),
            })
        }
    }
}

/// Largest relative discrepancy between backprop and central differences.
///
/// `probes` parameters are drawn uniformly across all layers. The loss is
/// `sum(c * out)` for fixed random weights `c`, so every output contributes.
/// Each probe's error is `|g - fd| / max(|g| + |fd|, floor)`, with a floor
/// that keeps near-zero gradients from dominating.
pub fn gradient_check<R: Rng + ?Sized>(
    m: &Mlp<f64>,
    x: ArrayView2<f64>,
    probes: usize,
    step: f64,
    rng: &mut R,
) -> Result<f64> {
    let c = Array2::from_shape_simple_fn((x.nrows(), m.output_dim()), || rng.gen_range(-1.0..1.0));
    let loss = |net: &Mlp<f64>| -> Result<f64> { Ok((&net.predict_batch(x)? * &c).sum()) };
    let (_, cache) = m.forward_batch(x)?;
    let grads = m.backward(cache, c.view())?;
    let sizes: Vec<usize> = m.layers.iter().map(|l| l.weights.len() + l.bias.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut probe_net = m.clone();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut k = rng.gen_range(0..total);
        let mut l = 0;
        while k >= sizes[l] {
            k -= sizes[l];
            l += 1;
        }
        let nw = m.layers[l].weights.len();
        let (analytic, slot) = if k < nw {
            let idx = (k / m.layers[l].fan_in(), k % m.layers[l].fan_in());
            (grads.weights[l][idx], Some(idx))
        } else {
            (grads.biases[l][k - nw], None)
        };
        let mut perturbed = |delta: f64| -> Result<f64> {
            let layer = &mut probe_net.layers_mut()[l];
            match slot {
                Some(idx) => layer.weights[idx] = m.layers[l].weights[idx] + delta,
                None => layer.bias[k - nw] = m.layers[l].bias[k - nw] + delta,
            }
            loss(&probe_net)
        };
        let plus = perturbed(step)?;
        let minus = perturbed(-step)?;
        perturbed(0.0)?;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::RngStream;
    use ndarray::array;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_net(dims: &[usize], seed: u64) -> Mlp<f64> {
        let acts: Vec<_> = (1..dims.len())
            .map(|l| if l + 1 == dims.len() { Activation::Identity } else { Activation::Tanh })
            .collect();
        let mut net = Mlp::new(dims, &acts, &mut RngStream::new(seed, 0)).unwrap();
        let mut rng = RngStream::new(seed, 1);
        for layer in net.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        net
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = RngStream::new(seed, 2);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let x = [0.3, -1.5, 2.0];
        assert_eq!(net.predict(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn zero_weights_give_activation_of_bias() {
        let mut net = Mlp::<f64>::zeros(&[4, 2], &[Activation::Tanh]).unwrap();
        net.layers_mut()[0].bias = array![0.5, -2.0];
        let out = net.predict(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out, vec![0.5f64.tanh(), (-2.0f64).tanh()]);
    }

    #[test]
    fn forward_matches_scalar_loop_reimplementation() {
        let net = random_net(&[7, 5, 6, 3], 11);
        let x = random_batch(4, 7, 12);
        let fast = net.predict_batch(x.view()).unwrap();
        for r in 0..4 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for layer in net.layers() {
                let mut next = vec![0.0; layer.fan_out()];
                for (o, slot) in next.iter_mut().enumerate() {
                    let mut acc = layer.bias[o];
                    for (i, hi) in h.iter().enumerate() {
                        acc += layer.weights[[o, i]] * hi;
                    }
                    *slot = layer.activation.apply(acc);
                }
                h = next;
            }
            for (o, v) in h.iter().enumerate() {
                assert!((fast[[r, o]] - v).abs() < 1e-12);
            }
            let single = net.predict(x.row(r).as_slice().unwrap()).unwrap();
            for (o, v) in single.iter().enumerate() {
                assert!((fast[[r, o]] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let net = random_net(&[3, 2], 1);
        assert!(matches!(
            net.predict(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn linear_mse_gradient_is_closed_form() {
        let net = random_net(&[3, 2], 5);
        let x = array![[0.5, -1.0, 2.0]];
        let y = array![[0.25, -0.75]];
        let (out, cache) = net.forward_batch(x.view()).unwrap();
        let resid = &out - &y;
        let g = net.backward(cache, (&resid * 2.0).view()).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let expect = 2.0 * resid[[0, o]] * x[[0, i]];
                assert!((g.weights[0][[o, i]] - expect).abs() < 1e-14);
            }
            assert!((g.biases[0][o] - 2.0 * resid[[0, o]]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let net = random_net(&[4, 6, 2], 3);
        let x = random_batch(5, 4, 4);
        let (out, cache) = net.forward_batch(x.view()).unwrap();
        let g = net.backward(cache, Array2::zeros(out.dim()).view()).unwrap();
        assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = random_net(&[3, 2], 8);
        let x = random_batch(1, 3, 9);
        let (out, cache) = net.forward_batch(x.view()).unwrap();
        let g = Gradients {
            weights: vec![Array2::ones((2, 3))],
            biases: vec![Array1::ones(2)],
            input: Array2::zeros((1, 3)),
        };
        net.opt_step(&g, &mut OptimState::new(&net.clone())).unwrap();
        assert!(matches!(
            net.backward(cache, out.view()),
            Err(Error::StaleCache(_))
        ));
        let other = random_net(&[3, 2], 8);
        let (out, cache) = net.forward_batch(x.view()).unwrap();
        assert!(other.backward(cache, out.view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, dims) in [vec![5, 4, 3], vec![6, 8, 8, 2], vec![3, 1]].iter().enumerate() {
            let net = random_net(dims, 20 + k as u64);
            let x = random_batch(3, dims[0], 30 + k as u64);
            let err = gradient_check(&net, x.view(), 200, 1e-5, &mut RngStream::new(40, k as u64)).unwrap();
            assert!(err < 1e-4, "dims {dims:?}: {err}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = random_net(&[4, 5, 2], 6);
        let x = random_batch(1, 4, 7);
        let c = array![[0.7, -1.3]];
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let g = net.backward(cache, c.view()).unwrap();
        for i in 0..4 {
            let mut xp = x.clone();
            xp[[0, i]] += 1e-6;
            let mut xm = x.clone();
            xm[[0, i]] -= 1e-6;
            let f = |v: &Array2<f64>| (&net.predict_batch(v.view()).unwrap() * &c).sum();
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((g.input[[0, i]] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_step_keeps_parameters() {
        let mut net = random_net(&[3, 4, 2], 2);
        let before = net.clone();
        let mut state = OptimState::new(&net);
        let zero = Gradients {
            weights: net.layers().iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            biases: net.layers().iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            input: Array2::zeros((1, 3)),
        };
        net.opt_step(&zero, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let run = || {
            let mut net = random_net(&[1, 8], 13);
            let mut state = OptimState::with_lr(&net, 1e-2);
            let mut losses = Vec::new();
            for _ in 0..100 {
                let l = &net.layers()[0];
                let loss = l.weights.iter().chain(l.bias.iter()).map(|w| w * w).sum::<f64>();
                losses.push(loss);
                let g = Gradients {
                    weights: vec![&l.weights * 2.0],
                    biases: vec![&l.bias * 2.0],
                    input: Array2::zeros((1, 1)),
                };
                net.opt_step(&g, &mut state).unwrap();
            }
            (net, losses)
        };
        let (a, losses) = run();
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(losses[99] < 0.5 * losses[0]);
        let (b, _) = run();
        assert_eq!(a, b);
    }

    #[test]
    fn model_file_round_trips() {
        let net = random_net(&[5, 3, 2], 17);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"IFM1");
        assert_eq!(buf.len(), 4 + 4 + 4 + 3 * 4 + 2 + 8 * net.param_count());
        let back = Mlp::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        let single = Mlp::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(single.dims(), net.dims());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Mlp::<f64>::read_from(&mut bad.as_slice()).is_err());
        assert!(Mlp::<f64>::read_from(&mut &buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(Mlp::<f64>::read_from(&mut long.as_slice()).is_err());
    }

    #[test]
    fn single_precision_network_runs() {
        let net = Mlp::<f32>::new(&[4, 3, 2], &[Activation::Tanh, Activation::Identity], &mut RngStream::new(1, 0)).unwrap();
        let wide = random_net(&[4, 3, 2], 1);
        let out = net.predict(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(net.dims(), wide.dims());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn forward_is_pure(seed in 0u64..1000, rows in 1usize..4) {
            let net = random_net(&[3, 4, 2], seed);
            let x = random_batch(rows, 3, seed + 1);
            let a = net.predict_batch(x.view()).unwrap();
            let (b, _) = net.forward_batch(x.view()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn batch_gradient_is_sum_of_per_row(seed in 0u64..1000) {
            let net = random_net(&[3, 4, 2], seed);
            let x = random_batch(3, 3, seed + 1);
            let c = random_batch(3, 2, seed + 2);
            let (_, cache) = net.forward_batch(x.view()).unwrap();
            let whole = net.backward(cache, c.view()).unwrap();
            let mut acc = Array2::<f64>::zeros((4, 3));
            for r in 0..3 {
                let (_, cache) = net.forward_batch(x.slice(ndarray::s![r..r + 1, ..])).unwrap();
                let g = net.backward(cache, c.slice(ndarray::s![r..r + 1, ..])).unwrap();
                acc += &g.weights[0];
            }
            prop_assert!((&acc - &whole.weights[0]).iter().all(|d| d.abs() < 1e-12));
        }
    }
}
