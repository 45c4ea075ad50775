//! Latent flow pipeline: encoder, vector field over inverse temperature,
//! Euler stepping, projector back to spins, and autoregressive generation.
//!
//! A cooling step maps `x_j` to `x_{j+1}` by
//! `z = phi(x_j)`, `z' = z + (beta_{j+1} - beta_j) v(z, beta_j)` and
//! `x_{j+1} = decode(z', beta_{j+1})`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CoolingSchedule, Trajectory};
use crate::error::{Error, IoContext, Result};
use crate::lattice::SpinGrid;
use crate::montecarlo::{Metropolis, RngStream};
use crate::nn::{Activation, Gradients, Mlp, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowHyper {
    /// Latent dimension `L`.
    pub latent_dim: usize,
    /// KDE bandwidth.
    pub sigma: f64,
    /// Weight of the Hamiltonian-matching term in the projector loss.
    pub lambda: f64,
    pub lr: f64,
    pub encoder_epochs: usize,
    pub field_epochs: usize,
    pub projector_epochs: usize,
    pub batch_size: usize,
    pub encoder_hidden: Vec<usize>,
    pub field_hidden: Vec<usize>,
    pub projector_hidden: Vec<usize>,
    pub seed: u64,
}

impl FlowHyper {
    /// Defaults for an `n x n` lattice: `L = n²/4`, `sigma = 1`, `lambda = 0.1`.
    pub fn for_lattice(n: usize) -> Self {
        FlowHyper {
            latent_dim: (n * n / 4).max(1),
            sigma: 1.0,
            lambda: 0.1,
            lr: 1e-3,
            encoder_epochs: 20,
            field_epochs: 200,
            projector_epochs: 20,
            batch_size: 32,
            encoder_hidden: Vec::new(),
            field_hidden: vec![256],
            projector_hidden: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if [&self.encoder_hidden, &self.field_hidden, &self.projector_hidden]
            .iter()
            .any(|h| h.contains(&0))
        {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_dims(&self, n: usize) -> Vec<usize> {
        let mut d = vec![n * n];
        d.extend(&self.encoder_hidden);
        d.push(self.latent_dim);
        d
    }

    pub fn field_dims(&self) -> Vec<usize> {
        let mut d = vec![self.latent_dim + 1];
        d.extend(&self.field_hidden);
        d.push(self.latent_dim);
        d
    }

    pub fn projector_dims(&self, n: usize) -> Vec<usize> {
        let mut d = vec![self.latent_dim + 1];
        d.extend(&self.projector_hidden);
        d.push(n * n);
        d
    }

    pub fn encoder_activations(&self) -> Vec<Activation> {
        tanh_stack(self.encoder_hidden.len() + 1)
    }

    pub fn field_activations(&self) -> Vec<Activation> {
        tanh_then_identity(self.field_hidden.len() + 1)
    }

    pub fn projector_activations(&self) -> Vec<Activation> {
        tanh_stack(self.projector_hidden.len() + 1)
    }
}

fn tanh_stack(layers: usize) -> Vec<Activation> {
    vec![Activation::Tanh; layers]
}

fn tanh_then_identity(layers: usize) -> Vec<Activation> {
    let mut a = vec![Activation::Tanh; layers];
    a[layers - 1] = Activation::Identity;
    a
}

/// A latent vector tagged with its inverse temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub values: Vec<f64>,
    pub beta: f64,
}

impl LatentVector {
    pub fn new(values: Vec<f64>, beta: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) || !beta.is_finite() {
            return Err(Error::Domain("latent vector must be finite".into()));
        }
        Ok(LatentVector { values, beta })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// The trained components. Stages are trained separately, so all but the
/// encoder are optional until their stage has run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub n: usize,
    pub hyper: FlowHyper,
    pub encoder: Mlp<f64>,
    /// Training partner of the encoder; its sign is the readout used by the
    /// Metropolis-refinement decoders.
    pub inverse_map: Option<Mlp<f64>>,
    pub field: Option<Mlp<f64>>,
    pub projector: Option<Mlp<f64>>,
}

impl ModelBundle {
    pub fn new(n: usize, hyper: FlowHyper, encoder: Mlp<f64>) -> Result<Self> {
        hyper.validate()?;
        if encoder.input_dim() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: encoder.input_dim(),
            });
        }
        if encoder.output_dim() != hyper.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: hyper.latent_dim,
                got: encoder.output_dim(),
            });
        }
        Ok(ModelBundle {
            n,
            hyper,
            encoder,
            inverse_map: None,
            field: None,
            projector: None,
        })
    }

    pub fn with_inverse_map(mut self, gamma: Mlp<f64>) -> Result<Self> {
        expect_shape(&gamma, self.hyper.latent_dim, self.n * self.n)?;
        self.inverse_map = Some(gamma);
        Ok(self)
    }

    pub fn with_field(mut self, field: Mlp<f64>) -> Result<Self> {
        expect_shape(&field, self.hyper.latent_dim + 1, self.hyper.latent_dim)?;
        self.field = Some(field);
        Ok(self)
    }

    pub fn with_projector(mut self, projector: Mlp<f64>) -> Result<Self> {
        expect_shape(&projector, self.hyper.latent_dim + 1, self.n * self.n)?;
        if projector.layers().last().map(|l| l.activation) != Some(Activation::Tanh) {
            return Err(Error::Config("projector output layer must be tanh".into()));
        }
        self.projector = Some(projector);
        Ok(self)
    }

    pub fn latent_dim(&self) -> usize {
        self.hyper.latent_dim
    }

    fn field(&self) -> Result<&Mlp<f64>> {
        self.field.as_ref().ok_or_else(|| Error::MissingStage("field".into()))
    }

    fn projector(&self) -> Result<&Mlp<f64>> {
        self.projector.as_ref().ok_or_else(|| Error::MissingStage("projector".into()))
    }

    fn inverse_map(&self) -> Result<&Mlp<f64>> {
        self.inverse_map.as_ref().ok_or_else(|| Error::MissingStage("encoder".into()))
    }

    fn check_grid(&self, g: &SpinGrid) -> Result<()> {
        if g.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: g.n(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, g: &SpinGrid, beta: f64) -> Result<LatentVector> {
        self.check_grid(g)?;
        let z = self.encoder.predict(&g.to_reals::<f64>())?;
        LatentVector::new(z, beta)
    }

    pub fn euler_step(&self, z: &LatentVector, beta_next: f64) -> Result<LatentVector> {
        euler_step(self.field()?, z, beta_next)
    }

    /// Projector output before binarization, in `[-1, 1]^{n²}`.
    pub fn project(&self, z: &LatentVector, beta: f64) -> Result<Vec<f64>> {
        let mut input = z.values.clone();
        input.push(beta);
        self.projector()?.predict(&input)
    }

    /// `sign(P(z, beta))` with exact zeros mapped to `+1`.
    pub fn decode_learned(&self, z: &LatentVector, beta: f64) -> Result<SpinGrid> {
        SpinGrid::from_signs(self.n, &self.project(z, beta)?)
    }

    /// Sign of the linear readout of `z`, then `steps` Metropolis sweeps at `beta`.
    pub fn decode_mh<R: Rng + ?Sized>(&self, z: &LatentVector, beta: f64, steps: usize, rng: &mut R) -> Result<SpinGrid> {
        let readout = self.inverse_map()?.predict(&z.values)?;
        let mut g = SpinGrid::from_signs(self.n, &readout)?;
        let mut sampler = Metropolis::new();
        for _ in 0..steps {
            sampler.sweep(&mut g, beta, rng);
        }
        Ok(g)
    }

    pub fn decode<R: Rng + ?Sized>(&self, decoder: Decoder, z: &LatentVector, beta: f64, rng: &mut R) -> Result<SpinGrid> {
        match decoder {
            Decoder::Learned => self.decode_learned(z, beta),
            Decoder::Refine(steps) => self.decode_mh(z, beta, steps, rng),
        }
    }
}

fn expect_shape(m: &Mlp<f64>, input: usize, output: usize) -> Result<()> {
    if m.input_dim() != input {
        return Err(Error::DimensionMismatch {
            expected: input,
            got: m.input_dim(),
        });
    }
    if m.output_dim() != output {
        return Err(Error::DimensionMismatch {
            expected: output,
            got: m.output_dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    /// Binarized projector output.
    Learned,
    /// Linear-readout binarization followed by this many Metropolis sweeps.
    Refine(usize),
}

/// `z + (beta_next - z.beta) v(z, z.beta)`, tagged with `beta_next`.
pub fn euler_step(field: &Mlp<f64>, z: &LatentVector, beta_next: f64) -> Result<LatentVector> {
    let mut input = z.values.clone();
    input.push(z.beta);
    let v = field.predict(&input)?;
    let db = beta_next - z.beta;
    let values = z.values.iter().zip(&v).map(|(zi, vi)| zi + db * vi).collect();
    LatentVector::new(values, beta_next)
}

/// Mean finite-difference slope from `z_j` to each of the cooled latents.
pub fn target_field(z_j: &LatentVector, next: &[LatentVector], beta_j: f64, beta_next: f64) -> Result<Vec<f64>> {
    let db = beta_next - beta_j;
    if db == 0.0 {
        return Err(Error::Domain("zero inverse-temperature step".into()));
    }
    if !(db > 0.0) {
        return Err(Error::Domain("target field needs beta_next > beta_j".into()));
    }
    if next.is_empty() {
        return Err(Error::Config("target field needs at least one cooled sample".into()));
    }
    let mut mean = vec![0.0; z_j.dim()];
    for zk in next {
        if zk.dim() != z_j.dim() {
            return Err(Error::DimensionMismatch {
                expected: z_j.dim(),
                got: zk.dim(),
            });
        }
        for ((m, a), b) in mean.iter_mut().zip(&zk.values).zip(&z_j.values) {
            *m += (a - b) / db;
        }
    }
    let k = next.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// Gaussian-kernel negative log-likelihood up to a constant:
/// `|pred - target|² / (2 sigma²)`.
pub fn kde_loss(pred: &[f64], target: &[f64], sigma: f64) -> f64 {
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    sq / (2.0 * sigma * sigma)
}

/// Nearest-neighbour energy `-sum x_i x_j` of a real-valued field on the
/// periodic lattice, each bond counted once.
pub fn relaxed_hamiltonian(n: usize, x: &[f64]) -> f64 {
    let mut e = 0.0;
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            e -= x[i] * (x[r * n + (c + 1) % n] + x[((r + 1) % n) * n + c]);
        }
    }
    e
}

/// Gradient of [`relaxed_hamiltonian`]: minus the sum of the four neighbours.
pub fn relaxed_hamiltonian_grad(n: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..n {
        for c in 0..n {
            let up = ((r + n - 1) % n) * n + c;
            let down = ((r + 1) % n) * n + c;
            let left = r * n + (c + n - 1) % n;
            let right = r * n + (c + 1) % n;
            out[r * n + c] = -(x[up] + x[down] + x[left] + x[right]);
        }
    }
}

/// Per-sample projector loss on relaxed outputs:
/// `mean_i (x̂_i - x_i)² + lambda |H(x̂) - H(x)| / n²`.
pub fn projector_loss(n: usize, pred: &[f64], target: &[f64], lambda: f64) -> f64 {
    let sites = (n * n) as f64;
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / sites;
    mse + lambda * (relaxed_hamiltonian(n, pred) - relaxed_hamiltonian(n, target)).abs() / sites
}

fn projector_loss_grad(n: usize, pred: &[f64], target: &[f64], lambda: f64, out: &mut [f64]) -> f64 {
    let sites = (n * n) as f64;
    let dh = relaxed_hamiltonian(n, pred) - relaxed_hamiltonian(n, target);
    relaxed_hamiltonian_grad(n, pred, out);
    let w = lambda * dh.signum() / sites;
    for ((o, p), t) in out.iter_mut().zip(pred).zip(target) {
        *o = *o * w + 2.0 * (p - t) / sites;
    }
    projector_loss(n, pred, target, lambda)
}

fn minibatches<R: Rng + ?Sized>(count: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

fn check_finite(stage: &str, epoch: usize, loss: f64, grads: &[&Gradients<f64>]) -> Result<()> {
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            stage: stage.into(),
            epoch,
        });
    }
    Ok(())
}

fn grids_matrix(grids: &[&SpinGrid]) -> Array2<f64> {
    let sites = grids[0].sites();
    let mut x = Array2::zeros((grids.len(), sites));
    for (mut row, g) in x.rows_mut().into_iter().zip(grids) {
        row.iter_mut().zip(g.spins()).for_each(|(r, &s)| *r = s as f64);
    }
    x
}

/// Every grid of the trajectories: the anneal and all conditional samples.
pub fn all_grids(trajectories: &[Trajectory]) -> Vec<&SpinGrid> {
    trajectories
        .iter()
        .flat_map(|t| t.grids.iter().chain(t.conditional.iter().flatten()))
        .collect()
}

/// Trained encoder with its inverse map.
#[derive(Debug, Clone)]
pub struct EncoderFit {
    pub encoder: Mlp<f64>,
    pub inverse_map: Mlp<f64>,
    pub log: TrainLog,
}

/// Minimize the mean per-site reconstruction error `|γ(φ(x)) - x|² / n²`.
pub fn train_encoder(grids: &[&SpinGrid], hyper: &FlowHyper) -> Result<EncoderFit> {
    hyper.validate()?;
    if grids.is_empty() {
        return Err(Error::Config("encoder training needs at least one grid".into()));
    }
    let n = grids[0].n();
    if grids.iter().any(|g| g.n() != n) {
        return Err(Error::InvalidGrid("training grids have mixed sizes".into()));
    }
    let root = RngStream::new(hyper.seed, 0x656e_636f);
    let enc_dims = hyper.encoder_dims(n);
    let mut encoder = Mlp::new(&enc_dims, &hyper.encoder_activations(), &mut root.substream(0))?;
    let mut gamma = Mlp::new(&[hyper.latent_dim, n * n], &[Activation::Tanh], &mut root.substream(1))?;
    let mut enc_state = OptimState::with_lr(&encoder, hyper.lr);
    let mut gamma_state = OptimState::with_lr(&gamma, hyper.lr);
    let x = grids_matrix(grids);
    let sites = (n * n) as f64;
    let mut shuffle = root.substream(2);
    let mut log = TrainLog::default();
    for epoch in 0..hyper.encoder_epochs {
        let mut total = 0.0;
        for batch in minibatches(x.nrows(), hyper.batch_size, &mut shuffle) {
            let xb = x.select(Axis(0), &batch);
            let (z, enc_cache) = encoder.forward_batch(xb.view())?;
            let (xh, gamma_cache) = gamma.forward_batch(z.view())?;
            let resid = &xh - &xb;
            total += resid.iter().map(|r| r * r).sum::<f64>() / sites;
            let scale = 2.0 / (sites * batch.len() as f64);
            let g_gamma = gamma.backward(gamma_cache, (&resid * scale).view())?;
            let g_enc = encoder.backward(enc_cache, g_gamma.input.view())?;
            check_finite("encoder", epoch, total, &[&g_gamma, &g_enc])?;
            gamma.opt_step(&g_gamma, &mut gamma_state)?;
            encoder.opt_step(&g_enc, &mut enc_state)?;
        }
        log.losses.push(total / x.nrows() as f64);
    }
    Ok(EncoderFit {
        encoder,
        inverse_map: gamma,
        log,
    })
}

/// Mean per-site sign agreement between `sign(γ(φ(x)))` and `x`.
pub fn reconstruction_accuracy(encoder: &Mlp<f64>, inverse_map: &Mlp<f64>, grids: &[&SpinGrid]) -> Result<f64> {
    let x = grids_matrix(grids);
    let xh = inverse_map.predict_batch(encoder.predict_batch(x.view())?.view())?;
    Ok(sign_agreement(&x, &xh))
}

fn sign_agreement(x: &Array2<f64>, xh: &Array2<f64>) -> f64 {
    let hits = x
        .iter()
        .zip(xh)
        .filter(|(a, b)| (**b >= 0.0) == (**a > 0.0))
        .count();
    hits as f64 / x.len() as f64
}

/// Supervised pairs for the vector field: rows `(z_j, beta_j)` and the mean
/// slope toward the encoded conditional samples at `beta_{j+1}`.
#[derive(Debug, Clone)]
pub struct FieldSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

pub fn field_set(encoder: &Mlp<f64>, trajectories: &[Trajectory], schedule: &CoolingSchedule) -> Result<FieldSet> {
    let betas = schedule.betas();
    let l = encoder.output_dim();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in trajectories {
        if t.grids.len() != betas.len() || t.conditional.len() != schedule.intervals() {
            return Err(Error::ScheduleMismatch("trajectory does not follow the schedule".into()));
        }
        for j in 0..schedule.intervals() {
            if t.conditional[j].is_empty() {
                return Err(Error::Config(format!("transition {j} has no conditional samples")));
            }
            let zj = LatentVector::new(encoder.predict(&t.grids[j].to_reals::<f64>())?, betas[j])?;
            let cond: Vec<&SpinGrid> = t.conditional[j].iter().collect();
            let zk = encoder.predict_batch(grids_matrix(&cond).view())?;
            let next: Vec<LatentVector> = zk
                .rows()
                .into_iter()
                .map(|r| LatentVector::new(r.to_vec(), betas[j + 1]))
                .collect::<Result<_>>()?;
            targets.extend(target_field(&zj, &next, betas[j], betas[j + 1])?);
            inputs.extend(zj.values);
            inputs.push(betas[j]);
        }
    }
    if targets.is_empty() {
        return Err(Error::Config("field training needs at least one transition".into()));
    }
    let rows = targets.len() / l;
    Ok(FieldSet {
        inputs: Array2::from_shape_vec((rows, l + 1), inputs).expect("row-major inputs"),
        targets: Array2::from_shape_vec((rows, l), targets).expect("row-major targets"),
    })
}

/// Trained network with its loss curve.
#[derive(Debug, Clone)]
pub struct Fit {
    pub net: Mlp<f64>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Copy)]
struct Standardize {
    mean: f64,
    scale: f64,
}

impl Standardize {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Standardize { mean, scale }
    }
}

/// Rewrite the first layer so that it reads the raw value of input column
/// `col` where it was trained on `(x - mean) / scale`.
fn fold_input(net: &mut Mlp<f64>, col: usize, s: Standardize) {
    let first = &mut net.layers_mut()[0];
    let mut w = first.weights.column_mut(col);
    w.mapv_inplace(|v| v / s.scale);
    let shift = &w * s.mean;
    first.bias -= &shift;
}

/// Rewrite an identity output layer trained on `(y - mean) / scale`.
fn fold_output(net: &mut Mlp<f64>, mean: &Array1<f64>, scale: f64) {
    let last = net.layers_mut().last_mut().expect("non-empty");
    debug_assert_eq!(last.activation, Activation::Identity);
    last.weights *= scale;
    last.bias *= scale;
    last.bias += mean;
}

/// Mean KDE loss of `field` over a training set.
pub fn field_loss(field: &Mlp<f64>, set: &FieldSet, sigma: f64) -> Result<f64> {
    let pred = field.predict_batch(set.inputs.view())?;
    let sq: f64 = (&pred - &set.targets).iter().map(|d| d * d).sum();
    Ok(sq / (2.0 * sigma * sigma) / set.inputs.nrows() as f64)
}

/// Fit `v(z, beta)` to the mean slopes under the KDE loss.
///
/// Training runs on standardized `beta` and standardized targets; the
/// affine maps are folded into the first and last layers afterwards, so the
/// returned network consumes raw `(z, beta)` and emits raw slopes. Logged
/// losses are the KDE loss in those raw units.
pub fn train_field(set: &FieldSet, hyper: &FlowHyper) -> Result<Fit> {
    hyper.validate()?;
    let l = hyper.latent_dim;
    if set.inputs.ncols() != l + 1 || set.targets.ncols() != l {
        return Err(Error::DimensionMismatch {
            expected: l + 1,
            got: set.inputs.ncols(),
        });
    }
    if set.inputs.nrows() == 0 {
        return Err(Error::Config("field training needs at least one sample".into()));
    }
    let rows = set.inputs.nrows();
    let beta_std = Standardize::of(set.inputs.column(l).iter().copied());
    let t_mean = set.targets.mean_axis(Axis(0)).expect("non-empty");
    let centered = &set.targets - &t_mean;
    let t_scale = Standardize::of(centered.iter().copied()).scale;
    let targets = &centered / t_scale;
    let mut inputs = set.inputs.clone();
    inputs.column_mut(l).mapv_inplace(|b| (b - beta_std.mean) / beta_std.scale);

    let root = RngStream::new(hyper.seed, 0x6669_656c);
    let dims = hyper.field_dims();
    let mut net = Mlp::new(&dims, &tanh_then_identity(dims.len() - 1), &mut root.substream(0))?;
    let mut state = OptimState::with_lr(&net, hyper.lr);
    let mut shuffle = root.substream(1);
    let raw_factor = t_scale * t_scale / (2.0 * hyper.sigma * hyper.sigma);
    let mut log = TrainLog::default();
    for epoch in 0..hyper.field_epochs {
        let mut total = 0.0;
        for batch in minibatches(rows, hyper.batch_size, &mut shuffle) {
            let xb = inputs.select(Axis(0), &batch);
            let tb = targets.select(Axis(0), &batch);
            let (out, cache) = net.forward_batch(xb.view())?;
            let resid = &out - &tb;
            total += resid.iter().map(|r| r * r).sum::<f64>() * raw_factor;
            let scale = 1.0 / (hyper.sigma * hyper.sigma * batch.len() as f64);
            let g = net.backward(cache, (&resid * scale).view())?;
            check_finite("field", epoch, total, &[&g])?;
            net.opt_step(&g, &mut state)?;
        }
        log.losses.push(total / rows as f64);
    }
    fold_input(&mut net, l, beta_std);
    fold_output(&mut net, &t_mean, t_scale);
    Ok(Fit { net, log })
}

/// Supervised pairs for the projector: rows `(phi(x), beta)` and targets `x`.
#[derive(Debug, Clone)]
pub struct ProjectorSet {
    pub n: usize,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

/// Every grid at every schedule point, paired with its own latent and beta.
pub fn projector_set(encoder: &Mlp<f64>, trajectories: &[Trajectory], schedule: &CoolingSchedule) -> Result<ProjectorSet> {
    let betas = schedule.betas();
    let mut grids: Vec<&SpinGrid> = Vec::new();
    let mut beta_col = Vec::new();
    for t in trajectories {
        if t.grids.len() != betas.len() || t.conditional.len() != schedule.intervals() {
            return Err(Error::ScheduleMismatch("trajectory does not follow the schedule".into()));
        }
        for (g, &b) in t.grids.iter().zip(betas) {
            grids.push(g);
            beta_col.push(b);
        }
        for (j, cond) in t.conditional.iter().enumerate() {
            for g in cond {
                grids.push(g);
                beta_col.push(betas[j + 1]);
            }
        }
    }
    if grids.is_empty() {
        return Err(Error::Config("projector training needs at least one grid".into()));
    }
    let targets = grids_matrix(&grids);
    let z = encoder.predict_batch(targets.view())?;
    let l = z.ncols();
    let mut inputs = Array2::zeros((z.nrows(), l + 1));
    inputs.slice_mut(s![.., ..l]).assign(&z);
    inputs.column_mut(l).assign(&Array1::from(beta_col));
    Ok(ProjectorSet {
        n: grids[0].n(),
        inputs,
        targets,
    })
}

/// Mean projector loss over a set.
pub fn projector_set_loss(projector: &Mlp<f64>, set: &ProjectorSet, lambda: f64) -> Result<f64> {
    let pred = projector.predict_batch(set.inputs.view())?;
    let total: f64 = pred
        .rows()
        .into_iter()
        .zip(set.targets.rows())
        .map(|(p, t)| projector_loss(set.n, p.as_slice().expect("contiguous"), t.as_slice().expect("contiguous"), lambda))
        .sum();
    Ok(total / set.inputs.nrows() as f64)
}

/// Fit `P(z, beta)` under reconstruction error plus Hamiltonian matching on
/// the relaxed output. `beta` is standardized during training and folded
/// into the first layer afterwards.
pub fn train_projector(set: &ProjectorSet, hyper: &FlowHyper) -> Result<Fit> {
    hyper.validate()?;
    let l = hyper.latent_dim;
    let sites = set.n * set.n;
    if set.inputs.ncols() != l + 1 || set.targets.ncols() != sites {
        return Err(Error::DimensionMismatch {
            expected: l + 1,
            got: set.inputs.ncols(),
        });
    }
    let rows = set.inputs.nrows();
    if rows == 0 {
        return Err(Error::Config("projector training needs at least one sample".into()));
    }
    let beta_std = Standardize::of(set.inputs.column(l).iter().copied());
    let mut inputs = set.inputs.clone();
    inputs.column_mut(l).mapv_inplace(|b| (b - beta_std.mean) / beta_std.scale);

    let root = RngStream::new(hyper.seed, 0x7072_6f6a);
    let dims = hyper.projector_dims(set.n);
    let mut net = Mlp::new(&dims, &tanh_stack(dims.len() - 1), &mut root.substream(0))?;
    let mut state = OptimState::with_lr(&net, hyper.lr);
    let mut shuffle = root.substream(1);
    let mut log = TrainLog::default();
    for epoch in 0..hyper.projector_epochs {
        let mut total = 0.0;
        for batch in minibatches(rows, hyper.batch_size, &mut shuffle) {
            let xb = inputs.select(Axis(0), &batch);
            let tb = set.targets.select(Axis(0), &batch);
            let (out, cache) = net.forward_batch(xb.view())?;
            let mut grad = Array2::zeros(out.dim());
            for ((p, t), mut g) in out.rows().into_iter().zip(tb.rows()).zip(grad.rows_mut()) {
                total += projector_loss_grad(
                    set.n,
                    p.as_slice().expect("contiguous"),
                    t.as_slice().expect("contiguous"),
                    hyper.lambda,
                    g.as_slice_mut().expect("contiguous"),
                );
            }
            grad /= batch.len() as f64;
            let g = net.backward(cache, grad.view())?;
            check_finite("projector", epoch, total, &[&g])?;
            net.opt_step(&g, &mut state)?;
        }
        log.losses.push(total / rows as f64);
    }
    fold_input(&mut net, l, beta_std);
    Ok(Fit { net, log })
}

/// Autoregressive cooling from `x0` at `beta_0`: encode, one Euler step,
/// decode at the next beta, and re-encode the decoded grid.
pub fn generate_trajectory<R: Rng + ?Sized>(
    b: &ModelBundle,
    x0: &SpinGrid,
    schedule: &CoolingSchedule,
    decoder: Decoder,
    rng: &mut R,
) -> Result<Vec<SpinGrid>> {
    b.check_grid(x0)?;
    let betas = schedule.betas();
    let mut grids = Vec::with_capacity(betas.len());
    grids.push(x0.clone());
    for w in betas.windows(2) {
        let z = b.encode(grids.last().expect("non-empty"), w[0])?;
        let z_next = b.euler_step(&z, w[1])?;
        grids.push(b.decode(decoder, &z_next, w[1], rng)?);
    }
    Ok(grids)
}

/// Predicted trajectories from several starting grids; trajectory `i`
/// draws from `RngStream::new(seed, i)`.
pub fn generate_many(
    b: &ModelBundle,
    starts: &[SpinGrid],
    schedule: &CoolingSchedule,
    decoder: Decoder,
    seed: u64,
) -> Result<Vec<Vec<SpinGrid>>> {
    use rayon::prelude::*;
    starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| generate_trajectory(b, x0, schedule, decoder, &mut RngStream::new(seed, i as u64)))
        .collect()
}

/// Batched forward of several latents through the encoder; used by tests
/// and diagnostics.
pub fn encode_batch(b: &ModelBundle, grids: &[&SpinGrid]) -> Result<Array2<f64>> {
    if let Some(g) = grids.iter().find(|g| g.n() != b.n) {
        b.check_grid(g)?;
    }
    b.encoder.predict_batch(grids_matrix(grids).view())
}

/// Training stage of one persisted component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Field,
    Projector,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Field => "field",
            Stage::Projector => "projector",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Stage::Encoder),
            "field" => Ok(Stage::Field),
            "projector" => Ok(Stage::Projector),
            other => Err(Error::Config(format!("unknown stage `{other}` (expected encoder, field or projector)"))),
        }
    }
}

/// JSON sidecar written next to each component's model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub n: usize,
    pub hyper: FlowHyper,
    pub dataset_fingerprint: String,
    pub final_loss: Option<f64>,
    pub losses: Vec<f64>,
}

impl ModelBundle {
    pub fn model_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.ifm"))
    }

    pub fn sidecar_path(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("{}.json", stage.name()))
    }

    /// Write the model files of `stage` and its sidecar.
    pub fn save_stage(&self, dir: &Path, stage: Stage, fingerprint: &str, log: &TrainLog) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        match stage {
            Stage::Encoder => {
                self.encoder.save(&Self::model_path(dir, "encoder"))?;
                self.inverse_map()?.save(&Self::model_path(dir, "inverse_map"))?;
            }
            Stage::Field => self.field()?.save(&Self::model_path(dir, "field"))?,
            Stage::Projector => self.projector()?.save(&Self::model_path(dir, "projector"))?,
        }
        let record = StageRecord {
            stage,
            n: self.n,
            hyper: self.hyper.clone(),
            dataset_fingerprint: fingerprint.to_string(),
            final_loss: log.final_loss(),
            losses: log.losses.clone(),
        };
        let path = Self::sidecar_path(dir, stage);
        fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").at(&path)
    }

    pub fn read_record(dir: &Path, stage: Stage) -> Result<Option<StageRecord>> {
        let path = Self::sidecar_path(dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Load every stage present in `dir`. The encoder is mandatory; later
    /// stages must have been trained against the same encoder settings.
    pub fn load(dir: &Path) -> Result<Self> {
        let enc = Self::read_record(dir, Stage::Encoder)?.ok_or_else(|| Error::MissingStage("encoder".into()))?;
        let encoder = Mlp::load(&Self::model_path(dir, "encoder"))?;
        let mut b = ModelBundle::new(enc.n, enc.hyper.clone(), encoder)?
            .with_inverse_map(Mlp::load(&Self::model_path(dir, "inverse_map"))?)?;
        for stage in [Stage::Field, Stage::Projector] {
            let Some(rec) = Self::read_record(dir, stage)? else {
                continue;
            };
            if rec.n != enc.n || rec.hyper.latent_dim != enc.hyper.latent_dim || rec.dataset_fingerprint != enc.dataset_fingerprint {
                return Err(Error::Config(format!(
                    "{} stage was trained against a different encoder or dataset",
                    stage.name()
                )));
            }
            let net = Mlp::load(&Self::model_path(dir, stage.name()))?;
            b = match stage {
                Stage::Field => b.with_field(net)?,
                _ => b.with_projector(net)?,
            };
        }
        Ok(b)
    }
}
