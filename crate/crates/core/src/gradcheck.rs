//! Central finite-difference verification of the tape's parameter gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Patch;
use crate::error::{invalid, Result};
use crate::model::{FusionModel, ModelConfig};
use crate::tape::{BackwardFault, Tape};
use crate::tensor::{ParamStore, Tensor};
use crate::train::cross_entropy;

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub threshold: f64,
    /// Seeds the dropout masks, which are replayed identically for every
    /// loss evaluation.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: 1e-4,
            seed: 0,
        }
    }
}

/// Worst relative error over the entries of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub worst_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub threshold: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.worst_rel_err < self.threshold)
    }

    pub fn failing(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !(g.worst_rel_err < self.threshold))
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_rel_err).fold(0.0, nan_max)
    }
}

// Like `f64::max`, except that NaN wins.
fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// `n` patches of uniform `[0, 1)` values shaped for `config`, with random
/// labels.
pub fn random_batch<R: Rng + ?Sized>(config: &ModelConfig, n: usize, rng: &mut R) -> Vec<Patch> {
    let p = config.patch_size;
    fn fill<R: Rng + ?Sized>(p: usize, c: usize, rng: &mut R) -> Tensor {
        let data = (0..p * p * c).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(&[p, p, c], data).expect("patch shape")
    }
    (0..n)
        .map(|_| {
            let hsi = fill(p, config.hsi_channels, rng);
            let lidar = fill(p, config.lidar_channels, rng);
            Patch {
                hsi,
                lidar,
                label: rng.gen_range(0..config.n_classes),
                row: 0,
                col: 0,
            }
        })
        .collect()
}

/// Batch-mean cross-entropy in training mode, recorded on `tape`.
fn batch_loss(model: &FusionModel, tape: &mut Tape, batch: &[Patch], seed: u64) -> Result<crate::tape::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = None;
    for p in batch {
        let trace = model.forward(tape, &p.hsi, &p.lidar, true, &mut rng)?;
        let loss = cross_entropy(tape, trace.probs, p.label)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| invalid("gradcheck", "empty batch"))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

fn loss_value(model: &FusionModel, batch: &[Patch], seed: u64) -> f64 {
    let mut tape = Tape::new();
    match batch_loss(model, &mut tape, batch, seed) {
        Ok(v) => tape.value(v)[0],
        Err(_) => f64::NAN,
    }
}

/// Compares every parameter gradient of the batch loss against central
/// finite differences. `fault` corrupts one backward rule of the analytic
/// pass.
pub fn check_model(
    model: &FusionModel,
    batch: &[Patch],
    cfg: &GradCheckConfig,
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport> {
    let mut analytic = model.clone();
    analytic.params_mut().zero_grads();
    let mut tape = Tape::new();
    tape.set_backward_fault(fault);
    let loss = batch_loss(&analytic, &mut tape, batch, cfg.seed)?;
    let mut grads: ParamStore = analytic.params().clone();
    tape.backward(loss, &mut grads)?;

    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(grads.len());
    for id in grads.ids() {
        let base = model.params().get(id).data().to_vec();
        let numeric = central_difference(
            |x| {
                probe.params_mut().get_mut(id).data_mut().copy_from_slice(x);
                loss_value(&probe, batch, cfg.seed)
            },
            &base,
            cfg.step,
        );
        probe.params_mut().get_mut(id).data_mut().copy_from_slice(&base);
        let g = grads.get(id).grad().expect("parameters carry gradients");
        let worst = g
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, nan_max);
        groups.push(GroupReport {
            name: grads.name(id).into(),
            entries: base.len(),
            worst_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        threshold: cfg.threshold,
        groups,
    })
}
