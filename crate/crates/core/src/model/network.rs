//! The full two-stream network: `n_stacks` cross-wired encoder/decoder stacks
//! followed by the pooled classification head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{cross_decode, cross_out, filter_block, self_attention, tokens, untokens, FilterVars};
use super::config::ModelConfig;
use crate::error::{mismatch, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::train::init::glorot_uniform;

/// The two input modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Hsi,
    Lidar,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Hsi => "hsi",
            Stream::Lidar => "lidar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl FilterParams {
    fn bind(&self, bound: &[Var]) -> FilterVars {
        FilterVars {
            conv_w: bound[self.conv_w.0],
            conv_b: bound[self.conv_b.0],
            ln_gamma: bound[self.ln_gamma.0],
            ln_beta: bound[self.ln_beta.0],
        }
    }
}

/// Query, key and value filter blocks of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderParams {
    pub query: FilterParams,
    pub key: FilterParams,
    pub value: FilterParams,
}

/// CrossOut layer-norm affine of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackParams {
    pub hsi: StreamParams,
    pub lidar: StreamParams,
}

impl StackParams {
    pub fn stream(&self, s: Stream) -> &StreamParams {
        match s {
            Stream::Hsi => &self.hsi,
            Stream::Lidar => &self.lidar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub dense_w: ParamId,
    pub dense_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Layout {
    specs: Vec<ParamSpec>,
    stacks: Vec<StackParams>,
    head: HeadParams,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    fn filter(&mut self, prefix: &str, c_in: usize, d: usize) -> FilterParams {
        FilterParams {
            conv_w: self.push(
                format!("{prefix}.conv_w"),
                vec![3, 3, c_in, d],
                Init::Glorot {
                    fan_in: 9 * c_in,
                    fan_out: 9 * d,
                },
            ),
            conv_b: self.push(format!("{prefix}.conv_b"), vec![d], Init::Zeros),
            ln_gamma: self.push(format!("{prefix}.ln_gamma"), vec![d], Init::Ones),
            ln_beta: self.push(format!("{prefix}.ln_beta"), vec![d], Init::Zeros),
        }
    }

    fn stream(&mut self, prefix: &str, c_in: usize, d: usize) -> StreamParams {
        let encoder = EncoderParams {
            query: self.filter(&format!("{prefix}.query"), c_in, d),
            key: self.filter(&format!("{prefix}.key"), c_in, d),
            value: self.filter(&format!("{prefix}.value"), c_in, d),
        };
        let decoder = DecoderParams {
            gamma: self.push(format!("{prefix}.cross_out.gamma"), vec![d], Init::Ones),
            beta: self.push(format!("{prefix}.cross_out.beta"), vec![d], Init::Zeros),
        };
        StreamParams { encoder, decoder }
    }

    fn new(cfg: &ModelConfig) -> Self {
        let mut layout = Layout {
            specs: Vec::new(),
            stacks: Vec::new(),
            head: HeadParams {
                dense_w: ParamId(0),
                dense_b: ParamId(0),
            },
        };
        let d = cfg.embed_dim;
        for k in 0..cfg.n_stacks {
            let (c_h, c_l) = if k == 0 {
                (cfg.hsi_channels, cfg.lidar_channels)
            } else {
                (d, d)
            };
            let hsi = layout.stream(&format!("stack{}.hsi", k + 1), c_h, d);
            let lidar = layout.stream(&format!("stack{}.lidar", k + 1), c_l, d);
            layout.stacks.push(StackParams { hsi, lidar });
        }
        let f = cfg.feature_len();
        layout.head = HeadParams {
            dense_w: layout.push(
                "head.dense_w".into(),
                vec![f, cfg.n_classes],
                Init::Glorot {
                    fan_in: f,
                    fan_out: cfg.n_classes,
                },
            ),
            dense_b: layout.push("head.dense_b".into(), vec![cfg.n_classes], Init::Zeros),
        };
        layout
    }
}

/// Closed-form number of scalar parameters for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.embed_dim;
    // three filter blocks (conv weights, conv bias, ln gamma, ln beta) plus
    // the CrossOut gamma and beta
    let stream = |c_in: usize| 3 * (9 * c_in * d + 3 * d) + 2 * d;
    let first = stream(cfg.hsi_channels) + stream(cfg.lidar_channels);
    let later = (cfg.n_stacks - 1) * 2 * stream(d);
    let head = cfg.feature_len() * cfg.n_classes + cfg.n_classes;
    first + later + head
}

/// Outputs of one stack.
#[derive(Debug, Clone, Copy)]
pub struct StackOutput {
    pub hsi: Var,
    pub lidar: Var,
    /// Self-attention matrices `A_H`, `A_L` (`p²×p²`).
    pub attention: [Var; 2],
}

/// Handles to the interesting intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub probs: Var,
    /// Pooled `2·n_stacks·embed_dim` feature vector before dropout.
    pub features: Var,
    pub stacks: Vec<StackOutput>,
}

/// Parameters and wiring of the two-stream stacked network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    config: ModelConfig,
    params: ParamStore,
    stacks: Vec<StackParams>,
    head: HeadParams,
}

impl FusionModel {
    /// Allocates and Glorot-initializes a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for spec in &layout.specs {
            let t = match spec.init {
                Init::Glorot { fan_in, fan_out } => glorot_uniform(&spec.shape, fan_in, fan_out, &mut rng)?,
                Init::Zeros => Tensor::zeros(&spec.shape)?,
                Init::Ones => Tensor::full(&spec.shape, 1.0)?,
            };
            params.insert(spec.name.clone(), t);
        }
        Ok(Self {
            config,
            params,
            stacks: layout.stacks,
            head: layout.head,
        })
    }

    /// Rebuilds a model from stored parameters, checking that names and
    /// shapes are exactly those `config` calls for.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if layout.specs.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                layout.specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in layout.specs.iter().zip(params.iter()) {
            if spec.name != name {
                return Err(Error::Data(format!("expected parameter {}, found {name}", spec.name)));
            }
            if spec.shape != t.shape() {
                return Err(mismatch("parameter shape", &spec.shape, t.shape()));
            }
        }
        Ok(Self {
            config,
            params,
            stacks: layout.stacks,
            head: layout.head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stacks(&self) -> &[StackParams] {
        &self.stacks
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    /// One stack on both streams. `bound` comes from [`Tape::bind`] on this
    /// model's parameters.
    pub fn stack_forward(&self, tape: &mut Tape, bound: &[Var], stack: usize, h_in: Var, l_in: Var) -> Result<StackOutput> {
        let (sh, sl) = (tape.shape(h_in), tape.shape(l_in));
        if sh.len() != 3 || sl.len() != 3 || sh[..2] != sl[..2] {
            return Err(mismatch("stack_forward", sh, sl));
        }
        let side = sh[0];
        let sp = &self.stacks[stack];
        let (act, eps) = (self.config.activation, self.config.ln_eps);

        let encode = |tape: &mut Tape, x: Var, p: &StreamParams| -> Result<(Var, Var, Var)> {
            let q = filter_block(tape, x, &p.encoder.query.bind(bound), act, eps)?;
            let k = filter_block(tape, x, &p.encoder.key.bind(bound), act, eps)?;
            let v = filter_block(tape, x, &p.encoder.value.bind(bound), act, eps)?;
            let (q, k, v) = (tokens(tape, q)?, tokens(tape, k)?, tokens(tape, v)?);
            let a = self_attention(tape, q, k)?;
            Ok((q, a, v))
        };
        let (q_h, a_h, v_h) = encode(tape, h_in, &sp.hsi)?;
        let (q_l, a_l, v_l) = encode(tape, l_in, &sp.lidar)?;

        // Each stream's attention weights the other stream's values.
        let dec_h = cross_decode(tape, a_h, v_l)?;
        let dec_l = cross_decode(tape, a_l, v_h)?;
        let out_h = cross_out(tape, dec_h, q_h, bound[sp.hsi.decoder.gamma.0], bound[sp.hsi.decoder.beta.0], eps)?;
        let out_l = cross_out(tape, dec_l, q_l, bound[sp.lidar.decoder.gamma.0], bound[sp.lidar.decoder.beta.0], eps)?;
        Ok(StackOutput {
            hsi: untokens(tape, out_h, side)?,
            lidar: untokens(tape, out_l, side)?,
            attention: [a_h, a_l],
        })
    }

    fn check_patch(&self, t: &Tensor, channels: usize) -> Result<()> {
        let p = self.config.patch_size;
        if t.shape() != [p, p, channels] {
            return Err(mismatch("patch", t.shape(), &[p, p, channels]));
        }
        Ok(())
    }

    /// Full forward pass on one patch pair, recorded on `tape`. Dropout is
    /// active only when `training` is set.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        hsi: &Tensor,
        lidar: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        self.check_patch(hsi, self.config.hsi_channels)?;
        self.check_patch(lidar, self.config.lidar_channels)?;
        let bound = tape.bind(&self.params);
        let mut h = tape.leaf(hsi);
        let mut l = tape.leaf(lidar);
        let mut stacks = Vec::with_capacity(self.stacks.len());
        let mut maps = Vec::with_capacity(2 * self.stacks.len());
        for k in 0..self.stacks.len() {
            let out = self.stack_forward(tape, &bound, k, h, l)?;
            maps.push(out.hsi);
            maps.push(out.lidar);
            stacks.push(out);
            h = out.hsi;
            l = out.lidar;
        }
        let fused = tape.concat_channels(&maps)?;
        let features = tape.global_avg_pool(fused)?;
        let dropped = tape.dropout(features, self.config.dropout_rate, training, rng)?;
        let logits = tape.dense(dropped, bound[self.head.dense_w.0], bound[self.head.dense_b.0])?;
        let probs = tape.softmax(logits)?;
        Ok(ForwardTrace { probs, features, stacks })
    }

    /// Class probabilities in inference mode.
    pub fn predict(&self, hsi: &Tensor, lidar: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        // Dropout is off in inference, so the generator is never drawn from.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = self.forward(&mut tape, hsi, lidar, false, &mut rng)?;
        Ok(tape.value(trace.probs).to_vec())
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_stacks: 2,
            embed_dim: 4,
            patch_size: 5,
            hsi_channels: 6,
            lidar_channels: 1,
            n_classes: 3,
            dropout_rate: 0.5,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn patch(p: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[p, p, c], (0..p * p * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn count_matches_allocation() {
        let m = FusionModel::new(tiny()).unwrap();
        assert_eq!(param_count(m.config()), m.params().numel());
        assert!(m.params().iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn inference_is_deterministic_and_normalized() {
        let m = FusionModel::new(tiny()).unwrap();
        let (h, l) = (patch(5, 6, 1), patch(5, 1, 2));
        let a = m.predict(&h, &l).unwrap();
        let b = m.predict(&h, &l).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn rejects_wrong_patch_shape() {
        let m = FusionModel::new(tiny()).unwrap();
        assert!(m.predict(&patch(5, 5, 1), &patch(5, 1, 2)).is_err());
        assert!(m.predict(&patch(7, 6, 1), &patch(7, 1, 2)).is_err());
    }

    #[test]
    fn from_parts_round_trip_and_rejection() {
        let m = FusionModel::new(tiny()).unwrap();
        let again = FusionModel::from_parts(m.config().clone(), m.params().clone()).unwrap();
        assert_eq!(again, m);
        let other = ModelConfig { embed_dim: 5, ..tiny() };
        assert!(FusionModel::from_parts(other, m.params().clone()).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
