//! The full editing model: text encoder → MoE controller → denoiser.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::diffusion::{ddim_sample, AttentionHeatmap, Denoiser, DenoiserConfig, DenoiserOutput, DiffusionSchedule, ImageTensor};
use crate::error::{Error, Result};
use crate::moe::{GatePooling, MoeConfig, MoeController};
use crate::rng::{normal_tensor, seeded};
use crate::tensor::Tensor;
use crate::text::{EncoderConfig, Instruction, TextEncoder, TextFeature};

/// Dimensions and switches that fix the model's parameter layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub moe: MoeConfig,
    pub denoiser: DenoiserConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// When false the condition is the raw text feature and the controller
    /// is bypassed.
    pub moe_enabled: bool,
    pub freeze_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            encoder,
            moe: MoeConfig::with_dim(encoder.dim),
            denoiser: DenoiserConfig::with_cond_dim(encoder.dim),
            timesteps: crate::diffusion::DEFAULT_STEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            moe_enabled: true,
            freeze_encoder: true,
        }
    }
}

impl ModelConfig {
    /// A small instance for fast experiments: 8×8 images, width-16 text.
    pub fn small() -> Self {
        let encoder = EncoderConfig {
            vocab: 512,
            dim: 16,
            max_len: 8,
        };
        Self {
            encoder,
            moe: MoeConfig::with_dim(16),
            denoiser: DenoiserConfig {
                image: 8,
                channels: 8,
                cond_dim: 16,
                attn_dim: 8,
                time_dim: 8,
            },
            ..Self::default()
        }
    }

    /// A few thousand parameters, for exhaustive finite-difference checks:
    /// 4×4 images, width-8 text, 64-word vocabulary.
    pub fn tiny() -> Self {
        let encoder = EncoderConfig {
            vocab: 64,
            dim: 8,
            max_len: 6,
        };
        Self {
            encoder,
            moe: MoeConfig {
                hidden: 16,
                ..MoeConfig::with_dim(8)
            },
            denoiser: DenoiserConfig {
                image: 4,
                channels: 4,
                cond_dim: 8,
                attn_dim: 4,
                time_dim: 4,
            },
            ..Self::default()
        }
    }

    pub fn with_pooling(mut self, pooling: GatePooling) -> Self {
        self.moe.pooling = pooling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.moe.dim != self.encoder.dim || self.denoiser.cond_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "text width mismatch: encoder {}, controller {}, denoiser {}",
                self.encoder.dim, self.moe.dim, self.denoiser.cond_dim
            )));
        }
        DiffusionSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Anything that can condition on an instruction and predict noise; the
/// training loss is written against this so tests can substitute oracles.
pub trait NoisePredictor {
    fn schedule(&self) -> &DiffusionSchedule;

    /// Records the condition `c` for `y`.
    fn condition(&self, tape: &mut Tape<'_>, y: &Instruction) -> Result<Var>;

    /// Records `f(z_t, t, c, src)`.
    fn predict(&self, tape: &mut Tape<'_>, z_t: Var, t: usize, cond: Var, src: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct EditModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: TextEncoder,
    controller: MoeController,
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
}

impl EditModel {
    /// Fresh parameters. Each component draws from its own seed stream so
    /// that changing one component's size leaves the others unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new(&mut store, config.encoder, seed.wrapping_mul(3).wrapping_add(1))?;
        let controller = MoeController::new(&mut store, config.moe, seed.wrapping_mul(3).wrapping_add(2))?;
        let denoiser = Denoiser::new(&mut store, config.denoiser, seed.wrapping_mul(3).wrapping_add(3))?;
        Self::assemble(config, store, encoder, controller, denoiser)
    }

    /// Wraps parameters loaded from elsewhere; every expected name must exist.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let encoder = TextEncoder::attach(&store, config.encoder)?;
        let controller = MoeController::attach(&store, config.moe)?;
        let denoiser = Denoiser::attach(&store, config.denoiser)?;
        for p in store.iter() {
            let expected = shape_of(&config, &p.name);
            if expected.as_deref() != Some(p.value.shape()) {
                return Err(Error::State(format!(
                    "parameter {} has unexpected shape {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Self::assemble(config, store, encoder, controller, denoiser)
    }

    fn assemble(
        config: ModelConfig,
        mut store: ParamStore,
        encoder: TextEncoder,
        controller: MoeController,
        denoiser: Denoiser,
    ) -> Result<Self> {
        for id in encoder.param_ids() {
            store.set_frozen(id, config.freeze_encoder);
        }
        for id in controller.param_ids() {
            store.set_frozen(id, !config.moe_enabled);
        }
        for id in denoiser.param_ids() {
            store.set_frozen(id, false);
        }
        Ok(Self {
            schedule: config.schedule()?,
            config,
            store,
            encoder,
            controller,
            denoiser,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn controller(&self) -> &MoeController {
        &self.controller
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    /// Parameters an optimizer is allowed to move.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| !self.store.get(id).frozen).collect()
    }

    pub fn image_side(&self) -> usize {
        self.config.denoiser.image
    }

    pub fn encode(&self, y: &Instruction) -> Result<TextFeature> {
        self.encoder.encode_value(&self.store, y)
    }

    /// Condition `c` as a value.
    pub fn condition_value(&self, y: &Instruction) -> Result<TextFeature> {
        let mut tape = Tape::new(&self.store);
        let c = self.condition(&mut tape, y)?;
        TextFeature::new(tape.value(c).clone())
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let s = self.image_side();
        if img.height() != s || img.width() != s {
            return Err(Error::Dimension {
                op: "model image",
                left: img.tensor().shape().to_vec(),
                right: alloc::vec![3, s, s],
            });
        }
        Ok(())
    }

    /// Noise prediction as a value.
    pub fn denoise(&self, z_t: &Tensor, t: usize, cond: &TextFeature, src: &ImageTensor) -> Result<Tensor> {
        Ok(self.denoise_with_attention(z_t, t, cond, src)?.0)
    }

    fn denoise_with_attention(&self, z_t: &Tensor, t: usize, cond: &TextFeature, src: &ImageTensor) -> Result<(Tensor, Tensor)> {
        self.schedule.check_t(t)?;
        let mut tape = Tape::new(&self.store);
        let z = tape.constant(z_t.clone());
        let c = tape.constant(cond.tensor().clone());
        let s = tape.constant(src.tensor().clone());
        let DenoiserOutput { eps, attention } = self.denoiser.forward(&mut tape, z, t, c, s)?;
        Ok((tape.value(eps).clone(), tape.value(attention).clone()))
    }

    /// Deterministic DDIM edit of `src` following `y`.
    pub fn sample(&self, y: &Instruction, src: &ImageTensor, steps: usize, seed: u64) -> Result<ImageTensor> {
        self.check_image(src)?;
        let timesteps = self.schedule.sampling_timesteps(steps)?;
        let cond = self.condition_value(y)?;
        let start = normal_tensor(&mut seeded(seed), src.tensor().shape());
        let out = ddim_sample(&self.schedule, &timesteps, start, |x, t| self.denoise(x, t, &cond, src))?;
        ImageTensor::new(out)
    }

    /// Cross-attention maps of the denoiser for the given noisy input.
    pub fn extract_heatmap(&self, z_t: &Tensor, t: usize, y: &Instruction, src: &ImageTensor) -> Result<AttentionHeatmap> {
        self.check_image(src)?;
        let cond = self.condition_value(y)?;
        let (_, attn) = self.denoise_with_attention(z_t, t, &cond, src)?;
        AttentionHeatmap::from_attention(&attn, src.height(), src.width())
    }
}

impl NoisePredictor for EditModel {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn condition(&self, tape: &mut Tape<'_>, y: &Instruction) -> Result<Var> {
        let x = self.encoder.encode(tape, y)?;
        if self.config.moe_enabled {
            self.controller.forward(tape, x)
        } else {
            Ok(x)
        }
    }

    fn predict(&self, tape: &mut Tape<'_>, z_t: Var, t: usize, cond: Var, src: Var) -> Result<Var> {
        self.schedule.check_t(t)?;
        Ok(self.denoiser.forward(tape, z_t, t, cond, src)?.eps)
    }
}

/// Expected shape of a named parameter under `config`.
fn shape_of(config: &ModelConfig, name: &str) -> Option<Vec<usize>> {
    let (v, d) = (config.encoder.vocab, config.encoder.dim);
    let (h, n) = (config.moe.hidden, config.moe.experts);
    let dn = config.denoiser;
    let (c, a, dt) = (dn.channels, dn.attn_dim, dn.time_dim);
    let shape = match name {
        "encoder.embedding" => alloc::vec![v, d],
        "encoder.query" | "encoder.key" | "encoder.value" => alloc::vec![d, d],
        "moe.gate.weight" => alloc::vec![d, n],
        "moe.gate.bias" => alloc::vec![n],
        "denoiser.conv1" => alloc::vec![c, 6, 3, 3],
        "denoiser.conv1_bias" | "denoiser.conv2_bias" => alloc::vec![c],
        "denoiser.time1" | "denoiser.time2" => alloc::vec![dt, c],
        "denoiser.query" => alloc::vec![c, a],
        "denoiser.key" => alloc::vec![dn.cond_dim, a],
        "denoiser.value" => alloc::vec![dn.cond_dim, c],
        "denoiser.conv2" => alloc::vec![c, c, 3, 3],
        "denoiser.out" => alloc::vec![3, c, 3, 3],
        "denoiser.out_bias" => alloc::vec![3],
        other => {
            let rest = other.strip_prefix("moe.expert")?;
            let (idx, field) = rest.split_once('.')?;
            if idx.parse::<usize>().ok()? >= n {
                return None;
            }
            match field {
                "w1" => alloc::vec![d, h],
                "b1" => alloc::vec![h],
                "w2" => alloc::vec![h, d],
                "b2" => alloc::vec![d],
                _ => return None,
            }
        }
    };
    Some(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_denoiser_is_small() {
        let m = EditModel::new(ModelConfig::default(), 0).unwrap();
        let count: usize = m.denoiser().param_ids().iter().map(|&id| m.store().value(id).len()).sum();
        assert!(count <= 20_000, "{count}");
    }

    #[test]
    fn denoise_shape_and_determinism() {
        let m = EditModel::new(ModelConfig::default(), 4).unwrap();
        let y = Instruction::new("make it comic style").unwrap();
        let src = ImageTensor::filled(16, 16, [0.2, -0.1, 0.5]);
        let c = m.condition_value(&y).unwrap();
        let z = normal_tensor(&mut seeded(1), &[3, 16, 16]);
        let a = m.denoise(&z, 10, &c, &src).unwrap();
        let b = m.denoise(&z, 10, &c, &src).unwrap();
        assert_eq!(a.shape(), &[3, 16, 16]);
        assert_eq!(a, b);
        let wrong = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(m.denoise(&wrong, 10, &c, &src), Err(Error::Dimension { .. })));
    }

    #[test]
    fn round_trip_through_store() {
        let m = EditModel::new(ModelConfig::small(), 2).unwrap();
        let cfg = *m.config();
        let again = EditModel::from_store(cfg, m.store().clone()).unwrap();
        assert_eq!(again.store(), m.store());
        let mismatched = ModelConfig {
            moe: MoeConfig { experts: 2, ..cfg.moe },
            ..cfg
        };
        assert!(EditModel::from_store(mismatched, m.store().clone()).is_err());
    }

    #[test]
    fn sampling_is_reproducible_and_bounded() {
        let m = EditModel::new(ModelConfig::small(), 5).unwrap();
        let y = Instruction::new("add a sun into the sky").unwrap();
        let src = ImageTensor::filled(8, 8, [0.0, 0.0, 0.0]);
        let a = m.sample(&y, &src, 10, 3).unwrap();
        let b = m.sample(&y, &src, 10, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(m.sample(&y, &src, 51, 3), Err(Error::Range { .. })));
    }

    #[test]
    fn heatmap_is_row_stochastic() {
        let m = EditModel::new(ModelConfig::small(), 6).unwrap();
        let y = Instruction::new("turn it into sketch style").unwrap();
        let src = ImageTensor::filled(8, 8, [0.3, 0.3, 0.3]);
        let z = normal_tensor(&mut seeded(2), &[3, 8, 8]);
        let h = m.extract_heatmap(&z, 25, &y, &src).unwrap();
        assert_eq!(h.tokens, 6);
        assert!(h.max_row_sum_error() < 1e-9);
        assert!(h.maps.iter().all(|&v| v >= 0.0));
    }
}
