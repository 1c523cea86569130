//! Dual reconstruction loss, the SGD loop, and the ablation drivers.
//!
//! Each sample contributes `‖ε_tgt − f(z_t^tgt, t, c, src)‖²` plus
//! `w · ‖ε_src − f(z_t^src, t, c, src)‖²`, where the two latents are the
//! target and the source image noised at the same `t` with independent noise.
//! The batch loss is the mean over samples.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::dataset::EditSample;
use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};
use crate::eval::{eval_report, Embedder, EvalReport, MethodOutputs, RankingBallot};
use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::model::{EditModel, ModelConfig, NoisePredictor};
use crate::moe::GatePooling;
use crate::rng::{normal_tensor, stream};
use crate::tensor::Tensor;

pub const DEFAULT_W: f64 = 0.5;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub w: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub moe_enabled: bool,
    pub gate_pooling: GatePooling,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w: DEFAULT_W,
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: 1000,
            seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            moe_enabled: true,
            gate_pooling: GatePooling::None,
            freeze_encoder: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("w must be finite and nonnegative, got {}", self.w)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// `model` with this run's architectural switches applied.
    pub fn apply(&self, mut model: ModelConfig) -> ModelConfig {
        model.moe_enabled = self.moe_enabled;
        model.moe.pooling = self.gate_pooling;
        model.freeze_encoder = self.freeze_encoder;
        model
    }
}

/// Random quantities drawn for one sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub eps_tgt: Tensor,
    pub eps_src: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<'a> {
    pub samples: Vec<&'a EditSample>,
    pub draws: Vec<Draw>,
}

impl<'a> TrainingBatch<'a> {
    /// Batch for step `step`: sample indices, timesteps and noise all come
    /// from stream `step` of `seed`.
    pub fn draw(dataset: &[&'a EditSample], timesteps: usize, batch_size: usize, seed: u64, step: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Input("training dataset is empty".into()));
        }
        let mut rng = stream(seed, step);
        let mut samples = Vec::with_capacity(batch_size);
        let mut draws = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let s = dataset[rng.gen_range(0..dataset.len())];
            let shape = s.tgt_image.tensor().shape().to_vec();
            let t = rng.gen_range(1..=timesteps);
            let eps_tgt = normal_tensor(&mut rng, &shape);
            let eps_src = normal_tensor(&mut rng, &shape);
            samples.push(s);
            draws.push(Draw { t, eps_tgt, eps_src });
        }
        Ok(Self { samples, draws })
    }

    /// Pairs explicit samples with explicit draws.
    pub fn from_parts(samples: Vec<&'a EditSample>, draws: Vec<Draw>) -> Result<Self> {
        if samples.is_empty() || samples.len() != draws.len() {
            return Err(Error::Input(format!("{} samples and {} draws", samples.len(), draws.len())));
        }
        Ok(Self { samples, draws })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Recorded batch loss plus the batch means of both terms.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub total: Var,
    pub term1: f64,
    pub term2: f64,
}

fn check_finite(v: f64, what: &str, id: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is {v} for sample {id}")))
    }
}

/// Per-sample `(term1, term2)` vars.
fn terms<M: NoisePredictor>(
    tape: &mut Tape<'_>,
    model: &M,
    batch: &TrainingBatch<'_>,
    with_source: bool,
) -> Result<Vec<(Var, Option<Var>)>> {
    let schedule = model.schedule();
    let mut out = Vec::with_capacity(batch.len());
    for (s, d) in batch.samples.iter().zip(&batch.draws) {
        let cond = model.condition(tape, &s.instruction)?;
        let src = tape.constant(s.src_image.tensor().clone());

        let z_tgt = tape.constant(schedule.forward_noise(s.tgt_image.tensor(), d.t, &d.eps_tgt)?);
        let pred_tgt = model.predict(tape, z_tgt, d.t, cond, src)?;
        let eps_tgt = tape.constant(d.eps_tgt.clone());
        let term1 = tape.mse(eps_tgt, pred_tgt)?;
        check_finite(tape.value(term1).item(), "target term", &s.id)?;

        let term2 = if with_source {
            let z_src = tape.constant(schedule.forward_noise(s.src_image.tensor(), d.t, &d.eps_src)?);
            let pred_src = model.predict(tape, z_src, d.t, cond, src)?;
            let eps_src = tape.constant(d.eps_src.clone());
            let term2 = tape.mse(eps_src, pred_src)?;
            check_finite(tape.value(term2).item(), "source term", &s.id)?;
            Some(term2)
        } else {
            None
        };
        out.push((term1, term2));
    }
    Ok(out)
}

fn batch_mean(tape: &mut Tape<'_>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64))
}

/// Records the two-term loss on `tape`.
pub fn compute_loss<M: NoisePredictor>(tape: &mut Tape<'_>, model: &M, batch: &TrainingBatch<'_>, w: f64) -> Result<Loss> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let terms = terms(tape, model, batch, true)?;
    let mut per_sample = Vec::with_capacity(terms.len());
    let (mut sum1, mut sum2) = (0.0, 0.0);
    for &(t1, t2) in &terms {
        let t2 = t2.expect("source term requested");
        sum1 += tape.value(t1).item();
        sum2 += tape.value(t2).item();
        let weighted = tape.scale(t2, w);
        per_sample.push(tape.add(t1, weighted)?);
    }
    let total = batch_mean(tape, &per_sample)?;
    let n = batch.len() as f64;
    Ok(Loss {
        total,
        term1: sum1 / n,
        term2: sum2 / n,
    })
}

/// Target-only diffusion loss over the same batch.
pub fn single_term_loss<M: NoisePredictor>(tape: &mut Tape<'_>, model: &M, batch: &TrainingBatch<'_>) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let terms: Vec<Var> = terms(tape, model, batch, false)?.into_iter().map(|(t1, _)| t1).collect();
    batch_mean(tape, &terms)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub term1: f64,
    pub term2: f64,
    pub total: f64,
}

/// Everything needed to continue a run: parameters, configs, position.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: EditModel,
    pub train: TrainConfig,
    /// Number of completed steps.
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: EditModel,
    config: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = EditModel::new(config.apply(model_config), config.seed)?;
        Ok(Self { model, config, step: 0 })
    }

    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.train.validate()?;
        Ok(Self {
            model: checkpoint.model,
            config: checkpoint.train,
            step: checkpoint.step,
        })
    }

    pub fn model(&self) -> &EditModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config,
            step: self.step,
        }
    }

    pub fn into_model(self) -> EditModel {
        self.model
    }

    /// One SGD step on the batch for the current step index.
    pub fn train_step(&mut self, dataset: &[&EditSample]) -> Result<LossRecord> {
        let batch = TrainingBatch::draw(
            dataset,
            self.model.config().timesteps,
            self.config.batch_size,
            self.config.seed,
            self.step,
        )?;
        let (record, grads) = {
            let mut tape = Tape::new(self.model.store());
            let loss = compute_loss(&mut tape, &self.model, &batch, self.config.w).map_err(|e| at_step(e, self.step))?;
            let total = tape.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!("loss is {total} at step {}", self.step)));
            }
            let record = LossRecord {
                step: self.step,
                term1: loss.term1,
                term2: loss.term2,
                total,
            };
            (record, tape.backward(loss.total)?)
        };
        let store = self.model.store_mut();
        store.accumulate(&grads)?;
        store.sgd_step(self.config.learning_rate);
        store.zero_grad();
        self.step += 1;
        Ok(record)
    }

    /// Runs until `config.steps` steps are complete, feeding each record to
    /// `on_step`.
    pub fn run(&mut self, dataset: &[&EditSample], mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut curve = Vec::new();
        while self.step < self.config.steps {
            let r = self.train_step(dataset)?;
            on_step(&r);
            curve.push(r);
        }
        Ok(curve)
    }
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} at step {step}")),
        other => other,
    }
}

/// Trains a fresh model to completion.
pub fn train(model_config: ModelConfig, config: TrainConfig, dataset: &[&EditSample]) -> Result<(Checkpoint, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let mut trainer = Trainer::new(model_config, config)?;
    let curve = trainer.run(dataset, |_| {})?;
    Ok((trainer.checkpoint(), curve))
}

/// Mean of the first and last `window` totals.
pub fn smoothed_endpoints(curve: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if window == 0 || curve.len() < window {
        return None;
    }
    let mean = |rs: &[LossRecord]| rs.iter().map(|r| r.total).sum::<f64>() / rs.len() as f64;
    Some((mean(&curve[..window]), mean(&curve[curve.len() - window..])))
}

/// How edits are sampled during evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { steps: 10, seed: 0 }
    }
}

/// Edits every probe sample; probe `i` uses sampler seed `seed + i`.
pub fn edit_all(model: &EditModel, probes: &[&EditSample], sampling: SamplingConfig) -> Result<Vec<ImageTensor>> {
    probes
        .iter()
        .enumerate()
        .map(|(i, s)| model.sample(&s.instruction, &s.src_image, sampling.steps, sampling.seed.wrapping_add(i as u64)))
        .collect()
}

/// Mean squared distance of outputs to their sources, and the derived
/// fidelity `1 − msd / 4` (higher is closer; 4 is the largest possible
/// distance for images in `[-1, 1]`).
pub fn source_fidelity(outputs: &[ImageTensor], probes: &[&EditSample]) -> Result<(f64, f64)> {
    if outputs.is_empty() || outputs.len() != probes.len() {
        return Err(Error::Input(format!("{} outputs for {} probes", outputs.len(), probes.len())));
    }
    let mut total = 0.0;
    for (o, s) in outputs.iter().zip(probes) {
        total += o.mean_squared_distance(&s.src_image)?;
    }
    let msd = total / outputs.len() as f64;
    Ok((msd, 1.0 - msd / 4.0))
}

#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub w: f64,
    pub checkpoint: Checkpoint,
    pub final_loss: f64,
    pub outputs: Vec<ImageTensor>,
    pub msd: f64,
    pub fidelity: f64,
}

/// One model per `w`, all from the same seed, each editing the same probes.
pub fn ablate_w(
    ws: &[f64],
    model_config: ModelConfig,
    base: TrainConfig,
    dataset: &[&EditSample],
    probes: &[&EditSample],
    sampling: SamplingConfig,
) -> Result<Vec<AblationEntry>> {
    if ws.is_empty() {
        return Err(Error::Config("no w values to sweep".into()));
    }
    if probes.is_empty() {
        return Err(Error::Input("no probe samples".into()));
    }
    ws.iter()
        .map(|&w| {
            let config = TrainConfig { w, ..base };
            let (checkpoint, curve) = train(model_config, config, dataset)?;
            let outputs = edit_all(&checkpoint.model, probes, sampling)?;
            let (msd, fidelity) = source_fidelity(&outputs, probes)?;
            Ok(AblationEntry {
                w,
                final_loss: curve.last().map_or(f64::NAN, |r| r.total),
                checkpoint,
                outputs,
                msd,
                fidelity,
            })
        })
        .collect()
}

/// Finite-difference check of the full loss against every parameter of a
/// freshly initialised model, on one drawn batch.
pub fn gradient_check(
    model_config: ModelConfig,
    dataset: &[&EditSample],
    batch_size: usize,
    w: f64,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let model = EditModel::new(model_config, seed)?;
    let batch = TrainingBatch::draw(dataset, model_config.timesteps, batch_size, seed, 0)?;
    let ids: Vec<_> = model.store().ids().collect();
    let mut store = model.store().clone();
    finite_difference_check(&mut store, &ids, step, |tape| Ok(compute_loss(tape, &model, &batch, w)?.total))
}

pub const WITH_MOE: &str = "w/ MOE";
pub const WITHOUT_MOE: &str = "w/o MOE";

#[derive(Debug, Clone)]
pub struct MoeComparison {
    pub report: EvalReport,
    pub with_moe: Checkpoint,
    pub without_moe: Checkpoint,
}

/// Trains the same setup with the controller on and bypassed, edits the
/// evaluation samples with both, and scores them.
pub fn compare_moe(
    model_config: ModelConfig,
    base: TrainConfig,
    dataset: &[&EditSample],
    eval_samples: &[&EditSample],
    sampling: SamplingConfig,
    embedder: &dyn Embedder,
    ballots: Option<&[RankingBallot]>,
) -> Result<MoeComparison> {
    let mut arms = Vec::with_capacity(2);
    let mut outputs = Vec::with_capacity(2);
    for (name, enabled) in [(WITH_MOE, true), (WITHOUT_MOE, false)] {
        let (ckpt, _) = train(
            model_config,
            TrainConfig {
                moe_enabled: enabled,
                ..base
            },
            dataset,
        )?;
        let images = edit_all(&ckpt.model, eval_samples, sampling)?;
        let images: BTreeMap<String, ImageTensor> = eval_samples.iter().map(|s| s.id.clone()).zip(images).collect();
        outputs.push(MethodOutputs { name: name.into(), images });
        arms.push(ckpt);
    }
    let report = eval_report(&outputs, eval_samples, embedder, ballots)?;
    let without_moe = arms.pop().expect("two arms");
    let with_moe = arms.pop().expect("two arms");
    Ok(MoeComparison {
        report,
        with_moe,
        without_moe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_routing_corpus, TemplateCaptionClient};
    use crate::diffusion::DiffusionSchedule;
    use crate::text::Instruction;

    fn corpus(n: usize, side: usize) -> Vec<EditSample> {
        synth_routing_corpus(n, side, 9, &TemplateCaptionClient).unwrap()
    }

    /// Returns one of the batch's own noise draws, chosen by the noisy input.
    struct Oracle<'a> {
        schedule: DiffusionSchedule,
        batch: &'a TrainingBatch<'a>,
        source_call_returns_target: bool,
    }

    impl NoisePredictor for Oracle<'_> {
        fn schedule(&self) -> &DiffusionSchedule {
            &self.schedule
        }

        fn condition(&self, tape: &mut Tape<'_>, _: &Instruction) -> Result<Var> {
            Ok(tape.constant(Tensor::zeros(&[1, 1])))
        }

        fn predict(&self, tape: &mut Tape<'_>, z_t: Var, t: usize, _: Var, _: Var) -> Result<Var> {
            let z = tape.value(z_t).clone();
            for (s, d) in self.batch.samples.iter().zip(&self.batch.draws) {
                if d.t != t {
                    continue;
                }
                if self.schedule.forward_noise(s.tgt_image.tensor(), t, &d.eps_tgt)? == z {
                    return Ok(tape.constant(d.eps_tgt.clone()));
                }
                if self.schedule.forward_noise(s.src_image.tensor(), t, &d.eps_src)? == z {
                    let e = if self.source_call_returns_target { &d.eps_tgt } else { &d.eps_src };
                    return Ok(tape.constant(e.clone()));
                }
            }
            Err(Error::Oracle("unrecognised latent".into()))
        }
    }

    #[test]
    fn oracle_losses() {
        let data = corpus(2, 8);
        let refs: Vec<&EditSample> = data.iter().collect();
        let batch = TrainingBatch::draw(&refs, 50, 4, 1, 0).unwrap();
        let exact = Oracle {
            schedule: DiffusionSchedule::default(),
            batch: &batch,
            source_call_returns_target: false,
        };
        let mut tape = Tape::standalone();
        let loss = compute_loss(&mut tape, &exact, &batch, 0.5).unwrap();
        assert_eq!(tape.value(loss.total).item(), 0.0);

        let lazy = Oracle {
            source_call_returns_target: true,
            ..exact
        };
        let w = 0.7;
        let mut tape = Tape::standalone();
        let loss = compute_loss(&mut tape, &lazy, &batch, w).unwrap();
        let mut expected = 0.0;
        for d in &batch.draws {
            let diff = d.eps_src.sub(&d.eps_tgt).unwrap();
            expected += diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
        }
        expected = w * expected / batch.len() as f64;
        assert!((tape.value(loss.total).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn batches_are_reproducible_per_step() {
        let data = corpus(2, 8);
        let refs: Vec<&EditSample> = data.iter().collect();
        let a = TrainingBatch::draw(&refs, 50, 4, 3, 7).unwrap();
        let b = TrainingBatch::draw(&refs, 50, 4, 3, 7).unwrap();
        let c = TrainingBatch::draw(&refs, 50, 4, 3, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.draws, c.draws);
        for d in &a.draws {
            assert!((1..=50).contains(&d.t));
            assert_ne!(d.eps_src, d.eps_tgt);
        }
        assert!(TrainingBatch::draw(&[], 50, 4, 3, 7).is_err());
    }

    #[test]
    fn config_errors() {
        let zero = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(Trainer::new(ModelConfig::small(), zero), Err(Error::Config(_))));
        let negative = TrainConfig {
            w: -0.1,
            ..Default::default()
        };
        assert!(matches!(negative.validate(), Err(Error::Config(_))));
        let data = corpus(1, 8);
        let refs: Vec<&EditSample> = data.iter().collect();
        let err = ablate_w(
            &[],
            ModelConfig::small(),
            TrainConfig::default(),
            &refs,
            &refs,
            SamplingConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(matches!(
            train(ModelConfig::small(), TrainConfig::default(), &[]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn disabled_controller_never_moves() {
        let data = corpus(2, 8);
        let refs: Vec<&EditSample> = data.iter().collect();
        let config = TrainConfig {
            steps: 3,
            moe_enabled: false,
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut trainer = Trainer::new(ModelConfig::small(), config).unwrap();
        let before = trainer.model().store().clone();
        trainer.run(&refs, |_| {}).unwrap();
        let after = trainer.model().store();
        for id in trainer.model().controller().param_ids() {
            assert_eq!(before.value(id), after.value(id));
        }
        let moved = trainer
            .model()
            .denoiser()
            .param_ids()
            .iter()
            .any(|&id| before.value(id) != after.value(id));
        assert!(moved);
    }

    #[test]
    fn fidelity_of_identity_outputs() {
        let data = corpus(1, 8);
        let refs: Vec<&EditSample> = data.iter().collect();
        let outs: Vec<ImageTensor> = data.iter().map(|s| s.src_image.clone()).collect();
        assert_eq!(source_fidelity(&outs, &refs).unwrap(), (0.0, 1.0));
    }
}
