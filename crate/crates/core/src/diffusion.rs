//! Pixel-space toy diffusion: schedule, forward noising, the conditional
//! denoiser, a deterministic DDIM sampler and cross-attention heatmaps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng::{init_weight, seeded};
use crate::tensor::Tensor;
use crate::text::timestep_embedding;

/// Linear beta schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.2;

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alphas_bar = Vec::with_capacity(steps);
        let mut running = 1.0;
        for b in &betas {
            running *= 1.0 - b;
            alphas_bar.push(running);
        }
        Ok(Self { betas, alphas_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas_bar[t - 1])
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range {
                what: "timestep",
                value: t as i64,
                lo: 1,
                hi: self.steps() as i64,
            });
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · eps`.
    pub fn forward_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        noise_with_alpha_bar(z0, eps, self.alpha_bar(t)?)
    }

    /// Decreasing timesteps visited by a `steps`-step sampler, from `T` down.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::Range {
                what: "sampling steps",
                value: steps as i64,
                lo: 1,
                hi: total as i64,
            });
        }
        let mut ts: Vec<usize> = (1..=steps).rev().map(|k| (k * total / steps).max(1)).collect();
        ts.dedup();
        Ok(ts)
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

/// Forward noising at an explicit `ᾱ`.
pub fn noise_with_alpha_bar(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (libm::sqrt(alpha_bar), libm::sqrt(1.0 - alpha_bar));
    z0.zip_with(eps, "forward_noise", |z, e| a * z + b * e)
}

/// A `[3, h, w]` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    /// Wraps a `[3, h, w]` tensor, clamping every value into `[-1, 1]`.
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 3 {
            return Err(dim_err("image", t.shape(), &[3, 0, 0]));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite image".into()));
        }
        Ok(Self(t.map(|v| v.clamp(-1.0, 1.0))))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(core::iter::repeat_n(c, height * width));
        }
        Self::new(Tensor::new(&[3, height, width], data).expect("positive extents")).expect("finite")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(Tensor::new(&[3, height, width], data).expect("positive extents")).expect("finite pixels")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Mean of the three channels at one pixel.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let p = self.pixel(y, x);
        (p[0] + p[1] + p[2]) / 3.0
    }

    /// Mean squared distance to another image of the same size.
    pub fn mean_squared_distance(&self, other: &ImageTensor) -> Result<f64> {
        let d = self.0.sub(&other.0)?;
        Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    /// Image side length.
    pub image: usize,
    /// Hidden channel count of both conv blocks.
    pub channels: usize,
    /// Width of the condition tokens.
    pub cond_dim: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn with_cond_dim(cond_dim: usize) -> Self {
        Self {
            image: 16,
            channels: 16,
            cond_dim,
            attn_dim: 16,
            time_dim: 16,
        }
    }
}

/// `f(z_t, t, c, src)`: conv block, cross-attention onto `c`, conv block,
/// output conv. The source image enters by channel concatenation.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    conv1: ParamId,
    conv1_bias: ParamId,
    time1: ParamId,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    conv2: ParamId,
    conv2_bias: ParamId,
    time2: ParamId,
    out: ParamId,
    out_bias: ParamId,
}

/// Vars recorded by one denoiser pass.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserOutput {
    /// Predicted noise, shaped like `z_t`.
    pub eps: Var,
    /// Cross-attention weights `[h·w, L]`.
    pub attention: Var,
}

const NAMES: [&str; 11] = [
    "denoiser.conv1",
    "denoiser.conv1_bias",
    "denoiser.time1",
    "denoiser.query",
    "denoiser.key",
    "denoiser.value",
    "denoiser.conv2",
    "denoiser.conv2_bias",
    "denoiser.time2",
    "denoiser.out",
    "denoiser.out_bias",
];

impl Denoiser {
    pub fn new(store: &mut ParamStore, config: DenoiserConfig, seed: u64) -> Result<Self> {
        let DenoiserConfig {
            image,
            channels: c,
            cond_dim: d,
            attn_dim: a,
            time_dim: dt,
        } = config;
        if image == 0 || c == 0 || d == 0 || a == 0 || dt == 0 {
            return Err(Error::Config(format!("bad denoiser config {config:?}")));
        }
        let mut rng = seeded(seed);
        let shapes: [Vec<usize>; 11] = [
            vec![c, 6, 3, 3],
            vec![c],
            vec![dt, c],
            vec![c, a],
            vec![d, a],
            vec![d, c],
            vec![c, c, 3, 3],
            vec![c],
            vec![dt, c],
            vec![3, c, 3, 3],
            vec![3],
        ];
        let fan_in = [6 * 9, 0, dt, c, d, d, c * 9, 0, dt, c * 9, 0];
        let mut ids = [ParamId(0); 11];
        for (k, (name, shape)) in NAMES.iter().zip(&shapes).enumerate() {
            let value = if fan_in[k] == 0 {
                Tensor::zeros(shape)
            } else {
                init_weight(&mut rng, shape, fan_in[k])
            };
            ids[k] = store.add(*name, value)?;
        }
        Ok(Self::from_ids(config, ids))
    }

    pub fn attach(store: &ParamStore, config: DenoiserConfig) -> Result<Self> {
        let mut ids = [ParamId(0); 11];
        for (slot, name) in ids.iter_mut().zip(NAMES) {
            *slot = store.id_of(name).ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        }
        Ok(Self::from_ids(config, ids))
    }

    fn from_ids(config: DenoiserConfig, ids: [ParamId; 11]) -> Self {
        Self {
            config,
            conv1: ids[0],
            conv1_bias: ids[1],
            time1: ids[2],
            query: ids[3],
            key: ids[4],
            value: ids[5],
            conv2: ids[6],
            conv2_bias: ids[7],
            time2: ids[8],
            out: ids[9],
            out_bias: ids[10],
        }
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn param_ids(&self) -> [ParamId; 11] {
        [
            self.conv1,
            self.conv1_bias,
            self.time1,
            self.query,
            self.key,
            self.value,
            self.conv2,
            self.conv2_bias,
            self.time2,
            self.out,
            self.out_bias,
        ]
    }

    /// Records the denoiser on the tape.
    pub fn forward(&self, tape: &mut Tape<'_>, z_t: Var, t: usize, cond: Var, src: Var) -> Result<DenoiserOutput> {
        let (s, c) = (self.config.image, self.config.channels);
        let image_shape = [3, s, s];
        for v in [z_t, src] {
            if tape.shape(v) != image_shape {
                return Err(dim_err("denoise", tape.shape(v), &image_shape));
            }
        }
        let cond_shape = tape.shape(cond).to_vec();
        if cond_shape.len() != 2 || cond_shape[1] != self.config.cond_dim {
            return Err(dim_err("denoise", &cond_shape, &[0, self.config.cond_dim]));
        }
        if t == 0 {
            return Err(Error::Range {
                what: "timestep",
                value: 0,
                lo: 1,
                hi: i64::MAX,
            });
        }

        let temb = timestep_embedding(t, self.config.time_dim).reshape(&[1, self.config.time_dim])?;
        let temb = tape.constant(temb);

        let input = tape.concat(&[z_t, src])?;
        let h = self.conv_block(tape, input, self.conv1, self.conv1_bias, self.time1, temb)?;

        // spatial positions attend over condition tokens
        let flat = tape.reshape(h, &[c, s * s])?;
        let rows = tape.transpose(flat)?;
        let (wq, wk, wv) = (tape.param(self.query), tape.param(self.key), tape.param(self.value));
        let q = tape.matmul(rows, wq)?;
        let k = tape.matmul(cond, wk)?;
        let v = tape.matmul(cond, wv)?;
        let scores = tape.matmul_bt(q, k)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(self.config.attn_dim as f64));
        let attention = tape.softmax_rows(scores);
        let attended = tape.matmul(attention, v)?;
        let rows = tape.add(rows, attended)?;
        let cols = tape.transpose(rows)?;
        let h_attn = tape.reshape(cols, &[c, s, s])?;

        let h2 = self.conv_block(tape, h_attn, self.conv2, self.conv2_bias, self.time2, temb)?;
        let h2 = tape.add(h2, h_attn)?;

        let (wo, bo) = (tape.param(self.out), tape.param(self.out_bias));
        let eps = tape.conv3x3(h2, wo)?;
        let eps = tape.add_channel(eps, bo)?;
        Ok(DenoiserOutput { eps, attention })
    }

    fn conv_block(&self, tape: &mut Tape<'_>, x: Var, kernel: ParamId, bias: ParamId, time: ParamId, temb: Var) -> Result<Var> {
        let c = self.config.channels;
        let (k, b, wt) = (tape.param(kernel), tape.param(bias), tape.param(time));
        let h = tape.conv3x3(x, k)?;
        let h = tape.add_channel(h, b)?;
        let shift = tape.matmul(temb, wt)?;
        let shift = tape.reshape(shift, &[c])?;
        let h = tape.add_channel(h, shift)?;
        Ok(tape.relu(h))
    }
}

/// Per-token cross-attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeatmap {
    pub tokens: usize,
    pub height: usize,
    pub width: usize,
    /// `[tokens, height, width]`, row-major.
    pub maps: Vec<f64>,
}

impl AttentionHeatmap {
    /// From attention weights `[h·w, L]`.
    pub fn from_attention(attn: &Tensor, height: usize, width: usize) -> Result<Self> {
        if attn.shape().len() != 2 || attn.shape()[0] != height * width {
            return Err(dim_err("heatmap", attn.shape(), &[height * width]));
        }
        let t = attn.transpose()?;
        Ok(Self {
            tokens: attn.shape()[1],
            height,
            width,
            maps: t.into_data(),
        })
    }

    pub fn map(&self, token: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.maps[token * n..(token + 1) * n]
    }

    /// Largest deviation from 1 of the per-position sums over tokens.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = self.height * self.width;
        (0..n)
            .map(|p| ((0..self.tokens).map(|k| self.maps[k * n + p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Deterministic DDIM (η = 0) from `x_t_start` over the given decreasing
/// timesteps. `predict(x_t, t)` returns the noise estimate.
pub fn ddim_sample<F>(schedule: &DiffusionSchedule, timesteps: &[usize], start: Tensor, mut predict: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut x = start;
    for (i, &t) in timesteps.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match timesteps.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let eps = predict(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(dim_err("ddim", eps.shape(), x.shape()));
        }
        let (sa, sb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        let (pa, pb) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
        x = x.zip_with(&eps, "ddim", |xv, ev| {
            let x0 = (xv - sb * ev) / sa;
            pa * x0 + pb * ev
        })?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sampler diverged at t = {t}")));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alphas_bar()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule() {
        let s = DiffusionSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alphas_bar()[0] - 0.9).abs() < 1e-15);
        assert!((s.alphas_bar()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn schedule_ranges_rejected() {
        assert!(matches!(DiffusionSchedule::linear(10, 0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(DiffusionSchedule::linear(10, 0.0, 0.2), Err(Error::Config(_))));
        assert!(matches!(DiffusionSchedule::linear(10, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(DiffusionSchedule::linear(0, 0.1, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn default_schedule_is_strictly_decreasing() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 50);
        assert!(s.alphas_bar().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alphas_bar().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn noising_limits() {
        let mut rng = seeded(1);
        let z0 = normal_tensor(&mut rng, &[3, 4, 4]);
        let eps = normal_tensor(&mut rng, &[3, 4, 4]);
        assert_eq!(noise_with_alpha_bar(&z0, &eps, 1.0).unwrap(), z0);
        assert_eq!(noise_with_alpha_bar(&z0, &eps, 0.0).unwrap(), eps);
        let half = noise_with_alpha_bar(&Tensor::ones(&[3, 2, 2]), &Tensor::zeros(&[3, 2, 2]), 0.25).unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn timestep_out_of_range() {
        let s = DiffusionSchedule::default();
        let z = Tensor::zeros(&[3, 2, 2]);
        assert!(matches!(s.forward_noise(&z, 0, &z), Err(Error::Range { .. })));
        assert!(matches!(s.forward_noise(&z, 51, &z), Err(Error::Range { .. })));
        assert!(matches!(s.sampling_timesteps(51), Err(Error::Range { .. })));
    }

    #[test]
    fn sampling_timesteps_cover_the_range() {
        let s = DiffusionSchedule::default();
        let full = s.sampling_timesteps(50).unwrap();
        assert_eq!(full.len(), 50);
        assert_eq!((full[0], full[49]), (50, 1));
        let short = s.sampling_timesteps(5).unwrap();
        assert_eq!(short, vec![50, 40, 30, 20, 10]);
    }

    #[test]
    fn image_is_clamped() {
        let img = ImageTensor::new(Tensor::new(&[3, 1, 1], vec![2.0, -3.0, 0.5]).unwrap()).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, -1.0, 0.5]);
        assert!(ImageTensor::new(Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn single_token_heatmap_is_all_ones() {
        let attn = Tensor::ones(&[4, 1]);
        let h = AttentionHeatmap::from_attention(&attn, 2, 2).unwrap();
        assert_eq!(h.map(0), &[1.0; 4]);
        assert_eq!(h.max_row_sum_error(), 0.0);
    }
}
