use moe_edit_core::dataset::{
    extract_condition, filter, synth_routing_corpus, ConditionMethod, FilterPolicy, Manifest, Scores, TemplateCaptionClient,
};
use moe_edit_core::diffusion::{ddim_sample, DiffusionSchedule, ImageTensor};
use moe_edit_core::eval::{clip_d, clip_t, cosine, directional_cosine, prefer_scores, Embedder, RankingBallot};
use moe_edit_core::model::{EditModel, ModelConfig};
use moe_edit_core::moe::{MoeConfig, MoeController};
use moe_edit_core::rng::{normal_tensor, seeded, uniform_tensor};
use moe_edit_core::text::{Instruction, TextFeature};
use moe_edit_core::training::{compute_loss, single_term_loss, TrainingBatch};
use moe_edit_core::{matmul, softmax, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

fn controller(seed: u64, d: usize) -> (ParamStore, MoeController) {
    let mut store = ParamStore::new();
    let c = MoeController::new(&mut store, MoeConfig::with_dim(d), seed).unwrap();
    (store, c)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_lands_on_the_simplex(v in prop::collection::vec(-50.0f64..50.0, 1..32)) {
        let p = softmax(&Tensor::vector(v)).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let [a, b, c] = [(); 3].map(|_| uniform_tensor(&mut rng, &[4, 4], -3.0, 3.0));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-9);
    }

    #[test]
    fn gate_weights_are_a_distribution(seed in any::<u64>(), scale in 0.01f64..20.0) {
        let (store, c) = controller(seed, 8);
        let token: Vec<f64> = normal_tensor(&mut seeded(seed ^ 1), &[8]).data().iter().map(|v| v * scale).collect();
        let g = c.gate_forward(&store, &token).unwrap();
        prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(g.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn controller_preserves_shape(seed in any::<u64>(), len in 1usize..9) {
        let (store, c) = controller(seed, 8);
        let x = TextFeature::new(normal_tensor(&mut seeded(seed), &[len, 8])).unwrap();
        let y = c.controller_forward(&store, &x).unwrap();
        prop_assert_eq!(y.tensor().shape(), x.tensor().shape());
    }

    #[test]
    fn zeroed_experts_give_identity(seed in any::<u64>()) {
        let (mut store, c) = controller(seed, 8);
        for id in c.expert_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        let x = TextFeature::new(normal_tensor(&mut seeded(seed), &[5, 8])).unwrap();
        let y = c.controller_forward(&store, &x).unwrap();
        prop_assert!(y.tensor().max_abs_diff(x.tensor()).unwrap() < 1e-15);
    }

    #[test]
    fn permuting_experts_with_gate_columns_is_invisible(seed in any::<u64>()) {
        let (store, c) = controller(seed, 8);
        let mut permuted = store.clone();
        let n = c.config().experts;
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        for (slot, &from) in perm.iter().enumerate() {
            let (dst, src) = (&c.experts()[slot], &c.experts()[from]);
            for (d, s) in [(dst.w1, src.w1), (dst.b1, src.b1), (dst.w2, src.w2), (dst.b2, src.b2)] {
                *permuted.value_mut(d) = store.value(s).clone();
            }
        }
        let (w, b) = (c.gate().weight, c.gate().bias);
        let (gw, gb) = (store.value(w).clone(), store.value(b).clone());
        let rows = gw.shape()[0];
        for r in 0..rows {
            for (slot, &from) in perm.iter().enumerate() {
                permuted.value_mut(w).data_mut()[r * n + slot] = gw.data()[r * n + from];
            }
        }
        for (slot, &from) in perm.iter().enumerate() {
            permuted.value_mut(b).data_mut()[slot] = gb.data()[from];
        }
        let x = TextFeature::new(normal_tensor(&mut seeded(seed), &[4, 8])).unwrap();
        let a = c.controller_forward(&store, &x).unwrap();
        let p = c.controller_forward(&permuted, &x).unwrap();
        prop_assert!(a.tensor().max_abs_diff(p.tensor()).unwrap() < 1e-12);
    }

    #[test]
    fn ddim_with_oracle_recovers_the_clean_image(seed in any::<u64>(), steps in 1usize..=50, sampler in 1usize..=50) {
        let sampler = sampler.min(steps);
        let schedule = DiffusionSchedule::linear(steps, 1e-3, 0.2).unwrap();
        let mut rng = seeded(seed);
        let z0 = uniform_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
        let start = normal_tensor(&mut rng, &[3, 4, 4]);
        let ts = schedule.sampling_timesteps(sampler).unwrap();
        let out = ddim_sample(&schedule, &ts, start, |x, t| {
            let ab = schedule.alpha_bar(t)?;
            x.zip_with(&z0, "oracle", |xv, z| (xv - ab.sqrt() * z) / (1.0 - ab).sqrt())
        }).unwrap();
        prop_assert!(out.max_abs_diff(&z0).unwrap() < 1e-6);
    }

    #[test]
    fn heatmaps_are_row_stochastic(seed in any::<u64>(), t in 1usize..=50) {
        let model = EditModel::new(ModelConfig::tiny(), seed).unwrap();
        let mut rng = seeded(seed);
        let src = ImageTensor::new(uniform_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0)).unwrap();
        let z = normal_tensor(&mut rng, &[3, 4, 4]);
        let y = Instruction::new("add moon into the sky").unwrap();
        let h = model.extract_heatmap(&z, t, &y, &src).unwrap();
        prop_assert!(h.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn threshold_is_idempotent(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let img = ImageTensor::new(uniform_tensor(&mut seeded(seed), &[3, h, w], -1.0, 1.0)).unwrap();
        let once = extract_condition(&img, ConditionMethod::Threshold);
        prop_assert_eq!(extract_condition(&once, ConditionMethod::Threshold), once);
    }

    #[test]
    fn extractors_are_total(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let img = ImageTensor::new(uniform_tensor(&mut seeded(seed), &[3, h, w], -1.0, 1.0)).unwrap();
        for m in ConditionMethod::ALL {
            let c = extract_condition(&img, m);
            prop_assert_eq!(c.tensor().shape(), img.tensor().shape());
            prop_assert!(c.tensor().is_finite());
        }
    }

    #[test]
    fn filter_conserves_samples(scores in prop::collection::vec((1usize..40, 0.0f64..10.0, -1.0f64..1.0), 1..40)) {
        let template = synth_routing_corpus(1, 8, 0, &TemplateCaptionClient).unwrap().remove(0);
        let samples = scores.iter().map(|&(side, aesthetic, clip)| {
            let mut s = template.clone();
            s.scores = Some(Scores { resolution: (side, side), aesthetic, clip });
            s
        }).collect();
        let judged = filter(Manifest::from_samples(samples), &FilterPolicy::default()).unwrap();
        let s = judged.summary();
        prop_assert_eq!(s.kept + s.dropped(), s.total);
        prop_assert_eq!(s.total, scores.len());
        prop_assert!(judged.entries.iter().all(|e| e.verdict.is_some()));
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        sa in 0.001f64..1000.0,
        sb in 0.001f64..1000.0,
    ) {
        if let Ok(c) = cosine(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&c));
            let a2: Vec<f64> = a.iter().map(|v| v * sa).collect();
            let b2: Vec<f64> = b.iter().map(|v| v * sb).collect();
            prop_assert!((cosine(&a2, &b2).unwrap() - c).abs() < 1e-12);
            let d = directional_cosine(&a, &b).unwrap();
            let d2 = directional_cosine(&a2, &b2).unwrap();
            prop_assert!((d.value - d2.value).abs() < 1e-12 || d.degenerate || d2.degenerate);
        }
    }

    #[test]
    fn prefer_scores_sum_to_one(orders in prop::collection::vec(Just(["a", "b", "c", "d"]).prop_shuffle(), 1..30)) {
        let ballots: Vec<RankingBallot> = orders.iter().enumerate()
            .map(|(i, o)| RankingBallot::new(format!("p{i}"), "s", o.iter().map(|m| m.to_string()).collect()))
            .collect();
        let scores = prefer_scores(&ballots).unwrap();
        prop_assert!((scores.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_degenerates_at_zero_weight(seed in any::<u64>(), w in 0.0f64..3.0) {
        let data = synth_routing_corpus(2, 4, seed, &TemplateCaptionClient).unwrap();
        let refs: Vec<_> = data.iter().collect();
        let model = EditModel::new(ModelConfig::tiny(), seed).unwrap();
        let batch = TrainingBatch::draw(&refs, 50, 3, seed, 0).unwrap();
        let mut tape = Tape::new(model.store());
        let loss = compute_loss(&mut tape, &model, &batch, w).unwrap();
        prop_assert!(tape.value(loss.total).item() >= 0.0);

        let mut zero = Tape::new(model.store());
        let l0 = compute_loss(&mut zero, &model, &batch, 0.0).unwrap();
        let mut single = Tape::new(model.store());
        let l1 = single_term_loss(&mut single, &model, &batch).unwrap();
        prop_assert_eq!(zero.value(l0.total).item().to_bits(), single.value(l1).item().to_bits());
    }
}

#[test]
fn toy_metrics_stay_in_range() {
    let e = moe_edit_core::eval::ToyEmbedder::default();
    let corpus = synth_routing_corpus(5, 8, 1, &TemplateCaptionClient).unwrap();
    for s in &corpus {
        let t = clip_t(&s.tgt_image, &s.tgt_caption, &e).unwrap();
        let d = clip_d(&s.src_image, &s.tgt_image, &s.src_caption, &s.tgt_caption, &e).unwrap();
        assert!((-1.0..=1.0).contains(&t) && (-1.0..=1.0).contains(&d.value));
        assert_eq!(e.embed_image(&s.src_image).len(), e.dim());
    }
}

#[test]
fn noising_mean_matches_scaled_clean_image() {
    let schedule = DiffusionSchedule::default();
    let mut rng = seeded(21);
    let z0 = uniform_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
    let t = 20;
    let ab = schedule.alpha_bar(t).unwrap();
    let draws = 10_000;
    let mut sum = vec![0.0; z0.len()];
    for _ in 0..draws {
        let eps = normal_tensor(&mut rng, &[3, 2, 2]);
        let z = schedule.forward_noise(&z0, t, &eps).unwrap();
        for (s, v) in sum.iter_mut().zip(z.data()) {
            *s += v;
        }
    }
    let stderr = (1.0 - ab).sqrt() / (draws as f64).sqrt();
    for (s, z) in sum.iter().zip(z0.data()) {
        assert!((s / draws as f64 - ab.sqrt() * z).abs() < 3.0 * stderr);
    }
}

#[test]
fn encoder_norms_stay_bounded() {
    let model = EditModel::new(ModelConfig::default(), 5).unwrap();
    let corpus = synth_routing_corpus(334, 4, 5, &TemplateCaptionClient).unwrap();
    let mut max = 0.0f64;
    for s in &corpus {
        let x = model.encode(&s.instruction).unwrap();
        for i in 0..x.len() {
            max = max.max(x.token(i).iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    assert!(max < 100.0, "{max}");
}
