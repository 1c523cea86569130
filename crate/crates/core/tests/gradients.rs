use moe_edit_core::dataset::{synth_routing_corpus, EditSample, TemplateCaptionClient};
use moe_edit_core::model::{EditModel, ModelConfig};
use moe_edit_core::training::gradient_check;

fn corpus() -> Vec<EditSample> {
    synth_routing_corpus(2, 4, 3, &TemplateCaptionClient).unwrap()
}

#[test]
fn tiny_model_fits_the_budget() {
    let model = EditModel::new(ModelConfig::tiny(), 0).unwrap();
    assert!(model.store().scalar_count() <= 20_000, "{}", model.store().scalar_count());
}

#[test]
fn full_stack_matches_central_differences() {
    let data = corpus();
    let refs: Vec<&EditSample> = data.iter().collect();
    for w in [0.0, 0.5] {
        let r = gradient_check(ModelConfig::tiny(), &refs, 4, w, 11, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-5, "w={w}: {r:?}");
        assert_eq!(
            r.coordinates,
            EditModel::new(ModelConfig::tiny(), 0).unwrap().store().scalar_count()
        );
    }
}

mod components {
    use moe_edit_core::diffusion::{Denoiser, DenoiserConfig};
    use moe_edit_core::moe::{MoeConfig, MoeController};
    use moe_edit_core::rng::{normal_tensor, seeded};
    use moe_edit_core::{finite_difference_check, ParamStore, Tape};

    #[test]
    fn composite_ops() {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        let a = store.add("a", normal_tensor(&mut rng, &[3, 4])).unwrap();
        let b = store.add("b", normal_tensor(&mut rng, &[4, 5])).unwrap();
        let c = store.add("c", normal_tensor(&mut rng, &[3, 5])).unwrap();
        let target = normal_tensor(&mut rng, &[3, 5]);
        let ids = [a, b, c];
        let r = finite_difference_check(&mut store, &ids, 1e-5, |tape| {
            let (a, b, c) = (tape.param(a), tape.param(b), tape.param(c));
            let ab = tape.matmul(a, b)?;
            let h = tape.relu(ab);
            let m = tape.mul(h, c)?;
            let s = tape.add(m, c)?;
            let p = tape.softmax_rows(s);
            let t = tape.constant(target.clone());
            tape.mse(p, t)
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn controller_parameters() {
        let mut store = ParamStore::new();
        let c = MoeController::new(&mut store, MoeConfig::with_dim(6), 4).unwrap();
        let x = normal_tensor(&mut seeded(2), &[3, 6]);
        let probe = normal_tensor(&mut seeded(3), &[3, 6]);
        let ids = c.param_ids();
        let r = finite_difference_check(&mut store, &ids, 1e-5, |tape: &mut Tape<'_>| {
            let xv = tape.constant(x.clone());
            let out = c.forward(tape, xv)?;
            let p = tape.constant(probe.clone());
            let weighted = tape.mul(out, p)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn denoiser_parameters() {
        let mut store = ParamStore::new();
        let cfg = DenoiserConfig {
            image: 4,
            channels: 4,
            cond_dim: 6,
            attn_dim: 4,
            time_dim: 4,
        };
        let d = Denoiser::new(&mut store, cfg, 8).unwrap();
        let mut rng = seeded(5);
        let (z, src, cond, probe) = (
            normal_tensor(&mut rng, &[3, 4, 4]),
            normal_tensor(&mut rng, &[3, 4, 4]),
            normal_tensor(&mut rng, &[3, 6]),
            normal_tensor(&mut rng, &[3, 4, 4]),
        );
        let ids = d.param_ids();
        let r = finite_difference_check(&mut store, &ids, 1e-5, |tape: &mut Tape<'_>| {
            let (z, s, c) = (tape.constant(z.clone()), tape.constant(src.clone()), tape.constant(cond.clone()));
            let out = d.forward(tape, z, 17, c, s)?.eps;
            let p = tape.constant(probe.clone());
            let weighted = tape.mul(out, p)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }
}
