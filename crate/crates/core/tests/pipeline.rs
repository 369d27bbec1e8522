use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cyclechaos::data::{synth_tridomain, TripleBatch, TripleBatcher};
use cyclechaos::model::{CycleModels, DiscriminatorNet};
use cyclechaos::training::{cycle_loss, gan_loss, Critic, FnCritic, TrainConfig, TrainState};
use cyclechaos::Tensor;

fn held_out(tri: &cyclechaos::data::TriDomain, n: usize) -> TripleBatch {
    let take = |d: &cyclechaos::data::LabeledImages| Tensor::stack(&d.images[..n]).unwrap();
    TripleBatch {
        x: take(&tri.x),
        y: take(&tri.y),
        z: take(&tri.z),
    }
}

#[test]
fn two_hundred_steps_reduce_held_out_cycle_loss() {
    let (train, test) = synth_tridomain(200, 20, 16, 1).unwrap();
    let config = TrainConfig::default();
    let mut state = TrainState::new(&config, [16, 16, 1]).unwrap();
    let probe = held_out(&test, 20);
    let before = cycle_loss(&state.models.g, &state.models.f, &probe).unwrap().total;
    let mut batcher = TripleBatcher::new(&train, config.batch_size, 5).unwrap();
    let mut steps = 0;
    while steps < 200 {
        for batch in batcher.next_epoch().unwrap() {
            if steps == 200 {
                break;
            }
            state.train_step(&batch, &config).unwrap();
            steps += 1;
        }
    }
    let after = cycle_loss(&state.models.g, &state.models.f, &probe).unwrap().total;
    assert!(after < 0.75 * before, "held-out cycle loss {before:.4} -> {after:.4}");
}

#[test]
fn gan_loss_matches_a_per_sample_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let models = CycleModels::new(&Default::default(), [16, 16, 1], 3).unwrap();
    let d: &DiscriminatorNet = &models.d_y;
    let batch = |rng: &mut ChaCha8Rng, n: usize| {
        let items: Vec<Tensor> = (0..n)
            .map(|_| Tensor::new(vec![16, 16, 1], (0..256).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap())
            .collect();
        (Tensor::stack(&items).unwrap(), items)
    };
    for (nr, nf) in [(1, 1), (4, 7), (10, 10)] {
        let (real, real_items) = batch(&mut rng, nr);
        let (fake, fake_items) = batch(&mut rng, nf);
        let eps = 1e-7f32;
        let one = |t: &Tensor| d.score(&Tensor::stack(std::slice::from_ref(t)).unwrap()).unwrap()[0].clamp(eps, 1.0 - eps) as f64;
        let oracle = real_items.iter().map(|t| one(t).ln()).sum::<f64>() / nr as f64
            + fake_items.iter().map(|t| (1.0 - one(t)).ln()).sum::<f64>() / nf as f64;
        let got = gan_loss(d, &real, &fake, eps).unwrap();
        assert!((got - oracle).abs() < 1e-5, "{got} vs {oracle}");
    }
    let half = FnCritic(|b: &Tensor| Ok(vec![0.5f32; b.batch_len()]));
    let (real, _) = batch(&mut rng, 3);
    assert!((gan_loss(&half, &real, &real, 1e-7).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
}
