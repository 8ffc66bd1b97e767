use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use steernet::autodiff::Tape;
use steernet::model::*;
use steernet::pipeline::*;

fn main() {
    let set = synthetic_glyphs::<f32>(64, 99);
    let mcfg = ModelConfig::mnist_desk(ActivationKind::Relu, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::<f32>::new(mcfg, &mut rng).unwrap();
    let (coords, lattice) = image_grid::<f32>(28, 28);
    let geom = model.plan_geometry(&coords, Some(&lattice)).unwrap();
    let input = images_to_features(&set.pixels, 64, 784);
    for _ in 0..2 {
        let t0 = Instant::now();
        let mut tape = Tape::new(&model.store);
        let pass = model.forward::<ChaCha8Rng>(&mut tape, input.clone(), &geom, BnMode::Batch, None).unwrap();
        let loss = tape.log_softmax_nll(pass.logits, set.labels.clone());
        let fwd = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let _ = tape.backward(loss).unwrap();
        println!("step: forward {:.3}s backward {:.3}s", fwd, t1.elapsed().as_secs_f64());
    }
}
