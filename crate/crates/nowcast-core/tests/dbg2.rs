use ndarray::Array4;
use nowcast_core::model::layers::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::time::Instant;

fn rmap(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Array4::from_shape_simple_fn(dim, || n.sample(&mut r) as f32)
}

#[test]
fn layer_timing() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Representative shapes for levels=2 base=8 at 32x32.
    let x0 = rmap((8, 4, 32, 32), 1);
    let conv = Conv3::new(8, 8, (3, 3, 3), (1, 1, 1), &mut rng);
    let gn = GroupNorm::new(8);
    let up = UpConv2::new(16, 8, &mut rng);
    let xu = rmap((16, 4, 16, 16), 2);

    let reps = 200;
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(conv.forward(&x0)); }
    println!("conv3 8->8 @32  fwd: {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let dy = rmap(conv.out_dim(x0.dim()), 3);
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(conv.backward_data(&dy, x0.dim())); }
    println!("conv3 bwd_data:      {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(conv.grad_params(&x0, &dy)); }
    println!("conv3 grad_params:   {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(gn.forward(&x0)); }
    println!("gn fwd:              {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let (_, cache) = gn.forward(&x0);
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(gn.backward(&cache, &dy)); }
    println!("gn bwd:              {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(up.forward(&xu)); }
    println!("upconv fwd:          {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let dyu = rmap((8, 4, 32, 32), 4);
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(up.backward_data(&dyu, xu.dim())); }
    println!("upconv bwd_data:     {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(up.grad_params(&xu, &dyu)); }
    println!("upconv grad_params:  {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(MaxPool2::forward(&x0)); }
    println!("maxpool fwd:         {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // Stem conv is the other big one: 11 -> 8 at 32x32.
    let xin = rmap((11, 4, 32, 32), 5);
    let stem = Conv3::new(11, 8, (3, 3, 3), (1, 1, 1), &mut rng);
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(stem.forward(&xin)); }
    println!("conv3 11->8 fwd:     {:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    // Level-1 conv: 16ch at 16x16.
    let x1 = rmap((16, 4, 16, 16), 6);
    let c1 = Conv3::new(16, 16, (3, 3, 3), (1, 1, 1), &mut rng);
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(c1.forward(&x1)); }
    println!("conv3 16->16 @16 fwd:{:.3} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
