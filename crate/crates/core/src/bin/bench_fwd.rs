// Throwaway forward-timing probe.
use hinject::denoiser::{Denoiser, DenoiserConfig};
use hinject::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let model = Denoiser::new(DenoiserConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = model.init_params(&mut rng);
    let mut x = Tensor::zeros(&model.config().input_shape());
    for v in x.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut sink = 0.0;
    let t0 = Instant::now();
    for i in 0..30 {
        sink += model.forward(&params, &x, 1 + i).unwrap().eps.data()[0];
    }
    println!("forward {:.2} ms (sink {sink:.3e})", t0.elapsed().as_secs_f64() * 1000.0 / 30.0);
    println!("eps[0..3] = {:?}", &model.forward(&params, &x, 500).unwrap().eps.data()[0..3]);
}
