//! Fits a small MLP to a 1-D function with the reverse-mode tape and Adam.

use nfreg::nn::{adam_step, grad, mlp_forward_tape, AdamState, MlpSpec, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nfreg::Result<()> {
    let spec = MlpSpec::new(vec![1, 32, 32, 1])?;
    let mut params = ParamStore::new();
    spec.init_params("net.", &mut ChaCha8Rng::seed_from_u64(0), &mut params)?;
    let xs: Vec<f64> = (0..64).map(|i| -1.0 + 2.0 * i as f64 / 63.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
    let (x, y) = (Tensor::column(&xs), Tensor::column(&ys));
    let mut adam = AdamState::new(&params);
    for step in 0..=2000 {
        let (loss, g) = grad(&params, |tape, vars| {
            let input = tape.constant(x.clone());
            let out = mlp_forward_tape(tape, &spec, vars, "net.", input);
            let target = tape.constant(y.clone());
            let diff = tape.sub(out, target);
            let sq = tape.mul(diff, diff);
            let total = tape.sum(sq);
            tape.scale(total, 1.0 / xs.len() as f64)
        });
        if step % 500 == 0 {
            println!("step {step:>4}: mse {loss:.6}");
        }
        adam_step(&mut adam, &mut params, &g, 1e-2)?;
    }
    Ok(())
}
