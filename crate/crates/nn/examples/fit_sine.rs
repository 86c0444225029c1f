//! Fits a two-layer perceptron to `sin(x)` with Adam, then checks the
//! gradients of the trained network against finite differences.
//!
//! `cargo run --release -p amc-nn --example fit_sine`

use amc_nn::{adam_step, grad_check, AdamState, LayerSpec, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> amc_nn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let fc1 = LayerSpec::fc(1, 32).build(&mut store, "fc1", &mut rng)?;
    let fc2 = LayerSpec::fc(32, 1).build(&mut store, "fc2", &mut rng)?;

    let n = 64;
    let xs: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
    let x = Tensor::new(&[n, 1], xs)?;
    let y = Tensor::new(&[n, 1], ys)?;

    let forward = |tape: &mut Tape, store: &ParamStore, xn| -> amc_nn::Result<_> {
        let h = fc1.forward(tape, store, xn)?;
        let h = tape.relu(h);
        let out = fc2.forward(tape, store, h)?;
        let target = tape.input(y.clone());
        let d = tape.sub(out, target)?;
        let sq = tape.mul(d, d)?;
        let total = tape.sum(sq);
        Ok(tape.scale(total, 1.0 / n as f64))
    };

    let mut adam = AdamState::with_hyper(&store, 1e-2, 0.9, 0.999, 1e-8);
    for step in 0..=2000 {
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let loss = forward(&mut tape, &store, xn)?;
        if step % 500 == 0 {
            println!("step {step:>4}  mse {:.6}", tape.value(loss).data()[0]);
        }
        store.zero_grad();
        tape.backward(loss, &mut store)?;
        adam_step(&mut store, &mut adam)?;
    }

    let report = grad_check(&store, &x, 1e-4, |tape, s, xn| forward(tape, s, xn))?;
    println!("gradient check: max relative error {:.2e} over {} entries", report.max_rel_err, report.checked);
    Ok(())
}
