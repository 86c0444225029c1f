//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Pre-activations closer than this to a ReLU kink trigger an input re-draw.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Location of the largest error, `name[index]`.
    pub worst: String,
    pub checked: usize,
    /// Input re-draws needed to stay clear of ReLU kinks.
    pub redraws: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Compares analytic gradients of a scalar loss against central differences,
/// for every element of every trainable parameter and of the input.
///
/// `forward` receives the input node and must return a scalar loss. Frozen
/// parameters are skipped. Errors are `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn grad_check<F>(store: &ParamStore, input: &Tensor, tol: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, NodeId) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b69_6e6b);
    let mut x = input.clone();
    let mut redraws = 0;
    loop {
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        forward(&mut tape, store, xn)?;
        if tape.relu_margin() >= KINK_MARGIN {
            break;
        }
        redraws += 1;
        if redraws >= MAX_ATTEMPTS {
            return Err(NnError::GradCheck(format!(
                "could not move ReLU pre-activations {KINK_MARGIN} away from zero"
            )));
        }
        for v in x.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }

    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let xn = tape.input_with_grad(x.clone());
    let loss = forward(&mut tape, &work, xn)?;
    tape.backward(loss, &mut work)?;
    let input_grad = tape.grad(xn).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |s: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let loss = forward(&mut tape, s, xn)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        redraws,
        tol,
        pass: true,
    };
    let mut record = |name: &str, i: usize, analytic: f64, numeric: f64| -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(NnError::GradCheck(format!(
                "non-finite gradient at {name}[{i}]: analytic {analytic}, numeric {numeric}"
            )));
        }
        let err = (analytic - numeric).abs() / numeric.abs().max(1e-8);
        report.checked += 1;
        if report.worst.is_empty() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{name}[{i}]");
        }
        Ok(())
    };

    let mut probe = store.clone();
    let ids: Vec<_> = probe.ids().collect();
    for id in ids {
        if !probe.get(id).trainable() {
            continue;
        }
        let name = probe.name(id).to_string();
        let analytic = work.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; work.get(id).len()]);
        for i in 0..analytic.len() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe, &x)?;
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe, &x)?;
            probe.get_mut(id).data_mut()[i] = orig;
            record(&name, i, analytic[i], (up - down) / (2.0 * FD_STEP))?;
        }
    }
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let up = eval(store, &xp)?;
        xp.data_mut()[i] = orig - FD_STEP;
        let down = eval(store, &xp)?;
        xp.data_mut()[i] = orig;
        record("input", i, input_grad[i], (up - down) / (2.0 * FD_STEP))?;
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}

/// `sum(out * w)` with fixed pseudo-random weights in `[-1, 1]`, so every
/// output element contributes an O(1) gradient.
pub fn projection_loss(tape: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let w: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wn = tape.input(Tensor::new(&shape, w)?);
    let p = tape.mul(out, wn)?;
    Ok(tape.sum(p))
}
