//! Central finite-difference oracle for tape gradients.

use evolm::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the analytic
/// gradients and central differences, maximised over all inputs.
///
/// `build` receives fresh leaves (one per input, all requiring grad) and must
/// return a scalar loss.
pub fn max_relative_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("scalar loss");

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[i]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    worst
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct amount.
pub fn weighted_sum(tape: &mut Tape, x: Var, salt: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| (((i as u64 + 1) * 2654435761 + salt * 97) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}
