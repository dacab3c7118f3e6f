//! Central finite-difference gradient verification.
//!
//! The checker never looks at an op's backward rule: it re-runs the caller's
//! forward closure at perturbed inputs and compares the quotient against the
//! tape's analytic gradient. All checking runs in `f64` with step `1e-5`.

use super::{Tape, TensorData, TensorId};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds the loss twice per input element and reports the maximum relative
/// error between analytic and central-difference gradients over all elements
/// of all `inputs`.
///
/// The relative error denominator is floored at `0.01`, so tiny gradients are
/// effectively judged at an absolute tolerance of `tol * 0.01`.
pub fn finite_diff_check(
    inputs: &[TensorData<f64>],
    forward: impl Fn(&Tape<f64>, &[TensorId]) -> TensorId,
    step: f64,
) -> f64 {
    finite_diff_check_sampled(inputs, forward, step, usize::MAX)
}

/// Like [`finite_diff_check`], but probes at most `max_per_tensor` evenly
/// strided elements of each input — each probe is still an exact directional
/// derivative, this just bounds the number of forward re-evaluations for
/// large convolution kernels.
pub fn finite_diff_check_sampled(
    inputs: &[TensorData<f64>],
    forward: impl Fn(&Tape<f64>, &[TensorId]) -> TensorId,
    step: f64,
    max_per_tensor: usize,
) -> f64 {
    let tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = forward(&tape, &ids);
    assert_eq!(tape.numel(loss), 1, "gradient check requires a scalar loss");
    tape.backward(loss).expect("backward failed during gradient check");
    let analytic: Vec<TensorData<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| tape.grad(id).unwrap_or_else(|| TensorData::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[TensorData<f64>]| -> f64 {
        let tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = forward(&tape, &ids);
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<TensorData<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = (n / max_per_tensor.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            work[which].data_mut()[e] = orig + step;
            let up = eval(&work);
            work[which].data_mut()[e] = orig - step;
            let down = eval(&work);
            work[which].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = analytic[which].data()[e];
            let rel = (fd - an).abs() / (fd.abs().max(an.abs())).max(1e-2);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient_of_composite() {
        let x = TensorData::from_fn(vec![3, 3], |i| (i as f64 * 0.37).sin());
        let err = finite_diff_check(
            &[x],
            |tape, ids| {
                let s = tape.sigmoid(ids[0]);
                let sq = tape.mul(s, s).unwrap();
                tape.mean(sq)
            },
            DEFAULT_STEP,
        );
        assert!(err < 1e-8, "rel err {}", err);
    }

    #[test]
    fn reports_discrepancy_at_a_kink() {
        // At x = 0 the analytic relu subgradient (0) and the central
        // difference (0.5) disagree; the checker must surface that.
        let x = TensorData::new(vec![1], vec![0.0]).unwrap();
        let err = finite_diff_check(
            &[x],
            |tape, ids| {
                let y = tape.relu(ids[0]);
                tape.sum(y)
            },
            DEFAULT_STEP,
        );
        assert!(err > 0.1, "checker failed to notice the kink, err {}", err);
    }
}
