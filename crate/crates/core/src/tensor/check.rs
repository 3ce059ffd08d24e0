use super::{no_grad, Tensor};

/// Compares the analytic gradients of a scalar function of `inputs` with
/// central differences of step `h`. Returns the worst norm-wise relative
/// error `|g - g_num| / max(|g|, |g_num|)` over the inputs.
///
/// `f` must rebuild the graph from the current values of `inputs` on every
/// call. Gradients of `inputs` are overwritten.
pub fn gradcheck(inputs: &[Tensor], h: f64, f: impl Fn() -> Tensor) -> f64 {
    for t in inputs {
        t.zero_grad();
    }
    f().backward().expect("gradcheck needs a scalar output");
    let mut worst: f64 = 0.0;
    for t in inputs {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + h;
            let up = no_grad(|| f().item());
            t.data_mut()[i] = orig - h;
            let down = no_grad(|| f().item());
            t.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}
