use super::tensor::Tensor;

/// Central-difference gradient of `f` at `p`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, p: &Tensor, eps: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = p.clone();
    let mut grad = vec![0.0; p.numel()];
    for i in 0..p.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    Tensor {
        shape: p.shape.clone(),
        data: grad,
        requires_grad: false,
        grad: None,
    }
}

/// Outcome of comparing an analytic gradient against a numerical one.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
}

/// Relative error `|a - n| / max(|a|, |n|)` over coordinates where the
/// analytic gradient exceeds `floor` in magnitude.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheck {
    let mut out = GradCheck::default();
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() <= floor {
            continue;
        }
        out.checked += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs());
        if out.worst_index.is_none() || rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst_index = Some(i);
        }
    }
    out
}
