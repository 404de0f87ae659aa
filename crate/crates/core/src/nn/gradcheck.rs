/// Central-difference gradient check.
///
/// Returns `max_i |fd_i - g_i| / (|g_i| + 1e-8)` where
/// `fd_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` and `g = analytic_grad(x)`.
pub fn finite_diff_check(
    f: impl Fn(&[f64]) -> f64,
    analytic_grad: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    eps: f64,
) -> f64 {
    assert!(eps > 0.0, "eps must be positive");
    let g = analytic_grad(x);
    assert_eq!(g.len(), x.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((fd - g[i]).abs() / (g[i].abs() + 1e-8));
    }
    worst
}
