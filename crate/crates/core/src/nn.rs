//! Dense-layer math shared by the location encoder, the text projection and
//! the probes. Row-major `f64` matrices; rows are samples.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Anything that owns a fixed, ordered list of named `f64` tensors.
///
/// The order is part of each implementor's contract: checkpoints serialize
/// tensors in exactly this order and the optimizer pairs parameters with
/// gradients by position.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Concatenation of all tensors in order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_parameters();
        if flat.len() != n {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, expected {n}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }
}

pub(crate) fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter matrices are standard layout")
}

pub(crate) fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter matrices are standard layout")
}

/// Fully connected layer `y = x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    /// Uniform weights on `±sqrt(3 / fan_in)` (unit-variance fan-in scaling);
    /// zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, with_bias: bool, rng: &mut R) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
        Linear {
            weight,
            bias: with_bias.then(|| Array1::zeros(fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: with_bias.then(|| Array1::zeros(fan_out)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.fan_in() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.fan_in(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }

    /// Accumulates `dW += x^T dy`, `db += sum_rows(dy)` into `grad` and
    /// returns `dx = dy W^T`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.weight"), slice(&self.weight)));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.as_slice().unwrap()));
        }
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.weight"), slice_mut(&mut self.weight)));
        if let Some(b) = self.bias.as_mut() {
            out.push((format!("{prefix}.bias"), b.as_slice_mut().unwrap()));
        }
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        self.push_tensors("linear", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = Vec::new();
        self.push_tensors_mut("linear", &mut v);
        v
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub fn relu_backward(pre: &Array2<f64>, mut grad: Array2<f64>) -> Array2<f64> {
    Zip::from(&mut grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    grad
}

/// Row-wise L2 normalization. Returns the normalized rows and the norms.
/// Fails on a zero-norm row.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(if norms[i] == 0.0 {
            Error::ZeroNorm(Some(format!("row {i}")))
        } else {
            Error::NonFinite(format!("norm of row {i}"))
        });
    }
    let mut z = x.clone();
    for (mut row, &n) in z.rows_mut().into_iter().zip(norms.iter()) {
        row /= n;
    }
    Ok((z, norms))
}

/// Backward of `z = x / |x|`: `dx = (dz - z <z, dz>) / |x|`.
pub fn l2_normalize_rows_backward(z: &Array2<f64>, norms: &Array1<f64>, dz: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dz.to_owned();
    for ((mut dxr, zr), &n) in dx.rows_mut().into_iter().zip(z.rows()).zip(norms.iter()) {
        let proj = zr.dot(&dxr);
        dxr.scaled_add(-proj, &zr);
        dxr /= n;
    }
    dx
}

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax with the max shift.
pub fn log_softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax, stable for large logits.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Optimizer hyperparameters. Weight decay (added to the gradient) and
/// global-norm clipping are off unless set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_grad_norm: None,
        }
    }
}

/// Moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.m.iter().map(Vec::len).sum::<usize>() * 2
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} optimizer slots",
            grads.len(),
            state.m.len()
        )));
    }
    for (name, g) in &grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {name}[{i}]")));
        }
    }
    let clip_scale = match cfg.clip_grad_norm {
        Some(max) => {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let mut params = params.tensors_mut();
    if params.len() != grads.len() {
        return Err(Error::Shape("parameter/gradient tensor count mismatch".into()));
    }
    for (k, ((pname, p), (_, g))) in params.iter_mut().zip(&grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if p.len() != g.len() || m.len() != p.len() {
            return Err(Error::Shape(format!("tensor {pname} changed size")));
        }
        for i in 0..p.len() {
            let gi = g[i] * clip_scale + cfg.weight_decay * p[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Result of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Central-difference gradient check.
///
/// The relative error at coordinate `i` is `|a - n| / max(|a|, |n|, floor)`;
/// the floor keeps coordinates whose true gradient is ~0 from reporting
/// rounding noise as a large relative error. `indices` selects the
/// coordinates to check (all when `None`).
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
    floor: f64,
    indices: Option<&[usize]>,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient values",
            params.len(),
            analytic.len()
        )));
    }
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
        tolerance,
    };
    for &i in idx {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_fn(&p);
        p[i] = orig - h;
        let down = loss_fn(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Scalar(Vec<f64>);

    impl Parameters for Scalar {
        fn tensors(&self) -> Vec<(String, &[f64])> {
            vec![("p".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
            vec![("p".into(), &mut self.0)]
        }
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = Scalar(vec![0.0, 0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &Scalar(vec![1.0, -3.0]), &mut st, &cfg).unwrap();
        assert!((p.0[0] + 1e-4).abs() < 1e-11);
        assert!((p.0[1] - 1e-4).abs() < 1e-11);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let cfg = AdamConfig::default();
        let mut p = Scalar(vec![0.3, -1.2]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &Scalar(vec![0.0, 0.0]), &mut st, &cfg).unwrap();
        assert_eq!(p.0, vec![0.3, -1.2]);
    }

    #[test]
    fn adam_three_step_recurrence() {
        // Hand recurrence with g = 1 each step: m_t = 1 - 0.9^t and
        // v_t = 1 - 0.999^t, so m_hat = v_hat = 1 and every step moves
        // by lr / (1 + eps). Values below are 1e-4 * k / (1 + 1e-8).
        let expected = [
            -9.999_999_900_000_001e-5,
            -1.999_999_980_000_000_2e-4,
            -2.999_999_970_000_000_3e-4,
        ];
        let cfg = AdamConfig::default();
        let mut p = Scalar(vec![0.0]);
        let mut st = AdamState::new(&p);
        for e in expected {
            adam_step(&mut p, &Scalar(vec![1.0]), &mut st, &cfg).unwrap();
            assert!((p.0[0] - e).abs() < 1e-12, "{} vs {e}", p.0[0]);
        }
        assert!(st.v[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = Scalar(vec![0.0]);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &Scalar(vec![f64::NAN]), &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("p[0]"));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(array![[2.0, 2.0, 2.0, 2.0]].view());
        assert!(s.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let s = softmax_rows(array![[1000.0, 0.0]].view());
        assert!((s[[0, 0]] - 1.0).abs() < 1e-15 && s[[0, 1]] >= 0.0 && s[[0, 1]] < 1e-300);

        let x = array![[0.1, -0.7, 1.3], [2.0, 0.0, -1.0], [0.5, 0.5, -0.25]];
        let s = softmax_rows(x.view());
        for (r, row) in x.rows().into_iter().enumerate() {
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                assert!((s[[r, c]] - row[c].exp() / denom).abs() < 1e-12);
            }
            assert!((s.row(r).sum() - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax_rows(x.view());
        assert!(ls.iter().zip(s.iter()).all(|(l, p)| (l.exp() - p).abs() < 1e-12));
    }

    #[test]
    fn fd_check_quadratic_and_wrong_gradient() {
        let p = vec![0.5, -1.5, 2.0, 3.25];
        let loss = |q: &[f64]| q.iter().map(|v| v * v).sum::<f64>() / 2.0;
        let r = finite_diff_check(loss, &p, &p, 1e-5, 1e-8, 1e-6, None).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 4);

        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let r = finite_diff_check(loss, &p, &doubled, 1e-5, 1e-4, 1e-6, None).unwrap();
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
        assert!(!r.passed());

        let bad = |_: &[f64]| f64::NAN;
        assert!(finite_diff_check(bad, &p, &p, 1e-5, 1e-4, 1e-6, None).is_err());
    }

    #[test]
    fn linear_backward_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = Linear::init(5, 3, true, &mut rng);
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let loss = |l: &Linear| {
            let y = l.forward(x.view()).unwrap();
            (&y * &target).sum() + 0.5 * y.mapv(|v| v * v).sum()
        };
        let y = layer.forward(x.view()).unwrap();
        let dy = &target + &y;
        let mut g = layer.zeros_like();
        layer.backward(x.view(), dy.view(), &mut g);

        let h = 1e-6;
        for _ in 0..10 {
            let dw = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
            let mut plus = layer.clone();
            plus.weight.scaled_add(h, &dw);
            let mut minus = layer.clone();
            minus.weight.scaled_add(-h, &dw);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = (&g.weight * &dw).sum();
            assert!((numeric - analytic).abs() / analytic.abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn normalize_backward_is_tangent() {
        let x = array![[3.0, 4.0, 0.0], [1.0, -2.0, 2.0]];
        let (z, n) = l2_normalize_rows(&x).unwrap();
        let dz = array![[0.3, -0.1, 0.9], [1.0, 1.0, 1.0]];
        let dx = l2_normalize_rows_backward(&z, &n, dz.view());
        for r in 0..2 {
            assert!(dx.row(r).dot(&z.row(r)).abs() < 1e-12);
        }
        assert!(l2_normalize_rows(&Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::init(48, 32, true, &mut rng);
        let bound = (3.0f64 / 48.0).sqrt();
        assert!(l.weight.iter().all(|w| w.abs() <= bound));
        assert!(l.bias.unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let cfg = AdamConfig {
            clip_grad_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut p = Scalar(vec![0.0, 0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &Scalar(vec![30.0, 40.0]), &mut st, &cfg).unwrap();
        // clipped to (0.6, 0.8); first moment is 0.1 of that
        assert!((st.m[0][0] - 0.06).abs() < 1e-15 && (st.m[0][1] - 0.08).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn softmax_ignores_row_shifts(row in proptest::collection::vec(-30.0f64..30.0, 1..8), shift in -100.0f64..100.0) {
            let x = Array2::from_shape_vec((1, row.len()), row.clone()).unwrap();
            let a = softmax_rows(x.view());
            let b = softmax_rows((&x + shift).view());
            proptest::prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            for (u, v) in a.iter().zip(b.iter()) {
                proptest::prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn adam_is_deterministic(g in proptest::collection::vec(-5.0f64..5.0, 3), p0 in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let cfg = AdamConfig { weight_decay: 0.01, ..AdamConfig::default() };
            let run = || {
                let mut p = Scalar(p0.clone());
                let mut st = AdamState::new(&p);
                for _ in 0..3 {
                    adam_step(&mut p, &Scalar(g.clone()), &mut st, &cfg).unwrap();
                }
                (p.0, st)
            };
            let (a, sa) = run();
            let (b, sb) = run();
            proptest::prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            proptest::prop_assert_eq!(sa, sb);
        }
    }
}
