//! Physics-inspired desmoking head.
//!
//! A 4-channel regression `O = [K, B]` is turned into the restored image
//! `J = K·I − B + I` and a smoke map `S = f(B / (K + 1))`, where `f` is a single
//! 3×3 convolution over the three airlight channels. Backward passes are
//! hand-derived; [`grad_check`] verifies them against central differences.

use crate::error::{Error, Result};
use crate::imaging::{ColorField, Field, ScalarField};
use crate::scattering::{airlight_from_kb, reconstruct_kb, KBField};

/// `K = softplus(raw) − K_OFFSET`, which keeps `K > −1 + 1e-6`.
pub const K_OFFSET: f64 = 1.0 - 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Raw head value giving `K = 0`.
pub fn identity_k_raw() -> f64 {
    (K_OFFSET.exp() - 1.0).ln()
}

/// The learnable map from airlight to smoke: a 3×3×3→1 convolution with
/// edge-replicated borders. Weights are indexed `[channel][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmokeKernel {
    pub weights: [f64; 27],
    pub bias: f64,
}

impl SmokeKernel {
    pub fn zero(bias: f64) -> Self {
        Self {
            weights: [0.0; 27],
            bias,
        }
    }

    /// Uniform average over the 27 taps.
    pub fn averaging(bias: f64) -> Self {
        Self {
            weights: [1.0 / 27.0; 27],
            bias,
        }
    }

    pub fn apply(&self, airlight: &ColorField) -> ScalarField {
        let (h, w) = airlight.dims();
        let air = airlight.as_slice();
        ScalarField::from_fn(h, w, |y, x| {
            let mut s = self.bias;
            for ky in 0..3 {
                let yy = (y + ky).saturating_sub(1).min(h - 1);
                for kx in 0..3 {
                    let xx = (x + kx).saturating_sub(1).min(w - 1);
                    let p = (yy * w + xx) * 3;
                    for c in 0..3 {
                        s += self.weights[c * 9 + ky * 3 + kx] * air[p + c];
                    }
                }
            }
            [s]
        })
    }
}

/// Activated head output: `K`/`B` maps plus the smoke kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub kb: KBField,
    pub kernel: SmokeKernel,
}

impl HeadOutput {
    /// Activates a raw `H×W×4` regression: channel 0 → `K` through the shifted
    /// softplus, channels 1..4 → `B` unchanged.
    pub fn from_raw(raw: &Field<4>, kernel: SmokeKernel) -> Result<Self> {
        let (h, w) = raw.dims();
        let k = ScalarField::new(h, w, raw.pixels().map(|p| softplus(p[0]) - K_OFFSET).collect())?;
        let b = ColorField::new(h, w, raw.pixels().flat_map(|p| [p[1], p[2], p[3]]).collect())?;
        Ok(Self {
            kb: KBField::new(k, b)?,
            kernel,
        })
    }
}

/// Intermediate and final quantities of [`head_forward`].
#[derive(Clone, Debug)]
pub struct HeadForward {
    /// Restored image, unclamped.
    pub j: ColorField,
    pub s: ScalarField,
    pub airlight: ColorField,
}

/// `J = K·I − B + I`, airlight `B/(K+1)`, `S = f(airlight)`.
pub fn head_forward(i: &ColorField, head: &HeadOutput) -> Result<HeadForward> {
    let j = reconstruct_kb(i, &head.kb)?;
    let airlight = airlight_from_kb(&head.kb);
    let s = head.kernel.apply(&airlight);
    Ok(HeadForward { j, s, airlight })
}

/// Gradients of a scalar objective with respect to the head's inputs.
#[derive(Clone, Debug)]
pub struct HeadGrad {
    pub dk: Vec<f64>,
    pub db: Vec<f64>,
    pub dkernel: SmokeKernel,
}

/// Back-propagates `dJ` and `dS` through [`head_forward`].
pub fn head_backward(
    i: &ColorField,
    head: &HeadOutput,
    fwd: &HeadForward,
    dj: &[f64],
    ds: &[f64],
) -> HeadGrad {
    let (h, w) = i.dims();
    let n = h * w;
    debug_assert_eq!(dj.len(), 3 * n);
    debug_assert_eq!(ds.len(), n);
    let air = fwd.airlight.as_slice();
    let weights = &head.kernel.weights;
    let mut dkernel = SmokeKernel::zero(ds.iter().sum());
    let mut dair = vec![0.0; 3 * n];
    for y in 0..h {
        for ky in 0..3 {
            let yy = (y + ky).saturating_sub(1).min(h - 1);
            for x in 0..w {
                let g = ds[y * w + x];
                if g == 0.0 {
                    continue;
                }
                for kx in 0..3 {
                    let xx = (x + kx).saturating_sub(1).min(w - 1);
                    let p = (yy * w + xx) * 3;
                    for c in 0..3 {
                        let tap = c * 9 + ky * 3 + kx;
                        dkernel.weights[tap] += g * air[p + c];
                        dair[p + c] += g * weights[tap];
                    }
                }
            }
        }
    }
    let (k, b, img) = (head.kb.k().as_slice(), head.kb.b().as_slice(), i.as_slice());
    let mut dk = vec![0.0; n];
    let mut db = vec![0.0; 3 * n];
    for p in 0..n {
        let inv = 1.0 / (k[p] + 1.0);
        let mut acc = 0.0;
        for c in 0..3 {
            let q = 3 * p + c;
            acc += dj[q] * img[q] - dair[q] * b[q] * inv * inv;
            db[q] = -dj[q] + dair[q] * inv;
        }
        dk[p] = acc;
    }
    HeadGrad { dk, db, dkernel }
}

/// Components of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    /// Mean absolute image error (averaged over channels).
    pub image: f64,
    /// Mean absolute smoke-map error, before weighting.
    pub smoke: f64,
    /// `image + λ·smoke`.
    pub total: f64,
}

/// `mean|J_gt − J| + λ·mean|S_gt − S|`.
pub fn loss_l1(
    j_gt: &ColorField,
    j: &ColorField,
    s_gt: &ScalarField,
    s: &ScalarField,
    lambda: f64,
) -> Result<LossValue> {
    j_gt.ensure_same_dims(j)?;
    s_gt.ensure_same_dims(s)?;
    j.ensure_same_dims(s)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} must be non-negative")));
    }
    let mean_abs = |a: &[f64], b: &[f64]| {
        if a.is_empty() {
            0.0
        } else {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        }
    };
    let image = mean_abs(j_gt.as_slice(), j.as_slice());
    let smoke = mean_abs(s_gt.as_slice(), s.as_slice());
    Ok(LossValue {
        image,
        smoke,
        total: image + lambda * smoke,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradients of [`loss_l1`] with respect to `J` and `S` (`sign(0) = 0`).
pub fn loss_l1_grad(
    j_gt: &ColorField,
    j: &ColorField,
    s_gt: &ScalarField,
    s: &ScalarField,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let nj = j.as_slice().len().max(1) as f64;
    let ns = s.as_slice().len().max(1) as f64;
    let dj = j_gt
        .as_slice()
        .iter()
        .zip(j.as_slice())
        .map(|(g, p)| sign(p - g) / nj)
        .collect();
    let ds = s_gt
        .as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(g, p)| lambda * sign(p - g) / ns)
        .collect();
    (dj, ds)
}

/// A scalar function of a parameter vector with an analytic gradient.
pub trait Differentiable {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a `(value, gradient)` closure pair to [`Differentiable`].
pub struct FnPair<V, G>(pub V, pub G);

impl<V, G> Differentiable for FnPair<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok((self.0)(x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.1)(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |g − d| / max(1e-8, |g| + |d|)` over the checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the analytic gradient with central differences on every coordinate.
pub fn grad_check(f: &impl Differentiable, x: &[f64], step: f64) -> Result<GradCheck> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// [`grad_check`] restricted to `coords`.
pub fn grad_check_coords(
    f: &impl Differentiable,
    x: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<GradCheck> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!("finite-difference step {step} must be positive")));
    }
    let analytic = f.gradient(x)?;
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        checked: coords.len(),
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f.value(&probe)?;
        probe[i] = orig - step;
        let minus = f.value(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!("coordinate {i} during gradient check")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use crate::scattering::{invert_scattering, kb_from_t_a, AtmosphericLight};
    use proptest::prelude::*;

    fn uniform_head(h: usize, w: usize, k: f64, b: f64, kernel: SmokeKernel) -> HeadOutput {
        HeadOutput {
            kb: KBField::new(ScalarField::filled(h, w, [k]), ColorField::filled(h, w, [b; 3])).unwrap(),
            kernel,
        }
    }

    #[test]
    fn identity_head() {
        let i = Image::from_fn(5, 6, |y, x| [0.1 * y as f64, 0.1 * x as f64, 0.5]);
        let fwd = head_forward(&i, &uniform_head(5, 6, 0.0, 0.0, SmokeKernel::zero(0.25))).unwrap();
        assert_eq!(&fwd.j, i.field());
        assert!(fwd.s.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn averaging_kernel_hand_value() {
        let i = ColorField::filled(6, 7, [0.55; 3]);
        let fwd = head_forward(&i, &uniform_head(6, 7, 1.0, 0.8, SmokeKernel::averaging(0.1))).unwrap();
        assert!(fwd.s.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn head_matches_inversion_for_physical_kb() {
        let (h, w) = (9, 11);
        let i = Image::from_fn(h, w, |y, x| [0.3 + 0.05 * (x % 3) as f64, 0.6, 0.2 + 0.02 * y as f64]);
        let t = ScalarField::from_fn(h, w, |y, x| [0.05 + 0.95 * ((y * w + x) as f64 / (h * w) as f64)]);
        let a = AtmosphericLight::new([0.9, 0.8, 0.95]).unwrap();
        let head = HeadOutput {
            kb: kb_from_t_a(&t, &a).unwrap(),
            kernel: SmokeKernel::averaging(0.0),
        };
        let j = head_forward(i.field(), &head).unwrap().j.to_image();
        let reference = invert_scattering(&i, &t, &a).unwrap();
        for (x, y) in j.as_slice().iter().zip(reference.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn raw_activation_keeps_k_above_minus_one() {
        let raw = Field::<4>::new(1, 3, vec![-800.0, 0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, identity_k_raw(), 0.0, 0.0, 0.0]).unwrap();
        let head = HeadOutput::from_raw(&raw, SmokeKernel::zero(0.0)).unwrap();
        let k = head.kb.k();
        assert!(k.at(0, 0) > -1.0);
        assert!(k.at(0, 0) >= -1.0 + 1e-6 - 1e-15);
        assert!(k.at(0, 2).abs() < 1e-12);
    }

    #[test]
    fn loss_hand_values() {
        let jg = ColorField::filled(4, 4, [0.5; 3]);
        let j = ColorField::filled(4, 4, [0.7; 3]);
        let sg = ScalarField::filled(4, 4, [0.2]);
        let s = ScalarField::filled(4, 4, [0.1]);
        let l = loss_l1(&jg, &j, &sg, &s, 0.1).unwrap();
        assert!((l.total - 0.21).abs() < 1e-12);
        assert_eq!(loss_l1(&jg, &jg, &sg, &sg, 0.1).unwrap().total, 0.0);
        let l0 = loss_l1(&jg, &j, &sg, &s, 0.0).unwrap();
        assert!((l0.total - l0.image).abs() < 1e-15);
        assert!(loss_l1(&jg, &j, &sg, &ScalarField::zeros(4, 5), 0.1).is_err());
        assert!(loss_l1(&jg, &j, &sg, &s, -1.0).is_err());
    }

    /// Loss of the head as a function of flattened `[K, B, kernel, bias]`.
    struct HeadLoss {
        i: ColorField,
        j_gt: ColorField,
        s_gt: ScalarField,
        lambda: f64,
    }

    impl HeadLoss {
        fn unpack(&self, x: &[f64]) -> HeadOutput {
            let (h, w) = self.i.dims();
            let n = h * w;
            let mut weights = [0.0; 27];
            weights.copy_from_slice(&x[4 * n..4 * n + 27]);
            HeadOutput {
                kb: KBField::new(
                    ScalarField::new(h, w, x[..n].to_vec()).unwrap(),
                    ColorField::new(h, w, x[n..4 * n].to_vec()).unwrap(),
                )
                .unwrap(),
                kernel: SmokeKernel { weights, bias: x[4 * n + 27] },
            }
        }
    }

    impl Differentiable for HeadLoss {
        fn value(&self, x: &[f64]) -> Result<f64> {
            let fwd = head_forward(&self.i, &self.unpack(x))?;
            Ok(loss_l1(&self.j_gt, &fwd.j, &self.s_gt, &fwd.s, self.lambda)?.total)
        }

        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            let head = self.unpack(x);
            let fwd = head_forward(&self.i, &head)?;
            let (dj, ds) = loss_l1_grad(&self.j_gt, &fwd.j, &self.s_gt, &fwd.s, self.lambda);
            let g = head_backward(&self.i, &head, &fwd, &dj, &ds);
            let mut out = g.dk;
            out.extend(g.db);
            out.extend(g.dkernel.weights);
            out.push(g.dkernel.bias);
            Ok(out)
        }
    }

    #[test]
    fn head_gradients_match_central_differences() {
        let (h, w) = (6, 7);
        let n = h * w;
        let i = ColorField::from_fn(h, w, |y, x| {
            [0.2 + 0.05 * x as f64, 0.4 + 0.03 * y as f64, 0.6 - 0.02 * (x + y) as f64]
        });
        let mut x: Vec<f64> = (0..n).map(|p| 0.3 + 0.5 * ((p * 7) % 11) as f64 / 11.0).collect();
        x.extend((0..3 * n).map(|q| 0.1 + 0.4 * ((q * 5) % 13) as f64 / 13.0));
        x.extend((0..27).map(|t| 0.02 * (t as f64 - 13.0) / 13.0 + 0.04));
        x.push(0.05);
        let probe = HeadLoss { i: i.clone(), j_gt: i.clone(), s_gt: ScalarField::zeros(h, w), lambda: 0.1 };
        // Targets offset from the current prediction keep every |·| away from its kink.
        let fwd = head_forward(&i, &probe.unpack(&x)).unwrap();
        let j_gt = fwd.j.map(|v| v + 0.3);
        let s_gt = fwd.s.map(|v| v - 0.2);
        let f = HeadLoss { i, j_gt, s_gt, lambda: 0.1 };
        let report = grad_check(&f, &x, 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn grad_check_linear_and_quadratic_order() {
        let lin = FnPair(
            |x: &[f64]| 3.0 * x[0] - 2.0 * x[1] + 0.5 * x[2],
            |_: &[f64]| vec![3.0, -2.0, 0.5],
        );
        assert!(grad_check(&lin, &[0.3, -1.2, 4.0], 1e-3).unwrap().max_rel_error < 1e-10);

        // Cubic term gives an O(h²) central-difference error; halving h quarters it.
        let cubic = FnPair(|x: &[f64]| x[0].powi(3), |x: &[f64]| vec![3.0 * x[0] * x[0]]);
        let e1 = grad_check(&cubic, &[0.7], 1e-2).unwrap().max_rel_error;
        let e2 = grad_check(&cubic, &[0.7], 5e-3).unwrap().max_rel_error;
        let ratio = e1 / e2;
        assert!((2.0..=6.0).contains(&ratio), "ratio {ratio}");

        assert!(grad_check(&lin, &[0.0; 3], 0.0).is_err());
        let nan = FnPair(|_: &[f64]| f64::NAN, |_: &[f64]| vec![0.0]);
        assert!(matches!(grad_check(&nan, &[1.0], 1e-3), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_lipschitz(
            a in proptest::collection::vec(-1.0f64..2.0, 12),
            b in proptest::collection::vec(-1.0f64..2.0, 12),
            d in proptest::collection::vec(-0.5f64..0.5, 12),
            sa in proptest::collection::vec(0.0f64..1.0, 4),
            sb in proptest::collection::vec(0.0f64..1.0, 4),
            lambda in 0.0f64..1.0,
        ) {
            let jg = ColorField::new(2, 2, a).unwrap();
            let j = ColorField::new(2, 2, b.clone()).unwrap();
            let sg = ScalarField::new(2, 2, sa).unwrap();
            let s = ScalarField::new(2, 2, sb).unwrap();
            let l = loss_l1(&jg, &j, &sg, &s, lambda).unwrap().total;
            prop_assert!(l >= 0.0);
            prop_assert_eq!(loss_l1(&jg, &jg, &sg, &sg, lambda).unwrap().total, 0.0);
            let j2 = ColorField::new(2, 2, b.iter().zip(&d).map(|(x, y)| x + y).collect()).unwrap();
            let l2 = loss_l1(&jg, &j2, &sg, &s, lambda).unwrap().total;
            let dist = d.iter().map(|v| v.abs()).sum::<f64>() / 12.0;
            prop_assert!((l2 - l).abs() <= dist + 1e-12);
        }
    }
}
