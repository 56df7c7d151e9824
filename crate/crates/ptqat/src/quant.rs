//! Uniform symmetric quantization.
//!
//! A tensor is mapped to integer codes by `clip(round(x/s), -2^(b-1),
//! 2^(b-1)-1)` with a single per-tensor scale `s = maxabs(x) / (2^(b-1)-1)`.
//! Rounding is half-to-even. Fake quantization composes this with
//! dequantization (`s · code`) so quantized inference can be simulated in
//! float while staying differentiable: the gradient w.r.t. the input is a
//! straight-through pass inside the clip range and zero outside, and the
//! gradient w.r.t. a trainable scale follows the LSQ rule with its
//! `1/sqrt(n · Q_P)` normalizer.

use crate::error::{Error, Result};
use crate::tensor::{BackwardRule, InputGrads, Tensor};

/// What a quantizer is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantTarget {
    Weight,
    Activation,
}

/// Per-tensor quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Bit width, in `[2, 8]`.
    pub bits: u32,
    /// Step size `s`; strictly positive (1.0 sentinel for all-zero tensors).
    pub scale: f64,
    /// Whether `scale` is a trainable parameter.
    pub trainable: bool,
    pub target: QuantTarget,
}

impl QuantParams {
    pub fn new(bits: u32, scale: f64, trainable: bool, target: QuantTarget) -> QuantParams {
        QuantParams { bits, scale, trainable, target }
    }

    /// Lower clip bound `-2^(b-1)`.
    pub fn qmin(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    /// Upper clip bound `2^(b-1) - 1`.
    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }
}

/// Integer codes with their tensor shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Contract(format!("bits must be in [2,8], got {bits}")));
    }
    Ok(())
}

/// Step size for `bits`-wide symmetric quantization of `data`:
/// `maxabs / (2^(b-1)-1)`, with a 1.0 sentinel when the tensor is all zero.
pub fn compute_scale_slice(data: &[f64], bits: u32) -> Result<f64> {
    check_bits(bits)?;
    if data.is_empty() {
        return Err(Error::Contract("compute_scale on empty tensor".into()));
    }
    let maxabs = data.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if maxabs == 0.0 {
        return Ok(1.0);
    }
    Ok(maxabs / ((1i64 << (bits - 1)) - 1) as f64)
}

pub fn compute_scale(x: &Tensor, bits: u32) -> Result<f64> {
    compute_scale_slice(&x.data(), bits)
}

/// Integer codes of `data` under `p`, clipped to `[-2^(b-1), 2^(b-1)-1]`.
pub fn quantize_codes(data: &[f64], p: &QuantParams) -> Vec<i32> {
    let (lo, hi) = (p.qmin() as f64, p.qmax() as f64);
    data.iter()
        .map(|&v| (v / p.scale).round_ties_even().clamp(lo, hi) as i32)
        .collect()
}

pub fn quantize_int(x: &Tensor, p: &QuantParams) -> Result<IntTensor> {
    if p.scale <= 0.0 {
        return Err(Error::Contract(format!("scale must be positive, got {}", p.scale)));
    }
    check_bits(p.bits)?;
    Ok(IntTensor { shape: x.shape(), data: quantize_codes(&x.data(), p) })
}

/// Fake-quantized values: `s · clip(round(x/s))`, elementwise.
pub fn fake_quant_slice(data: &[f64], p: &QuantParams) -> Vec<f64> {
    let (lo, hi) = (p.qmin() as f64, p.qmax() as f64);
    data.iter()
        .map(|&v| p.scale * (v / p.scale).round_ties_even().clamp(lo, hi))
        .collect()
}

struct FakeQuant {
    bits: u32,
}

impl BackwardRule for FakeQuant {
    fn op_name(&self) -> &'static str {
        "fake_quant"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        let x = inputs[0].data();
        let s = inputs[1].data()[0];
        let qmin = -(1i64 << (self.bits - 1)) as f64;
        let qmax = ((1i64 << (self.bits - 1)) - 1) as f64;

        // STE: pass-through strictly inside the clip range, zero outside.
        let dx = if needs[0] {
            Some(
                out_grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| {
                        let r = v / s;
                        if r > qmin && r < qmax {
                            *g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        } else {
            None
        };

        // LSQ scale gradient: (round(r) - r) inside the range, the clip
        // bound itself outside, everything scaled by 1/sqrt(n · Q_P).
        let ds = if needs[1] {
            let norm = 1.0 / ((x.len() as f64) * qmax).sqrt();
            let mut acc = 0.0;
            for (g, &v) in out_grad.iter().zip(x.iter()) {
                let r = v / s;
                let local = if r <= qmin {
                    qmin
                } else if r >= qmax {
                    qmax
                } else {
                    r.round_ties_even() - r
                };
                acc += g * local * norm;
            }
            Some(vec![acc])
        } else {
            None
        };

        vec![dx, ds]
    }
}

/// Differentiable fake quantization of `x` at step size `scale` (a scalar
/// tensor; mark it `requires_grad` to train it LSQ-style).
pub fn fake_quant(x: &Tensor, scale: &Tensor, bits: u32) -> Result<Tensor> {
    check_bits(bits)?;
    if scale.numel() != 1 {
        return Err(Error::Contract("fake_quant scale must be a scalar tensor".into()));
    }
    let s = scale.data()[0];
    if s <= 0.0 {
        return Err(Error::Contract(format!("scale must be positive, got {s}")));
    }
    let p = QuantParams::new(bits, s, false, QuantTarget::Weight);
    let out = fake_quant_slice(&x.data(), &p);
    Ok(Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone(), scale.clone()],
        Box::new(FakeQuant { bits }),
    ))
}

/// Quantizer state attached to one layer.
#[derive(Debug, Clone)]
pub struct FakeQuantState {
    pub bits: u32,
    /// Scalar step-size tensor; `requires_grad` while training.
    pub scale: Tensor,
    /// Frozen layers keep PTQ weights and a fixed scale.
    pub frozen: bool,
    pub target: QuantTarget,
}

impl FakeQuantState {
    pub fn new(bits: u32, scale: f64, frozen: bool, target: QuantTarget) -> FakeQuantState {
        FakeQuantState { bits, scale: Tensor::scalar(scale), frozen, target }
    }

    pub fn scale_value(&self) -> f64 {
        self.scale.item()
    }

    pub fn params(&self) -> QuantParams {
        QuantParams::new(
            self.bits,
            self.scale_value(),
            self.scale.requires_grad(),
            self.target,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::testutil::seeded_vec;
    use proptest::prelude::*;

    fn wparams(bits: u32, scale: f64) -> QuantParams {
        QuantParams::new(bits, scale, false, QuantTarget::Weight)
    }

    #[test]
    fn scale_examples() {
        assert_eq!(compute_scale_slice(&[-7.0, 3.0, 7.0], 4).unwrap(), 1.0);
        assert_eq!(compute_scale_slice(&[0.0, 0.0, 0.0], 8).unwrap(), 1.0);
        let s = compute_scale_slice(&[-1.0, 0.5, 2.0], 4).unwrap();
        assert!((s - 2.0 / 7.0).abs() < 1e-15);
        assert!(matches!(
            compute_scale_slice(&[], 4),
            Err(crate::Error::Contract(_))
        ));
        assert!(matches!(
            compute_scale_slice(&[1.0], 9),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn quantize_examples() {
        let p = wparams(4, 2.0 / 7.0);
        assert_eq!(quantize_codes(&[-1.0, 0.5, 2.0], &p), vec![-4, 2, 7]);

        // grid points map to their own code
        let p = wparams(4, 0.25);
        for k in -8..=7i32 {
            assert_eq!(quantize_codes(&[k as f64 * 0.25], &p), vec![k]);
        }

        // clipping
        let p = wparams(4, 1.0);
        assert_eq!(quantize_codes(&[100.0], &p), vec![7]);
    }

    #[test]
    fn half_even_rounding() {
        let p = wparams(8, 1.0);
        assert_eq!(quantize_codes(&[0.5, 1.5, 2.5, -0.5, -1.5], &p), vec![0, 2, 2, 0, -2]);
    }

    #[test]
    fn fake_quant_fixed_points() {
        let scale = Tensor::scalar(0.5);
        let x = Tensor::from_vec(vec![4], vec![-2.0, -0.5, 0.0, 3.0]).unwrap();
        let y = fake_quant(&x, &scale, 4).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn ste_passthrough_and_clip() {
        let scale = Tensor::scalar(1.0);
        for (v, expect) in [(0.3, 1.0), (500.0, 0.0), (-500.0, 0.0)] {
            let x = Tensor::from_vec(vec![1], vec![v]).unwrap();
            x.set_requires_grad(true);
            let y = fake_quant(&x, &scale, 8).unwrap();
            ops::sum(&y).backward().unwrap();
            assert_eq!(x.grad().unwrap(), vec![expect], "x = {v}");
        }
    }

    #[test]
    fn lsq_scale_gradient_matches_piecewise_formula() {
        let bits = 4u32;
        let s = 0.37;
        let xs = vec![-3.0, -0.11, 0.2, 0.5, 2.0, 0.37 * 7.0 + 1.0];
        let scale = Tensor::scalar(s);
        scale.set_requires_grad(true);
        let x = Tensor::from_vec(vec![xs.len()], xs.clone()).unwrap();
        let y = fake_quant(&x, &scale, bits).unwrap();
        ops::sum(&y).backward().unwrap();
        let got = scale.grad().unwrap()[0];

        let (qmin, qmax) = (-8.0f64, 7.0f64);
        let norm = 1.0 / ((xs.len() as f64) * qmax).sqrt();
        let expect: f64 = xs
            .iter()
            .map(|&v| {
                let r = v / s;
                if r <= qmin {
                    qmin
                } else if r >= qmax {
                    qmax
                } else {
                    r.round_ties_even() - r
                }
            })
            .sum::<f64>()
            * norm;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn frozen_state_scale_is_not_trainable() {
        let st = FakeQuantState::new(4, 0.5, true, QuantTarget::Weight);
        assert!(!st.params().trainable);
        assert_eq!(st.scale_value(), 0.5);
    }

    proptest! {
        #[test]
        fn codes_stay_in_range(bits in 2u32..=8, seed in 0u64..1000) {
            let data = seeded_vec(64, seed);
            let s = compute_scale_slice(&data, bits).unwrap();
            let p = wparams(bits, s);
            for c in quantize_codes(&data, &p) {
                prop_assert!(c as i64 >= p.qmin() && c as i64 <= p.qmax());
            }
        }

        #[test]
        fn fake_quant_idempotent_codes(bits in 2u32..=8, seed in 0u64..1000) {
            let data = seeded_vec(32, seed);
            let s = compute_scale_slice(&data, bits).unwrap();
            let p = wparams(bits, s);
            let fq = fake_quant_slice(&data, &p);
            prop_assert_eq!(quantize_codes(&fq, &p), quantize_codes(&data, &p));
        }

        #[test]
        fn error_bounded_by_half_step_in_range(bits in 2u32..=8, seed in 0u64..1000) {
            let data = seeded_vec(32, seed);
            let s = compute_scale_slice(&data, bits).unwrap();
            let p = wparams(bits, s);
            let lo = s * p.qmin() as f64;
            let hi = s * p.qmax() as f64;
            let fq = fake_quant_slice(&data, &p);
            for (&v, &q) in data.iter().zip(fq.iter()) {
                if v >= lo && v <= hi {
                    prop_assert!((q - v).abs() <= s / 2.0 + 1e-15);
                }
            }
        }

        #[test]
        fn symmetry_away_from_ties(bits in 2u32..=8, seed in 0u64..1000) {
            let data = seeded_vec(32, seed);
            let s = compute_scale_slice(&data, bits).unwrap();
            let p = wparams(bits, s);
            let neg: Vec<f64> = data.iter().map(|v| -v).collect();
            let fq_pos = fake_quant_slice(&data, &p);
            let fq_neg = fake_quant_slice(&neg, &p);
            for ((&v, &qp), &qn) in data.iter().zip(&fq_pos).zip(&fq_neg) {
                let frac = (v / s).abs().fract();
                if (frac - 0.5).abs() > 1e-9 {
                    prop_assert_eq!(qn, -qp);
                }
            }
        }

        #[test]
        fn ste_mask_is_exact_indicator(bits in 2u32..=8, seed in 0u64..500) {
            let data: Vec<f64> = seeded_vec(16, seed).iter().map(|v| v * 4.0).collect();
            let s = 0.05 + (seed as f64) * 1e-4;
            let scale = Tensor::scalar(s);
            let x = Tensor::from_vec(vec![data.len()], data.clone()).unwrap();
            x.set_requires_grad(true);
            let y = fake_quant(&x, &scale, bits).unwrap();
            ops::sum(&y).backward().unwrap();
            let g = x.grad().unwrap();
            let qmin = -(1i64 << (bits - 1)) as f64;
            let qmax = ((1i64 << (bits - 1)) - 1) as f64;
            for (&v, &gv) in data.iter().zip(&g) {
                let r = v / s;
                let expect = if r > qmin && r < qmax { 1.0 } else { 0.0 };
                prop_assert_eq!(gv, expect);
            }
        }
    }
}
