//! Parametric paths through weight space between `w0` and `wT`.
//!
//! Curve parameters and control points live outside the tape; gradients for
//! them are assembled from `∂L/∂ŵ` with the closed-form derivatives here.

use crate::model::ParamVector;

/// `ŵ(α) = (1 − α)·w0 + α·wT`
#[derive(Debug, Clone, Copy)]
pub struct LinearTrajectory<'a> {
    pub w0: &'a [f64],
    pub wt: &'a [f64],
    pub alpha: f64,
}

impl<'a> LinearTrajectory<'a> {
    /// `alpha` is clamped to `[0, 1]`.
    pub fn new(w0: &'a [f64], wt: &'a [f64], alpha: f64) -> Self {
        assert_eq!(w0.len(), wt.len(), "trajectory endpoints differ in length");
        LinearTrajectory { w0, wt, alpha: alpha.clamp(0.0, 1.0) }
    }

    pub fn eval(&self) -> ParamVector {
        let a = self.alpha;
        self.w0
            .iter()
            .zip(self.wt)
            .map(|(&p, &q)| (1.0 - a) * p + a * q)
            .collect::<Vec<_>>()
            .into()
    }

    /// `∂ŵ/∂α = wT − w0`
    pub fn d_alpha(&self) -> ParamVector {
        self.wt.iter().zip(self.w0).map(|(q, p)| q - p).collect::<Vec<_>>().into()
    }
}

/// `ŵ(t, P1) = (1 − t)²·w0 + 2(1 − t)t·P1 + t²·wT`
#[derive(Debug, Clone, Copy)]
pub struct BezierTrajectory<'a> {
    pub w0: &'a [f64],
    pub wt: &'a [f64],
    pub p1: &'a [f64],
    pub t: f64,
}

impl<'a> BezierTrajectory<'a> {
    /// `t` is clamped to `[0, 1]`.
    pub fn new(w0: &'a [f64], wt: &'a [f64], p1: &'a [f64], t: f64) -> Self {
        assert_eq!(w0.len(), wt.len(), "trajectory endpoints differ in length");
        assert_eq!(w0.len(), p1.len(), "control point length differs from endpoints");
        BezierTrajectory { w0, wt, p1, t: t.clamp(0.0, 1.0) }
    }

    pub fn eval(&self) -> ParamVector {
        let t = self.t;
        let (b0, b1, b2) = ((1.0 - t) * (1.0 - t), 2.0 * (1.0 - t) * t, t * t);
        self.w0
            .iter()
            .zip(self.p1)
            .zip(self.wt)
            .map(|((&p, &c), &q)| b0 * p + b1 * c + b2 * q)
            .collect::<Vec<_>>()
            .into()
    }

    /// `∂ŵ/∂t = −2(1 − t)·w0 + 2(1 − 2t)·P1 + 2t·wT`
    pub fn d_t(&self) -> ParamVector {
        let t = self.t;
        self.w0
            .iter()
            .zip(self.p1)
            .zip(self.wt)
            .map(|((&p, &c), &q)| -2.0 * (1.0 - t) * p + 2.0 * (1.0 - 2.0 * t) * c + 2.0 * t * q)
            .collect::<Vec<_>>()
            .into()
    }

    /// Diagonal of `∂ŵ/∂P1`; see [`bezier_dp1_coeff`].
    pub fn d_p1_coeff(&self) -> f64 {
        bezier_dp1_coeff(self.t)
    }
}

/// `∂ŵ_i/∂P1_i = 2(1 − t)t`; the Jacobian is this scalar times identity.
pub fn bezier_dp1_coeff(t: f64) -> f64 {
    2.0 * (1.0 - t) * t
}
