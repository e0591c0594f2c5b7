//! Gradient inversion attacks on a single FedAVG observation.
//!
//! All four methods optimize dummy images so that the model gradient they
//! induce lines up with the observed update `Δw = w0 − wT`:
//!
//! - [`Variant::Dlg`]: squared distance to the pseudo-gradient `Δw/(η·T)` at `w0`
//! - [`Variant::Ig`]: cosine distance to `Δw` at `w0`, plus TV
//! - [`Variant::Sme`]: cosine distance at a point on the chord `w0 → wT`
//!   whose position `α` is learned
//! - [`Variant::NlSme`]: cosine distance at a point on a quadratic Bézier
//!   curve with learnable control point `P1` and curve parameter `t`, with
//!   per-parameter gradient scaling `d` and regularizers on both
//!
//! The tape only sees the surrogate point `ŵ`, the dummy pixels and `d`.
//! Gradients for `t`/`α` and `P1` are assembled from `∂L/∂ŵ` with the
//! closed-form path derivatives in [`crate::surrogate`].

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var, SQRT_EPS};
use crate::fedsim::Observation;
use crate::image::ImageBatch;
use crate::metrics::{self, MatchResult, MetricsError};
use crate::model::{self, ModelError, ParamVector};
use crate::surrogate::{bezier_dp1_coeff, BezierTrajectory, LinearTrajectory};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("degenerate gradient: dummy data produces a zero model gradient")]
    DegenerateGradient,
    #[error("degenerate observation: w0 equals wT")]
    DegenerateUpdate,
    #[error("length mismatch: {what} has {actual} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize, state: Box<AttackState> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl AttackError {
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            AttackError::Autodiff(AutodiffError::NonFinite { .. })
                | AttackError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dlg,
    Ig,
    Sme,
    #[serde(rename = "nlsme")]
    NlSme,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dlg => "dlg",
            Variant::Ig => "ig",
            Variant::Sme => "sme",
            Variant::NlSme => "nlsme",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub variant: Variant,
    /// Learn the Bézier control point; when off the surrogate is the chord.
    pub use_nlp: bool,
    /// Learn the per-parameter scaling `d` and regularize `P1` and `d`.
    pub use_pr: bool,
    pub lambda_tv: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub lambda_cls: f64,
    /// Adam step size for the dummy pixels (`η`).
    pub lr_dummy: f64,
    /// Step size for `t` (or `α`).
    pub lr_t: f64,
    pub lr_p1: f64,
    pub lr_d: f64,
    pub iterations: usize,
    /// Step-decay the learning rates by 10× at 3/8, 5/8 and 7/8 of the run.
    pub lr_decay: bool,
    #[serde(skip)]
    pub seed: u64,
    pub d_bounds: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            variant: Variant::NlSme,
            use_nlp: true,
            use_pr: true,
            lambda_tv: 1e-4,
            lambda_p: 1e-3,
            lambda_d: 1e-4,
            lambda_cls: 0.0,
            lr_dummy: 0.1,
            lr_t: 0.05,
            lr_p1: 0.03,
            lr_d: 0.3,
            iterations: 2000,
            lr_decay: true,
            seed: 0,
            d_bounds: (0.1, 10.0),
        }
    }
}

/// Which weight-space point the dummy gradient is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogatePath {
    /// `w0` itself (single-step baselines).
    Initial,
    Linear,
    Bezier,
}

impl AttackConfig {
    pub fn for_variant(variant: Variant) -> Self {
        AttackConfig { variant, ..Default::default() }
    }

    /// NL-SME with the given component flags.
    pub fn nlsme(use_nlp: bool, use_pr: bool) -> Self {
        AttackConfig { variant: Variant::NlSme, use_nlp, use_pr, ..Default::default() }
    }

    pub fn path(&self) -> SurrogatePath {
        match self.variant {
            Variant::Dlg | Variant::Ig => SurrogatePath::Initial,
            Variant::Sme => SurrogatePath::Linear,
            Variant::NlSme if self.use_nlp => SurrogatePath::Bezier,
            Variant::NlSme => SurrogatePath::Linear,
        }
    }

    pub fn scales_gradient(&self) -> bool {
        self.variant == Variant::NlSme && self.use_pr
    }

    pub fn regularizes_control(&self) -> bool {
        self.path() == SurrogatePath::Bezier && self.use_pr
    }

    /// Label used in reports, e.g. `nlsme`, `nlsme-nlp`, `nlsme-pr`.
    pub fn label(&self) -> String {
        match (self.variant, self.use_nlp, self.use_pr) {
            (Variant::NlSme, true, false) => "nlsme-nlp".into(),
            (Variant::NlSme, false, true) => "nlsme-pr".into(),
            (Variant::NlSme, false, false) => "nlsme-none".into(),
            (v, _, _) => v.name().into(),
        }
    }

    /// Inverse of [`AttackConfig::label`]: sets variant and flags on `self`.
    pub fn with_label(mut self, label: &str) -> Option<Self> {
        let (variant, nlp, pr) = match label {
            "dlg" => (Variant::Dlg, false, false),
            "ig" => (Variant::Ig, false, false),
            "sme" => (Variant::Sme, false, false),
            "nlsme" => (Variant::NlSme, true, true),
            "nlsme-nlp" => (Variant::NlSme, true, false),
            "nlsme-pr" => (Variant::NlSme, false, true),
            "nlsme-none" => (Variant::NlSme, false, false),
            _ => return None,
        };
        self.variant = variant;
        self.use_nlp = nlp;
        self.use_pr = pr;
        Some(self)
    }

    /// Learning rates must satisfy `η > η_t > η_P1` unless the trajectory
    /// variables are frozen (`η_t = η_P1 = 0`).
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        let lambdas = [self.lambda_tv, self.lambda_p, self.lambda_d, self.lambda_cls];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("regularization weights must be finite and non-negative".into());
        }
        let lrs = [self.lr_dummy, self.lr_t, self.lr_p1, self.lr_d];
        if lrs.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("learning rates must be finite and non-negative".into());
        }
        let frozen = self.lr_t == 0.0 && self.lr_p1 == 0.0;
        if !frozen && !(self.lr_dummy > self.lr_t && self.lr_t > self.lr_p1) {
            return bad(format!(
                "learning rates must satisfy lr_dummy > lr_t > lr_p1, got {} / {} / {}",
                self.lr_dummy, self.lr_t, self.lr_p1
            ));
        }
        let (lo, hi) = self.d_bounds;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return bad(format!("d_bounds ({lo}, {hi}) must bracket 1 and be positive"));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        Ok(())
    }

    fn lr_factor(&self, iteration: usize) -> f64 {
        if !self.lr_decay {
            return 1.0;
        }
        let n = self.iterations as f64;
        let i = iteration as f64;
        let passed = [3.0, 5.0, 7.0].iter().filter(|&&m| i >= n * m / 8.0).count();
        0.1f64.powi(passed as i32)
    }
}

/// Jointly optimized attack variables.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    /// Dummy images `D̃` with the fixed labels `ỹ`.
    pub dummy: ImageBatch,
    /// Curve parameter `t`; plays the role of `α` on the linear path.
    pub t: f64,
    pub p1: ParamVector,
    pub d: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_step: i32,
}

impl AttackState {
    /// `P1 = (w0 + wT)/2`, `t = 0.5`, `d = 1`, pixels uniform in `[0, 1]`.
    pub fn init(obs: &Observation, labels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = obs.spec.input_dims;
        let count = labels.len() * obs.spec.input_len();
        let pixels = (0..count).map(|_| rng.gen::<f64>()).collect();
        let dummy = ImageBatch::new(dims, pixels, labels.to_vec()).expect("sizes agree by construction");
        AttackState::from_dummy(obs, dummy)
    }

    /// Starts from the given images instead of random ones.
    pub fn from_dummy(obs: &Observation, dummy: ImageBatch) -> Self {
        let n = dummy.pixels.len();
        AttackState {
            dummy,
            t: 0.5,
            p1: obs.w0.midpoint(&obs.wt),
            d: vec![1.0; obs.w0.len()],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_step: 0,
        }
    }

    /// Clamp `t` to `[0, 1]`, `d` to its bounds and pixels to `[0, 1]`.
    pub fn project(&mut self, d_bounds: (f64, f64)) {
        self.t = self.t.clamp(0.0, 1.0);
        for d in &mut self.d {
            *d = d.clamp(d_bounds.0, d_bounds.1);
        }
        for p in &mut self.dummy.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Surrogate point `ŵ` for the given path.
    pub fn surrogate(&self, obs: &Observation, path: SurrogatePath) -> ParamVector {
        match path {
            SurrogatePath::Initial => obs.w0.clone(),
            SurrogatePath::Linear => LinearTrajectory::new(&obs.w0, &obs.wt, self.t).eval(),
            SurrogatePath::Bezier => BezierTrajectory::new(&obs.w0, &obs.wt, &self.p1, self.t).eval(),
        }
    }
}

/// Loss terms at one evaluation. Inactive terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Cosine direction mismatch (`L_sim`); for DLG this is reported but
    /// not optimized.
    pub lcos: f64,
    pub ltv: f64,
    pub lp: f64,
    pub ld: f64,
    pub lcls: f64,
    /// Squared distance to the pseudo-gradient (DLG only).
    pub ldlg: f64,
}

/// Gradients of the total loss with respect to every attack variable.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackGrads {
    pub pixels: Vec<f64>,
    pub t: f64,
    pub p1: Option<Vec<f64>>,
    pub d: Option<Vec<f64>>,
    /// `∂L/∂ŵ` of the taped part of the loss.
    pub w_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub total: f64,
    pub lcos: f64,
    pub ltv: f64,
    pub lp: f64,
    pub ld: f64,
    pub t: f64,
    /// `‖P1 − (w0 + wT)/2‖`
    pub p1_offset: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Dummy images at the iterate with the lowest `L_cos`.
    pub reconstruction: ImageBatch,
    pub final_lsim: f64,
    pub best_iteration: usize,
    pub history: Vec<HistoryEntry>,
    pub wall_time: Duration,
    /// Bytes of parameter-sized buffers plus peak tape storage.
    pub peak_param_mem_estimate: usize,
    pub final_state: AttackState,
    /// Present when ground truth was supplied.
    pub quality: Option<MatchResult>,
}

/// `1 − ⟨Δw, g⟩/(‖Δw‖·‖g‖)`.
pub fn cosine_direction_loss(delta: &[f64], g: &[f64]) -> Result<f64> {
    if delta.len() != g.len() {
        return Err(AttackError::Length { what: "gradient", expected: delta.len(), actual: g.len() });
    }
    let nd = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nd == 0.0 {
        return Err(AttackError::DegenerateUpdate);
    }
    if ng == 0.0 {
        return Err(AttackError::DegenerateGradient);
    }
    let dot: f64 = delta.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nd * ng))
}

/// Isotropic total variation summed over images, channels and pixels.
///
/// Differences past the right or bottom edge are zero. Each term is
/// `sqrt(dx² + dy² + ε) − sqrt(ε)`, so a constant image scores exactly 0.
pub fn tv_loss(batch: &ImageBatch) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(batch.pixels.clone()));
    let tv = tv_on_tape(&mut tape, x, batch.len(), batch.dims()).expect("indices are in range");
    tape.value(tv).item()
}

/// Records [`tv_loss`] for pixels `x` (any shape holding `n·C·H·W` values).
pub fn tv_on_tape(
    tape: &mut Tape,
    x: Var,
    n: usize,
    (channels, height, width): (usize, usize, usize),
) -> std::result::Result<Var, AutodiffError> {
    let total = n * channels * height * width;
    let mut right = Vec::with_capacity(total);
    let mut down = Vec::with_capacity(total);
    for plane in 0..n * channels {
        for y in 0..height {
            for xx in 0..width {
                let p = (plane * height + y) * width + xx;
                right.push(if xx + 1 < width { p + 1 } else { p });
                down.push(if y + 1 < height { p + width } else { p });
            }
        }
    }
    let flat = tape.reshape(x, vec![total])?;
    let shifted_r = tape.gather(flat, Rc::from(right))?;
    let shifted_d = tape.gather(flat, Rc::from(down))?;
    let dx = tape.sub(shifted_r, flat)?;
    let dy = tape.sub(shifted_d, flat)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let sq = tape.add(dx2, dy2)?;
    let mag = tape.sqrt_eps(sq)?;
    let mag = tape.affine(mag, 1.0, -SQRT_EPS.sqrt())?;
    tape.sum(mag)
}

/// `‖P1 − (w0 + wT)/2‖²`
pub fn control_reg(p1: &[f64], w0: &[f64], wt: &[f64]) -> f64 {
    p1.iter()
        .zip(w0)
        .zip(wt)
        .map(|((&p, &a), &b)| {
            let r = p - 0.5 * (a + b);
            r * r
        })
        .sum()
}

/// `∂/∂P1 of λ_P·‖P1 − mid‖² = 2λ_P(P1 − mid)`
pub fn control_reg_grad(p1: &[f64], w0: &[f64], wt: &[f64], lambda_p: f64) -> Vec<f64> {
    p1.iter()
        .zip(w0)
        .zip(wt)
        .map(|((&p, &a), &b)| 2.0 * lambda_p * (p - 0.5 * (a + b)))
        .collect()
}

/// Elementwise `d_i · g_i`.
pub fn dvec_scale(g: &[f64], d: &[f64]) -> Result<ParamVector> {
    if g.len() != d.len() {
        return Err(AttackError::Length { what: "scaling vector", expected: g.len(), actual: d.len() });
    }
    Ok(g.iter().zip(d).map(|(a, b)| a * b).collect::<Vec<_>>().into())
}

/// `Σ (d_i − 1)²`
pub fn d_reg(d: &[f64]) -> f64 {
    d.iter().map(|v| (v - 1.0) * (v - 1.0)).sum()
}

/// `Δw / (η·T)`: the average per-step gradient if training were plain SGD.
pub fn pseudo_gradient(obs: &Observation) -> ParamVector {
    let denom = obs.client.lr * obs.client.local_steps() as f64;
    obs.delta().iter().map(|v| v / denom).collect::<Vec<_>>().into()
}

/// Evaluates the configured attack loss at `state`; with `with_grads` also
/// differentiates it with respect to every variable.
pub fn evaluate(
    state: &AttackState,
    obs: &Observation,
    cfg: &AttackConfig,
    with_grads: bool,
) -> Result<(LossTerms, Option<AttackGrads>)> {
    let (terms, grads, _) = evaluate_inner(state, obs, cfg, with_grads)?;
    Ok((terms, grads))
}

fn evaluate_inner(
    state: &AttackState,
    obs: &Observation,
    cfg: &AttackConfig,
    with_grads: bool,
) -> Result<(LossTerms, Option<AttackGrads>, usize)> {
    let plen = obs.w0.len();
    if obs.wt.len() != plen || state.p1.len() != plen || state.d.len() != plen {
        return Err(AttackError::Length { what: "parameter vector", expected: plen, actual: state.p1.len() });
    }
    let path = cfg.path();
    let w_hat = state.surrogate(obs, path);
    let delta = obs.delta();
    let delta_norm = delta.norm();
    if delta_norm == 0.0 {
        return Err(AttackError::DegenerateUpdate);
    }
    let unit: Vec<f64> = delta.iter().map(|v| v / delta_norm).collect();
    let dummy = &state.dummy;

    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::vector(w_hat.to_vec()));
    let x = tape.leaf(Tensor::new(vec![dummy.len(), dummy.image_len()], dummy.pixels.clone()));
    let d_leaf = cfg.scales_gradient().then(|| tape.leaf(Tensor::vector(state.d.clone())));

    let train_loss = model::loss_on_tape(&mut tape, &obs.spec, w, x, &dummy.labels)?;
    let g = tape.grad(train_loss, &[w], true)?[0];
    let g_scaled = match d_leaf {
        Some(d) => tape.mul(g, d)?,
        None => g,
    };

    let g_norm = tape.l2_norm(g_scaled)?;
    if tape.value(g_norm).item() == 0.0 {
        return Err(AttackError::DegenerateGradient);
    }
    let u = tape.constant(Tensor::vector(unit));
    let num = tape.dot(u, g_scaled)?;
    let inv = tape.recip(g_norm)?;
    let cos = tape.mul(num, inv)?;
    let lcos = tape.affine(cos, -1.0, 1.0)?;
    let tv = tv_on_tape(&mut tape, x, dummy.len(), dummy.dims())?;

    let mut objective = if cfg.variant == Variant::Dlg {
        let target = tape.constant(Tensor::vector(pseudo_gradient(obs).into_inner()));
        let diff = tape.sub(g, target)?;
        tape.dot(diff, diff)?
    } else {
        lcos
    };
    let mut terms = LossTerms {
        lcos: tape.value(lcos).item(),
        ltv: tape.value(tv).item(),
        lcls: tape.value(train_loss).item(),
        ..Default::default()
    };
    if cfg.variant == Variant::Dlg {
        terms.ldlg = tape.value(objective).item();
    }
    if cfg.variant != Variant::Dlg && cfg.lambda_tv > 0.0 {
        let t = tape.scale(tv, cfg.lambda_tv)?;
        objective = tape.add(objective, t)?;
    }
    if let Some(d) = d_leaf {
        let shifted = tape.affine(d, 1.0, -1.0)?;
        let ld = tape.dot(shifted, shifted)?;
        terms.ld = tape.value(ld).item();
        if cfg.lambda_d > 0.0 {
            let t = tape.scale(ld, cfg.lambda_d)?;
            objective = tape.add(objective, t)?;
        }
    }
    if cfg.lambda_cls > 0.0 {
        let t = tape.scale(train_loss, cfg.lambda_cls)?;
        objective = tape.add(objective, t)?;
    }
    terms.total = tape.value(objective).item();
    if cfg.regularizes_control() {
        terms.lp = control_reg(&state.p1, &obs.w0, &obs.wt);
        terms.total += cfg.lambda_p * terms.lp;
    }
    if !terms.total.is_finite() {
        return Err(AutodiffError::NonFinite { op: "attack loss" }.into());
    }

    if !with_grads {
        return Ok((terms, None, tape.peak_bytes()));
    }

    let mut leaves = vec![w, x];
    leaves.extend(d_leaf);
    let mut grads = tape.grad_values(objective, &leaves)?.into_iter();
    let gw = grads.next().expect("w grad").into_data();
    let gx = grads.next().expect("x grad").into_data();
    let gd = grads.next().map(Tensor::into_data);
    let peak = tape.peak_bytes();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (gt, gp1) = match path {
        SurrogatePath::Initial => (0.0, None),
        SurrogatePath::Linear => (dot(&gw, &LinearTrajectory::new(&obs.w0, &obs.wt, state.t).d_alpha()), None),
        SurrogatePath::Bezier => {
            let curve = BezierTrajectory::new(&obs.w0, &obs.wt, &state.p1, state.t);
            let coeff = bezier_dp1_coeff(state.t);
            let mut gp1: Vec<f64> = gw.iter().map(|g| g * coeff).collect();
            if cfg.regularizes_control() {
                let reg = control_reg_grad(&state.p1, &obs.w0, &obs.wt, cfg.lambda_p);
                for (a, b) in gp1.iter_mut().zip(reg) {
                    *a += b;
                }
            }
            (dot(&gw, &curve.d_t()), Some(gp1))
        }
    };
    Ok((terms, Some(AttackGrads { pixels: gx, t: gt, p1: gp1, d: gd, w_hat: gw }), peak))
}

/// NL-SME objective `L_cos + λ_TV·L_TV + λ_P·L_P + λ_d·L_d (+ λ_cls·L_cls)`
/// with the component flags taken from `cfg`.
pub fn nlsme_total_loss(state: &AttackState, obs: &Observation, cfg: &AttackConfig) -> Result<LossTerms> {
    let cfg = AttackConfig { variant: Variant::NlSme, ..cfg.clone() };
    Ok(evaluate(state, obs, &cfg, false)?.0)
}

/// SME objective at `α = state.t`.
pub fn sme_loss(state: &AttackState, obs: &Observation, lambda_tv: f64) -> Result<LossTerms> {
    let cfg = AttackConfig { variant: Variant::Sme, lambda_tv, lambda_cls: 0.0, ..Default::default() };
    Ok(evaluate(state, obs, &cfg, false)?.0)
}

/// `‖Δw/(η·T) − ∇ℓ(w0, D̃)‖²`
pub fn dlg_loss(state: &AttackState, obs: &Observation) -> Result<f64> {
    let cfg = AttackConfig { variant: Variant::Dlg, lambda_cls: 0.0, ..Default::default() };
    Ok(evaluate(state, obs, &cfg, false)?.0.ldlg)
}

/// Cosine distance between `Δw` and `∇ℓ(w0, D̃)` plus `λ_TV·TV`.
pub fn ig_loss(state: &AttackState, obs: &Observation, lambda_tv: f64) -> Result<LossTerms> {
    let cfg = AttackConfig { variant: Variant::Ig, lambda_tv, lambda_cls: 0.0, ..Default::default() };
    Ok(evaluate(state, obs, &cfg, false)?.0)
}

/// One iteration: evaluate and differentiate at the current state, update
/// every active variable, then project. Returns the terms evaluated before
/// the update.
pub fn attack_step(state: &mut AttackState, obs: &Observation, cfg: &AttackConfig, iteration: usize) -> Result<LossTerms> {
    Ok(step_inner(state, obs, cfg, iteration)?.0)
}

fn step_inner(
    state: &mut AttackState,
    obs: &Observation,
    cfg: &AttackConfig,
    iteration: usize,
) -> Result<(LossTerms, usize)> {
    let (terms, grads, peak) = match evaluate_inner(state, obs, cfg, true) {
        Ok((t, Some(g), p)) => (t, g, p),
        Ok((_, None, _)) => unreachable!("gradients requested"),
        Err(e) if e.is_non_finite() => {
            return Err(AttackError::NonFinite { iteration, state: Box::new(state.clone()) });
        }
        Err(e) => return Err(e),
    };
    let factor = cfg.lr_factor(iteration);

    let lr = cfg.lr_dummy * factor;
    if lr > 0.0 {
        state.adam_step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(state.adam_step);
        let c2 = 1.0 - ADAM_BETA2.powi(state.adam_step);
        for (i, g) in grads.pixels.iter().enumerate() {
            state.adam_m[i] = ADAM_BETA1 * state.adam_m[i] + (1.0 - ADAM_BETA1) * g;
            state.adam_v[i] = ADAM_BETA2 * state.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.adam_m[i] / c1;
            let v_hat = state.adam_v[i] / c2;
            state.dummy.pixels[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    if cfg.path() != SurrogatePath::Initial {
        state.t -= cfg.lr_t * factor * grads.t;
    }
    if let Some(gp1) = &grads.p1 {
        let lr = cfg.lr_p1 * factor;
        for (p, g) in state.p1.iter_mut().zip(gp1) {
            *p -= lr * g;
        }
    }
    if let Some(gd) = &grads.d {
        let lr = cfg.lr_d * factor;
        for (d, g) in state.d.iter_mut().zip(gd) {
            *d -= lr * g;
        }
    }
    state.project(cfg.d_bounds);
    Ok((terms, peak))
}

/// Runs the full attack from a seeded random start and keeps the iterate
/// with the lowest `L_cos`.
///
/// `labels` are the client's labels, one per dummy image (the attacker is
/// assumed to have recovered them). With `ground_truth`, the best
/// reconstruction is also matched and scored against it.
pub fn run_attack(
    obs: &Observation,
    cfg: &AttackConfig,
    labels: &[usize],
    ground_truth: Option<&ImageBatch>,
) -> Result<AttackResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = AttackState::init(obs, labels, cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, ImageBatch)> = None;
    let mut peak_tape = 0;
    let mid = obs.w0.midpoint(&obs.wt);

    for iteration in 0..cfg.iterations {
        let pixels_before = state.dummy.clone();
        let t_before = state.t;
        let p1_offset = state.p1.sub(&mid).norm();
        let (terms, peak) = step_inner(&mut state, obs, cfg, iteration)?;
        peak_tape = peak_tape.max(peak);
        history.push(HistoryEntry {
            iteration,
            total: terms.total,
            lcos: terms.lcos,
            ltv: terms.ltv,
            lp: terms.lp,
            ld: terms.ld,
            t: t_before,
            p1_offset,
        });
        if best.as_ref().is_none_or(|(l, _, _)| terms.lcos < *l) {
            best = Some((terms.lcos, iteration, pixels_before));
        }
    }

    let (final_lsim, best_iteration, reconstruction) = best.expect("at least one iteration");
    let quality = ground_truth.map(|gt| metrics::match_batch(&reconstruction, gt)).transpose()?;
    Ok(AttackResult {
        reconstruction,
        final_lsim,
        best_iteration,
        history,
        wall_time: start.elapsed(),
        peak_param_mem_estimate: param_mem_estimate(cfg, obs.w0.len(), state.dummy.pixels.len()) + peak_tape,
        final_state: state,
        quality,
    })
}

/// Bytes held outside the tape by a run: the parameter-sized vectors the
/// variant keeps alive plus the pixel optimizer state.
pub fn param_mem_estimate(cfg: &AttackConfig, param_count: usize, pixel_count: usize) -> usize {
    // w0, wT, Δw direction, ŵ, ∂L/∂ŵ
    let mut vectors = 5;
    match cfg.path() {
        SurrogatePath::Bezier => vectors += 3, // P1, ∂L/∂P1, midpoint
        SurrogatePath::Linear => vectors += 1, // ∂ŵ/∂α
        SurrogatePath::Initial => {}
    }
    if cfg.scales_gradient() {
        vectors += 2; // d, ∂L/∂d
    }
    8 * (vectors * param_count + 4 * pixel_count)
}

/// `‖∇ℓ(ŵ, D)/‖∇ℓ(ŵ, D)‖ − Δw/‖Δw‖‖`, in `[0, 2]`.
pub fn direction_bias(w_hat: &ParamVector, true_data: &ImageBatch, obs: &Observation) -> Result<f64> {
    let g = model::grad_params(&obs.spec, w_hat, true_data)?;
    let delta = obs.delta();
    let (ng, nd) = (g.norm(), delta.norm());
    if ng == 0.0 {
        return Err(AttackError::DegenerateGradient);
    }
    if nd == 0.0 {
        return Err(AttackError::DegenerateUpdate);
    }
    Ok(g.iter()
        .zip(delta.iter())
        .map(|(a, b)| (a / ng - b / nd).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let dw = [1.0, -2.0, 0.5];
        let scaled: Vec<f64> = dw.iter().map(|v| 3.0 * v).collect();
        assert!(cosine_direction_loss(&dw, &scaled).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = dw.iter().map(|v| -v).collect();
        assert!((cosine_direction_loss(&dw, &neg).unwrap() - 2.0).abs() < 1e-15);
        assert!((cosine_direction_loss(&[1.0, 0.0], &[0.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_direction_loss(&dw, &[0.0; 3]), Err(AttackError::DegenerateGradient)));
        assert!(matches!(cosine_direction_loss(&[0.0; 3], &dw), Err(AttackError::DegenerateUpdate)));
    }

    #[test]
    fn regularizers() {
        assert_eq!(d_reg(&[1.0, 1.0]), 0.0);
        assert_eq!(d_reg(&[2.0, 2.0]), 2.0);
        assert!((d_reg(&[0.1]) - 0.81).abs() < 1e-15);
        let w0 = [1.0, 2.0];
        let wt = [3.0, -2.0];
        assert_eq!(control_reg(&[2.0, 0.0], &w0, &wt), 0.0);
        // P1 = w0 → ‖(w0 − wT)/2‖² = 1 + 4
        assert_eq!(control_reg(&w0, &w0, &wt), 5.0);
    }

    #[test]
    fn dvec_identity_and_mismatch() {
        let g = [0.5, -1.5, 2.0];
        assert_eq!(&*dvec_scale(&g, &[1.0; 3]).unwrap(), &g);
        assert!(matches!(dvec_scale(&g, &[1.0; 2]), Err(AttackError::Length { .. })));
    }

    #[test]
    fn dvec_rotates_direction() {
        // Δw = (1, 1), g = (1, 0.5): cos = 1.5/(√2·√1.25).
        // d = (1, 2) gives d⊙g = (1, 1), perfectly aligned.
        let dw = [1.0, 1.0];
        let g = [1.0, 0.5];
        let before = cosine_direction_loss(&dw, &g).unwrap();
        assert!((before - (1.0 - 1.5 / (2f64.sqrt() * 1.25f64.sqrt()))).abs() < 1e-15);
        let after = cosine_direction_loss(&dw, &dvec_scale(&g, &[1.0, 2.0]).unwrap()).unwrap();
        assert!(after.abs() < 1e-15);
        let uniform = cosine_direction_loss(&dw, &dvec_scale(&g, &[2.0, 2.0]).unwrap()).unwrap();
        assert!((uniform - before).abs() < 1e-15);
    }

    #[test]
    fn tv_step_edge_and_constant() {
        let step = ImageBatch::new((1, 2, 2), vec![0.0, 1.0, 0.0, 1.0], vec![0]).unwrap();
        let expect = 2.0 * ((1.0 + SQRT_EPS).sqrt() - SQRT_EPS.sqrt());
        assert!((tv_loss(&step) - expect).abs() < 1e-12);
        assert!((tv_loss(&step) - 2.0).abs() < 1e-3);
        let flat = ImageBatch::new((1, 8, 8), vec![0.4; 64], vec![0]).unwrap();
        assert!(tv_loss(&flat).abs() < 1e-3);
    }

    #[test]
    fn config_labels_round_trip() {
        for label in ["dlg", "ig", "sme", "nlsme", "nlsme-nlp", "nlsme-pr", "nlsme-none"] {
            let cfg = AttackConfig::default().with_label(label).unwrap();
            assert_eq!(cfg.label(), label);
        }
        assert!(AttackConfig::default().with_label("fedleak").is_none());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = AttackConfig { lr_t: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AttackConfig { lr_p1: 0.05, ..Default::default() };
        assert!(bad.validate().is_err());
        let frozen = AttackConfig { lr_dummy: 0.0, lr_t: 0.0, lr_p1: 0.0, lr_d: 0.0, ..Default::default() };
        assert!(frozen.validate().is_ok());
        let bad = AttackConfig { d_bounds: (2.0, 10.0), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AttackConfig { iterations: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AttackConfig { lambda_tv: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lr_schedule_milestones() {
        let cfg = AttackConfig { iterations: 800, ..Default::default() };
        assert_eq!(cfg.lr_factor(0), 1.0);
        assert_eq!(cfg.lr_factor(299), 1.0);
        assert!((cfg.lr_factor(300) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_factor(799) - 1e-3).abs() < 1e-15);
        let flat = AttackConfig { lr_decay: false, ..cfg };
        assert_eq!(flat.lr_factor(799), 1.0);
    }

    #[test]
    fn projection_is_idempotent() {
        let spec = crate::model::ModelSpec::new((1, 2, 2), vec![], 2);
        let w0 = ParamVector::new(vec![0.1; spec.param_count()]);
        let wt = ParamVector::new(vec![0.0; spec.param_count()]);
        let obs = Observation {
            w0,
            wt,
            n: 1,
            spec,
            client: Default::default(),
        };
        let mut s = AttackState::init(&obs, &[1], 3);
        s.t = 1.7;
        s.d[0] = 20.0;
        s.d[1] = -3.0;
        s.dummy.pixels[0] = -0.5;
        s.project((0.1, 10.0));
        let once = s.clone();
        s.project((0.1, 10.0));
        assert_eq!(s, once);
        assert_eq!(once.t, 1.0);
        assert_eq!((once.d[0], once.d[1]), (10.0, 0.1));
        assert_eq!(once.dummy.pixels[0], 0.0);
    }
}
