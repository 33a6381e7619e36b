//! The trainable embedding model: per-frame affine + nonlinearity, mean
//! pooling over frames, then an output affine map.
//!
//! Parameters live in one flat buffer so that SGD, the momentum update and
//! finite-difference checks all operate on plain slices. Layout:
//! `w1 (hidden x input) | b1 (hidden) | w2 (embed x hidden) | b2 (embed)`.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

const CHECKPOINT_MAGIC: &str = "mdssl-encoder v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self { input: 8, hidden: 32, embed: 16 }
    }
}

impl EncoderDims {
    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.embed * self.hidden + self.embed
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.embed == 0 {
            return Err(Error::InvalidConfig(format!("encoder dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    /// Linear mode, used to test the affine path in isolation.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// A contiguous run of frames cut from one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// One frame per row.
    pub frames: Matrix,
    pub utterance_id: usize,
    pub domain_id: usize,
}

/// Encoder parameters, also used as the container for their gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    activation: Activation,
    values: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(dims: EncoderDims, activation: Activation) -> Result<Self> {
        dims.validate()?;
        Ok(Self { dims, activation, values: vec![0.0; dims.param_count()] })
    }

    pub fn from_flat(dims: EncoderDims, activation: Activation, values: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.param_count() {
            return Err(Error::Shape(format!(
                "encoder {dims:?} needs {} parameters, got {}",
                dims.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameter".into()));
        }
        Ok(Self { dims, activation, values })
    }

    /// Gaussian init scaled by fan-in; biases start at zero.
    pub fn random<R: Rng + ?Sized>(dims: EncoderDims, activation: Activation, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims, activation)?;
        let n1 = Normal::new(0.0, (1.0 / dims.input as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / dims.hidden as f64).sqrt()).expect("positive std");
        let (w1, _, w2, _) = p.offsets();
        for v in &mut p.values[w1.clone()] {
            *v = n1.sample(rng);
        }
        for v in &mut p.values[w2.clone()] {
            *v = n2.sample(rng);
        }
        Ok(p)
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offsets(
        &self,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let EncoderDims { input, hidden, embed } = self.dims;
        let a = hidden * input;
        let b = a + hidden;
        let c = b + embed * hidden;
        (0..a, a..b, b..c, c..c + embed)
    }

    pub fn w1(&self) -> &[f64] {
        &self.values[self.offsets().0]
    }
    pub fn b1(&self) -> &[f64] {
        &self.values[self.offsets().1]
    }
    pub fn w2(&self) -> &[f64] {
        &self.values[self.offsets().2]
    }
    pub fn b2(&self) -> &[f64] {
        &self.values[self.offsets().3]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let r = self.offsets().0;
        &mut self.values[r]
    }
    pub fn b1_mut(&mut self) -> &mut [f64] {
        let r = self.offsets().1;
        &mut self.values[r]
    }
    pub fn w2_mut(&mut self) -> &mut [f64] {
        let r = self.offsets().2;
        &mut self.values[r]
    }
    pub fn b2_mut(&mut self) -> &mut [f64] {
        let r = self.offsets().3;
        &mut self.values[r]
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("encoder {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        crate::numerics::norm(&self.values)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Checkpoint text: header, dims, activation, then one value per line
    /// with 17 significant digits, which round-trips every f64 exactly.
    pub fn to_checkpoint_string(&self) -> String {
        let EncoderDims { input, hidden, embed } = self.dims;
        let mut out = String::with_capacity(self.values.len() * 26 + 64);
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "dims {input} {hidden} {embed}");
        let _ = writeln!(out, "activation {}", self.activation.name());
        let _ = writeln!(out, "values {}", self.values.len());
        for v in &self.values {
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse(format!("checkpoint missing {what}")));
        if next("header")?.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not an encoder checkpoint".into()));
        }
        let dims_line = next("dims")?;
        let nums: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| Error::Parse("expected `dims` line".into()))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| Error::Parse(format!("dims: {e}"))))
            .collect::<Result<_>>()?;
        let [input, hidden, embed] = nums[..] else {
            return Err(Error::Parse("dims needs three values".into()));
        };
        let activation = match next("activation")?.strip_prefix("activation ") {
            Some("tanh") => Activation::Tanh,
            Some("identity") => Activation::Identity,
            other => return Err(Error::Parse(format!("unknown activation {other:?}"))),
        };
        let count: usize = next("value count")?
            .strip_prefix("values ")
            .ok_or_else(|| Error::Parse("expected `values` line".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("value count: {e}")))?;
        let values = (0..count)
            .map(|i| {
                next("value")?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("value {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_flat(EncoderDims { input, hidden, embed }, activation, values)
    }
}

struct Forward {
    /// Activations, one row per frame.
    hidden: Vec<f64>,
    pooled: Vec<f64>,
    out: Vec<f64>,
}

fn forward(p: &EncoderParams, s: &Segment) -> Result<Forward> {
    let EncoderDims { input, hidden, embed } = p.dims;
    if s.frames.cols() != input {
        return Err(Error::Shape(format!("frame dim {} but encoder expects {input}", s.frames.cols())));
    }
    let t = s.frames.rows();
    if t == 0 {
        return Err(Error::Shape("segment has no frames".into()));
    }
    let (w1, b1, w2, b2) = (p.w1(), p.b1(), p.w2(), p.b2());
    let mut acts = vec![0.0; t * hidden];
    let mut pooled = vec![0.0; hidden];
    for (frame, a) in s.frames.row_iter().zip(acts.chunks_exact_mut(hidden)) {
        for h in 0..hidden {
            let z = b1[h] + crate::numerics::dot(&w1[h * input..(h + 1) * input], frame);
            a[h] = p.activation.apply(z);
            pooled[h] += a[h];
        }
    }
    let inv_t = 1.0 / t as f64;
    pooled.iter_mut().for_each(|v| *v *= inv_t);
    let out = (0..embed)
        .map(|k| b2[k] + crate::numerics::dot(&w2[k * hidden..(k + 1) * hidden], &pooled))
        .collect();
    Ok(Forward { hidden: acts, pooled, out })
}

/// Embeds a segment. The output is not length-normalized.
pub fn encode(p: &EncoderParams, s: &Segment) -> Result<Vector> {
    Vector::new(forward(p, s)?.out)
}

/// Gradient of `<upstream, encode(p, s)>` with respect to every parameter.
pub fn encode_grad(p: &EncoderParams, s: &Segment, upstream: &[f64]) -> Result<EncoderParams> {
    let mut grad = EncoderParams::zeros(p.dims, p.activation)?;
    accumulate_encode_grad(p, s, upstream, &mut grad)?;
    Ok(grad)
}

/// Adds the gradient of `<upstream, encode(p, s)>` into `grad`.
pub fn accumulate_encode_grad(
    p: &EncoderParams,
    s: &Segment,
    upstream: &[f64],
    grad: &mut EncoderParams,
) -> Result<()> {
    let EncoderDims { input, hidden, embed } = p.dims;
    if upstream.len() != embed {
        return Err(Error::Shape(format!("upstream length {} but embedding is {embed}", upstream.len())));
    }
    p.same_shape(grad)?;
    let fwd = forward(p, s)?;
    let t = s.frames.rows();

    let (r1, rb1, r2, rb2) = p.offsets();
    let w2 = p.w2();
    let mut d_pooled = vec![0.0; hidden];
    {
        let g = &mut grad.values;
        for k in 0..embed {
            let gk = upstream[k];
            g[rb2.start + k] += gk;
            if gk == 0.0 {
                continue;
            }
            for h in 0..hidden {
                g[r2.start + k * hidden + h] += gk * fwd.pooled[h];
                d_pooled[h] += gk * w2[k * hidden + h];
            }
        }
    }
    let inv_t = 1.0 / t as f64;
    let g = &mut grad.values;
    for (frame, a) in s.frames.row_iter().zip(fwd.hidden.chunks_exact(hidden)) {
        for h in 0..hidden {
            let dz = d_pooled[h] * inv_t * p.activation.derivative_from_output(a[h]);
            if dz == 0.0 {
                continue;
            }
            g[rb1.start + h] += dz;
            let row = &mut g[r1.start + h * input..r1.start + (h + 1) * input];
            for (w, x) in row.iter_mut().zip(frame) {
                *w += dz * x;
            }
        }
    }
    debug_assert_eq!(r1.end, rb1.start);
    Ok(())
}

/// `theta_k <- m * theta_k + (1 - m) * theta`; `theta` is left untouched.
pub fn momentum_update(theta_k: &mut EncoderParams, theta: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {m}")));
    }
    theta_k.same_shape(theta)?;
    for (k, q) in theta_k.values.iter_mut().zip(&theta.values) {
        *k = m * *k + (1.0 - m) * q;
    }
    Ok(())
}
