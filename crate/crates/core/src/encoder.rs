//! The toy encoder: collision-sensitive attention over local features, global
//! mean pooling, and a linear head producing the continuous code `v`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::csa::{attended_pool, attention_backward_into, attention_map, fuse, rarity, LocalFeatureMap, Prototype};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `l x 2C`, acting on `z = [g; a]`.
    pub w_fc: Matrix,
    pub b: Vec<f64>,
    pub w_att: Prototype,
}

impl EncoderParams {
    /// Gaussian `w_fc` and `w_att` with standard deviation `1/sqrt(2C)`, zero bias.
    pub fn init(bits: usize, channels: usize, seed: u64) -> Result<Self> {
        if bits == 0 || channels == 0 {
            return Err(Error::domain("bits and channels must be positive"));
        }
        let std = 1.0 / ((2 * channels) as f64).sqrt();
        let mut rng = rng_for(seed, stream::PARAM_INIT, 0);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect() };
        let w_fc = Matrix::from_vec(bits, 2 * channels, draw(bits * 2 * channels))?;
        let w_att = Prototype(draw(channels));
        Ok(Self {
            w_fc,
            b: vec![0.0; bits],
            w_att,
        })
    }

    pub fn zeros(bits: usize, channels: usize) -> Self {
        Self {
            w_fc: Matrix::zeros(bits, 2 * channels),
            b: vec![0.0; bits],
            w_att: Prototype(vec![0.0; channels]),
        }
    }

    pub fn bits(&self) -> usize {
        self.b.len()
    }

    pub fn channels(&self) -> usize {
        self.w_att.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, c) = (self.bits(), self.channels());
        if l == 0 || c == 0 || self.w_fc.rows() != l || self.w_fc.cols() != 2 * c {
            return Err(Error::domain(format!(
                "inconsistent encoder shapes: w_fc {}x{}, b {l}, w_att {c}",
                self.w_fc.rows(),
                self.w_fc.cols()
            )));
        }
        let finite = self.w_fc.is_finite()
            && self.b.iter().all(|x| x.is_finite())
            && self.w_att.as_slice().iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::domain("encoder parameters are not finite"));
        }
        Ok(())
    }
}

/// Forward intermediates kept for the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub v: Vec<f64>,
    pub alpha: Vec<f64>,
    pub a: Vec<f64>,
    pub g: Vec<f64>,
    pub z: Vec<f64>,
}

fn check_sample(sample: &LocalFeatureMap, params: &EncoderParams) -> Result<()> {
    if sample.channels() != params.channels() {
        return Err(Error::domain(format!(
            "sample has {} channels, encoder expects {}",
            sample.channels(),
            params.channels()
        )));
    }
    Ok(())
}

/// `z = [g; a]` with attention, or `[g; g]` (uniform attention) without it.
pub fn fused_features(sample: &LocalFeatureMap, w_att: &Prototype, use_csa: bool) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let g = sample.global_mean();
    let (alpha, a) = if use_csa {
        let alpha = attention_map(&rarity(sample, w_att)?);
        let a = attended_pool(sample, &alpha)?;
        (alpha, a)
    } else {
        (vec![1.0 / sample.positions() as f64; sample.positions()], g.clone())
    };
    let z = fuse(&g, &a)?;
    Ok((alpha, a, g, z))
}

pub fn forward(sample: &LocalFeatureMap, params: &EncoderParams) -> Result<Forward> {
    forward_with(sample, params, true)
}

pub fn forward_with(sample: &LocalFeatureMap, params: &EncoderParams, use_csa: bool) -> Result<Forward> {
    check_sample(sample, params)?;
    let (alpha, a, g, z) = fused_features(sample, &params.w_att, use_csa)?;
    let mut v = vec![0.0; params.bits()];
    params.w_fc.mul_vec(&z, &mut v);
    for (x, b) in v.iter_mut().zip(&params.b) {
        *x += b;
    }
    Ok(Forward { v, alpha, a, g, z })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub w_fc: Matrix,
    pub b: Vec<f64>,
    pub w_att: Vec<f64>,
}

impl EncoderGrad {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            w_fc: Matrix::zeros(params.w_fc.rows(), params.w_fc.cols()),
            b: vec![0.0; params.bits()],
            w_att: vec![0.0; params.channels()],
        }
    }

    pub fn clear(&mut self) {
        self.w_fc.fill(0.0);
        self.b.iter_mut().for_each(|x| *x = 0.0);
        self.w_att.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Reverse pass for upstream `dL/dv`.
///
/// `grad_w_att_direct` carries gradients that reach the prototype without
/// passing through `v`, such as the prototype attraction loss.
pub fn backward(
    sample: &LocalFeatureMap,
    params: &EncoderParams,
    fwd: &Forward,
    grad_v: &[f64],
    grad_w_att_direct: Option<&[f64]>,
) -> Result<EncoderGrad> {
    check_sample(sample, params)?;
    if grad_v.len() != params.bits() {
        return Err(Error::domain("upstream gradient length differs from the code length"));
    }
    let mut grad = EncoderGrad::zeros_like(params);
    backward_into(sample, params, fwd, grad_v, true, &mut grad);
    if let Some(d) = grad_w_att_direct {
        if d.len() != params.channels() {
            return Err(Error::domain("prototype gradient length differs from the channel count"));
        }
        for (g, x) in grad.w_att.iter_mut().zip(d) {
            *g += x;
        }
    }
    Ok(grad)
}

/// Accumulating reverse pass; the attention branch is skipped when `use_csa`
/// is off.
pub(crate) fn backward_into(
    sample: &LocalFeatureMap,
    params: &EncoderParams,
    fwd: &Forward,
    grad_v: &[f64],
    use_csa: bool,
    grad: &mut EncoderGrad,
) {
    let two_c = fwd.z.len();
    let c = two_c / 2;
    let mut grad_z = vec![0.0; two_c];
    for (k, &gv) in grad_v.iter().enumerate() {
        if gv == 0.0 {
            continue;
        }
        grad.b[k] += gv;
        let wrow = params.w_fc.row(k);
        for ((gw, gz), (&z, &w)) in grad
            .w_fc
            .row_mut(k)
            .iter_mut()
            .zip(grad_z.iter_mut())
            .zip(fwd.z.iter().zip(wrow))
        {
            *gw += gv * z;
            *gz += gv * w;
        }
    }
    if use_csa {
        attention_backward_into(sample, &params.w_att, &fwd.alpha, &grad_z[c..], None, &mut grad.w_att);
    }
}

/// Push `dL/dz` through the attention branch into the prototype gradient.
pub(crate) fn backward_z_into(
    sample: &LocalFeatureMap,
    w_att: &Prototype,
    alpha: &[f64],
    grad_z: &[f64],
    grad_w_att: &mut [f64],
) {
    let c = grad_z.len() / 2;
    attention_backward_into(sample, w_att, alpha, &grad_z[c..], None, grad_w_att);
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::domain(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moments and step counter for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Self {
            cfg,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(state: &mut AdamState, param: &mut [f64], grad: &[f64]) -> Result<()> {
    if param.len() != state.len() || grad.len() != state.len() {
        return Err(Error::domain(format!(
            "Adam shapes disagree: state {}, param {}, grad {}",
            state.len(),
            param.len(),
            grad.len()
        )));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
