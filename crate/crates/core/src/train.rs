//! Training schedule: memory-bank instance discrimination, pseudo labels
//! refreshed by affinity propagation, prototype attraction, and the optional
//! per-bit codebooks, all optimized with Adam.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::codebook::{codebook_encode, dec_loss, deltas, deltas_backward_into, CodebookSet};
use crate::csa::LocalFeatureMap;
use crate::encoder::{adam_step, backward_into, backward_z_into, forward_with, AdamConfig, AdamState, EncoderGrad, EncoderParams, Forward};
use crate::error::{Error, Result};
use crate::eval::self_retrieval_map;
use crate::feature::{grad_tanh_normalize_into, nhd_slices, sign_quantize, tanh_normalize_into, SaturatedVector};
use crate::hamming::{collision_probability, PackedCodeSet};
use crate::losses::{
    attention_loss_accumulate, backprop_rows, backprop_tanh, l2_singleview_accumulate, nhd_softmax_saturated, saturate_rows, tanh_rows,
    ClusterMemory, MemoryBank,
};
use crate::matrix::{l2_norm, Matrix};
use crate::pseudo_labels::{affinity_propagation, build_similarity, refresh_cluster_memory, ApConfig, Clustering};
use crate::rng::{derive, rng_for, stream};
use crate::synth::augment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// NHD instance loss plus pseudo-label and prototype terms.
    NhdFull,
    /// NHD instance loss alone.
    NhdOnly,
    /// Single-view dot-product softmax on `tanh` features.
    L2Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Sign,
    Codebook,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nhd_full" | "full" => Ok(Self::NhdFull),
            "nhd_only" | "nhd" => Ok(Self::NhdOnly),
            "l2_baseline" | "l2" => Ok(Self::L2Baseline),
            other => Err(Error::domain(format!("unknown loss mode {other:?}"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NhdFull => "nhd_full",
            Self::NhdOnly => "nhd_only",
            Self::L2Baseline => "l2_baseline",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign" => Ok(Self::Sign),
            "codebook" => Ok(Self::Codebook),
            other => Err(Error::domain(format!("unknown variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sign => "sign",
            Self::Codebook => "codebook",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub bits: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub s: f64,
    pub s1: f64,
    /// Weight of the instance term; only the pure clustering ablation sets it to 0.
    pub lambda_nhd: f64,
    pub lambda_pseudo: f64,
    pub lambda_att: f64,
    pub lambda_code: f64,
    pub pseudo_refresh_epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub variant: Variant,
    /// Without attention the attended feature is replaced by the global mean.
    pub use_csa: bool,
    /// When positive, each epoch trains on augmented copies of the samples
    /// (noise of this standard deviation), so `d_ii` compares an augmented
    /// view with the stored row. Off by default.
    pub anchor_sigma: f64,
    pub ap: ApConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bits: 16,
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            s: 8.0,
            s1: 8.0,
            lambda_nhd: 1.0,
            lambda_pseudo: 1.0,
            lambda_att: 1.0,
            lambda_code: 1.0,
            pseudo_refresh_epochs: 5,
            seed: 0,
            loss_mode: LossMode::NhdFull,
            variant: Variant::Sign,
            use_csa: true,
            anchor_sigma: 0.0,
            ap: ApConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pseudo_refresh_epochs == 0 {
            return Err(Error::domain("epochs, batch_size and pseudo_refresh_epochs must be at least 1"));
        }
        if self.bits == 0 || self.bits > crate::hamming::MAX_BITS {
            return Err(Error::domain(format!("invalid code length {}", self.bits)));
        }
        if !(self.s > 0.0 && self.s1 > 0.0) {
            return Err(Error::domain("scales s and s1 must be positive"));
        }
        let lambdas = [self.lambda_nhd, self.lambda_pseudo, self.lambda_att, self.lambda_code];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::domain("loss weights must be finite and non-negative"));
        }
        if !(self.anchor_sigma >= 0.0 && self.anchor_sigma.is_finite()) {
            return Err(Error::domain("anchor_sigma must be finite and non-negative"));
        }
        self.adam.validate()?;
        self.ap.validate()
    }

    fn pseudo_active(&self) -> bool {
        self.loss_mode == LossMode::NhdFull && self.lambda_pseudo > 0.0
    }

    fn att_active(&self) -> bool {
        self.loss_mode == LossMode::NhdFull && self.lambda_att > 0.0 && self.use_csa
    }

    fn code_active(&self) -> bool {
        self.variant == Variant::Codebook && self.loss_mode == LossMode::NhdFull && self.lambda_code > 0.0
    }

    fn nhd_active(&self) -> bool {
        self.loss_mode != LossMode::L2Baseline && self.lambda_nhd > 0.0
    }
}

/// Adam state of every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub w_fc: AdamState,
    pub b: AdamState,
    pub w_att: AdamState,
    pub bank: AdamState,
    /// Reset whenever the pseudo labels are refreshed.
    pub pseudo: AdamState,
    pub codebooks: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: EncoderParams,
    pub bank: MemoryBank,
    pub pseudo: Option<ClusterMemory>,
    pub codebooks: Option<CodebookSet>,
    pub optimizer: Optimizer,
    pub use_csa: bool,
    /// Epochs completed.
    pub epoch: u64,
    pub seed: u64,
}

impl ModelState {
    pub fn variant(&self) -> Variant {
        if self.codebooks.is_some() {
            Variant::Codebook
        } else {
            Variant::Sign
        }
    }

    pub fn bits(&self) -> usize {
        self.params.bits()
    }

    /// Continuous code: `v` for the sign variant, `v'` for codebooks.
    pub fn embed(&self, sample: &LocalFeatureMap) -> Result<(Forward, Vec<f64>)> {
        let fwd = forward_with(sample, &self.params, self.use_csa)?;
        let v = match &self.codebooks {
            Some(cb) => deltas(&fwd.z, cb)?,
            None => fwd.v.clone(),
        };
        Ok((fwd, v))
    }

    /// Binary code of one sample.
    pub fn code(&self, sample: &LocalFeatureMap) -> Result<crate::hamming::BitCode> {
        let (fwd, v) = self.embed(sample)?;
        match &self.codebooks {
            Some(cb) => codebook_encode(&fwd.z, cb),
            None => sign_quantize(&v),
        }
    }
}

/// Binary codes of every sample, in order.
pub fn encode(samples: &[LocalFeatureMap], state: &ModelState) -> Result<PackedCodeSet> {
    let mut set = PackedCodeSet::new(state.bits())?;
    for (i, s) in samples.iter().enumerate() {
        set.push(&state.code(s).map_err(|e| e.at_sample(i))?)?;
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample objective over the epoch (at the initial state for epoch 0).
    pub loss: f64,
    pub mean_norm_v: f64,
    pub p_collision: f64,
    /// Self-retrieval mAP on the supplied labels; NaN without labels.
    pub map: f64,
    /// Mean absolute component of the saturated features.
    pub mean_abs_vhat: f64,
    /// Mean NHD between each saturated feature and its own bank row.
    pub mean_d_ii: f64,
    /// Number of pseudo classes in use (0 when pseudo labels are off).
    pub n_clusters: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: ModelState,
    pub metrics: Vec<EpochMetrics>,
    pub codes: PackedCodeSet,
}

struct Scratch {
    vhat: Vec<f64>,
    grad_vhat: Vec<f64>,
    grad_v: Vec<f64>,
    dist: Vec<f64>,
    grad_bank_hat: Matrix,
    grad_pseudo_hat: Matrix,
    enc: EncoderGrad,
    grad_cb: Option<Matrix>,
}

fn embed_all(samples: &[LocalFeatureMap], state: &ModelState) -> Result<(Vec<Forward>, Matrix)> {
    let mut fwds = Vec::with_capacity(samples.len());
    let mut vs = Matrix::zeros(samples.len(), state.bits());
    for (i, s) in samples.iter().enumerate() {
        let (fwd, v) = state.embed(s).map_err(|e| e.at_sample(i))?;
        vs.row_mut(i).copy_from_slice(&v);
        fwds.push(fwd);
    }
    Ok((fwds, vs))
}

fn refresh_pseudo(vs: &Matrix, cfg: &TrainConfig, epoch: usize) -> Result<ClusterMemory> {
    let clustering = cluster_features(vs, cfg.s1, &cfg.ap).map_err(|e| e.at_epoch(epoch))?;
    refresh_cluster_memory(&clustering, vs)
}

/// Affinity propagation over the saturated continuous codes, as used for
/// pseudo labels.
pub fn cluster_features(vs: &Matrix, s1: f64, ap: &ApConfig) -> Result<Clustering> {
    let mut feats = Vec::with_capacity(vs.rows());
    let mut buf = vec![0.0; vs.cols()];
    for (i, v) in vs.iter_rows().enumerate() {
        tanh_normalize_into(v, s1, &mut buf).map_err(|e| e.at_sample(i))?;
        feats.push(SaturatedVector::new(buf.clone())?);
    }
    let sim = build_similarity(&feats)?;
    affinity_propagation(&sim, ap)
}

/// Continuous codes (`v`, or `v'` for the codebook variant), one row per sample.
pub fn continuous_codes(samples: &[LocalFeatureMap], state: &ModelState) -> Result<Matrix> {
    embed_all(samples, state).map(|(_, vs)| vs)
}

/// Per-sample objective and its gradient with respect to the continuous code,
/// accumulated at weight `scale`. Bank and pseudo gradients go to scratch.
#[allow(clippy::too_many_arguments)]
fn sample_loss(
    i: usize,
    v: &[f64],
    sample: &LocalFeatureMap,
    state: &ModelState,
    bank_hat: Option<&Matrix>,
    pseudo_hat: Option<&Matrix>,
    cfg: &TrainConfig,
    scale: f64,
    sc: &mut Scratch,
    with_grad: bool,
) -> Result<f64> {
    let mut value = 0.0;
    sc.grad_v.iter_mut().for_each(|x| *x = 0.0);
    match cfg.loss_mode {
        LossMode::L2Baseline => {
            sc.grad_vhat.iter_mut().for_each(|x| *x = 0.0);
            let bank_tanh = bank_hat.ok_or_else(|| Error::domain("missing tanh bank"))?;
            let grad_rows = with_grad.then_some(&mut sc.grad_bank_hat);
            value += l2_singleview_accumulate(v, bank_tanh, i, cfg.s, scale, &mut sc.grad_vhat, grad_rows, &mut sc.dist);
            for ((g, t), x) in sc.grad_v.iter_mut().zip(&sc.grad_vhat).zip(v) {
                *g += t * (1.0 - x.tanh().powi(2));
            }
        }
        LossMode::NhdFull | LossMode::NhdOnly => {
            tanh_normalize_into(v, cfg.s1, &mut sc.vhat).map_err(|e| e.at_sample(i))?;
            sc.grad_vhat.iter_mut().for_each(|x| *x = 0.0);
            if let Some(bank_hat) = bank_hat {
                let grad_rows = with_grad.then_some(&mut sc.grad_bank_hat);
                let k = scale * cfg.lambda_nhd;
                value += cfg.lambda_nhd
                    * nhd_softmax_saturated(&sc.vhat, bank_hat, i, cfg.s, k, &mut sc.grad_vhat, grad_rows, &mut sc.dist);
            }
            if let (Some(pseudo_hat), Some(mem)) = (pseudo_hat, &state.pseudo) {
                let c = mem
                    .cluster_of(i)
                    .ok_or_else(|| Error::domain(format!("sample {i} has no pseudo label")))?;
                let grad_rows = with_grad.then_some(&mut sc.grad_pseudo_hat);
                let k = scale * cfg.lambda_pseudo;
                value += cfg.lambda_pseudo
                    * nhd_softmax_saturated(&sc.vhat, pseudo_hat, c, cfg.s, k, &mut sc.grad_vhat, grad_rows, &mut sc.dist);
            }
            if with_grad {
                grad_tanh_normalize_into(v, cfg.s1, &sc.grad_vhat, &mut sc.grad_v).map_err(|e| e.at_sample(i))?;
            }
        }
    }
    if cfg.att_active() {
        let k = scale * cfg.lambda_att;
        value += cfg.lambda_att * attention_loss_accumulate(sample, &state.params.w_att, k, &mut sc.enc.w_att);
    }
    Ok(value)
}

/// The memory bank in the space its loss compares in: saturated rows for the
/// NHD losses, elementwise `tanh` for the L2 baseline.
fn memory_features(state: &ModelState, cfg: &TrainConfig) -> Result<Option<Matrix>> {
    Ok(match cfg.loss_mode {
        LossMode::L2Baseline => Some(tanh_rows(&state.bank.0)),
        _ if cfg.nhd_active() => Some(saturate_rows(&state.bank.0, cfg.s1)?),
        _ => None,
    })
}

fn new_scratch(state: &ModelState, n_clusters: usize) -> Scratch {
    let l = state.bits();
    let n = state.bank.len();
    Scratch {
        vhat: vec![0.0; l],
        grad_vhat: vec![0.0; l],
        grad_v: vec![0.0; l],
        dist: Vec::with_capacity(n),
        grad_bank_hat: Matrix::zeros(n, l),
        grad_pseudo_hat: Matrix::zeros(n_clusters, l),
        enc: EncoderGrad::zeros_like(&state.params),
        grad_cb: state.codebooks.as_ref().map(|cb| Matrix::zeros(cb.centroids.rows(), cb.dim())),
    }
}

fn epoch_metrics(
    epoch: usize,
    loss: f64,
    samples: &[LocalFeatureMap],
    labels: Option<&[u32]>,
    state: &ModelState,
    cfg: &TrainConfig,
) -> Result<EpochMetrics> {
    let (fwds, vs) = embed_all(samples, state)?;
    let n = samples.len();
    let mut codes = PackedCodeSet::new(state.bits())?;
    let mut norm = 0.0;
    let mut abs_hat = 0.0;
    let mut d_ii = 0.0;
    let mut vhat = vec![0.0; state.bits()];
    let mut what = vec![0.0; state.bits()];
    for (i, fwd) in fwds.iter().enumerate() {
        let v = vs.row(i);
        norm += l2_norm(v);
        let code = match &state.codebooks {
            Some(cb) => codebook_encode(&fwd.z, cb)?,
            None => sign_quantize(v)?,
        };
        codes.push(&code)?;
        if tanh_normalize_into(v, cfg.s1, &mut vhat).is_ok() {
            abs_hat += vhat.iter().map(|x| x.abs()).sum::<f64>() / vhat.len() as f64;
            if tanh_normalize_into(state.bank.0.row(i), cfg.s1, &mut what).is_ok() {
                d_ii += nhd_slices(&vhat, &what);
            }
        }
    }
    let map = match labels {
        Some(l) => self_retrieval_map(&codes, l, None).unwrap_or(f64::NAN),
        None => f64::NAN,
    };
    let p_collision = if n >= 2 { collision_probability(&codes)? } else { 0.0 };
    let nf = n as f64;
    Ok(EpochMetrics {
        epoch,
        loss,
        mean_norm_v: norm / nf,
        p_collision,
        map,
        mean_abs_vhat: abs_hat / nf,
        mean_d_ii: d_ii / nf,
        n_clusters: state.pseudo.as_ref().map_or(0, ClusterMemory::n_clusters),
    })
}

/// Initial state: seeded parameters, codebooks anchored on the data, and the
/// memory bank copied from the initial continuous codes.
pub fn init_state(samples: &[LocalFeatureMap], cfg: &TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::domain("training needs a nonempty dataset"))?;
    let channels = first.channels();
    if samples.iter().any(|s| s.channels() != channels) {
        return Err(Error::domain("samples differ in channel count"));
    }
    let mut params = EncoderParams::init(cfg.bits, channels, cfg.seed)?;
    // Divide w_fc by the RMS of the fused features so that the initial v
    // components have unit scale whatever the input scale is.
    let mut sq = 0.0;
    let mut count = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let f = forward_with(s, &params, cfg.use_csa).map_err(|e| e.at_sample(i))?;
        sq += f.z.iter().map(|x| x * x).sum::<f64>();
        count += f.z.len();
    }
    let rms = (sq / count as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        params.w_fc.as_mut_slice().iter_mut().for_each(|x| *x /= rms);
    }
    let codebooks = match cfg.variant {
        Variant::Sign => None,
        Variant::Codebook => {
            let zs: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| forward_with(s, &params, cfg.use_csa).map(|f| f.z))
                .collect::<Result<_>>()?;
            Some(CodebookSet::init(cfg.bits, &zs, cfg.seed)?)
        }
    };
    let n = samples.len();
    let mut state = ModelState {
        optimizer: Optimizer {
            w_fc: AdamState::new(cfg.adam, params.w_fc.as_slice().len()),
            b: AdamState::new(cfg.adam, cfg.bits),
            w_att: AdamState::new(cfg.adam, channels),
            bank: AdamState::new(cfg.adam, n * cfg.bits),
            pseudo: AdamState::new(cfg.adam, 0),
            codebooks: codebooks.as_ref().map(|cb| AdamState::new(cfg.adam, cb.centroids.as_slice().len())),
        },
        params,
        bank: MemoryBank(Matrix::zeros(n, cfg.bits)),
        pseudo: None,
        codebooks,
        use_csa: cfg.use_csa,
        epoch: 0,
        seed: cfg.seed,
    };
    let (_, vs) = embed_all(samples, &state)?;
    state.bank = MemoryBank(vs);
    Ok(state)
}

/// Train from scratch; `labels` only feed the logged mAP.
pub fn train(samples: &[LocalFeatureMap], labels: Option<&[u32]>, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_observer(samples, labels, cfg, |_| {})
}

/// As [`train`], calling `observe` after every logged epoch.
pub fn train_with_observer(
    samples: &[LocalFeatureMap],
    labels: Option<&[u32]>,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochMetrics),
) -> Result<TrainOutput> {
    if let Some(l) = labels {
        if l.len() != samples.len() {
            return Err(Error::domain("labels do not match the number of samples"));
        }
    }
    let mut state = init_state(samples, cfg)?;
    let n = samples.len();
    let l = cfg.bits;
    if cfg.pseudo_active() {
        let (_, vs) = embed_all(samples, &state)?;
        state.pseudo = Some(refresh_pseudo(&vs, cfg, 1)?);
        state.optimizer.pseudo = AdamState::new(cfg.adam, state.pseudo.as_ref().map_or(0, |p| p.n_clusters() * l));
    }

    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let initial_loss = evaluate_loss(samples, &state, cfg)?;
    let m0 = epoch_metrics(0, initial_loss, samples, labels, &state, cfg)?;
    observe(&m0);
    metrics.push(m0);

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        if cfg.pseudo_active() && epoch > 1 && (epoch - 1) % cfg.pseudo_refresh_epochs == 0 {
            let (_, vs) = embed_all(samples, &state)?;
            let mem = refresh_pseudo(&vs, cfg, epoch)?;
            state.optimizer.pseudo = AdamState::new(cfg.adam, mem.n_clusters() * l);
            state.pseudo = Some(mem);
        }
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, stream::SHUFFLE, epoch as u64));
        let augmented;
        let inputs = if cfg.anchor_sigma > 0.0 {
            augmented = samples
                .iter()
                .enumerate()
                .map(|(i, s)| augment(s, cfg.anchor_sigma, derive(cfg.seed, stream::AUGMENT, (epoch * n + i) as u64)))
                .collect::<Result<Vec<_>>>()?;
            &augmented[..]
        } else {
            samples
        };
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            total += train_batch(batch, inputs, &mut state, cfg)?;
        }
        state.epoch = epoch as u64;
        let m = epoch_metrics(epoch, total / n as f64, samples, labels, &state, cfg)?;
        observe(&m);
        metrics.push(m);
    }
    let codes = encode(samples, &state)?;
    Ok(TrainOutput { state, metrics, codes })
}

/// Mean objective over the dataset at the current state, without updates.
pub fn evaluate_loss(samples: &[LocalFeatureMap], state: &ModelState, cfg: &TrainConfig) -> Result<f64> {
    let n_clusters = state.pseudo.as_ref().map_or(0, ClusterMemory::n_clusters);
    let mut sc = new_scratch(state, n_clusters);
    let bank_hat = memory_features(state, cfg)?;
    let pseudo_hat = match (&state.pseudo, cfg.pseudo_active()) {
        (Some(p), true) => Some(saturate_rows(p.centers(), cfg.s1)?),
        _ => None,
    };
    let mut total = 0.0;
    let mut zs = Matrix::zeros(samples.len(), 0);
    if cfg.code_active() {
        zs = Matrix::zeros(samples.len(), 2 * state.params.channels());
    }
    for (i, s) in samples.iter().enumerate() {
        let (fwd, v) = state.embed(s).map_err(|e| e.at_sample(i))?;
        total += sample_loss(i, &v, s, state, bank_hat.as_ref(), pseudo_hat.as_ref(), cfg, 1.0, &mut sc, false)?;
        if cfg.code_active() {
            zs.row_mut(i).copy_from_slice(&fwd.z);
        }
    }
    let mut mean = total / samples.len() as f64;
    if let (true, Some(cb)) = (cfg.code_active(), &state.codebooks) {
        mean += cfg.lambda_code * dec_loss(&zs, cb)?.value / samples.len() as f64;
    }
    Ok(mean)
}

/// Gradients of the minibatch objective with respect to every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_fc: Matrix,
    pub b: Vec<f64>,
    pub w_att: Vec<f64>,
    pub bank: Matrix,
    pub pseudo: Option<Matrix>,
    pub codebooks: Option<Matrix>,
}

/// Minibatch objective `(1/B) sum_i L_i + lambda_code * L_code / B` and its
/// exact gradients. Pseudo labels are taken from `state` as they are.
pub fn batch_gradients(
    batch: &[usize],
    samples: &[LocalFeatureMap],
    state: &ModelState,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::domain("empty minibatch"));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= samples.len() || i >= state.bank.len()) {
        return Err(Error::domain(format!("sample index {i} out of range")));
    }
    let n_clusters = state.pseudo.as_ref().map_or(0, ClusterMemory::n_clusters);
    let mut sc = new_scratch(state, n_clusters);
    let bank_hat = memory_features(state, cfg)?;
    let pseudo_hat = match (&state.pseudo, cfg.pseudo_active()) {
        (Some(p), true) => Some(saturate_rows(p.centers(), cfg.s1)?),
        _ => None,
    };
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let code_active = cfg.code_active();
    let mut zs = Matrix::zeros(if code_active { batch.len() } else { 0 }, 2 * state.params.channels());
    let mut fwds = Vec::with_capacity(batch.len());
    for (slot, &i) in batch.iter().enumerate() {
        let sample = &samples[i];
        let (fwd, v) = state.embed(sample).map_err(|e| e.at_sample(i))?;
        total += sample_loss(i, &v, sample, state, bank_hat.as_ref(), pseudo_hat.as_ref(), cfg, scale, &mut sc, true)?;
        match &state.codebooks {
            None => backward_into(sample, &state.params, &fwd, &sc.grad_v, state.use_csa, &mut sc.enc),
            Some(cb) => {
                let mut grad_z = vec![0.0; fwd.z.len()];
                deltas_backward_into(&fwd.z, cb, &sc.grad_v, Some(&mut grad_z), sc.grad_cb.as_mut());
                if state.use_csa {
                    backward_z_into(sample, &state.params.w_att, &fwd.alpha, &grad_z, &mut sc.enc.w_att);
                }
            }
        }
        if code_active {
            zs.row_mut(slot).copy_from_slice(&fwd.z);
            fwds.push(fwd);
        }
    }
    if let (true, Some(cb)) = (code_active, &state.codebooks) {
        let dec = dec_loss(&zs, cb)?;
        // The DEC term is a batch sum; normalize it like the per-sample terms.
        let k = cfg.lambda_code * scale;
        total += cfg.lambda_code * dec.value;
        if let Some(g) = sc.grad_cb.as_mut() {
            g.add_scaled(&dec.grad_centroids, k);
        }
        if state.use_csa {
            for (slot, &i) in batch.iter().enumerate() {
                let gz: Vec<f64> = dec.grad_z.row(slot).iter().map(|x| k * x).collect();
                backward_z_into(&samples[i], &state.params.w_att, &fwds[slot].alpha, &gz, &mut sc.enc.w_att);
            }
        }
    }

    let bank = match (cfg.loss_mode, &bank_hat) {
        (LossMode::L2Baseline, Some(t)) => {
            backprop_tanh(t, &mut sc.grad_bank_hat);
            sc.grad_bank_hat
        }
        (_, Some(_)) => backprop_rows(&state.bank.0, cfg.s1, &sc.grad_bank_hat)?,
        (_, None) => Matrix::zeros(state.bank.len(), state.bits()),
    };
    let pseudo = match (&state.pseudo, &pseudo_hat) {
        (Some(mem), Some(_)) => Some(backprop_rows(mem.centers(), cfg.s1, &sc.grad_pseudo_hat)?),
        _ => None,
    };
    Ok((
        total * scale,
        Gradients {
            w_fc: sc.enc.w_fc,
            b: sc.enc.b,
            w_att: sc.enc.w_att,
            bank,
            pseudo,
            codebooks: sc.grad_cb,
        },
    ))
}

/// One optimizer step on a minibatch; returns the summed per-sample objective.
fn train_batch(batch: &[usize], samples: &[LocalFeatureMap], state: &mut ModelState, cfg: &TrainConfig) -> Result<f64> {
    let (objective, g) = batch_gradients(batch, samples, state, cfg)?;
    let opt = &mut state.optimizer;
    // The codebook variant reads codes off z, so the linear head is unused.
    if state.codebooks.is_none() {
        adam_step(&mut opt.w_fc, state.params.w_fc.as_mut_slice(), g.w_fc.as_slice())?;
        adam_step(&mut opt.b, &mut state.params.b, &g.b)?;
    }
    if state.use_csa {
        adam_step(&mut opt.w_att, &mut state.params.w_att.0, &g.w_att)?;
    }
    if cfg.loss_mode == LossMode::L2Baseline || cfg.nhd_active() {
        adam_step(&mut opt.bank, state.bank.0.as_mut_slice(), g.bank.as_slice())?;
    }
    if let (Some(mem), Some(gp)) = (state.pseudo.as_mut(), g.pseudo.as_ref()) {
        adam_step(&mut opt.pseudo, mem.centers_mut().as_mut_slice(), gp.as_slice())?;
    }
    if let (Some(cb), Some(gc), Some(st)) = (state.codebooks.as_mut(), g.codebooks.as_ref(), opt.codebooks.as_mut()) {
        adam_step(st, cb.centroids.as_mut_slice(), gc.as_slice())?;
    }
    Ok(objective * batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn tiny() -> SynthSpec {
        SynthSpec {
            n_coarse: 2,
            fines_per_coarse: 2,
            samples_per_fine: 6,
            channels: 4,
            positions: 3,
            seed: 3,
            ..SynthSpec::standard()
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            bits: 8,
            epochs,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let d = generate(&tiny()).unwrap();
        assert!(train(&d.samples, None, &cfg(0)).is_err());
    }

    #[test]
    fn zero_lr_and_weights_leave_parameters_alone() {
        let d = generate(&tiny()).unwrap();
        let c = TrainConfig {
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            lambda_pseudo: 0.0,
            lambda_att: 0.0,
            ..cfg(1)
        };
        let before = init_state(&d.samples, &c).unwrap();
        let out = train(&d.samples, Some(&d.fine_labels), &c).unwrap();
        assert_eq!(out.metrics.len(), 2);
        assert_eq!(out.state.params, before.params);
        assert_eq!(out.state.bank, before.bank);
        assert_eq!(out.codes, encode(&d.samples, &before).unwrap());
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let d = generate(&tiny()).unwrap();
        for variant in [Variant::Sign, Variant::Codebook] {
            let c = TrainConfig { variant, ..cfg(3) };
            let a = train(&d.samples, Some(&d.fine_labels), &c).unwrap();
            let b = train(&d.samples, Some(&d.fine_labels), &c).unwrap();
            assert_eq!(a.state, b.state);
            assert_eq!(a.codes, b.codes);
            let bits = |m: &[EpochMetrics]| m.iter().map(|x| (x.loss.to_bits(), x.map.to_bits())).collect::<Vec<_>>();
            assert_eq!(bits(&a.metrics), bits(&b.metrics));
        }
    }

    #[test]
    fn codes_follow_the_sign_of_v() {
        let d = generate(&tiny()).unwrap();
        let out = train(&d.samples, None, &cfg(2)).unwrap();
        for (i, s) in d.samples.iter().enumerate() {
            let (_, v) = out.state.embed(s).unwrap();
            let code = out.codes.code(i);
            for (k, x) in v.iter().enumerate() {
                assert_eq!(code.bit(k), *x >= 0.0);
            }
        }
    }

    #[test]
    fn every_mode_trains() {
        let d = generate(&tiny()).unwrap();
        for loss_mode in [LossMode::NhdFull, LossMode::NhdOnly, LossMode::L2Baseline] {
            for use_csa in [true, false] {
                let c = TrainConfig { loss_mode, use_csa, ..cfg(2) };
                let out = train(&d.samples, Some(&d.fine_labels), &c).unwrap();
                assert!(out.metrics.iter().all(|m| m.loss.is_finite() && m.map.is_finite()));
            }
        }
    }

    #[test]
    fn parse_modes() {
        assert_eq!("l2".parse::<LossMode>().unwrap(), LossMode::L2Baseline);
        assert_eq!("nhd_only".parse::<LossMode>().unwrap(), LossMode::NhdOnly);
        assert_eq!("codebook".parse::<Variant>().unwrap(), Variant::Codebook);
        assert!("x".parse::<Variant>().is_err());
    }
}
