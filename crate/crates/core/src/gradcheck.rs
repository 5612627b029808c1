//! Central finite-difference checks of every analytic gradient.
//!
//! Each suite draws seeded random instances, skips the ones that sit within a
//! margin of an L1 kink, and compares every gradient component with the
//! fourth-order central difference of step `h`. The error of one component is
//! `|a - n| / max(|a|, |n|, FLOOR)`, so components whose magnitude is below
//! `FLOOR` are compared on an absolute scale.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codebook::{dec_loss_with_targets, dec_targets, deltas, deltas_backward_into, CodebookSet};
use crate::csa::{attended_pool, attention_backward, attention_map, rarity, LocalFeatureMap, Prototype};
use crate::encoder::{backward, forward, EncoderParams};
use crate::error::Result;
use crate::feature::{grad_tanh_normalize, tanh_normalize};
use crate::losses::{loss_attention, loss_l2_singleview, loss_nhd, loss_pseudo, ClusterMemory, MemoryBank};
use crate::matrix::{dot, Matrix};
use crate::pseudo_labels::{affinity_propagation, build_similarity, refresh_cluster_memory, ApConfig};
use crate::rng::{rng_for, stream};
use crate::train::{batch_gradients, init_state, LossMode, ModelState, TrainConfig, Variant};

/// Magnitude below which components are compared on an absolute scale.
pub const FLOOR: f64 = 1e-5;

/// Instances whose L1 arguments come closer than this to zero are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// Wider margin for the full trainer objective, where a parameter step is
/// amplified several times before it reaches a kink.
pub const TRAINER_KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            h: 1e-5,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    /// Draws rejected for lying too close to a kink.
    pub skipped: usize,
    pub components: usize,
    /// Components left out because the difference stencil crossed a kink.
    pub crossings: usize,
    pub max_rel_err: f64,
    /// Where the largest error occurred.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

struct Tracker {
    name: &'static str,
    instances: usize,
    skipped: usize,
    components: usize,
    crossings: usize,
    max: f64,
    worst: String,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            skipped: 0,
            components: 0,
            crossings: 0,
            max: 0.0,
            worst: String::new(),
        }
    }

    /// Compare `analytic` against central differences of `f` around `x`.
    fn compare(&mut self, label: &str, instance: usize, x: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) {
        self.compare_guarded(label, instance, x, analytic, h, |x| (f(x), Vec::new()));
    }

    /// Like `compare`, but `f` also returns the signs of every L1 argument, and
    /// components whose stencil changes that pattern are left out.
    fn compare_guarded(
        &mut self,
        label: &str,
        instance: usize,
        x: &[f64],
        analytic: &[f64],
        h: f64,
        mut f: impl FnMut(&[f64]) -> (f64, Vec<bool>),
    ) {
        let mut xp = x.to_vec();
        let (_, base) = f(x);
        'component: for k in 0..x.len() {
            let mut vals = [0.0; 4];
            for (slot, step) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                xp[k] = x[k] + step * h;
                let (val, signs) = f(&xp);
                if signs != base {
                    xp[k] = x[k];
                    self.crossings += 1;
                    continue 'component;
                }
                vals[slot] = val;
            }
            xp[k] = x[k];
            let numeric = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * h);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            self.components += 1;
            if err > self.max || err.is_nan() {
                self.max = if err.is_nan() { f64::INFINITY } else { err };
                self.worst = format!("{label}[{k}] instance {instance}: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            instances: self.instances,
            skipped: self.skipped,
            components: self.components,
            crossings: self.crossings,
            max_rel_err: self.max,
            worst: self.worst,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn min_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(f64::INFINITY, f64::min)
}

/// Smallest |vhat_k - what_jk| over all rows.
fn nhd_margin(v: &[f64], rows: &Matrix, s1: f64) -> Result<f64> {
    let vhat = tanh_normalize(v, s1)?;
    let mut m = f64::INFINITY;
    for r in rows.iter_rows() {
        let rhat = tanh_normalize(r, s1)?;
        m = m.min(min_abs_diff(vhat.as_slice(), rhat.as_slice()));
    }
    Ok(m)
}

fn attention_margin(t: &LocalFeatureMap, w: &Prototype) -> f64 {
    (0..t.positions())
        .map(|p| min_abs_diff(t.position(p), w.as_slice()))
        .fold(f64::INFINITY, f64::min)
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, p: usize) -> LocalFeatureMap {
    LocalFeatureMap::new(c, p, gauss(rng, c * p, 1.0)).expect("shape is consistent")
}

/// Draw until `accept` holds, counting rejections.
fn draw<T>(rng: &mut ChaCha8Rng, skipped: &mut usize, mut make: impl FnMut(&mut ChaCha8Rng) -> Result<Option<T>>) -> Result<T> {
    loop {
        if let Some(x) = make(rng)? {
            return Ok(x);
        }
        *skipped += 1;
    }
}

fn check_tanh_normalize(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut t = Tracker::new("tanh_normalize");
    let mut rng = rng_for(cfg.seed, stream::GRADCHECK, 1);
    for inst in 0..cfg.instances {
        let l = rng.gen_range(1..12);
        let s1 = rng.gen_range(0.5..10.0);
        let v = gauss(&mut rng, l, 1.0);
        let up = gauss(&mut rng, l, 1.0);
        let analytic = grad_tanh_normalize(&v, s1, &up)?;
        t.compare("v", inst, &v, &analytic, cfg.h, |x| {
            tanh_normalize(x, s1).map(|y| dot(y.as_slice(), &up)).unwrap_or(f64::NAN)
        });
        t.instances += 1;
    }
    Ok(t.finish())
}

fn memory_loss_check(
    cfg: &GradcheckConfig,
    name: &'static str,
    salt: u64,
    eval: impl Fn(&[f64], &Matrix, usize) -> Result<crate::losses::LossOutput>,
    smooth: bool,
) -> Result<CheckResult> {
    let mut t = Tracker::new(name);
    let mut rng = rng_for(cfg.seed, stream::GRADCHECK, salt);
    let s1 = 8.0;
    for inst in 0..cfg.instances {
        let (v, rows, pos) = draw(&mut rng, &mut t.skipped, |rng| {
            let l = rng.gen_range(2..10);
            let n = rng.gen_range(1..8);
            let v = gauss(rng, l, 1.0);
            let rows = Matrix::from_vec(n, l, gauss(rng, n * l, 1.0))?;
            let pos = rng.gen_range(0..n);
            let ok = smooth || nhd_margin(&v, &rows, s1)? > KINK_MARGIN;
            Ok(ok.then_some((v, rows, pos)))
        })?;
        let out = eval(&v, &rows, pos)?;
        let (l, n) = (v.len(), rows.rows());
        t.compare("v", inst, &v, &out.grad_v, cfg.h, |x| eval(x, &rows, pos).map_or(f64::NAN, |o| o.value));
        t.compare("rows", inst, rows.as_slice(), out.grad_bank.as_slice(), cfg.h, |x| {
            let m = Matrix::from_vec(n, l, x.to_vec()).expect("same shape");
            eval(&v, &m, pos).map_or(f64::NAN, |o| o.value)
        });
        t.instances += 1;
    }
    Ok(t.finish())
}

fn check_loss_nhd(cfg: &GradcheckConfig) -> Result<CheckResult> {
    memory_loss_check(
        cfg,
        "loss_nhd",
        2,
        |v, rows, i| loss_nhd(v, i, &MemoryBank(rows.clone()), 8.0, 8.0),
        false,
    )
}

fn check_loss_pseudo(cfg: &GradcheckConfig) -> Result<CheckResult> {
    memory_loss_check(
        cfg,
        "loss_pseudo",
        3,
        |v, rows, c| {
            let mem = ClusterMemory::new(rows.clone(), vec![c])?;
            loss_pseudo(v, c, &mem, 8.0, 8.0)
        },
        false,
    )
}

fn check_loss_l2(cfg: &GradcheckConfig) -> Result<CheckResult> {
    memory_loss_check(
        cfg,
        "loss_l2_singleview",
        4,
        |v, rows, i| loss_l2_singleview(v, i, &MemoryBank(rows.clone()), 8.0),
        true,
    )
}

fn check_loss_attention(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut t = Tracker::new("loss_attention");
    let mut rng = rng_for(cfg.seed, stream::GRADCHECK, 5);
    for inst in 0..cfg.instances {
        let (tm, w) = draw(&mut rng, &mut t.skipped, |rng| {
            let (c, p) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let tm = random_map(rng, c, p);
            let w = Prototype(gauss(rng, c, 1.0));
            Ok((attention_margin(&tm, &w) > KINK_MARGIN).then_some((tm, w)))
        })?;
        let out = loss_attention(&tm, &w, true)?;
        let (c, p) = (tm.channels(), tm.positions());
        t.compare("w", inst, w.as_slice(), &out.grad_w, cfg.h, |x| {
            loss_attention(&tm, &Prototype(x.to_vec()), false).map_or(f64::NAN, |o| o.value)
        });
        let gt = out.grad_t.expect("requested");
        t.compare("T", inst, tm.as_slice(), gt.as_slice(), cfg.h, |x| {
            let m = LocalFeatureMap::new(c, p, x.to_vec()).expect("same shape");
            loss_attention(&m, &w, false).map_or(f64::NAN, |o| o.value)
        });
        t.instances += 1;
    }
    Ok(t.finish())
}

fn check_attention(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut t = Tracker::new("attention_pool");
    let mut rng = rng_for(cfg.seed, stream::GRADCHECK, 6);
    for inst in 0..cfg.instances {
        let (tm, w) = draw(&mut rng, &mut t.skipped, |rng| {
            let (c, p) = (rng.gen_range(1..6), rng.gen_range(1..7));
            let tm = random_map(rng, c, p);
            let w = Prototype(gauss(rng, c, 1.0));
            Ok((attention_margin(&tm, &w) > KINK_MARGIN).then_some((tm, w)))
        })?;
        let (c, p) = (tm.channels(), tm.positions());
        let up = gauss(&mut rng, c, 1.0);
        let pooled = |tm: &LocalFeatureMap, w: &Prototype| -> f64 {
            rarity(tm, w)
                .and_then(|r| attended_pool(tm, &attention_map(&r)))
                .map_or(f64::NAN, |a| dot(&a, &up))
        };
        let alpha = attention_map(&rarity(&tm, &w)?);
        let g = attention_backward(&tm, &w, &alpha, &up)?;
        t.compare("w", inst, w.as_slice(), &g.grad_w, cfg.h, |x| pooled(&tm, &Prototype(x.to_vec())));
        t.compare("T", inst, tm.as_slice(), g.grad_t.as_slice(), cfg.h, |x| {
            pooled(&LocalFeatureMap::new(c, p, x.to_vec()).expect("same shape"), &w)
        });
        t.instances += 1;
    }
    Ok(t.finish())
}

/// `loss_nhd(forward(x))` with respect to every encoder parameter.
fn check_encoder(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut t = Tracker::new("encoder_graph");
    let mut rng = rng_for(cfg.seed, stream::GRADCHECK, 7);
    let (s, s1) = (8.0, 8.0);
    for inst in 0..cfg.instances {
        let (sample, params, bank, i) = draw(&mut rng, &mut t.skipped, |rng| {
            let (l, c, p, n) = (rng.gen_range(2..8), rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
            let sample = random_map(rng, c, p);
            let mut params = EncoderParams::init(l, c, rng.gen())?;
            params.b = gauss(rng, l, 0.3);
            let bank = Matrix::from_vec(n, l, gauss(rng, n * l, 1.0))?;
            let i = rng.gen_range(0..n);
            let f = forward(&sample, &params)?;
            let ok = nhd_margin(&f.v, &bank, s1)? > KINK_MARGIN && attention_margin(&sample, &params.w_att) > KINK_MARGIN;
            Ok(ok.then_some((sample, params, bank, i)))
        })?;
        let bank = MemoryBank(bank);
        let objective = |p: &EncoderParams| -> f64 {
            forward(&sample, p)
                .and_then(|f| loss_nhd(&f.v, i, &bank, s, s1))
                .map_or(f64::NAN, |o| o.value)
        };
        let f = forward(&sample, &params)?;
        let up = loss_nhd(&f.v, i, &bank, s, s1)?.grad_v;
        let g = backward(&sample, &params, &f, &up, None)?;
        let (rows, cols) = (params.w_fc.rows(), params.w_fc.cols());
        t.compare("w_fc", inst, params.w_fc.as_slice(), g.w_fc.as_slice(), cfg.h, |x| {
            let mut q = params.clone();
            q.w_fc = Matrix::from_vec(rows, cols, x.to_vec()).expect("same shape");
            objective(&q)
        });
        t.compare("b", inst, &params.b, &g.b, cfg.h, |x| {
            let mut q = params.clone();
            q.b = x.to_vec();
            objective(&q)
        });
        t.compare("w_att", inst, params.w_att.as_slice(), &g.w_att, cfg.h, |x| {
            let mut q = params.clone();
            q.w_att = Prototype(x.to_vec());
            objective(&q)
        });
        t.instances += 1;
    }
    Ok(t.finish())
}

fn random_codebooks(rng: &mut ChaCha8Rng, bits: usize, dim: usize) -> Result<CodebookSet> {
    CodebookSet::new(Matrix::from_vec(2 * bits, dim, gauss(rng, 2 * bits * dim, 1.0))?)
}

fn check_deltas(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut t = Tracker::new("codebook_deltas");
    let mut rng = rng_for(cfg.seed, stream::GRADCHECK, 8);
    for inst in 0..cfg.instances {
        let (l, d) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let cb = random_codebooks(&mut rng, l, d)?;
        let z = gauss(&mut rng, d, 1.0);
        let up = gauss(&mut rng, l, 1.0);
        let mut gz = vec![0.0; d];
        let mut gc = Matrix::zeros(2 * l, d);
        deltas_backward_into(&z, &cb, &up, Some(&mut gz), Some(&mut gc));
        t.compare("z", inst, &z, &gz, cfg.h, |x| deltas(x, &cb).map_or(f64::NAN, |v| dot(&v, &up)));
        t.compare("centroids", inst, cb.centroids.as_slice(), gc.as_slice(), cfg.h, |x| {
            let c = CodebookSet::new(Matrix::from_vec(2 * l, d, x.to_vec()).expect("same shape")).expect("finite");
            deltas(&z, &c).map_or(f64::NAN, |v| dot(&v, &up))
        });
        t.instances += 1;
    }
    Ok(t.finish())
}

/// DEC loss with its sharpened targets frozen, as in training.
fn check_dec(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut t = Tracker::new("dec_loss");
    let mut rng = rng_for(cfg.seed, stream::GRADCHECK, 9);
    for inst in 0..cfg.instances {
        let (l, d, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..7));
        let cb = random_codebooks(&mut rng, l, d)?;
        let zs = Matrix::from_vec(n, d, gauss(&mut rng, n * d, 1.5))?;
        let p = dec_targets(&zs, &cb)?;
        let out = dec_loss_with_targets(&zs, &cb, &p)?;
        t.compare("centroids", inst, cb.centroids.as_slice(), out.grad_centroids.as_slice(), cfg.h, |x| {
            let c = CodebookSet::new(Matrix::from_vec(2 * l, d, x.to_vec()).expect("same shape")).expect("finite");
            dec_loss_with_targets(&zs, &c, &p).map_or(f64::NAN, |o| o.value)
        });
        t.compare("z", inst, zs.as_slice(), out.grad_z.as_slice(), cfg.h, |x| {
            let m = Matrix::from_vec(n, d, x.to_vec()).expect("same shape");
            dec_loss_with_targets(&m, &cb, &p).map_or(f64::NAN, |o| o.value)
        });
        t.instances += 1;
    }
    Ok(t.finish())
}

fn trainer_margin(state: &ModelState, samples: &[LocalFeatureMap], batch: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let mut m = f64::INFINITY;
    for &i in batch {
        let (_, v) = state.embed(&samples[i])?;
        m = m.min(nhd_margin(&v, &state.bank.0, cfg.s1)?);
        if let Some(p) = &state.pseudo {
            m = m.min(nhd_margin(&v, p.centers(), cfg.s1)?);
        }
        if state.use_csa {
            m = m.min(attention_margin(&samples[i], &state.params.w_att));
        }
    }
    Ok(m)
}

/// Signs of every L1 argument the trainer objective touches.
fn kink_pattern(state: &ModelState, samples: &[LocalFeatureMap], batch: &[usize], cfg: &TrainConfig) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    let mut push_rows = |vhat: &[f64], rows: &Matrix| -> Result<()> {
        for r in rows.iter_rows() {
            let rhat = tanh_normalize(r, cfg.s1)?;
            out.extend(vhat.iter().zip(rhat.as_slice()).map(|(a, b)| a > b));
        }
        Ok(())
    };
    for &i in batch {
        let (_, v) = state.embed(&samples[i])?;
        if cfg.loss_mode != LossMode::L2Baseline {
            let vhat = tanh_normalize(&v, cfg.s1)?;
            push_rows(vhat.as_slice(), &state.bank.0)?;
            if let Some(p) = &state.pseudo {
                push_rows(vhat.as_slice(), p.centers())?;
            }
        }
    }
    if state.use_csa {
        for &i in batch {
            let t = &samples[i];
            for p in 0..t.positions() {
                out.extend(t.position(p).iter().zip(state.params.w_att.as_slice()).map(|(a, b)| a > b));
            }
        }
    }
    Ok(out)
}

/// A small random training state with a perturbed bank and fresh pseudo labels.
#[allow(clippy::type_complexity)]
fn trainer_instance(rng: &mut ChaCha8Rng, variant: Variant) -> Result<Option<(Vec<LocalFeatureMap>, TrainConfig, ModelState, Vec<usize>)>> {
    let (n, c, p, l) = (rng.gen_range(3..9), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(2..7));
    let samples: Vec<LocalFeatureMap> = (0..n).map(|_| random_map(rng, c, p)).collect();
    let cfg = TrainConfig {
        bits: l,
        seed: rng.gen(),
        variant,
        // Sharpened DEC targets are held fixed during training, so the DEC
        // term is checked on its own.
        lambda_code: 0.0,
        lambda_pseudo: rng.gen_range(0.5..2.0),
        lambda_att: rng.gen_range(0.5..2.0),
        // Moderate scales keep the saturated features away from +-1, where
        // nearly every coordinate pair sits next to an L1 kink.
        s: rng.gen_range(1.0..8.0),
        s1: rng.gen_range(0.5..2.0),
        ..TrainConfig::default()
    };
    let mut state = init_state(&samples, &cfg)?;
    for x in state.bank.0.as_mut_slice() {
        *x += 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    let mut feats = Vec::with_capacity(n);
    let mut vs = Matrix::zeros(n, l);
    for (i, s) in samples.iter().enumerate() {
        let (_, v) = state.embed(s)?;
        feats.push(tanh_normalize(&v, cfg.s1)?);
        vs.row_mut(i).copy_from_slice(&v);
    }
    // Tiny draws sometimes leave affinity propagation without exemplars.
    let clustering = match affinity_propagation(&build_similarity(&feats)?, &ApConfig::default()) {
        Ok(c) => c,
        Err(crate::error::Error::NoExemplars { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut mem = refresh_cluster_memory(&clustering, &vs)?;
    for x in mem.centers_mut().as_mut_slice() {
        *x += 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    state.pseudo = Some(mem);
    let b = rng.gen_range(1..=n);
    let mut batch: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut batch[..], rng);
    batch.truncate(b);
    Ok(Some((samples, cfg, state, batch)))
}

/// The complete minibatch objective used by the trainer.
fn check_trainer(cfg: &GradcheckConfig, name: &'static str, salt: u64, variant: Variant, modes: &[LossMode]) -> Result<CheckResult> {
    let mut t = Tracker::new(name);
    let mut rng = rng_for(cfg.seed, stream::GRADCHECK, salt);
    for inst in 0..cfg.instances {
        let mode = modes[inst % modes.len()];
        let (samples, tcfg, state, batch) = draw(&mut rng, &mut t.skipped, |rng| {
            let Some((samples, mut tcfg, state, batch)) = trainer_instance(rng, variant)? else {
                return Ok(None);
            };
            tcfg.loss_mode = mode;
            let ok = trainer_margin(&state, &samples, &batch, &tcfg)? > TRAINER_KINK_MARGIN;
            Ok(ok.then_some((samples, tcfg, state, batch)))
        })?;
        let (_, g) = batch_gradients(&batch, &samples, &state, &tcfg)?;
        let objective = |st: &ModelState| {
            let v = batch_gradients(&batch, &samples, st, &tcfg).map_or(f64::NAN, |(v, _)| v);
            (v, kink_pattern(st, &samples, &batch, &tcfg).unwrap_or_default())
        };
        if variant == Variant::Sign {
            let (r, c) = (state.params.w_fc.rows(), state.params.w_fc.cols());
            t.compare_guarded("w_fc", inst, state.params.w_fc.as_slice(), g.w_fc.as_slice(), cfg.h, |x| {
                let mut st = state.clone();
                st.params.w_fc = Matrix::from_vec(r, c, x.to_vec()).expect("same shape");
                objective(&st)
            });
            t.compare_guarded("b", inst, &state.params.b, &g.b, cfg.h, |x| {
                let mut st = state.clone();
                st.params.b = x.to_vec();
                objective(&st)
            });
        }
        t.compare_guarded("w_att", inst, state.params.w_att.as_slice(), &g.w_att, cfg.h, |x| {
            let mut st = state.clone();
            st.params.w_att = Prototype(x.to_vec());
            objective(&st)
        });
        t.compare_guarded("bank", inst, state.bank.0.as_slice(), g.bank.as_slice(), cfg.h, |x| {
            let mut st = state.clone();
            st.bank.0.as_mut_slice().copy_from_slice(x);
            objective(&st)
        });
        if let (Some(mem), Some(gp)) = (&state.pseudo, &g.pseudo) {
            t.compare_guarded("pseudo", inst, mem.centers().as_slice(), gp.as_slice(), cfg.h, |x| {
                let mut st = state.clone();
                if let Some(m) = st.pseudo.as_mut() {
                    m.centers_mut().as_mut_slice().copy_from_slice(x);
                }
                objective(&st)
            });
        }
        if let (Some(cb), Some(gc)) = (&state.codebooks, &g.codebooks) {
            t.compare_guarded("centroids", inst, cb.centroids.as_slice(), gc.as_slice(), cfg.h, |x| {
                let mut st = state.clone();
                if let Some(c) = st.codebooks.as_mut() {
                    c.centroids.as_mut_slice().copy_from_slice(x);
                }
                objective(&st)
            });
        }
        t.instances += 1;
    }
    Ok(t.finish())
}

/// Every suite, in a fixed order.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let all_modes = [LossMode::NhdFull, LossMode::NhdOnly, LossMode::L2Baseline];
    Ok(vec![
        check_tanh_normalize(cfg)?,
        check_loss_nhd(cfg)?,
        check_loss_pseudo(cfg)?,
        check_loss_l2(cfg)?,
        check_loss_attention(cfg)?,
        check_attention(cfg)?,
        check_encoder(cfg)?,
        check_deltas(cfg)?,
        check_dec(cfg)?,
        check_trainer(cfg, "trainer_sign", 10, Variant::Sign, &all_modes)?,
        check_trainer(cfg, "trainer_codebook", 11, Variant::Codebook, &[LossMode::NhdFull, LossMode::NhdOnly])?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_on_a_few_instances() {
        let cfg = GradcheckConfig {
            instances: 8,
            ..GradcheckConfig::default()
        };
        for r in run_all(&cfg).unwrap() {
            assert!(r.passed(cfg.tol), "{}: {:e} at {}", r.name, r.max_rel_err, r.worst);
            assert_eq!(r.instances, 8);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut t = Tracker::new("probe");
        t.compare("x", 0, &[1.0, 2.0], &[2.0, 4.5], 1e-5, |x| x[0] * x[0] + x[1] * x[1]);
        let r = t.finish();
        assert!(!r.passed(1e-4));
        assert!(r.worst.contains("x[1]"));
    }
}
